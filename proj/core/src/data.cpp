#include "lucid/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>
#include <random>

#include "lucid/error.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace lucid {

namespace {

constexpr std::uint32_t kIdxUbyte = 0x08;

// gzread passes uncompressed files through unchanged, so one reader covers
// both the raw and the .gz MNIST distributions.
std::vector<std::uint8_t> read_all(const fs::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> out;
  std::uint8_t buf[1 << 16];
  for (;;) {
    const int n = gzread(f, buf, sizeof buf);
    if (n < 0) {
      gzclose(f);
      throw IoError("read error in " + path.string());
    }
    if (n == 0) break;
    out.insert(out.end(), buf, buf + n);
  }
  gzclose(f);
  return out;
}

void write_all(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.extension() == ".gz") {
    gzFile f = gzopen(path.string().c_str(), "wb9");
    if (!f) throw IoError("cannot create " + path.string());
    const int n = gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
    gzclose(f);
    if (n != static_cast<int>(bytes.size())) throw IoError("short write to " + path.string());
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot create " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off, const fs::path& path) {
  if (off + 4 > b.size()) throw IoError("truncated IDX header in " + path.string());
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  b.push_back(static_cast<std::uint8_t>(v >> 24));
  b.push_back(static_cast<std::uint8_t>(v >> 16));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
  b.push_back(static_cast<std::uint8_t>(v));
}

struct IdxArray {
  std::vector<std::uint32_t> dims;
  std::size_t payload_offset = 0;
};

IdxArray parse_header(const std::vector<std::uint8_t>& bytes, const fs::path& path,
                      std::initializer_list<std::uint32_t> ranks) {
  const std::uint32_t magic = read_be32(bytes, 0, path);
  const std::uint32_t type = (magic >> 8) & 0xff;
  const std::uint32_t rank = magic & 0xff;
  if ((magic >> 16) != 0 || type != kIdxUbyte ||
      std::find(ranks.begin(), ranks.end(), rank) == ranks.end()) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08x", magic);
    throw FormatError("unexpected IDX magic " + std::string(buf) + " in " + path.string());
  }
  IdxArray a;
  std::size_t count = 1;
  for (std::uint32_t d = 0; d < rank; ++d) {
    a.dims.push_back(read_be32(bytes, 4 + 4 * d, path));
    count *= a.dims.back();
  }
  a.payload_offset = 4 + 4 * rank;
  if (bytes.size() < a.payload_offset + count) {
    throw IoError("truncated IDX payload in " + path.string() + ": expected " + std::to_string(count) +
                  " bytes, found " + std::to_string(bytes.size() - a.payload_offset));
  }
  if (bytes.size() > a.payload_offset + count) throw FormatError("trailing bytes after IDX payload in " + path.string());
  return a;
}

fs::path find_file(const fs::path& dir, const std::string& stem) {
  for (const fs::path& p : {dir / stem, dir / (stem + ".gz")})
    if (fs::exists(p)) return p;
  throw IoError("missing " + stem + "[.gz] in " + dir.string());
}

std::string split_prefix(Split s) { return s == Split::kTrain ? "train" : "t10k"; }

}  // namespace

std::string split_name(Split s) { return s == Split::kTrain ? "train" : "test"; }

LabeledDataset LabeledDataset::subset(std::span<const int> indices) const {
  LabeledDataset out;
  out.num_classes = num_classes;
  out.split = split;
  out.class_names = class_names;
  const std::size_t isz = image_size();
  std::vector<float> px;
  px.reserve(indices.size() * isz);
  for (int i : indices) {
    if (i < 0 || i >= size()) throw InvalidArgument("subset index " + std::to_string(i) + " out of range");
    auto img = image(i);
    px.insert(px.end(), img.begin(), img.end());
    out.labels.push_back(labels[static_cast<std::size_t>(i)]);
  }
  out.images = Tensor({static_cast<int>(indices.size()), height(), width(), channels()}, std::move(px));
  return out;
}

LabeledDataset LabeledDataset::head(int n) const {
  std::vector<int> idx(static_cast<std::size_t>(std::min(n, size())));
  std::iota(idx.begin(), idx.end(), 0);
  return subset(idx);
}

void LabeledDataset::validate() const {
  if (images.rank() != 4) throw ConsistencyError("dataset images must be [N,H,W,C]");
  if (images.dim(0) != size()) throw ConsistencyError("image count does not match label count");
  for (int y : labels)
    if (y < 0 || y >= num_classes) throw ConsistencyError("label " + std::to_string(y) + " out of range");
  for (float v : images.data())
    if (!(v >= 0.0f && v <= 1.0f)) throw ConsistencyError("pixel value outside [0,1]");
}

LabeledDataset load_idx(const fs::path& images_path, const fs::path& labels_path, Split split) {
  const auto img_bytes = read_all(images_path);
  const auto lbl_bytes = read_all(labels_path);
  const IdxArray img = parse_header(img_bytes, images_path, {3, 4});
  const IdxArray lbl = parse_header(lbl_bytes, labels_path, {1});
  if (img.dims[0] != lbl.dims[0]) {
    throw ConsistencyError("image count " + std::to_string(img.dims[0]) + " != label count " +
                           std::to_string(lbl.dims[0]));
  }
  LabeledDataset ds;
  ds.split = split;
  const int n = static_cast<int>(img.dims[0]);
  const int h = static_cast<int>(img.dims[1]);
  const int w = static_cast<int>(img.dims[2]);
  const int c = img.dims.size() == 4 ? static_cast<int>(img.dims[3]) : 1;
  std::vector<float> px(static_cast<std::size_t>(n) * h * w * c);
  for (std::size_t k = 0; k < px.size(); ++k) px[k] = static_cast<float>(img_bytes[img.payload_offset + k]) / 255.0f;
  ds.images = Tensor({n, h, w, c}, std::move(px));
  int max_label = 0;
  for (int i = 0; i < n; ++i) {
    ds.labels.push_back(lbl_bytes[lbl.payload_offset + static_cast<std::size_t>(i)]);
    max_label = std::max(max_label, ds.labels.back());
  }
  ds.num_classes = std::max(10, max_label + 1);
  for (int k = 0; k < ds.num_classes; ++k) ds.class_names.push_back(std::to_string(k));
  return ds;
}

void save_idx(const LabeledDataset& ds, const fs::path& images_path, const fs::path& labels_path) {
  ds.validate();
  std::vector<std::uint8_t> img;
  const bool color = ds.channels() != 1;
  put_be32(img, (kIdxUbyte << 8) | (color ? 4u : 3u));
  put_be32(img, static_cast<std::uint32_t>(ds.size()));
  put_be32(img, static_cast<std::uint32_t>(ds.height()));
  put_be32(img, static_cast<std::uint32_t>(ds.width()));
  if (color) put_be32(img, static_cast<std::uint32_t>(ds.channels()));
  img.reserve(img.size() + ds.images.size());
  for (float v : ds.images.data()) img.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
  std::vector<std::uint8_t> lbl;
  put_be32(lbl, (kIdxUbyte << 8) | 1u);
  put_be32(lbl, static_cast<std::uint32_t>(ds.size()));
  for (int y : ds.labels) lbl.push_back(static_cast<std::uint8_t>(y));
  write_all(images_path, img);
  write_all(labels_path, lbl);
}

LabeledDataset load_dataset_dir(const fs::path& dir, Split split) {
  if (!fs::is_directory(dir)) throw IoError("dataset directory not found: " + dir.string());
  const std::string prefix = split_prefix(split);
  LabeledDataset ds = load_idx(find_file(dir, prefix + "-images-idx3-ubyte"), find_file(dir, prefix + "-labels-idx1-ubyte"),
                               split);
  const fs::path manifest = dir / "manifest.json";
  if (fs::exists(manifest)) {
    std::ifstream in(manifest);
    json m;
    try {
      m = json::parse(in);
    } catch (const json::exception& e) {
      throw FormatError("bad dataset manifest " + manifest.string() + ": " + e.what());
    }
    if (m.contains("classes")) {
      ds.class_names = m.at("classes").get<std::vector<std::string>>();
      ds.num_classes = static_cast<int>(ds.class_names.size());
    }
  }
  ds.validate();
  return ds;
}

void save_dataset_dir(const fs::path& dir, const LabeledDataset& train, const LabeledDataset& test,
                      const std::string& manifest_json) {
  fs::create_directories(dir);
  save_idx(train, dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
  save_idx(test, dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte");
  if (!manifest_json.empty()) {
    std::ofstream out(dir / "manifest.json");
    out << manifest_json << '\n';
    if (!out) throw IoError("cannot write manifest in " + dir.string());
  }
}

LabeledDataset synthesize_cmnist(const LabeledDataset& mnist, const CmnistSpec& spec) {
  if (mnist.channels() != 1) throw InvalidArgument("CMNIST source must be single-channel");
  for (int d : spec.digits) {
    if (std::find(mnist.labels.begin(), mnist.labels.end(), d) == mnist.labels.end()) {
      throw InvalidArgument("digit " + std::to_string(d) + " absent from source dataset");
    }
  }
  // Distinct streams per split so train and test colorings are independent.
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    static_cast<std::uint32_t>(mnist.split == Split::kTrain ? 0 : 1)};
  std::mt19937_64 rng(seq);

  LabeledDataset out;
  out.split = mnist.split;
  out.num_classes = 9;
  for (int d : spec.digits)
    for (const auto& c : spec.colors) out.class_names.push_back(std::to_string(d) + "-" + c);

  const int h = mnist.height(), w = mnist.width();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<float> px;
  for (int i = 0; i < mnist.size(); ++i) {
    if (spec.cap && out.size() >= *spec.cap) break;
    const auto it = std::find(spec.digits.begin(), spec.digits.end(), mnist.labels[static_cast<std::size_t>(i)]);
    if (it == spec.digits.end()) continue;
    const int digit_index = static_cast<int>(it - spec.digits.begin());
    const int color = static_cast<int>(rng() % 3);
    auto src = mnist.image(i);
    const std::size_t base = px.size();
    px.resize(base + plane * 3, 0.0f);
    for (std::size_t p = 0; p < plane; ++p) px[base + p * 3 + static_cast<std::size_t>(color)] = src[p];
    out.labels.push_back(3 * digit_index + color);
  }
  out.images = Tensor({out.size(), h, w, 3}, std::move(px));
  return out;
}

std::string cmnist_manifest(const CmnistSpec& spec, const std::vector<std::string>& class_names) {
  json m;
  m["dataset"] = "cmnist";
  m["classes"] = class_names;
  m["digits"] = spec.digits;
  m["colors"] = spec.colors;
  m["seed"] = spec.seed;
  m["label_rule"] = "3*digit_index+color_index";
  if (spec.cap) m["cap"] = *spec.cap;
  return m.dump(2);
}

Batch make_batch(const LabeledDataset& ds, std::span<const int> indices) {
  const int h = ds.height(), w = ds.width(), c = ds.channels();
  Batch b;
  b.images = Tensor({static_cast<int>(indices.size()), c, h, w});
  float* dst = b.images.ptr();
  for (int i : indices) {
    auto img = ds.image(i);
    for (int ch = 0; ch < c; ++ch)
      for (int p = 0; p < h * w; ++p) *dst++ = img[static_cast<std::size_t>(p) * c + ch];
    b.labels.push_back(ds.labels[static_cast<std::size_t>(i)]);
    b.indices.push_back(i);
  }
  return b;
}

Batch make_batch(const LabeledDataset& ds, int begin, int end) {
  std::vector<int> idx(static_cast<std::size_t>(std::max(0, end - begin)));
  std::iota(idx.begin(), idx.end(), begin);
  return make_batch(ds, idx);
}

BatchPlan::BatchPlan(int dataset_size, int batch_size, std::uint64_t seed, bool shuffle)
    : size_(dataset_size), batch_size_(batch_size), seed_(seed), shuffle_(shuffle) {
  if (dataset_size <= 0) throw InvalidArgument("cannot batch an empty dataset");
  if (batch_size < 2) throw InvalidArgument("batch size must be >= 2");
}

std::vector<std::vector<int>> BatchPlan::epoch(int epoch_index) const {
  std::vector<int> order(static_cast<std::size_t>(size_));
  std::iota(order.begin(), order.end(), 0);
  if (shuffle_) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                      static_cast<std::uint32_t>(epoch_index)};
    std::mt19937_64 rng(seq);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<int>> batches;
  for (int start = 0; start < size_; start += batch_size_) {
    const int end = std::min(size_, start + batch_size_);
    if (end - start < 2) break;
    batches.emplace_back(order.begin() + start, order.begin() + end);
  }
  return batches;
}

std::vector<int> sample_indices(int size, int n, std::uint64_t seed) {
  std::vector<int> order(static_cast<std::size_t>(size));
  std::iota(order.begin(), order.end(), 0);
  if (n >= size) return order;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(static_cast<std::size_t>(n));
  std::sort(order.begin(), order.end());
  return order;
}

}  // namespace lucid
