#include "lucid/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "lucid/error.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace lucid {

namespace {

constexpr int kCheckpointVersion = 1;
constexpr const char* kCheckpointFormat = "lucid-checkpoint";

std::string layer_prefix(int layer) { return "conv" + std::to_string(layer); }

}  // namespace

// ---- architecture -------------------------------------------------------------

ArchSpec ArchSpec::preset(const std::string& name) {
  ArchSpec a;
  a.name = name;
  if (name == "cmnist") {
    a.input_channels = 3;
    a.layers = {{5, 5, 2}};
    a.classes = 9;
  } else if (name == "mnist") {
    a.input_channels = 1;
    a.layers = {{5, 10, 1}, {5, 20, 1}};
    a.classes = 10;
  } else {
    throw InvalidArgument("unknown architecture preset '" + name + "' (expected cmnist or mnist)");
  }
  return a;
}

json ArchSpec::to_json() const {
  json layers_json = json::array();
  for (const auto& l : layers) layers_json.push_back({{"kernel", l.kernel}, {"channels", l.channels}, {"stride", l.stride}});
  return {{"name", name},
          {"input", {input_height, input_width, input_channels}},
          {"layers", layers_json},
          {"classes", classes}};
}

ArchSpec ArchSpec::from_json(const json& j) {
  try {
    ArchSpec a;
    a.name = j.at("name").get<std::string>();
    const auto input = j.at("input").get<std::vector<int>>();
    if (input.size() != 3) throw FormatError("arch input must be [H,W,C]");
    a.input_height = input[0];
    a.input_width = input[1];
    a.input_channels = input[2];
    for (const auto& l : j.at("layers")) {
      a.layers.push_back({l.at("kernel").get<int>(), l.at("channels").get<int>(), l.at("stride").get<int>()});
    }
    a.classes = j.at("classes").get<int>();
    return a;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed architecture spec: ") + e.what());
  }
}

std::vector<LayerShape> shape_trace(const ArchSpec& arch) {
  std::vector<LayerShape> out;
  std::ostringstream trace;
  int h = arch.input_height, w = arch.input_width, c = arch.input_channels;
  trace << "input " << h << "x" << w << "x" << c;
  if (h <= 0 || w <= 0 || c <= 0) throw ShapeError("invalid input shape: " + trace.str());
  if (arch.layers.empty()) throw ShapeError("architecture needs at least one conv layer");
  if (arch.classes < 2) throw ShapeError("architecture needs at least two classes");
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const auto& l = arch.layers[i];
    if (l.kernel <= 0 || l.channels <= 0 || l.stride <= 0) {
      throw ShapeError("layer " + std::to_string(i + 1) + " has non-positive kernel/channels/stride; trace: " +
                       trace.str());
    }
    LayerShape s;
    s.in_channels = c;
    if (h < l.kernel || w < l.kernel) {
      throw ShapeError("layer " + std::to_string(i + 1) + " kernel " + std::to_string(l.kernel) +
                       " exceeds input; trace: " + trace.str());
    }
    s.conv_height = (h - l.kernel) / l.stride + 1;
    s.conv_width = (w - l.kernel) / l.stride + 1;
    s.channels = l.channels;
    trace << " -> conv " << s.conv_height << "x" << s.conv_width << "x" << l.channels;
    if (s.conv_height < 2 || s.conv_width < 2) {
      throw ShapeError("layer " + std::to_string(i + 1) + " map too small to pool; trace: " + trace.str());
    }
    s.pool_height = s.conv_height / 2;
    s.pool_width = s.conv_width / 2;
    trace << " -> pool " << s.pool_height << "x" << s.pool_width << "x" << l.channels;
    out.push_back(s);
    h = s.pool_height;
    w = s.pool_width;
    c = l.channels;
  }
  return out;
}

ReceptiveField receptive_field(const ArchSpec& arch, int layer) {
  if (layer < 1 || layer > static_cast<int>(arch.layers.size())) {
    throw InvalidArgument("layer " + std::to_string(layer) + " out of range");
  }
  int rf = 1, jump = 1;
  for (int l = 1; l <= layer; ++l) {
    const auto& spec = arch.layers[static_cast<std::size_t>(l - 1)];
    rf += (spec.kernel - 1) * jump;
    jump *= spec.stride;
    if (l < layer) {
      rf += jump;
      jump *= 2;
    }
  }
  return {rf, jump};
}

// ---- forward -----------------------------------------------------------------

template <typename T>
ForwardTrace<T> forward_network(const ArchSpec& arch, std::span<const BasicVar<T>> params, const BasicVar<T>& x) {
  const std::size_t expected = 2 * arch.layers.size() + 2;
  if (params.size() != expected) {
    throw ShapeError("forward: expected " + std::to_string(expected) + " parameter tensors, got " +
                     std::to_string(params.size()));
  }
  const auto& xs = x.shape();
  if (xs.size() != 4 || xs[1] != arch.input_channels || xs[2] != arch.input_height || xs[3] != arch.input_width) {
    throw ShapeError("forward: input " + shape_str(xs) + " does not match declared [N," +
                     std::to_string(arch.input_channels) + "," + std::to_string(arch.input_height) + "," +
                     std::to_string(arch.input_width) + "]");
  }
  ForwardTrace<T> out;
  BasicVar<T> h = x;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    LayerVars<T> lv;
    lv.pre_pool = relu(conv2d(h, params[2 * i], params[2 * i + 1], arch.layers[i].stride));
    lv.post_pool = maxpool2x2(lv.pre_pool);
    h = lv.post_pool;
    out.layers.push_back(lv);
  }
  out.features = flatten(h);
  out.logits = linear(out.features, params[expected - 2], params[expected - 1]);
  return out;
}

template ForwardTrace<float> forward_network(const ArchSpec&, std::span<const BasicVar<float>>, const BasicVar<float>&);
template ForwardTrace<double> forward_network(const ArchSpec&, std::span<const BasicVar<double>>,
                                              const BasicVar<double>&);

// ---- model -------------------------------------------------------------------

Model Model::build(const ArchSpec& arch, std::uint64_t seed) {
  Model m;
  m.arch_ = arch;
  m.seed_ = seed;
  m.shapes_ = shape_trace(arch);
  std::mt19937_64 rng(seed);
  auto he = [&rng](Shape shape, int fan_in) {
    Tensor t(std::move(shape));
    std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(fan_in)));
    for (auto& v : t.data()) v = dist(rng);
    return t;
  };
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const auto& l = arch.layers[i];
    const int in_c = m.shapes_[i].in_channels;
    const std::string p = layer_prefix(static_cast<int>(i) + 1);
    m.params_.emplace_back(p + ".weight", he({l.channels, in_c, l.kernel, l.kernel}, in_c * l.kernel * l.kernel));
    m.params_.emplace_back(p + ".bias", Tensor({l.channels}));
    m.concepts_.emplace_back(static_cast<std::size_t>(l.channels));
  }
  const auto& last = m.shapes_.back();
  const int features = last.channels * last.pool_height * last.pool_width;
  m.params_.emplace_back("fc.weight", he({arch.classes, features}, features));
  m.params_.emplace_back("fc.bias", Tensor({arch.classes}));
  return m;
}

void Model::check_layer(int layer) const {
  if (layer < 1 || layer > num_layers()) {
    throw InvalidArgument("layer " + std::to_string(layer) + " out of range 1.." + std::to_string(num_layers()));
  }
}

void Model::check_channel(int layer, int channel) const {
  check_layer(layer);
  if (channel < 0 || channel >= channels(layer)) {
    throw InvalidArgument("channel " + std::to_string(channel) + " out of range for layer " + std::to_string(layer));
  }
}

int Model::channels(int layer) const {
  check_layer(layer);
  return arch_.layers[static_cast<std::size_t>(layer - 1)].channels;
}

Parameter& Model::conv_weight(int layer) {
  check_layer(layer);
  return params_[static_cast<std::size_t>(2 * (layer - 1))];
}
Parameter& Model::conv_bias(int layer) {
  check_layer(layer);
  return params_[static_cast<std::size_t>(2 * (layer - 1) + 1)];
}
const Parameter& Model::conv_weight(int layer) const {
  check_layer(layer);
  return params_[static_cast<std::size_t>(2 * (layer - 1))];
}
const Parameter& Model::conv_bias(int layer) const {
  check_layer(layer);
  return params_[static_cast<std::size_t>(2 * (layer - 1) + 1)];
}

void Model::freeze_channels(int layer, std::span<const int> channels, bool frozen) {
  for (int c : channels) check_channel(layer, c);
  for (int c : channels) {
    conv_weight(layer).set_row_frozen(c, frozen);
    conv_bias(layer).set_row_frozen(c, frozen);
  }
}

void Model::freeze_layer(int layer, bool frozen) {
  conv_weight(layer).set_all_frozen(frozen);
  conv_bias(layer).set_all_frozen(frozen);
}

void Model::freeze_fc(bool frozen) {
  fc_weight().set_all_frozen(frozen);
  fc_bias().set_all_frozen(frozen);
}

void Model::unfreeze_all() {
  for (auto& p : params_) p.set_all_frozen(false);
}

bool Model::is_frozen(int layer, int channel) const {
  check_channel(layer, channel);
  return conv_weight(layer).row_frozen(channel);
}

const std::string& Model::concept_name(int layer, int channel) const {
  check_channel(layer, channel);
  return concepts_[static_cast<std::size_t>(layer - 1)][static_cast<std::size_t>(channel)];
}

void Model::set_concept_name(int layer, int channel, std::string name) {
  check_channel(layer, channel);
  concepts_[static_cast<std::size_t>(layer - 1)][static_cast<std::size_t>(channel)] = std::move(name);
}

ForwardTrace<float> Model::forward(Tape& tape, const Var& x) const {
  std::vector<Var> vars;
  vars.reserve(params_.size());
  for (const auto& p : params_) vars.push_back(tape.param(p));
  return forward_network<float>(arch_, vars, x);
}

Inference Model::infer(const Tensor& images_nchw) const {
  Tape tape;
  auto trace = forward(tape, tape.input("x", images_nchw));
  Inference out;
  for (const auto& lv : trace.layers) {
    LayerOutputs lo;
    lo.pre_pool = lv.pre_pool.value();
    lo.post_pool = lv.post_pool.value();
    const auto& pp = lo.post_pool;
    const int n = pp.dim(0), k = pp.dim(1);
    const std::size_t plane = static_cast<std::size_t>(pp.dim(2)) * pp.dim(3);
    lo.pooled = Tensor({n, k});
    for (std::size_t q = 0; q < lo.pooled.size(); ++q) {
      float s = 0.0f;
      for (std::size_t p = 0; p < plane; ++p) s += pp[q * plane + p];
      lo.pooled[q] = s / static_cast<float>(plane);
    }
    out.layers.push_back(std::move(lo));
  }
  out.logits = trace.logits.value();
  out.probs = softmax_rows(out.logits);
  return out;
}

Model::ChannelActivation Model::channel_activation(std::span<const float> image_hwc, int layer, int channel) const {
  check_channel(layer, channel);
  const int h = arch_.input_height, w = arch_.input_width, c = arch_.input_channels;
  if (image_hwc.size() != static_cast<std::size_t>(h) * w * c) {
    throw ShapeError("channel_activation: image has " + std::to_string(image_hwc.size()) + " values, expected " +
                     std::to_string(h * w * c));
  }
  Tensor x({1, c, h, w});
  for (int ch = 0; ch < c; ++ch)
    for (int p = 0; p < h * w; ++p) x[static_cast<std::size_t>(ch) * h * w + p] = image_hwc[static_cast<std::size_t>(p) * c + ch];
  const auto inf = infer(x);
  const auto& lo = inf.layers[static_cast<std::size_t>(layer - 1)];
  const auto& s = shapes_[static_cast<std::size_t>(layer - 1)];
  const std::size_t plane = static_cast<std::size_t>(s.conv_height) * s.conv_width;
  ChannelActivation out;
  out.map = Tensor({s.conv_height, s.conv_width},
                   std::vector<float>(lo.pre_pool.ptr() + channel * plane, lo.pre_pool.ptr() + (channel + 1) * plane));
  out.pooled = lo.pooled[static_cast<std::size_t>(channel)];
  return out;
}

std::uint64_t Model::param_digest() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : params_) {
    h = fnv1a(p.name.data(), p.name.size(), h);
    h = digest(p.value, h);
  }
  return h;
}

// ---- blobs ---------------------------------------------------------------------

json write_tensor_blobs(const fs::path& path, std::span<const NamedTensor> tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot create " + path.string());
  json entries = json::array();
  std::uint64_t offset = 0;
  for (const auto& nt : tensors) {
    const Tensor& t = *nt.tensor;
    std::vector<std::uint32_t> words(t.size());
    for (std::size_t k = 0; k < t.size(); ++k) {
      std::uint32_t u = std::bit_cast<std::uint32_t>(t[k]);
      if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
      words[k] = u;
    }
    const std::uint64_t nbytes = words.size() * 4;
    out.write(reinterpret_cast<const char*>(words.data()), static_cast<std::streamsize>(nbytes));
    entries.push_back({{"name", nt.name}, {"dtype", "f32le"}, {"shape", t.shape()}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  if (!out) throw IoError("short write to " + path.string());
  return entries;
}

std::vector<std::pair<std::string, Tensor>> read_tensor_blobs(const fs::path& path, const json& entries) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("missing tensor blob file " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<std::pair<std::string, Tensor>> out;
  std::uint64_t expected_end = 0;
  try {
    for (const auto& e : entries) {
      if (e.at("dtype").get<std::string>() != "f32le") throw CorruptCheckpoint("unsupported dtype in " + path.string());
      const auto name = e.at("name").get<std::string>();
      const auto shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::uint64_t>();
      const auto nbytes = e.at("nbytes").get<std::uint64_t>();
      const std::size_t numel = shape_numel(shape);
      if (nbytes != numel * 4 || offset + nbytes > bytes.size()) {
        throw CorruptCheckpoint("blob '" + name + "' has inconsistent length/offset in " + path.string());
      }
      std::vector<float> values(numel);
      for (std::size_t k = 0; k < numel; ++k) {
        std::uint32_t u;
        std::memcpy(&u, bytes.data() + offset + 4 * k, 4);
        if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
        values[k] = std::bit_cast<float>(u);
      }
      out.emplace_back(name, Tensor(shape, std::move(values)));
      expected_end = std::max(expected_end, offset + nbytes);
    }
  } catch (const json::exception& ex) {
    throw CorruptCheckpoint(std::string("malformed blob table: ") + ex.what());
  }
  if (expected_end != bytes.size()) {
    throw CorruptCheckpoint("blob file " + path.string() + " has " + std::to_string(bytes.size()) +
                            " bytes but the manifest accounts for " + std::to_string(expected_end));
  }
  return out;
}

// ---- checkpoints -----------------------------------------------------------------

void save_checkpoint(const Model& model, const fs::path& dir) {
  fs::create_directories(dir);
  std::vector<NamedTensor> tensors;
  for (const auto& p : model.params()) tensors.push_back({p.name, &p.value});
  json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["version"] = kCheckpointVersion;
  manifest["arch"] = model.arch().to_json();
  manifest["seed"] = model.seed();
  json frozen = json::object();
  for (const auto& p : model.params()) frozen[p.name] = p.frozen;
  manifest["frozen"] = frozen;
  json concepts = json::array();
  for (int l = 1; l <= model.num_layers(); ++l)
    for (int c = 0; c < model.channels(l); ++c)
      if (!model.concept_name(l, c).empty())
        concepts.push_back({{"layer", l}, {"channel", c}, {"concept", model.concept_name(l, c)}});
  manifest["concepts"] = concepts;
  manifest["provenance"] = model.provenance;
  manifest["tensors"] = write_tensor_blobs(dir / "tensors.bin", tensors);
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << '\n';
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
}

Model load_checkpoint(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  std::ifstream in(mpath);
  if (!in) throw IoError("missing checkpoint manifest " + mpath.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw CorruptCheckpoint("unparseable manifest " + mpath.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != kCheckpointFormat) throw FormatError("not a lucid checkpoint: " + dir.string());
  if (manifest.value("version", -1) != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + manifest.value("version", json(-1)).dump());
  }
  Model m = Model::build(ArchSpec::from_json(manifest.at("arch")), manifest.at("seed").get<std::uint64_t>());
  const auto blobs = read_tensor_blobs(dir / "tensors.bin", manifest.at("tensors"));
  if (blobs.size() != m.params().size()) {
    throw CorruptCheckpoint("checkpoint holds " + std::to_string(blobs.size()) + " tensors, architecture needs " +
                            std::to_string(m.params().size()));
  }
  for (auto& p : m.params()) {
    auto it = std::find_if(blobs.begin(), blobs.end(), [&](const auto& b) { return b.first == p.name; });
    if (it == blobs.end()) throw CorruptCheckpoint("checkpoint lacks tensor '" + p.name + "'");
    if (it->second.shape() != p.value.shape()) {
      throw CorruptCheckpoint("tensor '" + p.name + "' has shape " + shape_str(it->second.shape()) +
                              " but the architecture needs " + shape_str(p.value.shape()));
    }
    p.value = it->second;
    const auto flags = manifest.at("frozen").at(p.name).get<std::vector<std::uint8_t>>();
    if (flags.size() != p.frozen.size()) throw CorruptCheckpoint("freeze flags for '" + p.name + "' have wrong length");
    p.frozen = flags;
  }
  for (const auto& c : manifest.value("concepts", json::array())) {
    m.set_concept_name(c.at("layer").get<int>(), c.at("channel").get<int>(), c.at("concept").get<std::string>());
  }
  m.provenance = manifest.value("provenance", json::object());
  return m;
}

}  // namespace lucid
