#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lucid/tensor.hpp"

namespace lucid {

enum class Split { kTrain, kTest };

std::string split_name(Split s);

struct LabeledDataset {
  Tensor images;  // [N, H, W, C], values in [0, 1]
  std::vector<int> labels;
  int num_classes = 10;
  Split split = Split::kTrain;
  std::vector<std::string> class_names;

  int size() const { return static_cast<int>(labels.size()); }
  int height() const { return images.dim(1); }
  int width() const { return images.dim(2); }
  int channels() const { return images.dim(3); }
  std::size_t image_size() const { return static_cast<std::size_t>(height()) * width() * channels(); }

  std::span<const float> image(int i) const {
    return images.data().subspan(static_cast<std::size_t>(i) * image_size(), image_size());
  }

  LabeledDataset subset(std::span<const int> indices) const;
  LabeledDataset head(int n) const;
  // Throws ConsistencyError when labels/pixels break the dataset invariants.
  void validate() const;
};

// Reads an IDX image/label pair. Either file may be gzip-compressed. Image
// files are rank 3 (N,H,W; magic 0x00000803) or rank 4 (N,H,W,C; 0x00000804).
LabeledDataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                        Split split = Split::kTrain);

// Writes pixels as round(v * 255). A ".gz" suffix selects gzip output.
void save_idx(const LabeledDataset& ds, const std::filesystem::path& images_path,
              const std::filesystem::path& labels_path);

// Dataset directories hold the MNIST file names (train-images-idx3-ubyte,
// t10k-labels-idx1-ubyte, ..., optionally .gz) and an optional manifest.json
// carrying the class-name table.
LabeledDataset load_dataset_dir(const std::filesystem::path& dir, Split split);
void save_dataset_dir(const std::filesystem::path& dir, const LabeledDataset& train, const LabeledDataset& test,
                      const std::string& manifest_json);

struct CmnistSpec {
  std::array<int, 3> digits{1, 4, 7};
  std::array<std::string, 3> colors{"red", "green", "blue"};
  std::uint64_t seed = 0;
  std::optional<int> cap;  // keep at most this many samples per split
};

// Keeps `spec.digits` and paints each into one RGB channel chosen by the
// seeded generator. Label = 3 * digit_index + color_index.
LabeledDataset synthesize_cmnist(const LabeledDataset& mnist, const CmnistSpec& spec);

std::string cmnist_manifest(const CmnistSpec& spec, const std::vector<std::string>& class_names);

// NCHW mini-batch gathered from an NHWC dataset.
struct Batch {
  Tensor images;  // [B, C, H, W]
  std::vector<int> labels;
  std::vector<int> indices;
  int size() const { return static_cast<int>(labels.size()); }
};

Batch make_batch(const LabeledDataset& ds, std::span<const int> indices);
Batch make_batch(const LabeledDataset& ds, int begin, int end);

// Per-epoch seeded permutations cut into batches; a trailing batch smaller
// than 2 samples is dropped because the correlation loss needs >= 2.
class BatchPlan {
 public:
  BatchPlan(int dataset_size, int batch_size, std::uint64_t seed, bool shuffle);

  std::vector<std::vector<int>> epoch(int epoch_index) const;

 private:
  int size_;
  int batch_size_;
  std::uint64_t seed_;
  bool shuffle_;
};

// Seeded sample of `n` distinct indices (all of them when n >= size).
std::vector<int> sample_indices(int size, int n, std::uint64_t seed);

}  // namespace lucid
