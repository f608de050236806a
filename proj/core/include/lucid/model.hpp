#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "lucid/autodiff.hpp"

namespace lucid {

struct ConvSpec {
  int kernel = 5;
  int channels = 5;
  int stride = 1;
  bool operator==(const ConvSpec&) const = default;
};

// conv + ReLU + 2x2 max-pool blocks ("layers") followed by FC + softmax.
struct ArchSpec {
  std::string name = "custom";
  int input_height = 28;
  int input_width = 28;
  int input_channels = 1;
  std::vector<ConvSpec> layers;
  int classes = 10;

  static ArchSpec preset(const std::string& name);  // "cmnist" | "mnist"
  nlohmann::json to_json() const;
  static ArchSpec from_json(const nlohmann::json& j);
  bool operator==(const ArchSpec&) const = default;
};

struct LayerShape {
  int in_channels = 0;
  int conv_height = 0;
  int conv_width = 0;
  int pool_height = 0;
  int pool_width = 0;
  int channels = 0;
};

// Per-layer map sizes; throws ShapeError carrying the trace computed so far.
std::vector<LayerShape> shape_trace(const ArchSpec& arch);

// Receptive field of a layer's pre-pool map measured on the input image:
// kernel and stride of the single conv that yields the same map size.
struct ReceptiveField {
  int kernel = 0;
  int stride = 0;
};
ReceptiveField receptive_field(const ArchSpec& arch, int layer);

template <typename T>
struct LayerVars {
  BasicVar<T> pre_pool;   // post-ReLU, pre-pool feature maps [N,K,H,W]
  BasicVar<T> post_pool;  // [N,K,H/2,W/2]; this is the layer output x_i
};

template <typename T>
struct ForwardTrace {
  std::vector<LayerVars<T>> layers;
  BasicVar<T> features;  // flattened last-layer output [N,D]
  BasicVar<T> logits;    // [N,classes]
};

// Graph for `arch` given parameter variables ordered conv1.weight,
// conv1.bias, ..., fc.weight, fc.bias and an NCHW input.
template <typename T>
ForwardTrace<T> forward_network(const ArchSpec& arch, std::span<const BasicVar<T>> params, const BasicVar<T>& x);

struct LayerOutputs {
  Tensor pre_pool;   // [N,K,H,W]
  Tensor post_pool;  // [N,K,h,w]
  Tensor pooled;     // [N,K] spatial mean of post_pool
};

struct Inference {
  std::vector<LayerOutputs> layers;
  Tensor logits;
  Tensor probs;
};

class Model {
 public:
  Model() = default;

  // He-normal weights (std = sqrt(2 / fan_in)), zero biases, all unfrozen.
  static Model build(const ArchSpec& arch, std::uint64_t seed);

  const ArchSpec& arch() const { return arch_; }
  std::uint64_t seed() const { return seed_; }
  int num_layers() const { return static_cast<int>(arch_.layers.size()); }  // conv layers, 1-based ids
  int channels(int layer) const;
  const std::vector<LayerShape>& shapes() const { return shapes_; }

  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& params() const { return params_; }
  Parameter& conv_weight(int layer);
  Parameter& conv_bias(int layer);
  const Parameter& conv_weight(int layer) const;
  const Parameter& conv_bias(int layer) const;
  Parameter& fc_weight() { return params_[params_.size() - 2]; }
  Parameter& fc_bias() { return params_.back(); }
  const Parameter& fc_weight() const { return params_[params_.size() - 2]; }
  const Parameter& fc_bias() const { return params_.back(); }

  void freeze_channels(int layer, std::span<const int> channels, bool frozen = true);
  void freeze_layer(int layer, bool frozen = true);
  void freeze_fc(bool frozen = true);
  void unfreeze_all();
  bool is_frozen(int layer, int channel) const;

  // Concept label per (layer, channel); empty when unnamed.
  const std::string& concept_name(int layer, int channel) const;
  void set_concept_name(int layer, int channel, std::string name);

  ForwardTrace<float> forward(Tape& tape, const Var& x) const;
  Inference infer(const Tensor& images_nchw) const;

  // Feature map (post-ReLU, pre-pool) of one channel for one NHWC image and
  // the spatial mean of its post-pool map.
  struct ChannelActivation {
    Tensor map;
    float pooled = 0.0f;
  };
  ChannelActivation channel_activation(std::span<const float> image_hwc, int layer, int channel) const;

  std::uint64_t param_digest() const;

  nlohmann::json provenance = nlohmann::json::object();

 private:
  void check_layer(int layer) const;
  void check_channel(int layer, int channel) const;

  ArchSpec arch_;
  std::uint64_t seed_ = 0;
  std::vector<LayerShape> shapes_;
  std::vector<Parameter> params_;
  std::vector<std::vector<std::string>> concepts_;
};

// Checkpoint directory: manifest.json + tensors.bin (little-endian float32
// blobs; the manifest maps name -> offset, shape, dtype).
void save_checkpoint(const Model& model, const std::filesystem::path& dir);
Model load_checkpoint(const std::filesystem::path& dir);

// Shared blob container used by checkpoints and the concept pool.
struct NamedTensor {
  std::string name;
  const Tensor* tensor;
};
nlohmann::json write_tensor_blobs(const std::filesystem::path& path, std::span<const NamedTensor> tensors);
std::vector<std::pair<std::string, Tensor>> read_tensor_blobs(const std::filesystem::path& path,
                                                             const nlohmann::json& entries);

}  // namespace lucid
