#pragma once

// Sequence interpretability of a model against a reference system, the
// u-degree over a dataset, and weight x activation prediction traces.

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "lucid/concepts.hpp"

namespace lucid {

enum class DistKind { kL1, kL2, kCrossEntropy };
std::string dist_name(DistKind k);
DistKind dist_from(const std::string& s);  // "l1" | "l2" | "ce"

// L1: sum |a-b|. L2: Euclidean norm of a-b. Cross-entropy: both vectors are
// scaled to sum to one (an all-zero vector becomes uniform) and the result is
// KL(a || b) = H(a, b) - H(a), so `a` is the reference distribution and
// identical inputs are at distance zero.
double vector_distance(std::span<const float> a, std::span<const float> b, DistKind kind);

// True iff every position i has vector_distance(seq_a[i], seq_b[i]) < delta.
bool sample_interpretable(const std::vector<Tensor>& seq_a, const std::vector<Tensor>& seq_b, double delta,
                          DistKind kind);

// Divides by the Euclidean norm; a zero vector stays zero.
std::vector<float> unit_normalize(std::span<const float> v);

// Stand-in for the observing system: some model channels carry a concept and a
// way to reproduce their maps, either a standalone detector or a read-out of
// a model channel (used for self-reference).
class ReferenceSystem {
 public:
  struct Entry {
    std::string concept_name;
    std::optional<ConceptDetector> detector;
    std::shared_ptr<const Model> source;
    int source_layer = 0;
    int source_channel = 0;
  };

  explicit ReferenceSystem(const Model& model);

  // Every channel of `model` read straight from a copy of the model.
  static ReferenceSystem from_model(const Model& model);
  // Pool entries whose provenance names a layer/channel of `model`.
  static ReferenceSystem from_pool(const ConceptPool& pool, const Model& model);

  void assign(int layer, int channel, std::string concept_name, ConceptDetector detector);
  void assign_source(int layer, int channel, std::string concept_name, std::shared_ptr<const Model> source,
                     int source_layer, int source_channel);

  const std::map<int, Entry>& layer(int layer) const;
  int num_layers() const { return static_cast<int>(layers_.size()); }
  bool covers_layer(int layer) const { return !this->layer(layer).empty(); }
  bool covers_all(int layer) const;
  std::size_t size() const;

  // Post-pool maps [N, |assigned|, h, w] of the assigned channels of `layer`
  // (ascending channel order) for an NCHW batch.
  Tensor layer_maps(int layer, const Tensor& images_nchw) const;

 private:
  std::vector<LayerShape> shapes_;
  std::vector<std::map<int, Entry>> layers_;
};

struct DegreeReport {
  double u = 0.0;
  int n = 0;
  int interpretable = 0;
  std::vector<int> layers;      // compared layer positions
  bool output_compared = false;  // final prediction recomputed from the reference
  bool complete = false;         // every channel of every layer covered
  nlohmann::json to_json() const;
};

// Per-sample observed sequences: one unit-normalized pooled vector per
// covered layer, then (when the last layer is fully covered) the class
// probabilities. Indexed [sample][position].
struct ObservedSequences {
  std::vector<std::vector<Tensor>> model;
  std::vector<std::vector<Tensor>> reference;
  std::vector<int> layers;
  bool output_compared = false;
};
ObservedSequences observe(const Model& model, const ReferenceSystem& ref, const LabeledDataset& ds, int batch = 256);

// Share of samples whose model sequence is delta-interpretable by the
// reference (reference sequence on the `a` side).
DegreeReport interpretability_degree(const Model& model, const ReferenceSystem& ref, const LabeledDataset& ds,
                                     double delta, DistKind kind = DistKind::kL2);
// Same, for several deltas over one pass of observations.
std::vector<DegreeReport> interpretability_degrees(const Model& model, const ReferenceSystem& ref,
                                                   const LabeledDataset& ds, std::span<const double> deltas,
                                                   DistKind kind = DistKind::kL2);

struct ChannelTrace {
  int channel = 0;
  std::string concept_name;
  Tensor map;  // post-ReLU pre-pool map [H,W]
  float pooled = 0.0f;
  double contribution = 0.0;
};

struct LayerTrace {
  int layer = 0;
  std::vector<ChannelTrace> channels;  // channel order
  // Channel indices by decreasing contribution.
  std::vector<int> ranking() const;
};

struct PredictionTrace {
  std::vector<float> image;  // HWC
  int height = 0, width = 0, channels = 0;
  int predicted = 0;
  double probability = 0.0;
  double logit = 0.0;
  double bias = 0.0;
  std::optional<int> label;
  std::vector<LayerTrace> layers;

  nlohmann::json to_json(bool with_maps = false) const;
};

// Last layer: contribution of channel j = sum over positions of
// fc.weight[predicted, j, pos] * activation, so the contributions plus the
// bias give the predicted logit. Earlier layer i: pooled activation of j times
// sum_k |sum of conv_{i+1}.weight[k, j]| * |contribution of k|.
PredictionTrace explain(const Model& model, std::span<const float> image_hwc, std::optional<int> label = {});

// trace.json plus one overlay PNG per channel (layer<i>_channel<j>.png), each
// mask scaled to its own maximum, and input.png.
void save_trace(const PredictionTrace& trace, const std::filesystem::path& dir);
// Overlay PNG of one traced channel.
std::vector<std::uint8_t> trace_overlay(const PredictionTrace& trace, int layer, int channel, int zoom = 4);

}  // namespace lucid
