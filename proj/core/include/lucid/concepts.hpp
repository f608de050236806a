#pragma once

// Concept detectors g_c retrained from identified neurons, the persistent
// concept pool, and pre-matching of pool concepts against a new model.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lucid/data.hpp"
#include "lucid/model.hpp"
#include "lucid/train.hpp"

namespace lucid {

// One conv (3 input channels, one output) + ReLU, optionally followed by the
// 2x2 max-pool. Mirrors a model layer when built from detector_geometry().
struct DetectorGeometry {
  int kernel = 5;
  int stride = 1;
  bool pool = true;
  bool operator==(const DetectorGeometry&) const = default;
};

// Receptive-field geometry of conv layer `layer`: the detector's output has
// the shape of that layer's post-pool map.
DetectorGeometry detector_geometry(const ArchSpec& arch, int layer);

class ConceptDetector {
 public:
  ConceptDetector() = default;
  // He-normal weight, zero bias.
  static ConceptDetector init(DetectorGeometry g, std::uint64_t seed);
  static ConceptDetector fixed(DetectorGeometry g, Tensor weight, float bias);

  const DetectorGeometry& geometry() const { return geom_; }
  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& params() const { return params_; }
  const Tensor& weight() const { return params_[0].value; }
  float bias() const { return params_[1].value[0]; }

  // Output map size for an HxW input.
  std::pair<int, int> output_shape(int height, int width) const;
  Var forward(Tape& tape, const Var& x) const;
  // [N,1,h,w] responses for a canonical 3-channel NCHW batch.
  Tensor infer(const Tensor& images_nchw3) const;

 private:
  DetectorGeometry geom_;
  std::vector<Parameter> params_;
};

// Broadcasts 1-channel NCHW input to 3 channels; 3-channel input passes through.
Tensor canonical_input(const Tensor& images_nchw);

// Adaptive average pooling of [N,C,H,W] maps to [N,C,th,tw].
Tensor resize_avg(const Tensor& maps, int target_height, int target_width);

// Post-pool map of one model channel for every sample, [N,1,h,w].
Tensor record_channel(const Model& model, const LabeledDataset& ds, int layer, int channel);

struct DetectorTrainConfig {
  float lr = 0.001f;
  int epochs = 10;
  int batch = 128;
  std::uint64_t seed = 0;
};

struct DetectorFit {
  ConceptDetector detector;
  double final_dist = 0.0;  // mean squared error over the last epoch
};

// Fits g_c so that g_c(x) ~ targets (MSE over spatial positions).
DetectorFit train_detector(const LabeledDataset& ds, const Tensor& targets, DetectorGeometry geom,
                           const DetectorTrainConfig& cfg);

struct MatchParams {
  double delta = 0.1;
  double u = 0.9;
  void validate() const;
};

struct MatchResult {
  bool matched = false;
  double coverage = 0.0;
};

// MSE between two maps after dividing each by its own maximum (an all-zero
// map stays zero).
double map_distance(std::span<const float> a, std::span<const float> b);

// Per-sample distances between detector and channel maps ([N,1,*,*] each).
// When the shapes differ both are average-pooled to the smaller one.
std::vector<double> map_distances(const Tensor& detector_maps, const Tensor& channel_maps);

// Coverage = share of samples with distance < delta; matched iff coverage > u.
// A detector or channel that is silent on every sample never matches.
MatchResult match_maps(const Tensor& detector_maps, const Tensor& channel_maps, const MatchParams& p);

MatchResult match_concept(const ConceptDetector& g, const Model& model, int layer, int channel,
                          const LabeledDataset& ds, const MatchParams& p);

struct PoolEntry {
  std::string name;
  ConceptDetector detector;
  MatchParams match;
  nlohmann::json provenance = nlohmann::json::object();
  std::string created;
};

class ConceptPool {
 public:
  // Throws Conflict on a duplicate name.
  void add(PoolEntry e);
  const std::vector<PoolEntry>& entries() const { return entries_; }
  const PoolEntry& get(const std::string& name) const;
  bool contains(const std::string& name) const;
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  // First free name among `base`, `base-2`, `base-3`, ...
  std::string unique_name(const std::string& base) const;

 private:
  std::vector<PoolEntry> entries_;
};

// pool.json manifest + detectors.bin blob file.
void pool_save(const ConceptPool& pool, const std::filesystem::path& dir);
ConceptPool pool_load(const std::filesystem::path& dir);

struct PoolMatch {
  int channel = 0;
  std::string concept_name;
  double coverage = 0.0;
};

// Channels scanned in index order, pool entries in insertion order; the first
// matching entry labels the channel. `params` overrides each entry's own.
std::vector<PoolMatch> premap_concepts(const ConceptPool& pool, const Model& model, int layer,
                                       std::span<const int> candidates, const LabeledDataset& ds,
                                       const std::optional<MatchParams>& params = std::nullopt);

PreMapper make_premapper(const ConceptPool& pool, const LabeledDataset& probe,
                         std::optional<MatchParams> params = std::nullopt);

// Retrains a detector for every named selected channel. Entry names are the
// concept names, de-duplicated with unique_name().
ConceptPool export_concepts(const Model& model, const SelectionState& sel, const LabeledDataset& ds,
                            const DetectorTrainConfig& cfg, const std::string& dataset_name,
                            const MatchParams& match = {});

}  // namespace lucid
