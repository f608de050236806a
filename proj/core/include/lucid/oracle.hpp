#pragma once

// Scripted annotator: judges channels against a bank of fixed, hand-built
// pattern detectors (RGB dominance and oriented lines).

#include <map>
#include <string>
#include <vector>

#include "lucid/concepts.hpp"

namespace lucid {

// Every bank detector is a fixed ConceptDetector:
//   color-*  1x1 kernel (c - mean of the other two channels), ReLU
//   line-*   zero-mean 5x5 line kernel on the channel-mean intensity, ReLU
class PatternBank {
 public:
  static PatternBank standard();

  const std::vector<std::string>& names() const { return names_; }
  const ConceptDetector& detector(const std::string& name) const;
  // The bank as concept-pool entries.
  ConceptPool as_pool() const;

 private:
  std::vector<std::string> names_;
  std::map<std::string, ConceptDetector> detectors_;
};

// 5x5 kernel with 0.8 on the line through the centre at `degrees`
// (0, 45, 90 or 135; counter-clockwise, image y axis pointing down) and -0.2 elsewhere.
Tensor line_kernel(int degrees);

// Full-resolution response of one bank concept to an HWC image, average-pooled
// to target_h x target_w. 1-channel images are broadcast to 3 channels.
Tensor bank_response(const PatternBank& bank, const std::string& name, std::span<const float> image_hwc, int height,
                     int width, int channels, int target_h, int target_w);

struct OracleConfig {
  int probe_size = 512;
  double tau = 0.8;
  std::uint64_t seed = 0;
  void validate() const;
};

// Seeded probe subset of the training split.
LabeledDataset draw_probe(const LabeledDataset& train, const OracleConfig& cfg);

struct OracleDecision {
  int channel = 0;
  std::string concept_name;  // best-correlated concept, empty when none is defined
  double correlation = 0.0;
  bool selected = false;
};

// Spatial means of every bank response over the probe set, resized to an
// h x w map first: name -> [P].
std::map<std::string, std::vector<float>> bank_pooled(const PatternBank& bank, const LabeledDataset& probe, int h,
                                                      int w);

// Per candidate: the concept whose pooled responses correlate best with the
// channel's pooled activations ([P,K]); selected iff that correlation >= tau.
std::vector<OracleDecision> oracle_decide(const Tensor& pooled, std::span<const int> candidates,
                                          const PatternBank& bank,
                                          const std::map<std::string, std::vector<float>>& responses, double tau);

// Selected channels with their concept names.
std::vector<OracleDecision> oracle_annotate(const Model& model, int layer, std::span<const int> candidates,
                                            const LabeledDataset& probe, const PatternBank& bank,
                                            const OracleConfig& cfg);

class OracleAnnotator : public Annotator {
 public:
  OracleAnnotator(PatternBank bank, LabeledDataset probe, OracleConfig cfg);
  std::vector<Annotation> annotate(const Model& model, const Query& q) override;
  Provenance provenance() const override { return Provenance::kOracle; }
  // Decisions (selected or not) behind the most recent answer.
  const std::vector<OracleDecision>& last_decisions() const { return last_; }

 private:
  PatternBank bank_;
  LabeledDataset probe_;
  OracleConfig cfg_;
  std::map<std::pair<int, int>, std::map<std::string, std::vector<float>>> cache_;
  std::vector<OracleDecision> last_;
};

}  // namespace lucid
