#include "lucid/oracle.hpp"

#include <algorithm>

#include "internal.hpp"

namespace lucid {

namespace {

ConceptDetector color_detector(int channel) {
  Tensor w({1, 3, 1, 1}, -0.5f);
  w[static_cast<std::size_t>(channel)] = 1.0f;
  return ConceptDetector::fixed({1, 1, false}, std::move(w), 0.0f);
}

ConceptDetector line_detector(int degrees) {
  const Tensor k = line_kernel(degrees);
  Tensor w({1, 3, 5, 5});
  for (int c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < 25; ++p) w[c * 25 + p] = k[p] / 3.0f;
  return ConceptDetector::fixed({5, 1, false}, std::move(w), 0.0f);
}

std::vector<float> spatial_means(const Tensor& maps) {
  const std::size_t plane = static_cast<std::size_t>(maps.dim(2)) * maps.dim(3);
  std::vector<float> out(maps.size() / plane);
  for (std::size_t q = 0; q < out.size(); ++q) {
    double s = 0;
    for (std::size_t p = 0; p < plane; ++p) s += maps[q * plane + p];
    out[q] = static_cast<float>(s / static_cast<double>(plane));
  }
  return out;
}

}  // namespace

Tensor line_kernel(int degrees) {
  Tensor k({5, 5}, -0.2f);
  for (int t = -2; t <= 2; ++t) {
    int r = 2, c = 2;
    switch (degrees) {
      case 0: c += t; break;
      case 90: r += t; break;
      case 45: r -= t, c += t; break;
      case 135: r += t, c += t; break;
      default: throw InvalidArgument("line kernels exist for 0, 45, 90 and 135 degrees");
    }
    k[static_cast<std::size_t>(r * 5 + c)] = 0.8f;
  }
  return k;
}

PatternBank PatternBank::standard() {
  PatternBank b;
  const char* colors[] = {"color-red", "color-green", "color-blue"};
  for (int c = 0; c < 3; ++c) {
    b.names_.push_back(colors[c]);
    b.detectors_.emplace(colors[c], color_detector(c));
  }
  for (int deg : {0, 90, 45, 135}) {
    const auto name = "line-" + std::to_string(deg);
    b.names_.push_back(name);
    b.detectors_.emplace(name, line_detector(deg));
  }
  return b;
}

const ConceptDetector& PatternBank::detector(const std::string& name) const {
  auto it = detectors_.find(name);
  if (it == detectors_.end()) throw NotFound("no bank concept '" + name + "'");
  return it->second;
}

ConceptPool PatternBank::as_pool() const {
  ConceptPool pool;
  for (const auto& n : names_) {
    PoolEntry e;
    e.name = n;
    e.detector = detector(n);
    e.provenance = {{"source", "pattern-bank"}};
    pool.add(std::move(e));
  }
  return pool;
}

Tensor bank_response(const PatternBank& bank, const std::string& name, std::span<const float> image_hwc, int height,
                     int width, int channels, int target_h, int target_w) {
  const auto& g = bank.detector(name);
  const Tensor full = g.infer(canonical_input(detail::hwc_to_nchw(image_hwc, height, width, channels)));
  return resize_avg(full, target_h, target_w).reshaped({target_h, target_w});
}

void OracleConfig::validate() const {
  if (probe_size < 1) throw InvalidArgument("probe set must not be empty");
  if (!(tau > 0 && tau <= 1)) throw InvalidArgument("tau must lie in (0, 1]");
}

LabeledDataset draw_probe(const LabeledDataset& train, const OracleConfig& cfg) {
  cfg.validate();
  if (train.size() == 0) throw InvalidArgument("cannot draw a probe set from an empty dataset");
  const auto idx = sample_indices(train.size(), cfg.probe_size, cfg.seed);
  return train.subset(idx);
}

std::map<std::string, std::vector<float>> bank_pooled(const PatternBank& bank, const LabeledDataset& probe, int h,
                                                      int w) {
  if (probe.size() == 0) throw InvalidArgument("empty probe set");
  std::map<std::string, std::vector<float>> out;
  for (const auto& name : bank.names()) {
    const auto& g = bank.detector(name);
    auto& v = out[name];
    for (int b = 0; b < probe.size(); b += 256) {
      const Tensor r = g.infer(canonical_input(make_batch(probe, b, std::min(probe.size(), b + 256)).images));
      const auto m = spatial_means(resize_avg(r, h, w));
      v.insert(v.end(), m.begin(), m.end());
    }
  }
  return out;
}

std::vector<OracleDecision> oracle_decide(const Tensor& pooled, std::span<const int> candidates,
                                          const PatternBank& bank,
                                          const std::map<std::string, std::vector<float>>& responses, double tau) {
  const int p = pooled.dim(0), k = pooled.dim(1);
  std::vector<OracleDecision> out;
  std::vector<int> seen;
  for (int ch : candidates) {
    if (ch < 0 || ch >= k) throw InvalidArgument("candidate channel " + std::to_string(ch) + " out of range");
    if (std::find(seen.begin(), seen.end(), ch) != seen.end()) continue;
    seen.push_back(ch);
    std::vector<float> act(static_cast<std::size_t>(p));
    for (int s = 0; s < p; ++s) act[static_cast<std::size_t>(s)] = pooled[static_cast<std::size_t>(s) * k + ch];
    OracleDecision d;
    d.channel = ch;
    for (const auto& name : bank.names()) {
      const double r = pearson(act, responses.at(name));
      if (r > d.correlation) d.correlation = r, d.concept_name = name;
    }
    d.selected = !d.concept_name.empty() && d.correlation >= tau;
    out.push_back(std::move(d));
  }
  return out;
}

std::vector<OracleDecision> oracle_annotate(const Model& model, int layer, std::span<const int> candidates,
                                            const LabeledDataset& probe, const PatternBank& bank,
                                            const OracleConfig& cfg) {
  OracleAnnotator a(bank, probe, cfg);
  a.annotate(model, Query{layer, 1, std::vector<int>(candidates.begin(), candidates.end())});
  std::vector<OracleDecision> sel;
  for (const auto& d : a.last_decisions())
    if (d.selected) sel.push_back(d);
  return sel;
}

OracleAnnotator::OracleAnnotator(PatternBank bank, LabeledDataset probe, OracleConfig cfg)
    : bank_(std::move(bank)), probe_(std::move(probe)), cfg_(cfg) {
  cfg_.validate();
  if (probe_.size() == 0) throw InvalidArgument("oracle probe set is empty");
}

std::vector<Annotation> OracleAnnotator::annotate(const Model& model, const Query& q) {
  const auto& shape = model.shapes().at(static_cast<std::size_t>(q.layer - 1));
  const auto key = std::make_pair(shape.pool_height, shape.pool_width);
  auto it = cache_.find(key);
  if (it == cache_.end()) it = cache_.emplace(key, bank_pooled(bank_, probe_, key.first, key.second)).first;

  Tensor pooled({probe_.size(), shape.channels});
  std::size_t off = 0;
  for (int b = 0; b < probe_.size(); b += 256) {
    const auto inf = model.infer(make_batch(probe_, b, std::min(probe_.size(), b + 256)).images);
    const auto& pl = inf.layers.at(static_cast<std::size_t>(q.layer - 1)).pooled;
    std::copy(pl.data().begin(), pl.data().end(), pooled.ptr() + off);
    off += pl.size();
  }
  last_ = oracle_decide(pooled, q.candidates, bank_, it->second, cfg_.tau);
  std::vector<Annotation> out;
  for (const auto& d : last_)
    if (d.selected) out.push_back({d.channel, d.concept_name});
  return out;
}

}  // namespace lucid
