#include "lucid/concepts.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <memory>
#include <random>

#include "internal.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace lucid {

namespace {

constexpr const char* kPoolFormat = "lucid-concept-pool";
constexpr int kPoolVersion = 1;
constexpr int kChunk = 256;

Tensor channel_slice(const Tensor& maps, int channel) {
  const int n = maps.dim(0), k = maps.dim(1), h = maps.dim(2), w = maps.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor out({n, 1, h, w});
  for (int s = 0; s < n; ++s)
    std::copy_n(maps.ptr() + (static_cast<std::size_t>(s) * k + channel) * plane, plane,
                out.ptr() + static_cast<std::size_t>(s) * plane);
  return out;
}

// Post-pool maps of every channel of `layer` for the whole dataset.
Tensor layer_maps(const Model& model, const LabeledDataset& ds, int layer) {
  if (ds.size() == 0) throw InvalidArgument("empty dataset");
  const auto& shape = model.shapes().at(static_cast<std::size_t>(layer - 1));
  Tensor out({ds.size(), shape.channels, shape.pool_height, shape.pool_width});
  std::size_t off = 0;
  for (int b = 0; b < ds.size(); b += kChunk) {
    const auto inf = model.infer(make_batch(ds, b, std::min(ds.size(), b + kChunk)).images);
    const auto& pp = inf.layers.at(static_cast<std::size_t>(layer - 1)).post_pool;
    std::copy(pp.data().begin(), pp.data().end(), out.ptr() + off);
    off += pp.size();
  }
  return out;
}

Tensor detector_maps(const ConceptDetector& g, const LabeledDataset& ds) {
  if (ds.size() == 0) throw InvalidArgument("empty dataset");
  const auto [h, w] = g.output_shape(ds.height(), ds.width());
  Tensor out({ds.size(), 1, h, w});
  std::size_t off = 0;
  for (int b = 0; b < ds.size(); b += kChunk) {
    const Tensor r = g.infer(canonical_input(make_batch(ds, b, std::min(ds.size(), b + kChunk)).images));
    std::copy(r.data().begin(), r.data().end(), out.ptr() + off);
    off += r.size();
  }
  return out;
}

bool all_silent(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](float v) { return v <= 0.0f; });
}

}  // namespace

DetectorGeometry detector_geometry(const ArchSpec& arch, int layer) {
  const auto rf = receptive_field(arch, layer);
  return {rf.kernel, rf.stride, true};
}

// ---- detector ----------------------------------------------------------------------------

ConceptDetector ConceptDetector::init(DetectorGeometry g, std::uint64_t seed) {
  if (g.kernel < 1 || g.stride < 1) throw InvalidArgument("detector kernel and stride must be positive");
  Tensor w({1, 3, g.kernel, g.kernel});
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(3 * g.kernel * g.kernel)));
  for (auto& v : w.data()) v = dist(rng);
  return fixed(g, std::move(w), 0.0f);
}

ConceptDetector ConceptDetector::fixed(DetectorGeometry g, Tensor weight, float bias) {
  if (weight.shape() != Shape{1, 3, g.kernel, g.kernel}) {
    throw ShapeError("detector weight " + shape_str(weight.shape()) + " does not fit kernel " +
                     std::to_string(g.kernel));
  }
  ConceptDetector d;
  d.geom_ = g;
  d.params_.emplace_back("detector.weight", std::move(weight));
  d.params_.emplace_back("detector.bias", Tensor({1}, {bias}));
  return d;
}

std::pair<int, int> ConceptDetector::output_shape(int height, int width) const {
  if (height < geom_.kernel || width < geom_.kernel) {
    throw ShapeError("input " + std::to_string(height) + "x" + std::to_string(width) + " smaller than detector kernel " +
                     std::to_string(geom_.kernel));
  }
  int h = (height - geom_.kernel) / geom_.stride + 1, w = (width - geom_.kernel) / geom_.stride + 1;
  if (geom_.pool) h /= 2, w /= 2;
  return {h, w};
}

Var ConceptDetector::forward(Tape& tape, const Var& x) const {
  auto y = relu(conv2d(x, tape.param(params_[0]), tape.param(params_[1]), geom_.stride));
  return geom_.pool ? maxpool2x2(y) : y;
}

Tensor ConceptDetector::infer(const Tensor& images_nchw3) const {
  Tape tape;
  return forward(tape, tape.input("x", images_nchw3)).value();
}

Tensor canonical_input(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("expected NCHW batch, got " + shape_str(x.shape()));
  const int c = x.dim(1);
  if (c == 3) return x;
  if (c != 1) throw ShapeError("detectors take 1- or 3-channel images, got " + std::to_string(c));
  const int n = x.dim(0);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor out({n, 3, x.dim(2), x.dim(3)});
  for (int s = 0; s < n; ++s)
    for (int k = 0; k < 3; ++k)
      std::copy_n(x.ptr() + s * plane, plane, out.ptr() + (static_cast<std::size_t>(s) * 3 + k) * plane);
  return out;
}

Tensor resize_avg(const Tensor& maps, int th, int tw) {
  if (maps.rank() != 4) throw ShapeError("resize_avg expects [N,C,H,W], got " + shape_str(maps.shape()));
  const int n = maps.dim(0), c = maps.dim(1), h = maps.dim(2), w = maps.dim(3);
  if (th == h && tw == w) return maps;
  if (th < 1 || tw < 1) throw ShapeError("resize target must be positive");
  Tensor out({n, c, th, tw});
  for (int q = 0; q < n * c; ++q) {
    const float* src = maps.ptr() + static_cast<std::size_t>(q) * h * w;
    float* dst = out.ptr() + static_cast<std::size_t>(q) * th * tw;
    for (int i = 0; i < th; ++i) {
      const int r0 = i * h / th, r1 = ((i + 1) * h + th - 1) / th;
      for (int j = 0; j < tw; ++j) {
        const int c0 = j * w / tw, c1 = ((j + 1) * w + tw - 1) / tw;
        double s = 0;
        for (int r = r0; r < r1; ++r)
          for (int cc = c0; cc < c1; ++cc) s += src[r * w + cc];
        dst[i * tw + j] = static_cast<float>(s / ((r1 - r0) * (c1 - c0)));
      }
    }
  }
  return out;
}

Tensor record_channel(const Model& model, const LabeledDataset& ds, int layer, int channel) {
  if (channel < 0 || channel >= model.channels(layer)) {
    throw InvalidArgument("channel " + std::to_string(channel) + " out of range for layer " + std::to_string(layer));
  }
  return channel_slice(layer_maps(model, ds, layer), channel);
}

DetectorFit train_detector(const LabeledDataset& ds, const Tensor& targets, DetectorGeometry geom,
                           const DetectorTrainConfig& cfg) {
  if (cfg.epochs < 0 || !(cfg.lr > 0)) throw InvalidArgument("detector training needs lr > 0 and epochs >= 0");
  DetectorFit fit{ConceptDetector::init(geom, cfg.seed), 0.0};
  const auto [h, w] = fit.detector.output_shape(ds.height(), ds.width());
  if (targets.shape() != Shape{ds.size(), 1, h, w}) {
    throw ShapeError("detector targets " + shape_str(targets.shape()) + " do not match detector output " +
                     shape_str({ds.size(), 1, h, w}));
  }
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Adam adam;
  const BatchPlan plan(ds.size(), std::min(cfg.batch, ds.size()), detail::mix_seed(cfg.seed, 0xDE, 0), true);
  for (int e = 0; e < cfg.epochs; ++e) {
    for (const auto& idx : plan.epoch(e)) {
      const Batch b = make_batch(ds, idx);
      Tensor tgt({b.size(), 1, h, w});
      for (int r = 0; r < b.size(); ++r)
        std::copy_n(targets.ptr() + static_cast<std::size_t>(idx[static_cast<std::size_t>(r)]) * plane, plane,
                    tgt.ptr() + static_cast<std::size_t>(r) * plane);
      Tape tape;
      const auto out = fit.detector.forward(tape, tape.input("x", canonical_input(b.images)));
      const auto loss = mse(out, tape.constant(std::move(tgt)));
      adam.step(fit.detector.params(), tape.backward(loss), cfg.lr);
    }
  }
  const Tensor pred = detector_maps(fit.detector, ds);
  double acc = 0;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    const double d = static_cast<double>(pred[k]) - targets[k];
    acc += d * d;
  }
  fit.final_dist = acc / static_cast<double>(pred.size());
  return fit;
}

// ---- matching ------------------------------------------------------------------------------

void MatchParams::validate() const {
  if (!(delta > 0)) throw InvalidArgument("delta must be > 0");
  if (!(u > 0 && u <= 1)) throw InvalidArgument("u must lie in (0, 1]");
}

double map_distance(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size() || a.empty()) throw ShapeError("map_distance: maps differ in size");
  const float ma = *std::max_element(a.begin(), a.end()), mb = *std::max_element(b.begin(), b.end());
  const double sa = ma > 0 ? 1.0 / ma : 0.0, sb = mb > 0 ? 1.0 / mb : 0.0;
  double acc = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = a[k] * sa - b[k] * sb;
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

std::vector<double> map_distances(const Tensor& det, const Tensor& ch) {
  if (det.rank() != 4 || ch.rank() != 4 || det.dim(0) != ch.dim(0) || det.dim(1) != 1 || ch.dim(1) != 1) {
    throw ShapeError("map_distances: expected two [N,1,h,w] stacks, got " + shape_str(det.shape()) + " and " +
                     shape_str(ch.shape()));
  }
  const int th = std::min(det.dim(2), ch.dim(2)), tw = std::min(det.dim(3), ch.dim(3));
  const Tensor a = resize_avg(det, th, tw), b = resize_avg(ch, th, tw);
  const std::size_t plane = static_cast<std::size_t>(th) * tw;
  std::vector<double> out(static_cast<std::size_t>(det.dim(0)));
  for (std::size_t s = 0; s < out.size(); ++s)
    out[s] = map_distance(a.data().subspan(s * plane, plane), b.data().subspan(s * plane, plane));
  return out;
}

MatchResult match_maps(const Tensor& det, const Tensor& ch, const MatchParams& p) {
  p.validate();
  const auto d = map_distances(det, ch);
  if (d.empty()) throw InvalidArgument("matching needs at least one sample");
  const auto hits = std::count_if(d.begin(), d.end(), [&](double v) { return v < p.delta; });
  MatchResult r;
  r.coverage = static_cast<double>(hits) / static_cast<double>(d.size());
  r.matched = r.coverage > p.u && !all_silent(det) && !all_silent(ch);
  return r;
}

MatchResult match_concept(const ConceptDetector& g, const Model& model, int layer, int channel,
                          const LabeledDataset& ds, const MatchParams& p) {
  p.validate();
  return match_maps(detector_maps(g, ds), record_channel(model, ds, layer, channel), p);
}

// ---- pool --------------------------------------------------------------------------------

void ConceptPool::add(PoolEntry e) {
  if (e.name.empty()) throw InvalidArgument("concept name must not be empty");
  if (contains(e.name)) throw Conflict("concept '" + e.name + "' already in pool");
  e.match.validate();
  entries_.push_back(std::move(e));
}

bool ConceptPool::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const PoolEntry& e) { return e.name == name; });
}

const PoolEntry& ConceptPool::get(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e;
  throw NotFound("no concept '" + name + "' in pool");
}

std::string ConceptPool::unique_name(const std::string& base) const {
  if (!contains(base)) return base;
  for (int k = 2;; ++k) {
    auto n = base + "-" + std::to_string(k);
    if (!contains(n)) return n;
  }
}

void pool_save(const ConceptPool& pool, const fs::path& dir) {
  fs::create_directories(dir);
  std::vector<NamedTensor> blobs;
  json entries = json::array();
  for (const auto& e : pool.entries()) {
    const auto& g = e.detector.geometry();
    blobs.push_back({e.name + "/weight", &e.detector.params()[0].value});
    blobs.push_back({e.name + "/bias", &e.detector.params()[1].value});
    entries.push_back({{"name", e.name},
                       {"geometry", {{"kernel", g.kernel}, {"stride", g.stride}, {"pool", g.pool}}},
                       {"match", {{"delta", e.match.delta}, {"u", e.match.u}}},
                       {"provenance", e.provenance},
                       {"created", e.created}});
  }
  json manifest = {{"format", kPoolFormat}, {"version", kPoolVersion}, {"entries", entries}};
  manifest["tensors"] = write_tensor_blobs(dir / "detectors.bin", blobs);
  std::ofstream out(dir / "pool.json");
  out << manifest.dump(2) << '\n';
  if (!out) throw IoError("cannot write " + (dir / "pool.json").string());
}

ConceptPool pool_load(const fs::path& dir) {
  const fs::path mpath = dir / "pool.json";
  std::ifstream in(mpath);
  if (!in) throw IoError("missing pool manifest " + mpath.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw CorruptCheckpoint("unparseable pool manifest " + mpath.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != kPoolFormat) throw FormatError("not a concept pool: " + dir.string());
  if (manifest.value("version", -1) != kPoolVersion) {
    throw FormatError("unsupported pool version " + manifest.value("version", json(-1)).dump());
  }
  const auto blobs = read_tensor_blobs(dir / "detectors.bin", manifest.at("tensors"));
  auto blob = [&](const std::string& name) -> const Tensor& {
    for (const auto& [n, t] : blobs)
      if (n == name) return t;
    throw CorruptCheckpoint("pool lacks tensor '" + name + "'");
  };
  ConceptPool pool;
  try {
    for (const auto& e : manifest.at("entries")) {
      PoolEntry pe;
      pe.name = e.at("name").get<std::string>();
      const auto& g = e.at("geometry");
      const DetectorGeometry geom{g.at("kernel").get<int>(), g.at("stride").get<int>(), g.at("pool").get<bool>()};
      const Tensor& b = blob(pe.name + "/bias");
      if (b.size() != 1) throw CorruptCheckpoint("bias of '" + pe.name + "' is not a scalar");
      try {
        pe.detector = ConceptDetector::fixed(geom, blob(pe.name + "/weight"), b[0]);
      } catch (const ShapeError& ex) {
        throw CorruptCheckpoint(ex.what());
      }
      pe.match = {e.at("match").at("delta").get<double>(), e.at("match").at("u").get<double>()};
      pe.provenance = e.value("provenance", json::object());
      pe.created = e.value("created", "");
      pool.add(std::move(pe));
    }
  } catch (const json::exception& ex) {
    throw CorruptCheckpoint(std::string("malformed pool manifest: ") + ex.what());
  }
  return pool;
}

// ---- Module 1 ------------------------------------------------------------------------------

std::vector<PoolMatch> premap_concepts(const ConceptPool& pool, const Model& model, int layer,
                                       std::span<const int> candidates, const LabeledDataset& ds,
                                       const std::optional<MatchParams>& params) {
  std::vector<PoolMatch> out;
  if (pool.empty() || candidates.empty()) return out;
  const Tensor maps = layer_maps(model, ds, layer);
  std::vector<std::unique_ptr<Tensor>> cache(pool.size());
  for (int ch : candidates) {
    if (ch < 0 || ch >= maps.dim(1)) throw InvalidArgument("candidate channel " + std::to_string(ch) + " out of range");
    const Tensor target = channel_slice(maps, ch);
    for (std::size_t k = 0; k < pool.size(); ++k) {
      const auto& e = pool.entries()[k];
      if (!cache[k]) cache[k] = std::make_unique<Tensor>(detector_maps(e.detector, ds));
      const auto r = match_maps(*cache[k], target, params.value_or(e.match));
      if (r.matched) {
        out.push_back({ch, e.name, r.coverage});
        break;
      }
    }
  }
  return out;
}

PreMapper make_premapper(const ConceptPool& pool, const LabeledDataset& probe, std::optional<MatchParams> params) {
  auto p = std::make_shared<const ConceptPool>(pool);
  auto ds = std::make_shared<const LabeledDataset>(probe);
  return [p, ds, params](const Model& model, const Query& q) {
    std::vector<Annotation> anns;
    for (const auto& m : premap_concepts(*p, model, q.layer, q.candidates, *ds, params))
      anns.push_back({m.channel, m.concept_name});
    return anns;
  };
}

ConceptPool export_concepts(const Model& model, const SelectionState& sel, const LabeledDataset& ds,
                            const DetectorTrainConfig& cfg, const std::string& dataset_name,
                            const MatchParams& match) {
  match.validate();
  ConceptPool pool;
  const std::string created = detail::utc_timestamp();
  for (int layer = 1; layer <= sel.num_layers(); ++layer) {
    if (sel.entries(layer).empty()) continue;
    const Tensor maps = layer_maps(model, ds, layer);
    const auto geom = detector_geometry(model.arch(), layer);
    for (const auto& [ch, s] : sel.entries(layer)) {
      const Tensor target = channel_slice(maps, ch);
      DetectorTrainConfig c = cfg;
      c.seed = detail::mix_seed(cfg.seed, static_cast<std::uint64_t>(layer), static_cast<std::uint64_t>(ch));
      auto fit = train_detector(ds, target, geom, c);
      const auto self = match_maps(detector_maps(fit.detector, ds), target, match);
      PoolEntry e;
      e.name = pool.unique_name(s.concept_name);
      e.detector = std::move(fit.detector);
      e.match = match;
      e.created = created;
      e.provenance = {{"dataset", dataset_name},
                      {"arch", model.arch().name},
                      {"layer", layer},
                      {"channel", ch},
                      {"concept", s.concept_name},
                      {"selected_by", provenance_name(s.provenance)},
                      {"model_digest", detail::hex64(model.param_digest())},
                      {"final_dist", fit.final_dist},
                      {"self_coverage", self.coverage}};
      pool.add(std::move(e));
    }
  }
  return pool;
}

}  // namespace lucid
