#include "lucid/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "internal.hpp"
#include "lucid/render.hpp"

namespace lucid {

using nlohmann::json;

std::string dist_name(DistKind k) {
  switch (k) {
    case DistKind::kL1: return "l1";
    case DistKind::kL2: return "l2";
    case DistKind::kCrossEntropy: return "ce";
  }
  return "?";
}

DistKind dist_from(const std::string& s) {
  if (s == "l1") return DistKind::kL1;
  if (s == "l2") return DistKind::kL2;
  if (s == "ce" || s == "cross-entropy") return DistKind::kCrossEntropy;
  throw InvalidArgument("unknown distance '" + s + "' (expected l1, l2 or ce)");
}

namespace {

std::vector<double> as_distribution(std::span<const float> v) {
  std::vector<double> p(v.size());
  double s = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] < 0) throw InvalidArgument("cross-entropy distance needs non-negative vectors");
    s += v[i];
  }
  for (std::size_t i = 0; i < v.size(); ++i) p[i] = s > 0 ? v[i] / s : 1.0 / static_cast<double>(v.size());
  return p;
}

}  // namespace

double vector_distance(std::span<const float> a, std::span<const float> b, DistKind kind) {
  if (a.size() != b.size()) {
    throw ShapeError("distance between vectors of length " + std::to_string(a.size()) + " and " +
                     std::to_string(b.size()));
  }
  double d = 0;
  switch (kind) {
    case DistKind::kL1:
      for (std::size_t i = 0; i < a.size(); ++i) d += std::abs(static_cast<double>(a[i]) - b[i]);
      return d;
    case DistKind::kL2:
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double e = static_cast<double>(a[i]) - b[i];
        d += e * e;
      }
      return std::sqrt(d);
    case DistKind::kCrossEntropy: {
      if (a.empty()) return 0.0;
      const auto p = as_distribution(a), q = as_distribution(b);
      constexpr double kFloor = 1e-12;
      for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] > 0) d += p[i] * (std::log(p[i]) - std::log(std::max(q[i], kFloor)));
      }
      return std::max(d, 0.0);
    }
  }
  return d;
}

bool sample_interpretable(const std::vector<Tensor>& seq_a, const std::vector<Tensor>& seq_b, double delta,
                          DistKind kind) {
  if (seq_a.size() != seq_b.size()) {
    throw ShapeError("sequences of length " + std::to_string(seq_a.size()) + " and " + std::to_string(seq_b.size()));
  }
  for (std::size_t i = 0; i < seq_a.size(); ++i) {
    if (!(vector_distance(seq_a[i].data(), seq_b[i].data(), kind) < delta)) return false;
  }
  return true;
}

std::vector<float> unit_normalize(std::span<const float> v) {
  double s = 0;
  for (float x : v) s += static_cast<double>(x) * x;
  std::vector<float> out(v.begin(), v.end());
  if (s > 0) {
    const double n = std::sqrt(s);
    for (auto& x : out) x = static_cast<float>(x / n);
  }
  return out;
}

// ---- reference system ---------------------------------------------------------------

ReferenceSystem::ReferenceSystem(const Model& model)
    : shapes_(model.shapes()), layers_(static_cast<std::size_t>(model.num_layers())) {}

ReferenceSystem ReferenceSystem::from_model(const Model& model) {
  ReferenceSystem r(model);
  auto copy = std::make_shared<const Model>(model);
  for (int l = 1; l <= model.num_layers(); ++l) {
    for (int c = 0; c < model.channels(l); ++c) {
      auto name = model.concept_name(l, c);
      if (name.empty()) name = "layer" + std::to_string(l) + "-channel" + std::to_string(c);
      r.assign_source(l, c, std::move(name), copy, l, c);
    }
  }
  return r;
}

ReferenceSystem ReferenceSystem::from_pool(const ConceptPool& pool, const Model& model) {
  ReferenceSystem r(model);
  for (const auto& e : pool.entries()) {
    const auto& p = e.provenance;
    if (!p.contains("layer") || !p.contains("channel")) continue;
    if (p.value("arch", model.arch().name) != model.arch().name) continue;
    const int l = p.at("layer").get<int>(), c = p.at("channel").get<int>();
    if (l < 1 || l > model.num_layers() || c < 0 || c >= model.channels(l)) continue;
    if (r.layers_[static_cast<std::size_t>(l - 1)].count(c)) continue;
    const auto g = detector_geometry(model.arch(), l);
    if (!(e.detector.geometry() == g)) continue;
    r.assign(l, c, e.name, e.detector);
  }
  return r;
}

void ReferenceSystem::assign(int layer, int channel, std::string concept_name, ConceptDetector detector) {
  if (layer < 1 || layer > num_layers()) throw InvalidArgument("reference layer " + std::to_string(layer) + " out of range");
  if (channel < 0 || channel >= shapes_[static_cast<std::size_t>(layer - 1)].channels) {
    throw InvalidArgument("reference channel " + std::to_string(channel) + " out of range");
  }
  if (detector.params().size() != 2) throw InvalidArgument("reference detector is not loaded");
  Entry e;
  e.concept_name = std::move(concept_name);
  e.detector = std::move(detector);
  layers_[static_cast<std::size_t>(layer - 1)][channel] = std::move(e);
}

void ReferenceSystem::assign_source(int layer, int channel, std::string concept_name,
                                    std::shared_ptr<const Model> source, int source_layer, int source_channel) {
  if (layer < 1 || layer > num_layers()) throw InvalidArgument("reference layer " + std::to_string(layer) + " out of range");
  if (channel < 0 || channel >= shapes_[static_cast<std::size_t>(layer - 1)].channels) {
    throw InvalidArgument("reference channel " + std::to_string(channel) + " out of range");
  }
  if (!source) throw InvalidArgument("reference source model is null");
  if (source_layer < 1 || source_layer > source->num_layers() || source_channel < 0 ||
      source_channel >= source->channels(source_layer)) {
    throw InvalidArgument("reference source channel out of range");
  }
  Entry e;
  e.concept_name = std::move(concept_name);
  e.source = std::move(source);
  e.source_layer = source_layer;
  e.source_channel = source_channel;
  layers_[static_cast<std::size_t>(layer - 1)][channel] = std::move(e);
}

const std::map<int, ReferenceSystem::Entry>& ReferenceSystem::layer(int layer) const {
  if (layer < 1 || layer > num_layers()) throw InvalidArgument("reference layer " + std::to_string(layer) + " out of range");
  return layers_[static_cast<std::size_t>(layer - 1)];
}

bool ReferenceSystem::covers_all(int layer) const {
  return static_cast<int>(this->layer(layer).size()) == shapes_[static_cast<std::size_t>(layer - 1)].channels;
}

std::size_t ReferenceSystem::size() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.size();
  return n;
}

Tensor ReferenceSystem::layer_maps(int layer, const Tensor& images) const {
  const auto& entries = this->layer(layer);
  const auto& s = shapes_[static_cast<std::size_t>(layer - 1)];
  const int n = images.dim(0), k = static_cast<int>(entries.size());
  const std::size_t plane = static_cast<std::size_t>(s.pool_height) * s.pool_width;
  Tensor out({n, k, s.pool_height, s.pool_width});
  std::map<const Model*, Inference> inferred;
  std::optional<Tensor> canonical;
  int q = 0;
  for (const auto& [ch, e] : entries) {
    Tensor maps;
    int src = 0, src_channels = 1;
    if (e.detector) {
      if (!canonical) canonical = canonical_input(images);
      maps = resize_avg(e.detector->infer(*canonical), s.pool_height, s.pool_width);
    } else {
      auto it = inferred.find(e.source.get());
      if (it == inferred.end()) it = inferred.emplace(e.source.get(), e.source->infer(images)).first;
      maps = resize_avg(it->second.layers.at(static_cast<std::size_t>(e.source_layer - 1)).post_pool, s.pool_height,
                        s.pool_width);
      src = e.source_channel;
      src_channels = maps.dim(1);
    }
    for (int b = 0; b < n; ++b) {
      const float* from = maps.ptr() + (static_cast<std::size_t>(b) * src_channels + src) * plane;
      std::copy(from, from + plane, out.ptr() + (static_cast<std::size_t>(b) * k + q) * plane);
    }
    ++q;
  }
  return out;
}

// ---- degree --------------------------------------------------------------------------

json DegreeReport::to_json() const {
  return {{"u", u},
          {"n", n},
          {"interpretable", interpretable},
          {"layers", layers},
          {"output_compared", output_compared},
          {"complete", complete}};
}

namespace {

float plane_mean(const float* p, std::size_t n) {
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += p[i];
  return static_cast<float>(acc / static_cast<double>(n));
}

// Softmax of fc(features) for last-layer maps [N,K,h,w].
Tensor fc_probs(const Model& model, const Tensor& maps) {
  const Tensor& w = model.fc_weight().value;
  const Tensor& bias = model.fc_bias().value;
  const int classes = w.dim(0), d = w.dim(1), n = maps.dim(0);
  if (static_cast<std::size_t>(d) * n != maps.size()) throw ShapeError("last-layer maps do not fit the FC layer");
  Tensor logits({n, classes});
  for (int s = 0; s < n; ++s) {
    const float* f = maps.ptr() + static_cast<std::size_t>(s) * d;
    for (int c = 0; c < classes; ++c) {
      const float* wr = w.ptr() + static_cast<std::size_t>(c) * d;
      double acc = bias[static_cast<std::size_t>(c)];
      for (int i = 0; i < d; ++i) acc += static_cast<double>(wr[i]) * f[i];
      logits[static_cast<std::size_t>(s) * classes + c] = static_cast<float>(acc);
    }
  }
  return softmax_rows(logits);
}

}  // namespace

ObservedSequences observe(const Model& model, const ReferenceSystem& ref, const LabeledDataset& ds, int batch) {
  if (ds.size() == 0) throw InvalidArgument("interpretability degree over an empty dataset");
  if (ref.num_layers() != model.num_layers()) throw InvalidArgument("reference and model disagree on layer count");
  ObservedSequences obs;
  for (int l = 1; l <= model.num_layers(); ++l)
    if (ref.covers_layer(l)) obs.layers.push_back(l);
  const int last = model.num_layers();
  obs.output_compared = ref.covers_all(last);
  obs.model.resize(static_cast<std::size_t>(ds.size()));
  obs.reference.resize(static_cast<std::size_t>(ds.size()));

  for (int b0 = 0; b0 < ds.size(); b0 += batch) {
    const int b1 = std::min(ds.size(), b0 + batch), nb = b1 - b0;
    const Batch bt = make_batch(ds, b0, b1);
    const Inference inf = model.infer(bt.images);
    std::map<int, Tensor> ref_maps;
    for (int l : obs.layers) ref_maps.emplace(l, ref.layer_maps(l, bt.images));

    for (int l : obs.layers) {
      const auto& entries = ref.layer(l);
      const Tensor& post = inf.layers[static_cast<std::size_t>(l - 1)].post_pool;
      const Tensor& rm = ref_maps.at(l);
      const int k = post.dim(1), kr = rm.dim(1);
      const std::size_t plane = static_cast<std::size_t>(rm.dim(2)) * rm.dim(3);
      for (int s = 0; s < nb; ++s) {
        std::vector<float> mv, rv;
        int q = 0;
        for (const auto& [ch, e] : entries) {
          mv.push_back(plane_mean(post.ptr() + (static_cast<std::size_t>(s) * k + ch) * plane, plane));
          rv.push_back(plane_mean(rm.ptr() + (static_cast<std::size_t>(s) * kr + q) * plane, plane));
          ++q;
        }
        const auto mn = unit_normalize(mv), rn = unit_normalize(rv);
        obs.model[static_cast<std::size_t>(b0 + s)].emplace_back(Shape{static_cast<int>(mn.size())}, mn);
        obs.reference[static_cast<std::size_t>(b0 + s)].emplace_back(Shape{static_cast<int>(rn.size())}, rn);
      }
    }

    if (obs.output_compared) {
      // f^(a): the reference's last-layer maps pushed through the model's FC;
      // the model side goes through the same arithmetic.
      const Tensor rp = fc_probs(model, ref_maps.at(last));
      const Tensor mp = fc_probs(model, inf.layers.back().post_pool);
      const int classes = rp.dim(1);
      for (int s = 0; s < nb; ++s) {
        const auto off = static_cast<std::size_t>(s) * classes;
        obs.model[static_cast<std::size_t>(b0 + s)].emplace_back(
            Shape{classes}, std::vector<float>(mp.ptr() + off, mp.ptr() + off + classes));
        obs.reference[static_cast<std::size_t>(b0 + s)].emplace_back(
            Shape{classes}, std::vector<float>(rp.ptr() + off, rp.ptr() + off + classes));
      }
    }
  }
  return obs;
}

std::vector<DegreeReport> interpretability_degrees(const Model& model, const ReferenceSystem& ref,
                                                   const LabeledDataset& ds, std::span<const double> deltas,
                                                   DistKind kind) {
  const auto obs = observe(model, ref, ds);
  bool complete = true;
  for (int l = 1; l <= model.num_layers(); ++l) complete = complete && ref.covers_all(l);
  std::vector<DegreeReport> out;
  for (double delta : deltas) {
    if (!(delta > 0)) throw InvalidArgument("delta must be positive");
    DegreeReport r;
    r.n = ds.size();
    r.layers = obs.layers;
    r.output_compared = obs.output_compared;
    r.complete = complete;
    for (int s = 0; s < r.n; ++s) {
      if (sample_interpretable(obs.reference[static_cast<std::size_t>(s)], obs.model[static_cast<std::size_t>(s)],
                               delta, kind)) {
        ++r.interpretable;
      }
    }
    r.u = static_cast<double>(r.interpretable) / r.n;
    out.push_back(std::move(r));
  }
  return out;
}

DegreeReport interpretability_degree(const Model& model, const ReferenceSystem& ref, const LabeledDataset& ds,
                                     double delta, DistKind kind) {
  const double d[] = {delta};
  return interpretability_degrees(model, ref, ds, d, kind).front();
}

// ---- traces ---------------------------------------------------------------------------

std::vector<int> LayerTrace::ranking() const {
  std::vector<int> idx(channels.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return channels[static_cast<std::size_t>(a)].contribution > channels[static_cast<std::size_t>(b)].contribution;
  });
  for (auto& i : idx) i = channels[static_cast<std::size_t>(i)].channel;
  return idx;
}

PredictionTrace explain(const Model& model, std::span<const float> image_hwc, std::optional<int> label) {
  const auto& arch = model.arch();
  PredictionTrace t;
  t.height = arch.input_height, t.width = arch.input_width, t.channels = arch.input_channels;
  t.image.assign(image_hwc.begin(), image_hwc.end());
  t.label = label;
  const Inference inf = model.infer(detail::hwc_to_nchw(image_hwc, t.height, t.width, t.channels));
  const int classes = inf.logits.dim(1);
  t.predicted = static_cast<int>(std::max_element(inf.logits.ptr(), inf.logits.ptr() + classes) - inf.logits.ptr());
  t.probability = inf.probs[static_cast<std::size_t>(t.predicted)];
  t.logit = inf.logits[static_cast<std::size_t>(t.predicted)];
  t.bias = model.fc_bias().value[static_cast<std::size_t>(t.predicted)];

  const int nl = model.num_layers();
  t.layers.resize(static_cast<std::size_t>(nl));
  for (int l = 1; l <= nl; ++l) {
    auto& lt = t.layers[static_cast<std::size_t>(l - 1)];
    lt.layer = l;
    const auto& out = inf.layers[static_cast<std::size_t>(l - 1)];
    const auto& s = model.shapes()[static_cast<std::size_t>(l - 1)];
    const std::size_t plane = static_cast<std::size_t>(s.conv_height) * s.conv_width;
    for (int c = 0; c < s.channels; ++c) {
      ChannelTrace ct;
      ct.channel = c;
      ct.concept_name = model.concept_name(l, c);
      ct.map = Tensor({s.conv_height, s.conv_width},
                      std::vector<float>(out.pre_pool.ptr() + c * plane, out.pre_pool.ptr() + (c + 1) * plane));
      ct.pooled = out.pooled[static_cast<std::size_t>(c)];
      lt.channels.push_back(std::move(ct));
    }
  }

  // Last layer: exact weight x activation split of the predicted logit.
  {
    auto& lt = t.layers.back();
    const auto& post = inf.layers.back().post_pool;
    const auto& s = model.shapes().back();
    const std::size_t plane = static_cast<std::size_t>(s.pool_height) * s.pool_width;
    const Tensor& w = model.fc_weight().value;
    const float* wr = w.ptr() + static_cast<std::size_t>(t.predicted) * w.dim(1);
    for (auto& ct : lt.channels) {
      double acc = 0;
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t i = static_cast<std::size_t>(ct.channel) * plane + p;
        acc += static_cast<double>(wr[i]) * post[i];
      }
      ct.contribution = acc;
    }
  }
  // Earlier layers: one step back through the next conv's summed kernel weights.
  for (int l = nl - 1; l >= 1; --l) {
    const auto& next = t.layers[static_cast<std::size_t>(l)];
    const Tensor& w = model.conv_weight(l + 1).value;  // [K', K, k, k]
    const int kout = w.dim(0), kin = w.dim(1);
    const std::size_t kk = static_cast<std::size_t>(w.dim(2)) * w.dim(3);
    for (auto& ct : t.layers[static_cast<std::size_t>(l - 1)].channels) {
      double down = 0;
      for (int k = 0; k < kout; ++k) {
        const float* p = w.ptr() + (static_cast<std::size_t>(k) * kin + ct.channel) * kk;
        double ws = 0;
        for (std::size_t i = 0; i < kk; ++i) ws += p[i];
        down += std::abs(ws) * std::abs(next.channels[static_cast<std::size_t>(k)].contribution);
      }
      ct.contribution = ct.pooled * down;
    }
  }
  return t;
}

json PredictionTrace::to_json(bool with_maps) const {
  json layers_json = json::array();
  for (const auto& lt : layers) {
    json chans = json::array();
    for (const auto& c : lt.channels) {
      json cj = {{"channel", c.channel},
                 {"concept", c.concept_name},
                 {"pooled", c.pooled},
                 {"contribution", c.contribution},
                 {"map_shape", c.map.shape()},
                 {"overlay", "layer" + std::to_string(lt.layer) + "_channel" + std::to_string(c.channel) + ".png"}};
      if (with_maps) cj["map"] = std::vector<float>(c.map.data().begin(), c.map.data().end());
      chans.push_back(std::move(cj));
    }
    layers_json.push_back({{"layer", lt.layer}, {"channels", std::move(chans)}, {"ranking", lt.ranking()}});
  }
  json j = {{"predicted", predicted},
            {"probability", probability},
            {"logit", logit},
            {"bias", bias},
            {"image_shape", {height, width, channels}},
            {"layers", std::move(layers_json)}};
  j["label"] = label ? json(*label) : json(nullptr);
  return j;
}

std::vector<std::uint8_t> trace_overlay(const PredictionTrace& trace, int layer, int channel, int zoom) {
  if (layer < 1 || layer > static_cast<int>(trace.layers.size())) throw InvalidArgument("trace has no such layer");
  const auto& lt = trace.layers[static_cast<std::size_t>(layer - 1)];
  if (channel < 0 || channel >= static_cast<int>(lt.channels.size())) throw InvalidArgument("trace has no such channel");
  const Tensor& m = lt.channels[static_cast<std::size_t>(channel)].map;
  const float peak = m.size() ? *std::max_element(m.data().begin(), m.data().end()) : 0.0f;
  return render_overlay(trace.image, trace.height, trace.width, trace.channels, m, peak, zoom);
}

void save_trace(const PredictionTrace& trace, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  auto write = [&](const std::filesystem::path& p, const void* data, std::size_t n) {
    std::ofstream f(p, std::ios::binary);
    f.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!f) throw IoError("cannot write " + p.string());
  };
  const auto js = trace.to_json(true).dump(1);
  write(dir / "trace.json", js.data(), js.size());
  const Tensor blank({trace.height, trace.width});
  const auto input = render_overlay(trace.image, trace.height, trace.width, trace.channels, blank, 0.0f);
  write(dir / "input.png", input.data(), input.size());
  for (const auto& lt : trace.layers) {
    for (const auto& c : lt.channels) {
      const auto png = trace_overlay(trace, lt.layer, c.channel);
      write(dir / ("layer" + std::to_string(lt.layer) + "_channel" + std::to_string(c.channel) + ".png"), png.data(),
            png.size());
    }
  }
}

}  // namespace lucid
