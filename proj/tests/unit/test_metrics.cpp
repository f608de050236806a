#include <gtest/gtest.h>
#include <png.h>

#include <cmath>
#include <fstream>
#include <random>

#include "lucid/metrics.hpp"
#include "lucid/render.hpp"
#include "temp_dir.hpp"

namespace lucid {
namespace {

const std::filesystem::path kSubset = std::filesystem::path(LUCID_TEST_DATA_DIR) / "mnist-subset";

std::vector<float> random_vec(std::size_t n, std::mt19937_64& rng, float lo = 0.0f, float hi = 1.0f) {
  std::uniform_real_distribution<float> u(lo, hi);
  std::vector<float> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

// ---- distances --------------------------------------------------------------------------

double oracle_distance(const std::vector<float>& a, const std::vector<float>& b, DistKind k) {
  double d = 0;
  if (k == DistKind::kL1) {
    for (std::size_t i = 0; i < a.size(); ++i) d += std::fabs(double(a[i]) - double(b[i]));
  } else if (k == DistKind::kL2) {
    for (std::size_t i = 0; i < a.size(); ++i) d += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
    d = std::sqrt(d);
  } else {
    double sa = 0, sb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) sa += a[i], sb += b[i];
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double p = a[i] / sa, q = b[i] / sb;
      if (p > 0) d += p * std::log(p / q);
    }
  }
  return d;
}

TEST(VectorDistance, MatchesScalarOracle) {
  std::mt19937_64 rng(1);
  for (auto k : {DistKind::kL1, DistKind::kL2, DistKind::kCrossEntropy}) {
    for (int t = 0; t < 50; ++t) {
      const auto a = random_vec(1 + t % 9, rng, 0.01f, 1.0f), b = random_vec(a.size(), rng, 0.01f, 1.0f);
      EXPECT_NEAR(vector_distance(a, b, k), oracle_distance(a, b, k), 1e-9) << dist_name(k);
    }
  }
}

TEST(VectorDistance, CrossEntropyIsAsymmetric) {
  const std::vector<float> a{0.9f, 0.1f}, b{0.5f, 0.5f};
  const double ab = vector_distance(a, b, DistKind::kCrossEntropy), ba = vector_distance(b, a, DistKind::kCrossEntropy);
  EXPECT_NE(ab, ba);
  const double delta = (ab + ba) / 2;
  const std::vector<Tensor> sa{Tensor({2}, a)}, sb{Tensor({2}, b)};
  EXPECT_EQ(sample_interpretable(sa, sb, delta, DistKind::kCrossEntropy), ab < delta);
  EXPECT_EQ(sample_interpretable(sb, sa, delta, DistKind::kCrossEntropy), ba < delta);
  EXPECT_NE(sample_interpretable(sa, sb, delta, DistKind::kCrossEntropy),
            sample_interpretable(sb, sa, delta, DistKind::kCrossEntropy));
}

TEST(VectorDistance, LengthMismatchThrows) {
  EXPECT_THROW(vector_distance(std::vector<float>{1, 2}, std::vector<float>{1}, DistKind::kL1), ShapeError);
  EXPECT_EQ(dist_from("ce"), DistKind::kCrossEntropy);
  EXPECT_THROW(dist_from("cosine"), InvalidArgument);
}

TEST(SampleInterpretable, IdenticalSequencesAlwaysPass) {
  std::mt19937_64 rng(2);
  std::vector<Tensor> s;
  for (int i = 0; i < 4; ++i) s.emplace_back(Shape{5}, random_vec(5, rng));
  for (auto k : {DistKind::kL1, DistKind::kL2, DistKind::kCrossEntropy})
    for (double d : {1e-12, 1e-6, 1.0}) EXPECT_TRUE(sample_interpretable(s, s, d, k));
}

TEST(SampleInterpretable, DistanceExactlyDeltaFails) {
  const std::vector<Tensor> a{Tensor({2}, {0.0f, 0.0f}), Tensor({1}, {0.0f})};
  const std::vector<Tensor> b{Tensor({2}, {0.0f, 0.0f}), Tensor({1}, {0.5f})};
  EXPECT_FALSE(sample_interpretable(a, b, 0.5, DistKind::kL1));
  EXPECT_TRUE(sample_interpretable(a, b, 0.5000001, DistKind::kL1));
}

TEST(SampleInterpretable, LengthMismatchThrows) {
  const std::vector<Tensor> a{Tensor({1})}, b;
  EXPECT_THROW(sample_interpretable(a, b, 0.1, DistKind::kL2), ShapeError);
}

TEST(SampleInterpretable, AgreesWithScalarOracle) {
  std::mt19937_64 rng(3);
  for (auto k : {DistKind::kL1, DistKind::kL2, DistKind::kCrossEntropy}) {
    for (int t = 0; t < 200; ++t) {
      std::vector<Tensor> a, b;
      bool want = true;
      const double delta = 0.05 + 0.5 * (t % 10) / 10.0;
      for (int p = 0; p < 3; ++p) {
        auto va = random_vec(4, rng, 0.01f, 1.0f), vb = va;
        for (auto& x : vb) x = std::max(0.01f, x + std::uniform_real_distribution<float>(-0.2f, 0.2f)(rng));
        want = want && oracle_distance(va, vb, k) < delta;
        a.emplace_back(Shape{4}, va);
        b.emplace_back(Shape{4}, vb);
      }
      EXPECT_EQ(sample_interpretable(a, b, delta, k), want);
    }
  }
}

TEST(UnitNormalize, UnitNormAndZeroStaysZero) {
  const auto v = unit_normalize(std::vector<float>{3, 4});
  EXPECT_FLOAT_EQ(v[0], 0.6f);
  EXPECT_FLOAT_EQ(v[1], 0.8f);
  const auto z = unit_normalize(std::vector<float>{0, 0});
  EXPECT_EQ(z[0], 0.0f);
}

// ---- degree ------------------------------------------------------------------------------

class MetricsData : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    const auto train = load_dataset_dir(kSubset, Split::kTrain);
    mnist_ = new LabeledDataset(train.head(300));
    cmnist_ = new LabeledDataset(synthesize_cmnist(train, CmnistSpec{}).head(200));
  }
  static void TearDownTestSuite() {
    delete mnist_;
    delete cmnist_;
  }
  static LabeledDataset* mnist_;
  static LabeledDataset* cmnist_;
};
LabeledDataset* MetricsData::mnist_ = nullptr;
LabeledDataset* MetricsData::cmnist_ = nullptr;

TEST_F(MetricsData, SelfReferenceHasDegreeOne) {
  for (const auto* preset : {"mnist", "cmnist"}) {
    const Model m = Model::build(ArchSpec::preset(preset), 4);
    const auto& ds = std::string(preset) == "mnist" ? *mnist_ : *cmnist_;
    const auto ref = ReferenceSystem::from_model(m);
    const std::vector<double> deltas{1e-9, 1e-4, 0.1, 1.0};
    for (auto k : {DistKind::kL1, DistKind::kL2, DistKind::kCrossEntropy}) {
      for (const auto& r : interpretability_degrees(m, ref, ds, deltas, k)) {
        EXPECT_EQ(r.u, 1.0) << preset << " " << dist_name(k);
        EXPECT_TRUE(r.complete);
        EXPECT_TRUE(r.output_compared);
        EXPECT_EQ(static_cast<int>(r.layers.size()), m.num_layers());
      }
    }
  }
}

ReferenceSystem random_detector_reference(const Model& m, std::uint64_t seed) {
  ReferenceSystem ref(m);
  for (int l = 1; l <= m.num_layers(); ++l)
    for (int c = 0; c < m.channels(l); ++c)
      ref.assign(l, c, "c" + std::to_string(c), ConceptDetector::init(detector_geometry(m.arch(), l), seed + c));
  return ref;
}

TEST_F(MetricsData, DegreeIsNestedInDelta) {
  const Model m = Model::build(ArchSpec::preset("mnist"), 7);
  const auto ref = random_detector_reference(m, 100);
  std::vector<double> deltas;
  for (double d = 0.01; d < 3.0; d *= 1.5) deltas.push_back(d);
  for (auto k : {DistKind::kL1, DistKind::kL2, DistKind::kCrossEntropy}) {
    const auto reps = interpretability_degrees(m, ref, *mnist_, deltas, k);
    for (std::size_t i = 1; i < reps.size(); ++i) EXPECT_LE(reps[i - 1].u, reps[i].u) << dist_name(k);
    EXPECT_LT(reps.front().u, 1.0);
  }
}

TEST_F(MetricsData, PartialReferenceComparesCoveredLayersOnly) {
  const Model m = Model::build(ArchSpec::preset("mnist"), 7);
  ReferenceSystem ref(m);
  auto copy = std::make_shared<const Model>(m);
  ref.assign_source(1, 0, "stroke", copy, 1, 0);
  const auto r = interpretability_degree(m, ref, *mnist_, 1e-6);
  EXPECT_EQ(r.layers, std::vector<int>{1});
  EXPECT_FALSE(r.output_compared);
  EXPECT_FALSE(r.complete);
  EXPECT_EQ(r.u, 1.0);
  const auto obs = observe(m, ref, mnist_->head(3));
  ASSERT_EQ(obs.model.size(), 3u);
  ASSERT_EQ(obs.model[0].size(), 1u);
  EXPECT_EQ(obs.model[0][0].size(), 1u);
}

TEST_F(MetricsData, EmptyDatasetThrows) {
  const Model m = Model::build(ArchSpec::preset("mnist"), 7);
  EXPECT_THROW(interpretability_degree(m, ReferenceSystem::from_model(m), LabeledDataset{}, 0.1), InvalidArgument);
  EXPECT_THROW(interpretability_degree(m, ReferenceSystem::from_model(m), *mnist_, 0.0), InvalidArgument);
}

TEST_F(MetricsData, FromPoolUsesProvenanceChannels) {
  const Model m = Model::build(ArchSpec::preset("mnist"), 7);
  ConceptPool pool;
  PoolEntry a;
  a.name = "loop";
  a.detector = ConceptDetector::init(detector_geometry(m.arch(), 2), 1);
  a.provenance = {{"arch", "mnist"}, {"layer", 2}, {"channel", 3}};
  pool.add(a);
  PoolEntry b = a;
  b.name = "elsewhere";
  b.provenance["arch"] = "cmnist";
  pool.add(b);
  PoolEntry c = a;
  c.name = "no-provenance";
  c.provenance = nlohmann::json::object();
  pool.add(c);
  const auto ref = ReferenceSystem::from_pool(pool, m);
  EXPECT_EQ(ref.size(), 1u);
  ASSERT_EQ(ref.layer(2).count(3), 1u);
  EXPECT_EQ(ref.layer(2).at(3).concept_name, "loop");
}

TEST_F(MetricsData, LayerMapsOfDetectorsHaveModelShape) {
  const Model m = Model::build(ArchSpec::preset("mnist"), 7);
  const auto ref = random_detector_reference(m, 1);
  const Batch b = make_batch(*mnist_, 0, 4);
  for (int l = 1; l <= 2; ++l) {
    const auto& s = m.shapes()[static_cast<std::size_t>(l - 1)];
    EXPECT_EQ(ref.layer_maps(l, b.images).shape(), (Shape{4, s.channels, s.pool_height, s.pool_width}));
  }
}

// ---- traces -------------------------------------------------------------------------------

TEST_F(MetricsData, FinalContributionsReproduceLogit) {
  for (const auto* preset : {"mnist", "cmnist"}) {
    const Model m = Model::build(ArchSpec::preset(preset), 11);
    const auto& ds = std::string(preset) == "mnist" ? *mnist_ : *cmnist_;
    for (int i = 0; i < 20; ++i) {
      const auto t = explain(m, ds.image(i), ds.labels[static_cast<std::size_t>(i)]);
      double sum = t.bias;
      for (const auto& c : t.layers.back().channels) sum += c.contribution;
      EXPECT_NEAR(sum, t.logit, 1e-4) << preset << " sample " << i;
      const Inference inf = m.infer(make_batch(ds, i, i + 1).images);
      EXPECT_NEAR(t.logit, inf.logits[static_cast<std::size_t>(t.predicted)], 1e-5);
      EXPECT_NEAR(t.probability, inf.probs[static_cast<std::size_t>(t.predicted)], 1e-6);
    }
  }
}

ArchSpec single_channel_arch() {
  ArchSpec a;
  a.name = "tiny";
  a.input_height = a.input_width = 6;
  a.input_channels = 1;
  a.layers = {{3, 1, 1}};
  a.classes = 2;
  return a;
}

TEST(Explain, SingleChannelContributionIsWeightTimesActivation) {
  Model m = Model::build(single_channel_arch(), 3);
  for (auto& v : m.conv_weight(1).value.data()) v = 0.1f;
  m.conv_bias(1).value[0] = 0.0f;
  std::mt19937_64 rng(5);
  const auto img = random_vec(36, rng);
  const auto t = explain(m, img);
  const Inference inf = m.infer(Tensor({1, 1, 6, 6}, img));
  const Tensor& w = m.fc_weight().value;
  const Tensor& x = inf.layers[0].post_pool;  // [1,1,2,2]
  double want = 0;
  for (int p = 0; p < 4; ++p) want += double(w[static_cast<std::size_t>(t.predicted * 4 + p)]) * x[static_cast<std::size_t>(p)];
  EXPECT_NEAR(t.layers[0].channels[0].contribution, want, 1e-6);
}

TEST(Explain, SilentChannelContributesNothing) {
  Model m = Model::build(single_channel_arch(), 3);
  for (auto& v : m.conv_weight(1).value.data()) v = 0.0f;
  m.conv_bias(1).value[0] = -1.0f;
  std::mt19937_64 rng(5);
  const auto t = explain(m, random_vec(36, rng));
  EXPECT_EQ(t.layers[0].channels[0].contribution, 0.0);
  EXPECT_EQ(t.layers[0].channels[0].pooled, 0.0f);
}

TEST_F(MetricsData, EarlierLayerScoresChainThroughNextConv) {
  const Model m = Model::build(ArchSpec::preset("mnist"), 12);
  const auto t = explain(m, mnist_->image(0));
  const Tensor& w2 = m.conv_weight(2).value;  // [20,10,5,5]
  for (const auto& c : t.layers[0].channels) {
    double down = 0;
    for (int k = 0; k < 20; ++k) {
      double s = 0;
      for (int p = 0; p < 25; ++p) s += w2[static_cast<std::size_t>((k * 10 + c.channel) * 25 + p)];
      down += std::fabs(s) * std::fabs(t.layers[1].channels[static_cast<std::size_t>(k)].contribution);
    }
    EXPECT_NEAR(c.contribution, c.pooled * down, 1e-6 * (1 + std::fabs(c.pooled * down)));
  }
  const auto rank = t.layers[1].ranking();
  for (std::size_t i = 1; i < rank.size(); ++i) {
    EXPECT_GE(t.layers[1].channels[static_cast<std::size_t>(rank[i - 1])].contribution,
              t.layers[1].channels[static_cast<std::size_t>(rank[i])].contribution);
  }
}

TEST_F(MetricsData, TraceCarriesConceptNamesAndExports) {
  Model m = Model::build(ArchSpec::preset("mnist"), 12);
  m.set_concept_name(2, 4, "loop");
  const auto t = explain(m, mnist_->image(1), mnist_->labels[1]);
  EXPECT_EQ(t.layers[1].channels[4].concept_name, "loop");
  const auto j = t.to_json();
  EXPECT_EQ(j["layers"][1]["channels"][4]["concept"], "loop");
  EXPECT_EQ(j["label"], mnist_->labels[1]);
  EXPECT_FALSE(j["layers"][0]["channels"][0].contains("map"));
  EXPECT_TRUE(t.to_json(true)["layers"][0]["channels"][0].contains("map"));

  testing::TempDir dir("trace");
  save_trace(t, dir.path());
  EXPECT_TRUE(std::filesystem::exists(dir / "trace.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "input.png"));
  EXPECT_TRUE(std::filesystem::exists(dir / "layer2_channel19.png"));
  EXPECT_EQ(trace_overlay(t, 1, 3), trace_overlay(t, 1, 3));
  EXPECT_THROW(trace_overlay(t, 3, 0), InvalidArgument);
}

// ---- rendering ----------------------------------------------------------------------------

std::vector<std::uint8_t> decode_rgb(const std::vector<std::uint8_t>& png, int& w, int& h) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, png.data(), png.size())) return {};
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> out(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.data(), 0, nullptr)) return {};
  w = static_cast<int>(img.width), h = static_cast<int>(img.height);
  return out;
}

TEST(Render, EncodeDecodeRoundTrip) {
  std::vector<std::uint8_t> rgb(5 * 3 * 3);
  for (std::size_t i = 0; i < rgb.size(); ++i) rgb[i] = static_cast<std::uint8_t>(i * 7);
  const auto png = encode_png(rgb, 5, 3);
  ASSERT_GE(png.size(), 8u);
  EXPECT_EQ(png[1], 'P');
  int w = 0, h = 0;
  EXPECT_EQ(decode_rgb(png, w, h), rgb);
  EXPECT_EQ(w, 5);
  EXPECT_EQ(h, 3);
  EXPECT_THROW(encode_png(rgb, 4, 3), ShapeError);
}

TEST(Render, EmptyMaskShowsGrayImage) {
  const std::vector<float> img{0.0f, 1.0f, 0.5f, 0.25f};
  const auto png = render_overlay(img, 2, 2, 1, Tensor({1, 1}), 1.0f, 1);
  int w = 0, h = 0;
  const auto px = decode_rgb(png, w, h);
  ASSERT_EQ(w, 2);
  for (int p = 0; p < 4; ++p) {
    const auto g = static_cast<std::uint8_t>(std::lround(img[static_cast<std::size_t>(p)] * 255));
    for (int c = 0; c < 3; ++c) EXPECT_EQ(px[static_cast<std::size_t>(p * 3 + c)], g);
  }
}

TEST(Render, FullMaskIsRed) {
  const std::vector<float> img(4, 0.0f);
  const auto png = render_overlay(img, 2, 2, 1, Tensor({2, 2}, 3.0f), 3.0f, 2);
  int w = 0, h = 0;
  const auto px = decode_rgb(png, w, h);
  ASSERT_EQ(w, 4);
  for (int p = 0; p < 16; ++p) {
    EXPECT_EQ(px[static_cast<std::size_t>(p * 3)], 255);
    EXPECT_EQ(px[static_cast<std::size_t>(p * 3 + 1)], 0);
  }
}

TEST(Render, ColourImagesAreSideBySide) {
  std::vector<float> img(2 * 2 * 3, 0.0f);
  img[1] = 1.0f;  // pixel 0 green
  const auto png = render_overlay(img, 2, 2, 3, Tensor({1, 1}), 1.0f, 1);
  int w = 0, h = 0;
  const auto px = decode_rgb(png, w, h);
  ASSERT_EQ(w, 4);
  EXPECT_EQ(px[1], 255);  // left panel keeps the colour
  EXPECT_EQ(px[0], 0);
  EXPECT_EQ(px[2 * 3 + 0], 255);  // right panel: intensity, unmasked
  EXPECT_EQ(px[2 * 3 + 1], 255);
}

}  // namespace
}  // namespace lucid
