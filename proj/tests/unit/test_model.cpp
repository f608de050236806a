#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <random>

#include "lucid/model.hpp"
#include "temp_dir.hpp"

namespace lucid {
namespace {

namespace fs = std::filesystem;
using testing::TempDir;

Tensor random_images(int n, int c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0, 1);
  Tensor x({n, c, 28, 28});
  for (auto& v : x.data()) v = u(rng);
  return x;
}

TEST(Arch, CmnistPresetShapes) {
  const auto s = shape_trace(ArchSpec::preset("cmnist"));
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0].conv_height, 12);
  EXPECT_EQ(s[0].conv_width, 12);
  EXPECT_EQ(s[0].channels, 5);
  EXPECT_EQ(s[0].pool_height, 6);
  EXPECT_EQ(ArchSpec::preset("cmnist").classes, 9);
  Model m = Model::build(ArchSpec::preset("cmnist"), 0);
  EXPECT_EQ(m.fc_weight().value.shape(), (Shape{9, 6 * 6 * 5}));
}

TEST(Arch, MnistPresetShapes) {
  const auto s = shape_trace(ArchSpec::preset("mnist"));
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ((std::array{s[0].conv_height, s[0].channels, s[0].pool_height}), (std::array{24, 10, 12}));
  EXPECT_EQ((std::array{s[1].conv_height, s[1].channels, s[1].pool_height}), (std::array{8, 20, 4}));
  Model m = Model::build(ArchSpec::preset("mnist"), 0);
  EXPECT_EQ(m.fc_weight().value.shape(), (Shape{10, 4 * 4 * 20}));
  Tape tape;
  auto tr = m.forward(tape, tape.input("x", random_images(2, 1, 1)));
  EXPECT_EQ(tr.layers[0].pre_pool.shape(), (Shape{2, 10, 24, 24}));
  EXPECT_EQ(tr.layers[0].post_pool.shape(), (Shape{2, 10, 12, 12}));
  EXPECT_EQ(tr.layers[1].pre_pool.shape(), (Shape{2, 20, 8, 8}));
  EXPECT_EQ(tr.layers[1].post_pool.shape(), (Shape{2, 20, 4, 4}));
  EXPECT_EQ(tr.logits.shape(), (Shape{2, 10}));
}

TEST(Arch, InconsistentDimsReportTrace) {
  ArchSpec a = ArchSpec::preset("mnist");
  a.layers.push_back({5, 8, 1});  // 4x4 map cannot take a 5x5 kernel
  try {
    shape_trace(a);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("layer 3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("trace"), std::string::npos) << msg;
  }
  EXPECT_THROW(Model::build(a, 0), ShapeError);
}

TEST(Arch, JsonRoundTrip) {
  for (const char* name : {"cmnist", "mnist"}) {
    const auto a = ArchSpec::preset(name);
    EXPECT_EQ(ArchSpec::from_json(a.to_json()), a);
  }
  EXPECT_THROW(ArchSpec::preset("cifar"), InvalidArgument);
}

TEST(Arch, ReceptiveFieldMatchesMapSize) {
  const auto a = ArchSpec::preset("mnist");
  const auto r1 = receptive_field(a, 1), r2 = receptive_field(a, 2);
  EXPECT_EQ(r1.kernel, 5);
  EXPECT_EQ(r1.stride, 1);
  EXPECT_EQ(r2.kernel, 14);
  EXPECT_EQ(r2.stride, 2);
  EXPECT_EQ((28 - r2.kernel) / r2.stride + 1, 8);
  const auto c = receptive_field(ArchSpec::preset("cmnist"), 1);
  EXPECT_EQ((28 - c.kernel) / c.stride + 1, 12);
}

TEST(Model, CmnistForwardIsAProbabilityVector) {
  Model m = Model::build(ArchSpec::preset("cmnist"), 3);
  const auto inf = m.infer(random_images(1, 3, 4));
  ASSERT_EQ(inf.probs.shape(), (Shape{1, 9}));
  double s = 0;
  for (float p : inf.probs.data()) s += p;
  EXPECT_NEAR(s, 1.0, 1e-5);
}

TEST(Model, InputShapeMismatchIsShapeError) {
  Model m = Model::build(ArchSpec::preset("cmnist"), 3);
  EXPECT_THROW(m.infer(random_images(1, 1, 4)), ShapeError);
}

TEST(Model, SeedDeterminesParameters) {
  const auto a = Model::build(ArchSpec::preset("mnist"), 17);
  const auto b = Model::build(ArchSpec::preset("mnist"), 17);
  const auto c = Model::build(ArchSpec::preset("mnist"), 18);
  EXPECT_EQ(a.param_digest(), b.param_digest());
  EXPECT_NE(a.param_digest(), c.param_digest());
  for (std::size_t i = 0; i < a.params().size(); ++i) EXPECT_TRUE(a.params()[i].value.same_bits(b.params()[i].value));
}

TEST(Model, HeInitScaleAndZeroBias) {
  const auto m = Model::build(ArchSpec::preset("mnist"), 1);
  const auto& w = m.conv_weight(2).value;  // fan_in = 10 * 5 * 5
  double ss = 0;
  for (float v : w.data()) ss += static_cast<double>(v) * v;
  EXPECT_NEAR(std::sqrt(ss / static_cast<double>(w.size())), std::sqrt(2.0 / 250.0), 0.01);
  for (float v : m.conv_bias(2).value.data()) EXPECT_EQ(v, 0.0f);
}

void train_steps(Model& m, int steps, int batch, std::uint64_t seed) {
  const std::vector<int> labels = [&] {
    std::vector<int> y;
    for (int i = 0; i < batch; ++i) y.push_back(i % m.arch().classes);
    return y;
  }();
  Adam adam;
  for (int s = 0; s < steps; ++s) {
    Tape tape;
    auto tr = m.forward(tape, tape.input("x", random_images(batch, m.arch().input_channels, seed + s)));
    adam.step(m.params(), tape.backward(softmax_cross_entropy(tr.logits, labels)), 0.01f);
  }
}

TEST(Freeze, WholeLayerSurvivesHundredSteps) {
  Model m = Model::build(ArchSpec::preset("cmnist"), 2);
  m.freeze_layer(1);
  const Tensor w = m.conv_weight(1).value, b = m.conv_bias(1).value, fc = m.fc_weight().value;
  train_steps(m, 100, 4, 10);
  EXPECT_TRUE(m.conv_weight(1).value.same_bits(w));
  EXPECT_TRUE(m.conv_bias(1).value.same_bits(b));
  EXPECT_FALSE(m.fc_weight().value.same_bits(fc));
}

TEST(Freeze, SingleChannelComplementMoves) {
  Model m = Model::build(ArchSpec::preset("cmnist"), 4);
  m.freeze_channels(1, std::vector<int>{2});
  const Tensor w = m.conv_weight(1).value;
  train_steps(m, 1, 16, 20);
  const std::size_t rs = m.conv_weight(1).row_size();
  for (int c = 0; c < 5; ++c) {
    const bool same =
        std::equal(w.ptr() + c * rs, w.ptr() + (c + 1) * rs, m.conv_weight(1).value.ptr() + c * rs);
    EXPECT_EQ(same, c == 2) << "channel " << c;
  }
}

TEST(Freeze, UnknownLayerOrChannel) {
  Model m = Model::build(ArchSpec::preset("mnist"), 0);
  EXPECT_THROW(m.freeze_layer(3), InvalidArgument);
  EXPECT_THROW(m.freeze_channels(1, std::vector<int>{10}), InvalidArgument);
  EXPECT_THROW(m.freeze_channels(0, std::vector<int>{0}), InvalidArgument);
}

TEST(ChannelActivation, ZeroImageGivesZeroMap) {
  Model m = Model::build(ArchSpec::preset("mnist"), 5);
  const std::vector<float> img(28 * 28, 0.0f);
  const auto act = m.channel_activation(img, 1, 3);
  EXPECT_EQ(act.map.shape(), (Shape{24, 24}));
  for (float v : act.map.data()) EXPECT_EQ(v, 0.0f);
  EXPECT_EQ(act.pooled, 0.0f);
  EXPECT_EQ(m.channel_activation(img, 2, 0).map.shape(), (Shape{8, 8}));
  EXPECT_THROW(m.channel_activation(img, 2, 20), InvalidArgument);
}

TEST(ChannelActivation, PooledScalarMatchesHandComputation) {
  // 5x5 input, one 2x2 filter, stride 1 -> 4x4 map -> 2x2 after pooling.
  ArchSpec a;
  a.input_height = a.input_width = 5;
  a.input_channels = 1;
  a.layers = {{2, 1, 1}};
  a.classes = 2;
  Model m = Model::build(a, 0);
  m.conv_weight(1).value = Tensor({1, 1, 2, 2}, {1.0f, -1.0f, 0.5f, 0.25f});
  m.conv_bias(1).value = Tensor({1}, {0.1f});
  std::vector<float> img(25);
  for (int k = 0; k < 25; ++k) img[static_cast<std::size_t>(k)] = static_cast<float>((k * 7) % 11) / 10.0f;

  double map[4][4];
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      const auto px = [&](int r, int c) { return static_cast<double>(img[static_cast<std::size_t>(r * 5 + c)]); };
      const double z = 0.1 + px(y, x) - px(y, x + 1) + 0.5 * px(y + 1, x) + 0.25 * px(y + 1, x + 1);
      map[y][x] = z > 0 ? z : 0;
    }
  double pooled = 0;
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x)
      pooled += std::max({map[2 * y][2 * x], map[2 * y][2 * x + 1], map[2 * y + 1][2 * x], map[2 * y + 1][2 * x + 1]});
  pooled /= 4;

  const auto act = m.channel_activation(img, 1, 0);
  ASSERT_EQ(act.map.shape(), (Shape{4, 4}));
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) EXPECT_NEAR(act.map.at({y, x}), map[y][x], 1e-6);
  EXPECT_NEAR(act.pooled, pooled, 1e-6);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  TempDir dir;
  Model m = Model::build(ArchSpec::preset("mnist"), 11);
  train_steps(m, 2, 4, 1);
  m.freeze_channels(1, std::vector<int>{0, 7});
  m.freeze_fc();
  m.set_concept_name(1, 7, "vertical line");
  m.provenance["note"] = "unit";
  save_checkpoint(m, dir.path());
  EXPECT_TRUE(fs::exists(dir / "manifest.json"));
  EXPECT_TRUE(fs::exists(dir / "tensors.bin"));

  const Model back = load_checkpoint(dir.path());
  EXPECT_EQ(back.arch(), m.arch());
  EXPECT_EQ(back.seed(), m.seed());
  EXPECT_EQ(back.param_digest(), m.param_digest());
  EXPECT_TRUE(back.is_frozen(1, 7));
  EXPECT_FALSE(back.is_frozen(1, 1));
  EXPECT_TRUE(back.fc_weight().all_frozen());
  EXPECT_EQ(back.concept_name(1, 7), "vertical line");
  EXPECT_EQ(back.provenance.value("note", ""), "unit");
  const Tensor x = random_images(10, 1, 77);
  EXPECT_TRUE(back.infer(x).logits.same_bits(m.infer(x).logits));
}

TEST(Checkpoint, TamperedBlobLengthIsCorrupt) {
  TempDir dir;
  save_checkpoint(Model::build(ArchSpec::preset("cmnist"), 1), dir.path());
  fs::resize_file(dir / "tensors.bin", fs::file_size(dir / "tensors.bin") - 4);
  EXPECT_THROW(load_checkpoint(dir.path()), CorruptCheckpoint);
}

TEST(Checkpoint, ArchMismatchAndVersionAreRejected) {
  TempDir dir;
  save_checkpoint(Model::build(ArchSpec::preset("cmnist"), 1), dir.path());
  nlohmann::json manifest;
  {
    std::ifstream in(dir / "manifest.json");
    manifest = nlohmann::json::parse(in);
  }
  auto tampered = manifest;
  tampered["arch"]["layers"][0]["channels"] = 6;
  std::ofstream(dir / "manifest.json") << tampered.dump();
  EXPECT_THROW(load_checkpoint(dir.path()), CorruptCheckpoint);

  tampered = manifest;
  tampered["version"] = 99;
  std::ofstream(dir / "manifest.json") << tampered.dump();
  EXPECT_THROW(load_checkpoint(dir.path()), FormatError);
}

}  // namespace
}  // namespace lucid
