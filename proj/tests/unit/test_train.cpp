#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "lucid/train.hpp"
#include "reference_net.hpp"
#include "temp_dir.hpp"

namespace lucid {
namespace {

using json = nlohmann::json;

const std::filesystem::path kSubset = std::filesystem::path(LUCID_TEST_DATA_DIR) / "mnist-subset";

Tensor random_tensor(Shape s, std::uint64_t seed, float lo = 0.0f, float hi = 1.0f) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(lo, hi);
  Tensor t(std::move(s));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

// ---- losses --------------------------------------------------------------------------

float sparsity_of(const Tensor& x, std::vector<int> unselected) {
  Tape tape;
  return loss_sparsity(tape.input("x", x), std::span<const int>(unselected)).value().item();
}

TEST(LossSparsity, ZeroActivationsGiveZero) { EXPECT_EQ(sparsity_of(Tensor({4, 3, 2, 2}), {0, 2}), 0.0f); }

TEST(LossSparsity, SingleSampleSingleChannel) { EXPECT_EQ(sparsity_of(Tensor({1, 1, 1, 2}, {1, 2}), {0}), 3.0f); }

TEST(LossSparsity, EmptyComplementIsZero) { EXPECT_EQ(sparsity_of(random_tensor({2, 2, 2, 2}, 1), {}), 0.0f); }

TEST(LossSparsity, MatchesScalarLoopOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const int m = 2 + static_cast<int>(seed % 5), k = 5, h = 3, w = 4;
    const Tensor x = random_tensor({m, k, h, w}, seed);
    const std::vector<int> u{0, 2, 3};
    double sum = 0;
    for (int s = 0; s < m; ++s)
      for (int c : u)
        for (int p = 0; p < h * w; ++p) sum += std::abs(x[static_cast<std::size_t>(((s * k + c) * h * w) + p)]);
    EXPECT_NEAR(sparsity_of(x, u), sum / (m * 3.0), 1e-5);
  }
}

float correlation_of(const Tensor& pooled, std::vector<int> s, std::vector<int> u) {
  Tape tape;
  return loss_correlation(tape.input("p", pooled), std::span<const int>(s), std::span<const int>(u)).value().item();
}

TEST(LossCorrelation, EmptySelectionIsZero) {
  EXPECT_EQ(correlation_of(random_tensor({8, 5}, 3), {}, {0, 1, 2, 3, 4}), 0.0f);
}

TEST(LossCorrelation, IdenticalColumnsGiveOne) {
  Tensor p({4, 2}, {0.1f, 0.1f, 0.7f, 0.7f, 0.3f, 0.3f, 0.9f, 0.9f});
  EXPECT_NEAR(correlation_of(p, {0}, {1}), 1.0f, 1e-6);
}

TEST(LossCorrelation, MatchesDoubleLoopOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const int m = 6 + static_cast<int>(seed % 7);
    const Tensor p = random_tensor({m, 5}, 100 + seed);
    const std::vector<int> s{1, 4}, u{0, 2, 3};
    double acc = 0;
    for (int j : s)
      for (int jb : u) {
        std::vector<double> a, b;
        for (int r = 0; r < m; ++r) {
          a.push_back(p[static_cast<std::size_t>(r * 5 + j)]);
          b.push_back(p[static_cast<std::size_t>(r * 5 + jb)]);
        }
        acc += std::abs(testing::ref_pearson(a, b));
      }
    EXPECT_NEAR(correlation_of(p, s, u), acc / 6.0, 1e-5);
  }
}

TEST(Losses, PermutationEquivariance) {
  const Tensor x = random_tensor({6, 5, 3, 3}, 7);
  const std::vector<int> perm{3, 0, 4, 1, 2};  // new channel c holds old channel perm[c]
  Tensor xp({6, 5, 3, 3});
  for (int s = 0; s < 6; ++s)
    for (int c = 0; c < 5; ++c)
      std::copy_n(x.ptr() + (s * 5 + perm[static_cast<std::size_t>(c)]) * 9, 9, xp.ptr() + (s * 5 + c) * 9);
  const std::vector<int> sel_old{0, 1}, uns_old{2, 3, 4};
  auto remap = [&](const std::vector<int>& old) {
    std::vector<int> out;
    for (int o : old) out.push_back(static_cast<int>(std::find(perm.begin(), perm.end(), o) - perm.begin()));
    std::sort(out.begin(), out.end());
    return out;
  };
  EXPECT_NEAR(sparsity_of(x, uns_old), sparsity_of(xp, remap(uns_old)), 1e-6);
  Tape t1, t2;
  const float c1 = loss_correlation(spatial_mean(t1.input("x", x)), std::span<const int>(sel_old),
                                    std::span<const int>(uns_old))
                       .value()
                       .item();
  const auto s2 = remap(sel_old), u2 = remap(uns_old);
  const float c2 =
      loss_correlation(spatial_mean(t2.input("x", xp)), std::span<const int>(s2), std::span<const int>(u2))
          .value()
          .item();
  EXPECT_NEAR(c1, c2, 1e-6);
}

LossTerms<float> terms_for(Tape& tape, const Model& m, const Tensor& x, const std::vector<int>& y, int layer,
                           std::vector<int> s, std::vector<int> u, float ls, float lc,
                           PredLoss pred = PredLoss::kCrossEntropy) {
  const auto tr = m.forward(tape, tape.input("x", x));
  return loss_total<float>(tr, y, layer, s, u, ls, lc, pred);
}

TEST(LossTotal, ZeroWeightsEqualCrossEntropy) {
  const Model m = Model::build(ArchSpec::preset("cmnist"), 1);
  const Tensor x = random_tensor({8, 3, 28, 28}, 2);
  const std::vector<int> y{0, 1, 2, 3, 4, 5, 6, 7};
  Tape a, b;
  const float total = terms_for(a, m, x, y, 1, {0}, {1, 2, 3, 4}, 0, 0).total.value().item();
  const auto tr = m.forward(b, b.input("x", x));
  EXPECT_EQ(total, softmax_cross_entropy(tr.logits, y).value().item());
}

TEST(LossTotal, PerfectPredictionWithSilentComplementIsZero) {
  ArchSpec a;
  a.input_height = a.input_width = 6;
  a.input_channels = 1;
  a.layers = {{3, 2, 1}};
  a.classes = 3;
  Model m = Model::build(a, 0);
  m.conv_weight(1).value.fill(0.0f);
  m.fc_weight().value.fill(0.0f);
  m.fc_bias().value = Tensor({3}, {0, 40, 0});
  Tape tape;
  const auto t = terms_for(tape, m, random_tensor({4, 1, 6, 6}, 1), {1, 1, 1, 1}, 1, {}, {0, 1}, 0.8f, 0.1f);
  EXPECT_NEAR(t.total.value().item(), 0.0f, 1e-6);
}

TEST(LossTotal, DecompositionIdentity) {
  Model m = Model::build(ArchSpec::preset("mnist"), 3);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor x = random_tensor({16, 1, 28, 28}, seed);
    std::vector<int> y(16);
    for (int i = 0; i < 16; ++i) y[static_cast<std::size_t>(i)] = (i * 7 + static_cast<int>(seed)) % 10;
    const int layer = 1 + static_cast<int>(seed % 2);
    Tape tape;
    const auto t = terms_for(tape, m, x, y, layer, {0, 3}, {1, 2, 4, 5, 6, 7, 8, 9}, 0.8f, 0.1f);
    const double expect = static_cast<double>(t.pred.value().item()) + 0.8 * t.sparsity.value().item() +
                          0.1 * t.correlation.value().item();
    EXPECT_NEAR(t.total.value().item(), expect, 1e-6 * std::max(1.0, std::abs(expect)));
  }
}

TEST(LossTotal, MseHook) {
  const Model m = Model::build(ArchSpec::preset("cmnist"), 5);
  const Tensor x = random_tensor({4, 3, 28, 28}, 9);
  const std::vector<int> y{0, 4, 8, 2};
  Tape tape;
  const auto t = terms_for(tape, m, x, y, 1, {}, {0, 1, 2, 3, 4}, 0.0f, 0.0f, PredLoss::kMse);
  const auto z = m.infer(x).logits;
  double acc = 0;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 9; ++c) {
      const double d = z[static_cast<std::size_t>(r * 9 + c)] - (c == y[static_cast<std::size_t>(r)] ? 1.0 : 0.0);
      acc += d * d;
    }
  EXPECT_NEAR(t.pred.value().item(), acc / 36.0, 1e-5);
}

TEST(LossTotal, GradientMatchesFiniteDifferences) {
  ArchSpec a;
  a.input_height = a.input_width = 12;
  a.input_channels = 2;
  a.layers = {{3, 3, 1}, {2, 3, 1}};
  a.classes = 3;
  const Model m = Model::build(a, 21);
  std::vector<BasicParameter<double>> point;
  for (const auto& p : m.params()) point.push_back(p.cast<double>());
  const TensorD x = random_tensor({5, 2, 12, 12}, 4).cast<double>();
  const std::vector<int> y{0, 1, 2, 1, 0};
  auto build = [&](auto& tape, auto& vars) {
    using T = typename std::decay_t<decltype(vars[0].value())>::value_type;
    using V = BasicVar<T>;
    const auto tr = forward_network<T>(a, std::span<const V>(vars), tape.input("x", x.template cast<T>()));
    const std::vector<int> s{1}, u{0, 2};
    return loss_total<T>(tr, y, 2, s, u, T(0.8), T(0.1)).total;
  };
  // Small step: with h=1e-3 a ReLU or max-pool switch sits inside the stencil for this seed.
  const auto rep = gradcheck(build, point, 1e-6);
  EXPECT_LT(rep.max_rel_error, 1e-3) << rep.worst_param << "[" << rep.worst_index << "] a=" << rep.analytic
                                     << " n=" << rep.numeric;
}

// ---- selection state and config ---------------------------------------------------------

TEST(SelectionState, AddRulesAndRoundTrip) {
  SelectionState s({5, 3});
  s.add(1, {2, "red", Provenance::kOracle, 1});
  EXPECT_THROW(s.add(1, {2, "green", Provenance::kHuman, 1}), Conflict);
  EXPECT_THROW(s.add(1, {3, "", Provenance::kHuman, 1}), InvalidArgument);
  EXPECT_THROW(s.add(2, {3, "x", Provenance::kHuman, 1}), InvalidArgument);
  s.add(2, {0, "corner", Provenance::kPool, 2});
  EXPECT_EQ(s.unselected(1), (std::vector<int>{0, 1, 3, 4}));
  EXPECT_DOUBLE_EQ(s.completeness(1), 0.2);
  EXPECT_EQ(SelectionState::from_json(s.to_json()), s);
}

TEST(TrainConfig, JsonOverridesAndValidation) {
  const auto c = TrainConfig::from_json(json{{"epochs_per_iteration", 2}, {"on_incomplete", "prune"}});
  EXPECT_EQ(c.epochs_per_iteration, 2);
  EXPECT_EQ(c.on_incomplete, OnIncomplete::kPrune);
  EXPECT_FLOAT_EQ(c.lambda_s, 0.8f);
  EXPECT_FLOAT_EQ(c.lambda_c, 0.1f);
  EXPECT_FLOAT_EQ(c.lr, 0.001f);
  EXPECT_EQ(TrainConfig::from_json(c.to_json()).to_json(), c.to_json());
  EXPECT_THROW(TrainConfig::from_json(json{{"epochz", 1}}), InvalidArgument);
  EXPECT_THROW(TrainConfig::from_json(json{{"lambda_s", -1}}), InvalidArgument);
  EXPECT_THROW(TrainConfig::from_json(json{{"batch", 1}}), InvalidArgument);
}

// ---- layer-wise training loop ---------------------------------------------------------------

class AllAnnotator : public Annotator {
 public:
  std::vector<Annotation> annotate(const Model&, const Query& q) override {
    std::vector<Annotation> out;
    for (int c : q.candidates) out.push_back({c, "concept-" + std::to_string(c)});
    return out;
  }
  Provenance provenance() const override { return Provenance::kHuman; }
};

class NeverAnnotator : public Annotator {
 public:
  std::vector<Annotation> annotate(const Model&, const Query&) override { return {}; }
  Provenance provenance() const override { return Provenance::kHuman; }
};

// Picks the lowest open channel on odd iterations only.
class AlternatingAnnotator : public Annotator {
 public:
  std::vector<Annotation> annotate(const Model&, const Query& q) override {
    ++calls;
    if (q.iteration % 2 == 0 || q.candidates.empty()) return {};
    return {{q.candidates.front(), "c" + std::to_string(q.layer) + "-" + std::to_string(q.candidates.front())}};
  }
  Provenance provenance() const override { return Provenance::kOracle; }
  int calls = 0;
};

struct Fixture {
  LabeledDataset cmnist;
  LabeledDataset mnist;
  Fixture() {
    const auto train = load_dataset_dir(kSubset, Split::kTrain);
    cmnist = synthesize_cmnist(train, CmnistSpec{.seed = 1}).head(300);
    mnist = train.head(200);
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

TrainConfig quick_config() {
  TrainConfig c;
  c.epochs_per_iteration = 1;
  c.batch = 64;
  c.seed = 5;
  return c;
}

TEST(Algorithm1, AllInterpretableStopsAfterOneIteration) {
  Model m = Model::build(ArchSpec::preset("cmnist"), 1);
  AllAnnotator ann;
  SessionLog log;
  const auto res = run_algorithm1(m, fixture().cmnist, ann, quick_config(), log);
  EXPECT_EQ(res.selection.selected(1), (std::vector<int>{0, 1, 2, 3, 4}));
  EXPECT_EQ(res.stop_reasons, (std::vector<std::string>{"all_selected"}));
  EXPECT_EQ(log.events_of("iteration_start").size(), 1u);
  EXPECT_EQ(log.events_of("layer_end")[0]["iterations"], 1);
  EXPECT_EQ(m.concept_name(1, 3), "concept-3");
}

TEST(Algorithm1, NeverSelectingStopsAfterTwoIterations) {
  Model m = Model::build(ArchSpec::preset("mnist"), 1);
  NeverAnnotator ann;
  SessionLog log;
  const auto res = run_algorithm1(m, fixture().mnist, ann, quick_config(), log);
  EXPECT_EQ(res.stop_reasons, (std::vector<std::string>{"no_growth", "no_growth"}));
  for (const auto& e : log.events_of("layer_end")) EXPECT_EQ(e["iterations"], 2);
}

TEST(Algorithm1, MaxIterationsBound) {
  Model m = Model::build(ArchSpec::preset("cmnist"), 1);
  class OnePerIteration : public Annotator {
   public:
    std::vector<Annotation> annotate(const Model&, const Query& q) override { return {{q.candidates.back(), "x"}}; }
    Provenance provenance() const override { return Provenance::kHuman; }
  } ann;
  auto cfg = quick_config();
  cfg.max_iterations_per_layer = 3;
  SessionLog log;
  const auto res = run_algorithm1(m, fixture().cmnist, ann, cfg, log);
  EXPECT_EQ(res.stop_reasons[0], "max_iterations");
  EXPECT_EQ(res.selection.selected(1), (std::vector<int>{2, 3, 4}));
}

TEST(Algorithm1, MonotoneSelectionAndFreezeSoundness) {
  Model m = Model::build(ArchSpec::preset("mnist"), 2);
  AlternatingAnnotator ann;
  SessionLog log;
  std::vector<Tensor> snapshot;
  log.set_listener([&](const json& e) {
    if (e["event"] == "layer_end" && e["layer"] == 1) {
      snapshot = {m.conv_weight(1).value, m.conv_bias(1).value};
    }
  });
  auto cfg = quick_config();
  cfg.max_iterations_per_layer = 4;
  run_algorithm1(m, fixture().mnist, ann, cfg, log);
  ASSERT_EQ(snapshot.size(), 2u);
  EXPECT_TRUE(m.conv_weight(1).value.same_bits(snapshot[0]));
  EXPECT_TRUE(m.conv_bias(1).value.same_bits(snapshot[1]));

  // S_i only grows within each layer's loop.
  std::map<int, std::set<int>> seen;
  for (const auto& e : log.events()) {
    if (e["event"] != "freeze") continue;
    const int layer = e["layer"];
    for (int c : e["channels"]) EXPECT_TRUE(seen[layer].insert(c).second) << "channel frozen twice";
  }
  EXPECT_EQ(seen[1].size(), 1u);  // selected at iteration 1, nothing at iteration 2 -> stop
}

TEST(Algorithm1, ReplayReproducesParametersBitExactly) {
  auto cfg = quick_config();
  cfg.max_iterations_per_layer = 3;
  Model a = Model::build(ArchSpec::preset("mnist"), 4);
  AlternatingAnnotator live;
  SessionLog log_a;
  run_algorithm1(a, fixture().mnist, live, cfg, log_a);

  Model b = Model::build(ArchSpec::preset("mnist"), 4);
  ReplayAnnotator replay(log_a.events(), nullptr);
  SessionLog log_b;
  run_algorithm1(b, fixture().mnist, replay, cfg, log_b);
  EXPECT_EQ(a.param_digest(), b.param_digest());
  EXPECT_EQ(log_a.events(), log_b.events());
  EXPECT_TRUE(replay.exhausted());
}

TEST(Algorithm1, ResumeFromTruncatedLogFile) {
  testing::TempDir dir;
  auto cfg = quick_config();
  Model a = Model::build(ArchSpec::preset("mnist"), 6);
  AlternatingAnnotator first;
  {
    SessionLog log(dir / "session.jsonl");
    run_algorithm1(a, fixture().mnist, first, cfg, log);
  }
  // Keep only the events up to and including the first response, as if the
  // process died while waiting for the second answer.
  auto events = SessionLog::parse_lines(dir / "session.jsonl");
  const auto cut = std::find_if(events.begin(), events.end(), [](const json& e) { return e["event"] == "response"; });
  events.erase(cut + 1, events.end());

  Model b = Model::build(ArchSpec::preset("mnist"), 6);
  AlternatingAnnotator second;
  ReplayAnnotator resume(events, &second);
  SessionLog log(dir / "resumed.jsonl");
  run_algorithm1(b, fixture().mnist, resume, cfg, log);
  EXPECT_EQ(a.param_digest(), b.param_digest());
  EXPECT_EQ(second.calls, first.calls - 1);
}

TEST(Algorithm1, ReplayDivergenceIsDetected) {
  std::vector<json> events{
      {{"event", "response"}, {"layer", 1}, {"iteration", 2}, {"provenance", "human"}, {"selections", json::array()}}};
  ReplayAnnotator r(events, nullptr);
  const Model m = Model::build(ArchSpec::preset("cmnist"), 0);
  EXPECT_THROW(r.annotate(m, Query{1, 1, {0, 1}}), ConsistencyError);
  EXPECT_THROW(r.annotate(m, Query{1, 1, {0, 1}}), NotFound);
}

TEST(Algorithm1, RejectsAnnotationsOutsideComplement) {
  class Bad : public Annotator {
   public:
    std::vector<Annotation> annotate(const Model&, const Query&) override { return {{7, "x"}}; }
    Provenance provenance() const override { return Provenance::kHuman; }
  } ann;
  Model m = Model::build(ArchSpec::preset("cmnist"), 1);
  SessionLog log;
  EXPECT_THROW(run_algorithm1(m, fixture().cmnist, ann, quick_config(), log), InvalidArgument);
}

TEST(Algorithm1, PremapSelectionsCarryPoolProvenance) {
  Model m = Model::build(ArchSpec::preset("cmnist"), 1);
  NeverAnnotator ann;
  SessionLog log;
  PreMapper premap = [](const Model&, const Query& q) {
    std::vector<Annotation> out;
    if (q.iteration == 1) out.push_back({1, "pooled-line"});
    return out;
  };
  const auto res = run_algorithm1(m, fixture().cmnist, ann, quick_config(), log, premap);
  ASSERT_TRUE(res.selection.is_selected(1, 1));
  EXPECT_EQ(res.selection.entries(1).at(1).provenance, Provenance::kPool);
  EXPECT_EQ(log.events_of("premap").size(), 2u);
}

// ---- incomplete policy --------------------------------------------------------------------

TEST(IncompletePolicy, FullySelectedModelIsUntouched) {
  for (auto policy : {OnIncomplete::kKeep, OnIncomplete::kPrune}) {
    Model m = Model::build(ArchSpec::preset("cmnist"), 3);
    SelectionState s = SelectionState::for_model(m);
    for (int c = 0; c < 5; ++c) s.add(1, {c, "x", Provenance::kHuman, 1});
    auto cfg = quick_config();
    cfg.on_incomplete = policy;
    const auto before = m.param_digest();
    apply_incomplete_policy(m, s, fixture().cmnist, cfg);
    EXPECT_EQ(m.param_digest(), before);
  }
}

TEST(IncompletePolicy, PruneSilencesUnselectedChannel) {
  Model m = Model::build(ArchSpec::preset("cmnist"), 3);
  m.conv_bias(1).value.fill(0.05f);
  SelectionState s = SelectionState::for_model(m);
  for (int c : {0, 1, 3, 4}) s.add(1, {c, "x", Provenance::kHuman, 1});
  auto cfg = quick_config();
  cfg.on_incomplete = OnIncomplete::kPrune;
  SessionLog log;
  apply_incomplete_policy(m, s, fixture().cmnist, cfg, &log);
  EXPECT_TRUE(m.is_frozen(1, 2));
  for (int i = 0; i < 20; ++i) {
    const auto act = m.channel_activation(fixture().cmnist.image(i), 1, 2);
    for (float v : act.map.data()) ASSERT_EQ(v, 0.0f);
  }
  EXPECT_EQ(log.events_of("prune_finetune").size(), 2u);
}

TEST(IncompletePolicy, KeepReportsCompleteness) {
  Model m = Model::build(ArchSpec::preset("cmnist"), 3);
  SelectionState s = SelectionState::for_model(m);
  for (int c : {0, 1, 2, 4}) s.add(1, {c, "x", Provenance::kHuman, 1});
  SessionLog log;
  const auto before = m.param_digest();
  apply_incomplete_policy(m, s, fixture().cmnist, quick_config(), &log);
  EXPECT_EQ(m.param_digest(), before);
  const auto ev = log.events_of("policy").at(0);
  EXPECT_DOUBLE_EQ(ev["completeness"][0]["ratio"].get<double>(), 0.8);
}

// ---- conventional training ---------------------------------------------------------------------

TEST(Conventional, BaselineLearnsAndSparseShrinksActivations) {
  ConventionalConfig cfg;
  cfg.epochs = 3;
  cfg.batch = 32;
  cfg.seed = 2;
  Model base = Model::build(ArchSpec::preset("cmnist"), 8);
  Model sparse = base;
  SessionLog lb, ls;
  train_conventional(base, fixture().cmnist, Variant::kBaseline, cfg, &lb);
  train_conventional(sparse, fixture().cmnist, Variant::kSparse, cfg, &ls);
  const auto eb = lb.events_of("epoch"), es = ls.events_of("epoch");
  EXPECT_LT(eb.back()["pred"].get<double>(), eb.front()["pred"].get<double>());
  EXPECT_EQ(eb.back()["sparsity"].get<double>(), 0.0);
  EXPECT_GT(es.back()["sparsity"].get<double>(), 0.0);
  const auto x = make_batch(fixture().cmnist, 0, 64).images;
  double act_b = 0, act_s = 0;
  const auto ib = base.infer(x), is = sparse.infer(x);
  for (float v : ib.layers[0].post_pool.data()) act_b += v;
  for (float v : is.layers[0].post_pool.data()) act_s += v;
  EXPECT_LT(act_s, act_b);
  EXPECT_THROW(train_conventional(base, fixture().cmnist, Variant::kOurs, cfg), InvalidArgument);
}

TEST(Conventional, CancellationStopsTraining) {
  Model m = Model::build(ArchSpec::preset("cmnist"), 8);
  RunHooks hooks;
  hooks.cancelled = [] { return true; };
  EXPECT_THROW(train_conventional(m, fixture().cmnist, Variant::kBaseline, ConventionalConfig{}, nullptr, hooks),
               Cancelled);
}

}  // namespace
}  // namespace lucid
