#include <benchmark/benchmark.h>

#include <random>

#include "lucid/attacks.hpp"
#include "lucid/autodiff.hpp"
#include "lucid/model.hpp"
#include "lucid/train.hpp"

using namespace lucid;

namespace {

Tensor random_images(int n, int c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Tensor x({n, c, 28, 28});
  for (auto& v : x.data()) v = u(rng);
  return x;
}

std::vector<int> random_labels(int n, int classes) {
  std::vector<int> y(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) y[static_cast<std::size_t>(i)] = i % classes;
  return y;
}

const char* preset_name(int i) { return i == 0 ? "cmnist" : "mnist"; }

void BM_Conv2dForwardBackward(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const Tensor x = random_images(n, 3, 1);
  const Parameter w("w", Tensor({16, 3, 5, 5}, 0.01f));
  const Parameter b("b", Tensor({16}));
  for (auto _ : state) {
    Tape tape;
    auto y = conv2d(tape.input("x", x), tape.param(w), tape.param(b), 1);
    auto g = tape.backward(sum(y));
    benchmark::DoNotOptimize(g);
  }
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_Conv2dForwardBackward)->Arg(32)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  const ArchSpec arch = ArchSpec::preset(preset_name(static_cast<int>(state.range(0))));
  Model model = Model::build(arch, 3);
  const int n = 128;
  const Tensor x = random_images(n, arch.input_channels, 4);
  const auto y = random_labels(n, arch.classes);
  const std::vector<int> sel{0}, unsel{1, 2};
  Adam adam;
  for (auto _ : state) {
    Tape tape;
    auto trace = model.forward(tape, tape.input("x", x));
    auto terms = loss_total(trace, y, 1, sel, unsel, 0.8f, 0.1f);
    auto grads = tape.backward(terms.total);
    adam.step(model.params(), grads, 1e-3f);
  }
  state.SetLabel(arch.name);
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_TrainStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_Infer(benchmark::State& state) {
  const ArchSpec arch = ArchSpec::preset("mnist");
  const Model model = Model::build(arch, 5);
  const Tensor x = random_images(256, arch.input_channels, 6);
  for (auto _ : state) benchmark::DoNotOptimize(model.infer(x));
  state.SetItemsProcessed(state.iterations() * 256);
}
BENCHMARK(BM_Infer)->Unit(benchmark::kMillisecond);

void BM_Attack(benchmark::State& state) {
  const ArchSpec arch = ArchSpec::preset("mnist");
  const Model model = Model::build(arch, 7);
  const int n = 64;
  const Tensor x = random_images(n, arch.input_channels, 8);
  const auto y = random_labels(n, arch.classes);
  const auto kind = state.range(0) == 0 ? AttackKind::kPgd : AttackKind::kCw;
  const AttackConfig cfg = AttackConfig::defaults(kind, 0.1f, 0);
  for (auto _ : state) benchmark::DoNotOptimize(attack(model_logits(model), x, y, cfg));
  state.SetLabel(attack_name(kind));
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_Attack)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
