#include <benchmark/benchmark.h>

#include "gradleak/attack.hpp"
#include "gradleak/model.hpp"
#include "gradleak/rng.hpp"

namespace {

using namespace gradleak;

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = static_cast<float>(uniform01(rng));
  return t;
}

void BM_Conv2dForwardBackward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const Tensor x = random_tensor({8, c, 28, 28}, 1);
  Tensor w = random_tensor({16, c, 3, 3}, 2);
  w.requires_grad = true;
  for (auto _ : state) {
    Graph g;
    Var y = g.conv2d(g.constant(x), g.leaf(w), {1, 1});
    g.backward(g.sum(y));
    benchmark::DoNotOptimize(w.grad);
    w.grad.reset();
  }
}
BENCHMARK(BM_Conv2dForwardBackward)->Arg(1)->Arg(8);

void BM_ModelGradients(benchmark::State& state) {
  ModelSpec spec;
  spec.arch = static_cast<Architecture>(state.range(0));
  spec.classes = 64;
  const Model model = build_model(spec, 0);
  const Tensor x = random_tensor(model.input_shape(8), 3);
  const std::vector<int> labels{0, 1, 2, 3, 4, 5, 6, 7};
  for (auto _ : state) benchmark::DoNotOptimize(parameter_gradients(model, x, labels));
}
BENCHMARK(BM_ModelGradients)->Arg(0)->Arg(1)->Arg(2)->Unit(benchmark::kMillisecond);

void BM_InversionStep(benchmark::State& state) {
  ModelSpec spec;
  spec.arch = static_cast<Architecture>(state.range(0));
  spec.classes = 64;
  const Model model = build_model(spec, 0);
  ReconstructionTask task;
  task.target.feature = compute_features(model, random_tensor(model.input_shape(1), 4));
  task.target.feature.shape = {model.feature_dim()};
  task.settings.steps = 10;
  task.settings.restarts = 1;
  for (auto _ : state) benchmark::DoNotOptimize(invert_feature(model, task));
  state.SetItemsProcessed(state.iterations() * 10);
}
BENCHMARK(BM_InversionStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_AnalyticHeadGradient(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor p = random_tensor({n, 64}, 5);
  const Tensor r = random_tensor({n, 256}, 6);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % 64);
  for (auto _ : state) benchmark::DoNotOptimize(analytic_head_gradient(p, r, labels));
}
BENCHMARK(BM_AnalyticHeadGradient)->Arg(1)->Arg(8)->Arg(64);

}  // namespace

BENCHMARK_MAIN();
