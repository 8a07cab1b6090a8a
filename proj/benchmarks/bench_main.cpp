#include <benchmark/benchmark.h>

#include <random>

#include "gradmatch/autodiff.hpp"
#include "gradmatch/condenser.hpp"
#include "gradmatch/models.hpp"
#include "gradmatch/random.hpp"

using namespace gradmatch;
using ad::Var;

namespace {

Tensor randn(Shape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  Tensor t(std::move(s));
  for (double& v : t.data()) v = g(rng);
  return t;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Var a(randn({n, n}, 1)), b(randn({n, n}, 2));
  for (auto _ : state) benchmark::DoNotOptimize(ad::matmul(a, b).value().raw());
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256);

// One convnet_lite layer at MNIST resolution: 32 filters over a batch of 64.
void BM_Conv2dForward(benchmark::State& state) {
  const auto cin = static_cast<std::size_t>(state.range(0));
  const Var x(randn({64, cin, 28, 28}, 1)), k(randn({32, cin, 3, 3}, 2));
  for (auto _ : state) benchmark::DoNotOptimize(ad::conv2d(x, k).value().raw());
}
BENCHMARK(BM_Conv2dForward)->Arg(1)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_Conv2dBackward(benchmark::State& state) {
  Var x(randn({64, 1, 28, 28}, 1), true), k(randn({32, 1, 3, 3}, 2), true);
  const Var in[] = {x, k};
  for (auto _ : state) {
    const auto g = ad::grad(ad::sum(ad::conv2d(x, k)), in);
    benchmark::DoNotOptimize(g[1].value().raw());
  }
}
BENCHMARK(BM_Conv2dBackward)->Unit(benchmark::kMillisecond);

// A full synthetic-set update (meta-gradient through the per-class network
// gradients) for convnet_lite on 10-class, 28x28 inputs.
void BM_MetaGradientStep(benchmark::State& state) {
  models::ModelSpec spec;
  const auto ipc = static_cast<std::size_t>(state.range(0));
  const std::size_t per_class = 32;
  Tensor images = randn({10 * per_class, 1, 28, 28}, 3);
  std::vector<int> labels;
  for (int c = 0; c < 10; ++c) labels.insert(labels.end(), per_class, c);
  const auto real = data::make_dataset(std::move(images), std::move(labels), 10, data::NormStats::identity(1));
  condense::CondenseConfig cfg;
  cfg.ipc = ipc;
  cfg.real_batch_per_class = 16;
  condense::SyntheticState st{data::init_synthetic(real, ipc, data::InitMode::noise, 4), {}};
  const auto theta = models::init_params(spec, 5);
  Rng rng(6);
  std::size_t counter = 0;
  for (auto _ : state) benchmark::DoNotOptimize(condense::synthetic_step(st, real, spec, theta, cfg, counter++, rng).loss);
}
BENCHMARK(BM_MetaGradientStep)->Arg(1)->Arg(10)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
