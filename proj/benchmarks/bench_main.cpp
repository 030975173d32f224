#include <benchmark/benchmark.h>

#include <random>

#include "freqattack/attack.hpp"
#include "freqattack/wavelet.hpp"

using namespace freqattack;

namespace {

NdArray<float> random_images(const Shape& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  NdArray<float> a(shape);
  for (float& v : a.data()) v = u(rng);
  return a;
}

const ClassifierModel<float>& desk_cnn() {
  static const auto model = ClassifierModel<float>::initialized(ModelSpec::desk_cnn(), 0);
  return model;
}

void BM_Dwt2(benchmark::State& state) {
  const std::size_t n = state.range(0);
  const auto x = random_images({n, n}, 1);
  for (auto _ : state) benchmark::DoNotOptimize(wavelet::dwt2(x));
}
BENCHMARK(BM_Dwt2)->Arg(32)->Arg(224);

void BM_ReconstructLow(benchmark::State& state) {
  const auto x = random_images({3, 32, 32}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(wavelet::reconstruct_low(x));
}
BENCHMARK(BM_ReconstructLow);

void BM_Conv2dForwardBackward(benchmark::State& state) {
  const std::size_t channels = state.range(0);
  const auto x = random_images({8, channels, 32, 32}, 3);
  const auto w = random_images({channels, channels, 3, 3}, 4);
  for (auto _ : state) {
    Graph<float> g;
    const NodeId in = g.input("x");
    const NodeId weight = g.input("w");
    const NodeId out = g.reduce_sum(g.conv2d(in, weight, std::nullopt, Conv2dParams{1, 1}));
    g.forward({{"x", x}, {"w", w}});
    benchmark::DoNotOptimize(g.backward(out, NdArray<float>::scalar(1.0f)));
  }
}
BENCHMARK(BM_Conv2dForwardBackward)->Arg(16)->Arg(32);

void BM_Embed(benchmark::State& state) {
  const auto x = random_images({std::size_t(state.range(0)), 3, 32, 32}, 5);
  for (auto _ : state) benchmark::DoNotOptimize(desk_cnn().embed(x));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Embed)->Arg(1)->Arg(64);

void BM_SsahIteration(benchmark::State& state) {
  ImageBatch<float> batch{random_images({8, 3, 32, 32}, 6), {0, 1, 2, 3, 4, 5, 6, 7}};
  AttackConfig config;
  config.iterations = 1;
  for (auto _ : state) benchmark::DoNotOptimize(run_ssah(desk_cnn(), batch, config));
  state.SetItemsProcessed(state.iterations() * 8);
}
BENCHMARK(BM_SsahIteration)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
