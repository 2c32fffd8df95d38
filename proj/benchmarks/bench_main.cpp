#include <benchmark/benchmark.h>

#include "spotter/engine.hpp"

using namespace spotter;

namespace {

diff::Tensor<float> random_tensor(const diff::Shape& shape, Rng& rng) {
  std::vector<float> v(diff::numel(shape));
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1, 1));
  return diff::Tensor<float>::from_values(shape, std::move(v));
}

void BM_Matmul(benchmark::State& state) {
  Rng rng(1);
  const int n = static_cast<int>(state.range(0));
  const auto a = random_tensor({n, n}, rng), b = random_tensor({n, n}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(diff::matmul(a, b).values().data());
  state.SetItemsProcessed(state.iterations() * 2LL * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256);

void BM_Conv2d3x3(benchmark::State& state) {
  Rng rng(2);
  const int c = static_cast<int>(state.range(0));
  const auto x = random_tensor({8, 16, 16, c}, rng);
  const auto w = random_tensor({3, 3, c, c}, rng), b = random_tensor({c}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(diff::conv2d(x, w, b, 1, 1).values().data());
}
BENCHMARK(BM_Conv2d3x3)->Arg(32)->Arg(64);

void BM_Hungarian(benchmark::State& state) {
  Rng rng(3);
  const int n = static_cast<int>(state.range(0));
  CostMatrix m{n, n + 2, std::vector<double>(static_cast<std::size_t>(n) * (n + 2))};
  for (auto& v : m.costs) v = rng.uniform(-1, 1);
  for (auto _ : state) benchmark::DoNotOptimize(hungarian(m).sigma.data());
}
BENCHMARK(BM_Hungarian)->Arg(2)->Arg(6);

void BM_ForwardBackward(benchmark::State& state) {
  const SpotterModel<float> model(ModelConfig{}, 0);
  const auto sample = synth::generate_sample(synth::GenConfig{}, 1);
  const auto target = build_targets(sample, model.charset(), 8, 8, 16, 16);
  for (auto _ : state) {
    const auto out = model.forward(sample);
    const auto sigma = hungarian(cost_matrix(target, snapshot(out)));
    total_loss(target, out, sigma, LossWeights{}).loss.backward();
  }
}
BENCHMARK(BM_ForwardBackward)->Unit(benchmark::kMillisecond);

void BM_Inference(benchmark::State& state) {
  const SpotterModel<float> model(ModelConfig{}, 0);
  const auto sample = synth::generate_sample(synth::GenConfig{}, 1);
  for (auto _ : state) benchmark::DoNotOptimize(model.infer(sample.height, sample.width, sample.image).size());
}
BENCHMARK(BM_Inference)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
