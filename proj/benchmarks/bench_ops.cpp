#include <benchmark/benchmark.h>

#include "retinet/model.hpp"
#include "retinet/ops.hpp"
#include "retinet/rng.hpp"

using namespace retinet;

namespace {

Tensor random_input(const Shape& shape, std::uint64_t seed) {
  Tensor t(shape);
  Xoshiro256pp rng(seed);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  return t;
}

// args: channels, spatial size
void BM_Conv3x3(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0)), hw = static_cast<std::size_t>(state.range(1));
  const ops::ConvSpec spec{c, 3, 3, 1, 1, ops::Padding::same, 1};
  const Tensor x = random_input({1, c, hw, hw}, 1), w = random_input({c, c, 3, 3}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d(x, w, nullptr, spec));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(c * c * 9 * hw * hw));
}
BENCHMARK(BM_Conv3x3)->Args({32, 56})->Args({64, 28})->Unit(benchmark::kMillisecond);

void BM_Pointwise(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0)), hw = static_cast<std::size_t>(state.range(1));
  const ops::ConvSpec spec{6 * c, 1, 1, 1, 1, ops::Padding::same, 1};
  const Tensor x = random_input({1, c, hw, hw}, 3), w = random_input({6 * c, c, 1, 1}, 4);
  for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d(x, w, nullptr, spec));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(6 * c * c * hw * hw));
}
BENCHMARK(BM_Pointwise)->Args({24, 56})->Args({64, 14})->Unit(benchmark::kMillisecond);

void BM_Depthwise(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0)), hw = static_cast<std::size_t>(state.range(1));
  const auto stride = static_cast<std::size_t>(state.range(2));
  const ops::ConvSpec spec{c, 3, 3, stride, stride, ops::Padding::same, c};
  const Tensor x = random_input({1, c, hw, hw}, 5), w = random_input({c, 1, 3, 3}, 6);
  for (auto _ : state) benchmark::DoNotOptimize(ops::depthwise_conv2d(x, w, nullptr, spec));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(c * 9 * hw * hw / (stride * stride)));
}
BENCHMARK(BM_Depthwise)->Args({144, 56, 1})->Args({144, 56, 2})->Args({960, 7, 1})->Unit(benchmark::kMillisecond);

// arg: batch size
void BM_MobileNetV2Forward(benchmark::State& state) {
  const Model model = build_model(ModelConfig{}, 1);
  const Tensor x = random_input({static_cast<std::size_t>(state.range(0)), 3, 224, 224}, 7);
  for (auto _ : state) benchmark::DoNotOptimize(model.infer(x));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_MobileNetV2Forward)->Arg(1)->Arg(4)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
