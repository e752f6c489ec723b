#include <benchmark/benchmark.h>

#include <cmath>
#include <random>
#include <vector>

#include "fedser/features.hpp"
#include "fedser/federation.hpp"
#include "fedser/model.hpp"
#include "fedser/selftrain.hpp"

using namespace fedser;

namespace {

Tensor<float> noise_tensor(std::vector<int> dims, std::uint64_t seed) {
  Tensor<float> t(std::move(dims));
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.0f, 0.5f);
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = dist(rng);
  return t;
}

// Reduced two-block config matching the scale used by the test suite's
// end-to-end runs.
ArchConfig desk_arch() {
  ArchConfig a;
  a.blocks = 2;
  a.channels = {8, 16};
  a.temporal_kernel = 3;
  a.spectral_kernel = 3;
  a.groupnorm_groups = 2;
  a.dropout_rate = 0.0;
  a.attention_kernel = 3;
  a.channel_hidden_divisor = 2;
  return a;
}

AudioClip tone_clip(double seconds) {
  AudioClip clip;
  clip.sample_rate = 16000;
  const auto n = static_cast<std::size_t>(seconds * clip.sample_rate);
  clip.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    clip.samples[i] = 0.4f * std::sin(2.0f * static_cast<float>(M_PI) * 220.0f *
                                      static_cast<float>(i) / 16000.0f);
  return clip;
}

void BM_logmel(benchmark::State& state) {
  const AudioClip clip = tone_clip(static_cast<double>(state.range(0)));
  const FeatureConfig cfg;
  for (auto _ : state) benchmark::DoNotOptimize(compute_logmel(clip, cfg));
  state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_logmel)->Arg(1)->Arg(4)->Unit(benchmark::kMillisecond);

void BM_forward_full_scale(benchmark::State& state) {
  const ArchConfig arch;  // 4 blocks, 16..64 channels
  const auto params = init_params<float>(arch, 4, 1);
  const Tensor<float> batch = noise_tensor({1, 198, 64}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(forward(arch, params, batch, Mode::kEval));
  state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_forward_full_scale)->Unit(benchmark::kMillisecond);

void BM_forward_desk_scale(benchmark::State& state) {
  const ArchConfig arch = desk_arch();
  const auto params = init_params<float>(arch, 4, 1);
  const Tensor<float> batch = noise_tensor({8, 16, 12}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(forward(arch, params, batch, Mode::kEval));
  state.SetItemsProcessed(state.iterations() * 8);
}
BENCHMARK(BM_forward_desk_scale)->Unit(benchmark::kMicrosecond);

void BM_train_step_desk_scale(benchmark::State& state) {
  const ArchConfig arch = desk_arch();
  const auto params = init_params<float>(arch, 4, 1);
  const Tensor<float> labeled = noise_tensor({8, 16, 12}, 4);
  const Tensor<float> unlabeled = noise_tensor({8, 16, 12}, 5);
  const std::vector<int> labels = {0, 1, 2, 3, 0, 1, 2, 3};
  const std::vector<int> pseudo = {3, 2, 1, 0, 3, 2, 1, 0};
  const std::vector<bool> mask(8, true);
  for (auto _ : state)
    benchmark::DoNotOptimize(selftrain_gradient(arch, params, labeled, labels, unlabeled, pseudo,
                                                mask, /*beta=*/1.0, /*dropout_seed=*/7));
  state.SetItemsProcessed(state.iterations() * 16);
}
BENCHMARK(BM_train_step_desk_scale)->Unit(benchmark::kMicrosecond);

void BM_aggregate(benchmark::State& state) {
  const ArchConfig arch;  // full-size parameter sets
  const int k = static_cast<int>(state.range(0));
  std::vector<ParamSet<float>> updates;
  updates.reserve(static_cast<std::size_t>(k));
  for (int d = 0; d < k; ++d)
    updates.push_back(init_params<float>(arch, 4, static_cast<std::uint64_t>(d)));
  std::vector<WeightedUpdate<float>> roster;
  for (int d = 0; d < k; ++d)
    roster.push_back({d, &updates[static_cast<std::size_t>(d)], 40 + d});
  for (auto _ : state) benchmark::DoNotOptimize(aggregate(roster));
  state.SetItemsProcessed(state.iterations() * k);
}
BENCHMARK(BM_aggregate)->Arg(4)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_adam_step(benchmark::State& state) {
  const ArchConfig arch;
  auto params = init_params<float>(arch, 4, 1);
  const auto grads = init_params<float>(arch, 4, 2);
  auto opt = OptimizerState<float>::make(params, 0.001);
  for (auto _ : state) adam_step(params, grads, opt);
  state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_adam_step)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
