#include <benchmark/benchmark.h>

#include <torch/torch.h>

#include "medvit/conv_encoder.hpp"
#include "medvit/metrics.hpp"
#include "medvit/model.hpp"
#include "medvit/rng.hpp"
#include "medvit/ssl_pretrain.hpp"

using namespace medvit;

namespace {

void single_thread() { torch::set_num_threads(1); }

// One plane of a cubic volume through a desk-size encoder.
void BM_EncoderPlane(benchmark::State& state) {
  single_thread();
  torch::NoGradGuard no_grad;
  EncoderConfig cfg;
  cfg.stem_width = 4;
  cfg.stage_widths = {4, 8, 16, 32};
  cfg.blocks = {1, 1, 1, 1};
  SliceEncoder encoder(cfg);
  const auto n = state.range(0);
  auto slices = torch::rand({n, 1, n, n});
  for (auto _ : state) benchmark::DoNotOptimize(encoder->forward(slices).embeddings);
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_EncoderPlane)->Arg(32)->Arg(48)->Unit(benchmark::kMillisecond);

// Full forward pass of the default classification model.
void BM_ModelForward(benchmark::State& state) {
  single_thread();
  torch::NoGradGuard no_grad;
  ModelConfig cfg;
  cfg.task = TaskSpec{};
  MedicalTransformer model(cfg);
  const auto n = state.range(0);
  auto volume = torch::rand({1, n, n, n});
  for (auto _ : state) benchmark::DoNotOptimize(model->forward(volume));
}
BENCHMARK(BM_ModelForward)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_Mauc(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  std::vector<double> scores;
  std::vector<std::int64_t> labels;
  for (std::size_t i = 0; i < n; ++i) {
    labels.push_back(static_cast<std::int64_t>(i % 3));
    for (int k = 0; k < 3; ++k) scores.push_back(rng.uniform());
  }
  for (auto _ : state) benchmark::DoNotOptimize(mauc(scores, labels, 3));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_Mauc)->Arg(100)->Arg(10000);

void BM_BezierTable(benchmark::State& state) {
  Rng rng(2);
  for (auto _ : state) benchmark::DoNotOptimize(BezierLut(sample_bezier(rng)).table().back());
}
BENCHMARK(BM_BezierTable);

void BM_BezierApply(benchmark::State& state) {
  single_thread();
  Rng rng(3);
  BezierLut lut(sample_bezier(rng));
  const auto n = state.range(0);
  auto volume = torch::rand({1, n, n, n});
  for (auto _ : state) benchmark::DoNotOptimize(lut.apply(volume));
  state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(BM_BezierApply)->Arg(48);

void BM_TripletLoss(benchmark::State& state) {
  auto a = torch::randn({64, 16}), p = torch::randn({64, 16}), n = torch::randn({64, 16});
  for (auto _ : state) benchmark::DoNotOptimize(triplet_loss(a, p, n, 1.0));
}
BENCHMARK(BM_TripletLoss);

}  // namespace
BENCHMARK_MAIN();
