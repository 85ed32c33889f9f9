#include <benchmark/benchmark.h>

#include "osreg/analysis.hpp"
#include "osreg/losses.hpp"
#include "osreg/ops.hpp"
#include "osreg/trainer.hpp"

using namespace osreg;

namespace {

Tensor<float> random_tensor(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<float>(rng.normal());
  return t;
}

void BM_Conv2dForwardBackward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto x = random_tensor({50, c, 16, 16}, 1);
  const auto k = random_tensor({2 * c, c, 3, 3}, 2);
  for (auto _ : state) {
    Graph<float> g;
    auto kv = g.leaf(k, true);
    auto y = conv2d(g.constant(x), kv, 1, 1);
    g.backward(sum(y));
    benchmark::DoNotOptimize(kv.grad().data());
  }
  state.SetItemsProcessed(state.iterations() * 50);
}
BENCHMARK(BM_Conv2dForwardBackward)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_OsLoss(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const auto z = random_tensor({100, m}, 3);
  for (auto _ : state) {
    Graph<float> g;
    auto zv = g.leaf(z, true);
    auto l = os_loss(sphere_project(zv, 3.0f), 16);
    g.backward(l);
    benchmark::DoNotOptimize(zv.grad().data());
  }
}
BENCHMARK(BM_OsLoss)->Arg(64)->Arg(128)->Arg(512);

void BM_TrainStep(benchmark::State& state) {
  const bool os = state.range(0) != 0;
  auto [train, stats] = normalize(synth_dataset(4, 25, 4));
  Model<float> model(ModelConfig::desk(4), 5);
  auto adam = AdamState<float>::zeros_like(model.params());
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 100;
  cfg.ramp_up_epochs = 0;
  cfg.ramp_down_epochs = 0;
  cfg.loss.aux = AuxKind::Amc;
  cfg.loss.lambda1 = 0.1;
  cfg.loss.lambda2 = os ? 0.05 : 0.0;
  SemiSplit split = split_semi(train, 40, 6);
  Dataset probe = subset(train, std::vector<std::size_t>{0});
  for (auto _ : state) benchmark::DoNotOptimize(train_epoch(model, train, split, cfg, 0, adam, &probe));
  state.SetItemsProcessed(state.iterations() * 100);
}
BENCHMARK(BM_TrainStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_Calibration(benchmark::State& state) {
  const std::size_t n = 10000, k = 10;
  Graph<double> g;
  Rng rng(7);
  Tensor<double> logits({n, k});
  for (auto& v : logits.values()) v = rng.normal();
  const auto p = softmax(g.constant(logits)).value();
  std::vector<int> labels(n);
  for (auto& l : labels) l = static_cast<int>(rng.below(k));
  for (auto _ : state) benchmark::DoNotOptimize(calibration(p.values(), k, labels, 15).ece);
}
BENCHMARK(BM_Calibration);

void BM_ChannelCorrelation(benchmark::State& state) {
  Rng rng(8);
  Tensor<double> maps({100, 64, 6, 6});
  for (auto& v : maps.values()) v = rng.normal();
  for (auto _ : state) benchmark::DoNotOptimize(channel_correlation(maps, "conv4").mean_abs);
}
BENCHMARK(BM_ChannelCorrelation)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
