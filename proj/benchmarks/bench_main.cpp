#include <benchmark/benchmark.h>

#include "egn/config.hpp"
#include "egn/index.hpp"
#include "egn/model.hpp"
#include "egn/objectives.hpp"
#include "egn/rng.hpp"

namespace {

using namespace egn;

Tensor random_tensor(Shape shape, Rng& rng, double lo, double hi) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v));
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Tensor a = random_tensor({n, n}, rng, -1.0, 1.0), b = random_tensor({n, n}, rng, -1.0, 1.0);
  NoGradScope ng;
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

ModelInput batch_input(const ModelConfig& c, std::size_t batch, Rng& rng) {
  ModelInput in;
  in.images = random_tensor({batch, 3, c.image_size, c.image_size}, rng, 0.0, 1.0);
  in.query_views = random_tensor({batch, c.style_dim}, rng, -1.0, 1.0);
  in.exemplar_views = random_tensor({batch * c.num_exemplars, c.style_dim}, rng, -1.0, 1.0);
  in.exemplar_targets = random_tensor({batch * c.num_exemplars, c.num_genes}, rng, 0.0, 1.0);
  return in;
}

// Default run-config model, one batch of 16.
void BM_ModelForward(benchmark::State& state) {
  const ModelConfig c = RunConfig{}.model_config();
  const EgnModel model(c, static_cast<Variant>(state.range(0)), 1);
  Rng rng(2);
  const ModelInput in = batch_input(c, 16, rng);
  NoGradScope ng;
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(in));
  state.SetLabel(variant_name(model.variant()));
}
BENCHMARK(BM_ModelForward)
    ->Arg(static_cast<int>(Variant::kFull))
    ->Arg(static_cast<int>(Variant::kBackboneOnly))
    ->Unit(benchmark::kMillisecond);

void BM_ModelTrainStep(benchmark::State& state) {
  const ModelConfig c = RunConfig{}.model_config();
  EgnModel model(c, Variant::kFull, 1);
  Rng rng(3);
  const ModelInput in = batch_input(c, 16, rng);
  const Tensor target = random_tensor({16, c.num_genes}, rng, 0.0, 1.0);
  for (auto _ : state) {
    model.parameters().zero_grad();
    Tape tape;
    TapeScope scope(tape);
    backward(loss_total(model.forward(in), target));
  }
}
BENCHMARK(BM_ModelTrainStep)->Unit(benchmark::kMillisecond);

void BM_IndexQuery(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const std::size_t d = 64;
  Rng rng(4);
  ExemplarIndex index(d, 16);
  std::vector<double> view(d), y(16, 0.5);
  for (std::size_t i = 0; i < n; ++i) {
    for (double& v : view) v = rng.normal();
    index.add(i, i % 50, view, y);
  }
  for (double& v : view) v = rng.normal();
  for (auto _ : state) benchmark::DoNotOptimize(index.query(view, 0, 9, Metric::kL2));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_IndexQuery)->Arg(1000)->Arg(5000)->Arg(30000);

}  // namespace

BENCHMARK_MAIN();
