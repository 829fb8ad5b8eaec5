#include <benchmark/benchmark.h>

#include <random>

#include "medpeft/conv_adapter.hpp"
#include "medpeft/metrics.hpp"
#include "medpeft/synthetic_cohort.hpp"
#include "medpeft/trainer.hpp"

using namespace medpeft;

namespace {

Tensor<float> noise(std::vector<int64_t> shape, uint64_t seed) {
  Tensor<float> t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d;
  for (auto& v : t.values()) v = d(rng);
  return t;
}

std::vector<Case> cases_at(int64_t side, int n) {
  CohortSpec s;
  s.spatial_shape = {side, side, side};
  s.rng_seed = 3;
  std::vector<Case> out;
  for (int i = 0; i < n; ++i) out.push_back(generate_case(s, i));
  return prepare_cases(std::move(out));
}

}  // namespace

static void BM_TinyForward(benchmark::State& state) {
  const int64_t side = state.range(0);
  auto m = attach_adapters(MedNeXt<float>(ModelConfig::tiny()), AdapterConfig{});
  const auto x = noise({4, side, side, side}, 1);
  for (auto _ : state) benchmark::DoNotOptimize(m.forward(x, false));
  state.SetItemsProcessed(state.iterations() * side * side * side);
}
BENCHMARK(BM_TinyForward)->Arg(16)->Arg(24)->Arg(32)->Unit(benchmark::kMillisecond);

// One optimizer step: arg 0 full fine-tuning, arg 1 PEFT.
static void BM_TrainStep(benchmark::State& state) {
  const auto cases = cases_at(24, 2);
  auto m = attach_adapters(MedNeXt<float>(ModelConfig::tiny()), AdapterConfig{});
  const FreezePolicy policy = state.range(0) ? FreezePolicy::peft() : FreezePolicy::full_ft();
  for (auto _ : state) benchmark::DoNotOptimize(measure_step_seconds(m, cases, policy, 1, 1));
  state.SetLabel(state.range(0) ? "peft" : "full_ft");
}
BENCHMARK(BM_TrainStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

static void BM_GenerateCase(benchmark::State& state) {
  CohortSpec s;
  s.spatial_shape = {state.range(0), state.range(0), state.range(0)};
  s.domain = Domain::Shifted;
  int i = 0;
  for (auto _ : state) benchmark::DoNotOptimize(generate_case(s, i++));
}
BENCHMARK(BM_GenerateCase)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

static void BM_EvaluateCase(benchmark::State& state) {
  const auto c = cases_at(state.range(0), 1).front();
  LabelMap pred = c.labels;
  for (int64_t i = 0; i < static_cast<int64_t>(pred.data.size()); i += 17) pred[i] = 0;
  for (auto _ : state) benchmark::DoNotOptimize(evaluate_case(c.id, pred, c.labels, {1, 1, 1}));
}
BENCHMARK(BM_EvaluateCase)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

static void BM_ConnectedComponents(benchmark::State& state) {
  const int64_t side = state.range(0);
  RegionMask m(Region::WT, {side, side, side});
  std::mt19937_64 rng(5);
  std::bernoulli_distribution b(0.3);
  for (auto& v : m.data) v = b(rng);
  for (auto _ : state) benchmark::DoNotOptimize(connected_components(m));
  state.SetItemsProcessed(state.iterations() * side * side * side);
}
BENCHMARK(BM_ConnectedComponents)->Arg(32)->Arg(64);

BENCHMARK_MAIN();
