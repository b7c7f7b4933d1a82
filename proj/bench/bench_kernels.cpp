// Serial twins vs OpenMP kernels, plus decoding with and without the hook.
// Thread count follows OMP_NUM_THREADS.

#include <benchmark/benchmark.h>

#include <random>

#include "dleaf/diagnostics.hpp"
#include "dleaf/engine.hpp"
#include "dleaf/kernels.hpp"
#include "dleaf/model.hpp"
#include "dleaf/planted.hpp"

namespace {

using namespace dleaf;

Vector noise(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Vector v(n);
  for (double& x : v) x = g(rng);
  return v;
}

Matrix noise_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  Matrix m(r, c);
  const Vector v = noise(r * c, seed);
  std::copy(v.begin(), v.end(), m.data().begin());
  return m;
}

template <bool Parallel>
void BM_Matvec(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Vector x = noise(n, 1);
  const Matrix w = noise_matrix(n, n, 2);
  Vector y(n);
  for (auto _ : state) {
    if constexpr (Parallel) kernels::matvec(x, w, y);
    else kernels::serial::matvec(x, w, y);
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(n * n));
}
BENCHMARK(BM_Matvec<false>)->Name("matvec/serial")->RangeMultiplier(4)->Range(64, 1024);
BENCHMARK(BM_Matvec<true>)->Name("matvec/omp")->RangeMultiplier(4)->Range(64, 1024);

template <bool Parallel>
void BM_Attention(benchmark::State& state) {
  const auto keys = static_cast<std::size_t>(state.range(0));
  const std::size_t d = 256, heads = 8;
  const Vector q = noise(d, 3), k = noise(keys * d, 4), v = noise(keys * d, 5);
  Matrix probs(heads, keys);
  Vector out(d);
  for (auto _ : state) {
    if constexpr (Parallel) {
      kernels::attention_probs(q, k, keys, heads, probs);
      kernels::attention_mix(probs, v, out);
    } else {
      kernels::serial::attention_probs(q, k, keys, heads, probs);
      kernels::serial::attention_mix(probs, v, out);
    }
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK(BM_Attention<false>)->Name("attention/serial")->RangeMultiplier(4)->Range(64, 4096);
BENCHMARK(BM_Attention<true>)->Name("attention/omp")->RangeMultiplier(4)->Range(64, 4096);

template <bool Parallel>
void BM_LayerMetrics(benchmark::State& state) {
  PlantedOptions opt;
  opt.steps = static_cast<std::size_t>(state.range(0));
  const PlantedTask task = planted_task(SyntheticScene{}, 7, opt);
  for (auto _ : state) {
    auto table = Parallel ? layer_metrics(task.traces) : layer_metrics_serial(task.traces);
    benchmark::DoNotOptimize(table.liae.data().data());
  }
}
BENCHMARK(BM_LayerMetrics<false>)->Name("layer_metrics/serial")->Arg(100)->Arg(500);
BENCHMARK(BM_LayerMetrics<true>)->Name("layer_metrics/omp")->Arg(100)->Arg(500);

void BM_Decode(benchmark::State& state) {
  ModelConfig mc;
  mc.end_token.reset();
  const Model model = Model::init(mc);
  std::vector<std::size_t> ids(mc.image_span.end + 4);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = (i * 7) % mc.vocab_size;
  const TokenSequence prompt{ids, mc.image_span};
  DecodeOptions opts;
  opts.max_new_tokens = 32;
  opts.keep_steps = false;
  const bool hooked = state.range(0) != 0;
  for (auto _ : state) {
    DleafHook hook(DleafConfig{});
    auto r = greedy_decode(model, prompt, hooked ? &hook : nullptr, opts);
    benchmark::DoNotOptimize(r.tokens.data());
  }
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_Decode)->Name("decode/baseline")->Arg(0)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Decode)->Name("decode/dleaf")->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
