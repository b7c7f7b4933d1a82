#pragma once

// Tokens-per-second measurement of greedy decoding with and without a hook.

#include <cstddef>
#include <functional>
#include <optional>

#include "dleaf/engine.hpp"
#include "dleaf/model.hpp"

namespace dleaf {

inline constexpr std::size_t kMinMeasuredTokens = 100;
inline constexpr std::size_t kMinRepetitions = 5;

// Runs one decode and returns the number of tokens it generated.
using DecodeWorkload = std::function<std::size_t()>;

struct ThroughputStats {
  Vector tokens_per_second;  // one entry per measured repetition
  double median = 0.0;
  std::size_t tokens_per_run = 0;
};

struct ThroughputComparison {
  ThroughputStats baseline;
  ThroughputStats candidate;
  double overhead = 0.0;  // 1 - candidate / baseline
};

double median(Vector values);
double throughput_overhead(double baseline_tps, double candidate_tps);

// Alternates baseline and candidate runs after `warmup` unmeasured rounds.
// MeasurementError when a run yields fewer than kMinMeasuredTokens tokens or
// repetitions < kMinRepetitions. Runs with one OpenMP thread.
ThroughputComparison compare_throughput(const DecodeWorkload& baseline, const DecodeWorkload& candidate,
                                        std::size_t repetitions = kMinRepetitions,
                                        std::size_t warmup = 1);

// Greedy decoding of `tokens` tokens with no hook versus with a fresh hook
// built from `config` (nullopt compares the baseline against itself). The two
// decodes are interleaved token by token so slow machine drift lands on both;
// each repetition yields one tokens-per-second figure per arm. The end token
// is ignored. MeasurementError when tokens or repetitions are below the
// minimums or the run would exceed max_positions.
ThroughputComparison measure_hook_overhead(const Model& model, const TokenSequence& prompt,
                                           const std::optional<DleafConfig>& config,
                                           std::size_t tokens,
                                           std::size_t repetitions = kMinRepetitions);

}  // namespace dleaf
