#include "dleaf/throughput.hpp"

#include <algorithm>
#include <chrono>

#include "dleaf/error.hpp"
#include "dleaf/kernels.hpp"

namespace dleaf {

double median(Vector values) {
  if (values.empty()) throw EmptyInputError("median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t mid = values.size() / 2;
  return values.size() % 2 ? values[mid] : 0.5 * (values[mid - 1] + values[mid]);
}

double throughput_overhead(double baseline_tps, double candidate_tps) {
  if (!(baseline_tps > 0.0)) throw MeasurementError("baseline throughput must be positive");
  return 1.0 - candidate_tps / baseline_tps;
}

namespace {

struct ThreadScope {
  int saved;
  explicit ThreadScope(int n) : saved(kernels::max_threads()) { kernels::set_num_threads(n); }
  ~ThreadScope() { kernels::set_num_threads(saved); }
};

double timed_run(const DecodeWorkload& work, std::size_t& tokens) {
  const auto start = std::chrono::steady_clock::now();
  tokens = work();
  const auto stop = std::chrono::steady_clock::now();
  const double seconds = std::chrono::duration<double>(stop - start).count();
  if (tokens < kMinMeasuredTokens) {
    throw MeasurementError("run generated " + std::to_string(tokens) + " tokens; at least " +
                           std::to_string(kMinMeasuredTokens) + " required");
  }
  if (!(seconds > 0.0)) throw MeasurementError("run finished below clock resolution");
  return static_cast<double>(tokens) / seconds;
}

}  // namespace

ThroughputComparison compare_throughput(const DecodeWorkload& baseline, const DecodeWorkload& candidate,
                                        std::size_t repetitions, std::size_t warmup) {
  if (repetitions < kMinRepetitions) {
    throw MeasurementError("at least " + std::to_string(kMinRepetitions) + " repetitions required");
  }
  ThreadScope single(1);
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < warmup; ++i) {
    timed_run(baseline, tokens);
    timed_run(candidate, tokens);
  }
  ThroughputComparison cmp;
  for (std::size_t i = 0; i < repetitions; ++i) {
    // Alternate which arm goes first so slow drift hits both equally.
    if (i % 2 == 0) {
      cmp.baseline.tokens_per_second.push_back(timed_run(baseline, cmp.baseline.tokens_per_run));
      cmp.candidate.tokens_per_second.push_back(timed_run(candidate, cmp.candidate.tokens_per_run));
    } else {
      cmp.candidate.tokens_per_second.push_back(timed_run(candidate, cmp.candidate.tokens_per_run));
      cmp.baseline.tokens_per_second.push_back(timed_run(baseline, cmp.baseline.tokens_per_run));
    }
  }
  cmp.baseline.median = median(cmp.baseline.tokens_per_second);
  cmp.candidate.median = median(cmp.candidate.tokens_per_second);
  cmp.overhead = throughput_overhead(cmp.baseline.median, cmp.candidate.median);
  return cmp;
}

ThroughputComparison measure_hook_overhead(const Model& model, const TokenSequence& prompt,
                                           const std::optional<DleafConfig>& config,
                                           std::size_t tokens, std::size_t repetitions) {
  if (config) config->validate_for(model.config().num_layers, model.config().num_heads);
  if (tokens < kMinMeasuredTokens) {
    throw MeasurementError("at least " + std::to_string(kMinMeasuredTokens) + " tokens per run required");
  }
  if (repetitions < kMinRepetitions) {
    throw MeasurementError("at least " + std::to_string(kMinRepetitions) + " repetitions required");
  }
  if (prompt.size() + tokens > model.config().max_positions) {
    throw MeasurementError("prompt plus measured tokens exceed max_positions");
  }
  ThreadScope single(1);

  // The two decodes advance in lockstep, one token each, and each arm's
  // forward steps are timed separately.
  struct Arm {
    TokenSequence sequence;
    KvCache cache;
    double seconds = 0.0;
  };
  const auto one_round = [&](bool measured, ThroughputComparison& cmp) {
    std::optional<DleafHook> hook;
    if (config) hook.emplace(*config);
    Arm plain{prompt, KvCache(model)}, hooked{prompt, KvCache(model)};
    for (std::size_t t = 0; t < tokens; ++t) {
      for (int turn = 0; turn < 2; ++turn) {
        const bool hooked_turn = (turn == 0) == (t % 2 == 1);
        Arm& arm = hooked_turn ? hooked : plain;
        AttentionHook* h = hooked_turn && hook ? &*hook : nullptr;
        const auto start = std::chrono::steady_clock::now();
        const StepResult r = forward_step(model, arm.sequence, arm.cache, h);
        arm.sequence.token_ids.push_back(argmax(r.logits));
        arm.seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      }
    }
    if (!measured) return;
    if (!(plain.seconds > 0.0 && hooked.seconds > 0.0)) {
      throw MeasurementError("run finished below clock resolution");
    }
    cmp.baseline.tokens_per_second.push_back(static_cast<double>(tokens) / plain.seconds);
    cmp.candidate.tokens_per_second.push_back(static_cast<double>(tokens) / hooked.seconds);
  };

  ThroughputComparison cmp;
  one_round(false, cmp);  // warmup
  for (std::size_t i = 0; i < repetitions; ++i) one_round(true, cmp);
  cmp.baseline.tokens_per_run = cmp.candidate.tokens_per_run = tokens;
  cmp.baseline.median = median(cmp.baseline.tokens_per_second);
  cmp.candidate.median = median(cmp.candidate.tokens_per_second);
  cmp.overhead = throughput_overhead(cmp.baseline.median, cmp.candidate.median);
  return cmp;
}

}  // namespace dleaf
