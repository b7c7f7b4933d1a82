#pragma once

// Alternative layer/head metrics, LogitLens, and the attention analyses run
// over traces: head suppression, global weakest-head histogram and
// label-split per-layer statistics.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "dleaf/engine.hpp"
#include "dleaf/model.hpp"
#include "dleaf/trace.hpp"

namespace dleaf {

// Sum of the max-over-heads image attention.
double liaf(const MamVector& mam);
double lias(double liae, double liaf, double alpha);
// Entropy of one head's image-span row normalised over the span.
double iae(const AttentionSnapshot& snapshot, std::size_t head, ImageSpan span);
double ias(double iaf, double iae, double beta);

// LayerNorm(x) W_U + b_U.
Vector logit_lens(std::span<const double> residual, const LayerNormParams& norm,
                  const Matrix& unembedding, std::span<const double> bias, double eps);
// With the model's own final head; equals forward_step logits on the last residual.
Vector logit_lens(const Model& model, std::span<const double> residual);

// p in [0, 100], linear interpolation between closest ranks.
double percentile(std::span<const double> values, double p);

// p-th percentile of the LogitLens logits of every layer's residual.
Vector percentile_logit_trajectory(const Model& model, const StepResult& step, double p);
// One row per step.
Matrix percentile_logit_trajectories(const Model& model, std::span<const StepResult> steps, double p);

enum class SuppressionMode { none, top, bottom, random };
SuppressionMode parse_suppression_mode(const std::string& s);

struct SuppressionSpec {
  SuppressionMode mode = SuppressionMode::none;
  double fraction = 0.15;
  std::uint64_t rng_seed = 0;
};

// Heads whose image-span entries suppress_heads would zero, ascending.
std::vector<std::size_t> suppressed_heads(const AttentionSnapshot& snapshot,
                                          const SuppressionSpec& spec, ImageSpan span);
// Zeros the selected heads' span entries; no renormalisation.
void suppress_heads(AttentionSnapshot& snapshot, const SuppressionSpec& spec, ImageSpan span);

class SuppressionHook : public AttentionHook {
 public:
  explicit SuppressionHook(SuppressionSpec spec) : spec_(spec) {}
  void on_attention(AttentionSnapshot& snapshot, ImageSpan span) override {
    suppress_heads(snapshot, spec_, span);
  }

 private:
  SuppressionSpec spec_;
};

// Bottom-k (layer, head) pairs by mean IAF over hallucinated records, counted
// per layer. Ties rank by (layer, head) order.
std::vector<std::size_t> global_head_histogram(const TraceSet& traces, std::size_t k);

struct LabelSplitStats {
  Vector attention_real, attention_hallucinated;  // mean image mass per layer
  Vector entropy_real, entropy_hallucinated;      // mean IAE per layer
  Vector attention_difference() const;            // real - hallucinated
  Vector entropy_difference() const;
};

LabelSplitStats label_split_layer_stats(const TraceSet& traces);

// Per (record, layer) summary of a trace set. Rows are records, columns layers.
struct LayerMetricTable {
  Matrix liae;
  Matrix liaf;
  Matrix mean_iaf;
  Matrix mean_iae;
};

LayerMetricTable layer_metrics(const TraceSet& traces);
LayerMetricTable layer_metrics_serial(const TraceSet& traces);

}  // namespace dleaf
