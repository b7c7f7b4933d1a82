#include "dleaf/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "dleaf/error.hpp"
#include "dleaf/kernels.hpp"

namespace dleaf {

double liaf(const MamVector& mam) {
  double total = 0.0;
  for (double v : mam.values) total += v;
  return total;
}

double lias(double liae, double liaf, double alpha) { return alpha * liae - (1.0 - alpha) * liaf; }

double iae(const AttentionSnapshot& snapshot, std::size_t head, ImageSpan span) {
  if (head >= snapshot.num_heads()) throw ShapeError("iae: head index out of range");
  if (span.empty() || span.end > snapshot.num_keys()) throw SpanError("iae: bad image span");
  const auto row = snapshot.rows.row(head).subspan(span.begin, span.size());
  return normalized_entropy(row);
}

double ias(double iaf, double iae, double beta) { return beta * iaf + (1.0 - beta) * iae; }

Vector logit_lens(std::span<const double> residual, const LayerNormParams& norm,
                  const Matrix& unembedding, std::span<const double> bias, double eps) {
  if (bias.size() != unembedding.cols()) throw ShapeError("logit_lens: bias size mismatch");
  const Vector normed = layer_norm(residual, norm, eps);
  Vector logits(unembedding.cols());
  kernels::matvec(normed, unembedding, logits);
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] += bias[i];
  return logits;
}

Vector logit_lens(const Model& model, std::span<const double> residual) {
  return logit_lens(residual, model.final_norm(), model.unembedding(), model.unembedding_bias(),
                    model.config().layer_norm_eps);
}

double percentile(std::span<const double> values, double p) {
  if (values.empty()) throw EmptyInputError("percentile of an empty set");
  if (!(p >= 0.0 && p <= 100.0)) throw ConfigError("percentile must lie in [0, 100]");
  Vector sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double rank = p / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

Vector percentile_logit_trajectory(const Model& model, const StepResult& step, double p) {
  Vector out;
  out.reserve(step.hidden.residuals.size());
  for (const auto& x : step.hidden.residuals) out.push_back(percentile(logit_lens(model, x), p));
  return out;
}

Matrix percentile_logit_trajectories(const Model& model, std::span<const StepResult> steps, double p) {
  Matrix out(steps.size(), model.config().num_layers);
  for (std::size_t s = 0; s < steps.size(); ++s) {
    const Vector row = percentile_logit_trajectory(model, steps[s], p);
    if (row.size() != out.cols()) throw ShapeError("step has the wrong number of residuals");
    std::copy(row.begin(), row.end(), out.row(s).begin());
  }
  return out;
}

SuppressionMode parse_suppression_mode(const std::string& s) {
  if (s == "none") return SuppressionMode::none;
  if (s == "top") return SuppressionMode::top;
  if (s == "bottom") return SuppressionMode::bottom;
  if (s == "random") return SuppressionMode::random;
  throw ConfigError("unknown suppression mode '" + s + "'");
}

std::vector<std::size_t> suppressed_heads(const AttentionSnapshot& snapshot,
                                          const SuppressionSpec& spec, ImageSpan span) {
  if (!(spec.fraction >= 0.0 && spec.fraction <= 1.0)) {
    throw ConfigError("suppression fraction must lie in [0, 1]");
  }
  const std::size_t heads = snapshot.num_heads();
  const auto count = static_cast<std::size_t>(std::floor(spec.fraction * static_cast<double>(heads)));
  if (spec.mode == SuppressionMode::none || count == 0) return {};

  std::vector<std::size_t> order(heads);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (spec.mode == SuppressionMode::random) {
    std::mt19937_64 rng(spec.rng_seed ^ (0x9E3779B97F4A7C15ULL * (snapshot.layer + 1)));
    std::shuffle(order.begin(), order.end(), rng);
  } else {
    Vector scores(heads);
    for (std::size_t h = 0; h < heads; ++h) scores[h] = iaf(snapshot, h, span);
    if (spec.mode == SuppressionMode::bottom) {
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    } else {
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    }
  }
  order.resize(count);
  std::sort(order.begin(), order.end());
  return order;
}

void suppress_heads(AttentionSnapshot& snapshot, const SuppressionSpec& spec, ImageSpan span) {
  if (span.empty() || span.end > snapshot.num_keys()) throw SpanError("suppress_heads: bad span");
  for (std::size_t h : suppressed_heads(snapshot, spec, span)) {
    for (std::size_t k = span.begin; k < span.end; ++k) snapshot.rows(h, k) = 0.0;
  }
}

namespace {

double slice_mass(const Matrix& slice, std::size_t head) {
  double total = 0.0;
  for (double v : slice.row(head)) total += v;
  return total;
}

void fill_record_metrics(const TraceRecord& rec, std::size_t r, LayerMetricTable& table) {
  for (std::size_t l = 0; l < rec.attention.size(); ++l) {
    const Matrix& slice = rec.attention[l];
    MamVector mam{Vector(slice.cols(), 0.0)};
    for (std::size_t n = 0; n < slice.cols(); ++n) {
      double best = slice(0, n);
      for (std::size_t h = 1; h < slice.rows(); ++h) best = std::max(best, slice(h, n));
      mam.values[n] = best;
    }
    double mass = 0.0, entropy = 0.0;
    for (std::size_t h = 0; h < slice.rows(); ++h) {
      mass += slice_mass(slice, h);
      entropy += normalized_entropy(slice.row(h));
    }
    const double heads = static_cast<double>(slice.rows());
    table.liae(r, l) = liae(mam);
    table.liaf(r, l) = liaf(mam);
    table.mean_iaf(r, l) = mass / heads;
    table.mean_iae(r, l) = entropy / heads;
  }
}

LayerMetricTable empty_table(const TraceSet& traces) {
  const std::size_t rows = traces.records.size(), cols = traces.header.num_layers;
  return {Matrix(rows, cols), Matrix(rows, cols), Matrix(rows, cols), Matrix(rows, cols)};
}

}  // namespace

LayerMetricTable layer_metrics(const TraceSet& traces) {
  LayerMetricTable table = empty_table(traces);
  kernels::parallel_for(traces.records.size(),
                        [&](std::size_t r) { fill_record_metrics(traces.records[r], r, table); });
  return table;
}

LayerMetricTable layer_metrics_serial(const TraceSet& traces) {
  LayerMetricTable table = empty_table(traces);
  for (std::size_t r = 0; r < traces.records.size(); ++r) {
    fill_record_metrics(traces.records[r], r, table);
  }
  return table;
}

std::vector<std::size_t> global_head_histogram(const TraceSet& traces, std::size_t k) {
  const std::size_t layers = traces.header.num_layers, heads = traces.header.num_heads;
  std::vector<std::size_t> counts(layers, 0);
  if (k == 0) return counts;
  if (k > layers * heads) throw ConfigError("k exceeds the number of (layer, head) pairs");

  Vector mean(layers * heads, 0.0);
  std::size_t used = 0;
  for (const auto& rec : traces.records) {
    if (rec.label != Label::hallucinated) continue;
    ++used;
    for (std::size_t l = 0; l < layers; ++l) {
      for (std::size_t h = 0; h < heads; ++h) mean[l * heads + h] += slice_mass(rec.attention[l], h);
    }
  }
  if (used == 0) throw DegenerateSampleError("no hallucinated records to rank heads over");
  for (double& v : mean) v /= static_cast<double>(used);

  std::vector<std::size_t> order(mean.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return mean[a] < mean[b]; });
  for (std::size_t i = 0; i < k; ++i) ++counts[order[i] / heads];
  return counts;
}

Vector LabelSplitStats::attention_difference() const {
  Vector d(attention_real.size());
  for (std::size_t l = 0; l < d.size(); ++l) d[l] = attention_real[l] - attention_hallucinated[l];
  return d;
}

Vector LabelSplitStats::entropy_difference() const {
  Vector d(entropy_real.size());
  for (std::size_t l = 0; l < d.size(); ++l) d[l] = entropy_real[l] - entropy_hallucinated[l];
  return d;
}

LabelSplitStats label_split_layer_stats(const TraceSet& traces) {
  const std::size_t layers = traces.header.num_layers;
  LabelSplitStats s{Vector(layers, 0.0), Vector(layers, 0.0), Vector(layers, 0.0), Vector(layers, 0.0)};
  std::size_t n_real = 0, n_hall = 0;
  for (const auto& rec : traces.records) {
    if (rec.label == Label::unlabeled) continue;
    const bool real = rec.label == Label::real;
    (real ? n_real : n_hall) += 1;
    Vector& att = real ? s.attention_real : s.attention_hallucinated;
    Vector& ent = real ? s.entropy_real : s.entropy_hallucinated;
    for (std::size_t l = 0; l < layers; ++l) {
      const Matrix& slice = rec.attention[l];
      double mass = 0.0, entropy = 0.0;
      for (std::size_t h = 0; h < slice.rows(); ++h) {
        mass += slice_mass(slice, h);
        entropy += normalized_entropy(slice.row(h));
      }
      att[l] += mass / static_cast<double>(slice.rows());
      ent[l] += entropy / static_cast<double>(slice.rows());
    }
  }
  if (n_real == 0 || n_hall == 0) {
    throw DegenerateSampleError("label split needs at least one real and one hallucinated record");
  }
  for (std::size_t l = 0; l < layers; ++l) {
    s.attention_real[l] /= static_cast<double>(n_real);
    s.entropy_real[l] /= static_cast<double>(n_real);
    s.attention_hallucinated[l] /= static_cast<double>(n_hall);
    s.entropy_hallucinated[l] /= static_cast<double>(n_hall);
  }
  return s;
}

}  // namespace dleaf
