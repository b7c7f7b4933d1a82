#include "dleaf/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <vector>

#include "dleaf/error.hpp"

namespace dleaf::stats {

std::string to_string(Alternative a) {
  switch (a) {
    case Alternative::two_sided: return "two-sided";
    case Alternative::greater: return "greater";
    case Alternative::less: return "less";
  }
  return "?";
}

Alternative parse_alternative(const std::string& s) {
  if (s == "two-sided") return Alternative::two_sided;
  if (s == "greater") return Alternative::greater;
  if (s == "less") return Alternative::less;
  throw ConfigError("unknown alternative '" + s + "'");
}

Vector average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  Vector ranks(values.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i + 1;
    while (j < order.size() && values[order[j]] == values[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of i+1 .. j
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = rank;
    i = j;
  }
  return ranks;
}

namespace {

double clamp_p(double p) { return std::clamp(p, 0.0, 1.0); }

// Ranks are multiples of 1/2, so doubled ranks are integers and W is tracked
// exactly in half units.
double exact_p(const Vector& ranks, double w_obs, Alternative alt) {
  std::vector<long> doubled(ranks.size());
  long total = 0;
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    doubled[i] = std::lround(2.0 * ranks[i]);
    total += doubled[i];
  }
  // counts[s] = number of sign assignments whose positive doubled ranks sum to s.
  std::vector<double> counts(static_cast<std::size_t>(total) + 1, 0.0);
  counts[0] = 1.0;
  long reach = 0;
  for (long r : doubled) {
    for (long s = reach; s >= 0; --s) {
      if (counts[static_cast<std::size_t>(s)] != 0.0) {
        counts[static_cast<std::size_t>(s + r)] += counts[static_cast<std::size_t>(s)];
      }
    }
    reach += r;
  }
  const long w2_obs = std::lround(2.0 * w_obs);
  double hits = 0.0;
  for (long s = 0; s <= total; ++s) {
    const double c = counts[static_cast<std::size_t>(s)];
    if (c == 0.0) continue;
    const long w2 = 2 * s - total;
    bool extreme = false;
    switch (alt) {
      case Alternative::two_sided: extreme = std::labs(w2) >= std::labs(w2_obs); break;
      case Alternative::greater: extreme = w2 >= w2_obs; break;
      case Alternative::less: extreme = w2 <= w2_obs; break;
    }
    if (extreme) hits += c;
  }
  return clamp_p(hits / std::ldexp(1.0, static_cast<int>(ranks.size())));
}

double normal_p(const Vector& ranks, double w_obs, Alternative alt) {
  double var = 0.0;
  for (double r : ranks) var += r * r;
  const double sigma = std::sqrt(var);
  switch (alt) {
    case Alternative::two_sided: {
      const double z = std::max(std::fabs(w_obs) - 1.0, 0.0) / sigma;
      return clamp_p(std::erfc(z / std::sqrt(2.0)));
    }
    case Alternative::greater: {
      const double z = (w_obs - 1.0) / sigma;
      return clamp_p(0.5 * std::erfc(z / std::sqrt(2.0)));
    }
    case Alternative::less: {
      const double z = (w_obs + 1.0) / sigma;
      return clamp_p(0.5 * std::erfc(-z / std::sqrt(2.0)));
    }
  }
  return 1.0;
}

}  // namespace

TestResult wilcoxon_signed_rank(std::span<const double> differences, Alternative alternative,
                                WilcoxonMethod method) {
  Vector nonzero;
  for (double d : differences) {
    if (!std::isfinite(d)) throw RangeError("wilcoxon: non-finite difference");
    if (d != 0.0) nonzero.push_back(d);
  }
  if (nonzero.empty()) throw DegenerateSampleError("wilcoxon: every difference is zero");

  Vector magnitudes(nonzero.size());
  for (std::size_t i = 0; i < nonzero.size(); ++i) magnitudes[i] = std::fabs(nonzero[i]);
  const Vector ranks = average_ranks(magnitudes);
  double w = 0.0;
  for (std::size_t i = 0; i < nonzero.size(); ++i) w += nonzero[i] > 0.0 ? ranks[i] : -ranks[i];

  TestResult result;
  result.statistic = w;
  result.n_effective = nonzero.size();
  const bool exact = method == WilcoxonMethod::exact ||
                     (method == WilcoxonMethod::automatic && nonzero.size() <= kWilcoxonExactLimit);
  if (exact) {
    if (nonzero.size() > 60) throw ConfigError("wilcoxon: exact method limited to 60 differences");
    result.p_value = exact_p(ranks, w, alternative);
    result.method = "exact";
  } else {
    result.p_value = normal_p(ranks, w, alternative);
    result.method = "normal-approx";
  }
  return result;
}

TestResult wilcoxon_signed_rank(const PairedSample& sample, Alternative alternative,
                                WilcoxonMethod method) {
  if (sample.x.size() != sample.y.size()) throw ConfigError("wilcoxon: unpaired sample");
  Vector d(sample.x.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = sample.x[i] - sample.y[i];
  return wilcoxon_signed_rank(d, alternative, method);
}

Vector isotonic_pava(std::span<const double> y, std::span<const double> w) {
  if (y.empty()) throw EmptyInputError("isotonic_pava: empty input");
  if (y.size() != w.size()) throw ConfigError("isotonic_pava: weights and values differ in length");
  double total_w = 0.0;
  for (double v : w) {
    if (!(v >= 0.0)) throw ConfigError("isotonic_pava: negative weight");
    total_w += v;
  }
  if (!(total_w > 0.0)) throw ConfigError("isotonic_pava: total weight is zero");

  struct Block {
    double wy, w, y;  // weighted sum, weight, plain sum (for all-zero-weight blocks)
    std::size_t count;
    double value() const { return w > 0.0 ? wy / w : y / static_cast<double>(count); }
  };
  std::vector<Block> blocks;
  blocks.reserve(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    blocks.push_back({w[i] * y[i], w[i], y[i], 1});
    while (blocks.size() > 1 && blocks[blocks.size() - 2].value() > blocks.back().value()) {
      Block top = blocks.back();
      blocks.pop_back();
      Block& prev = blocks.back();
      prev.wy += top.wy;
      prev.w += top.w;
      prev.y += top.y;
      prev.count += top.count;
    }
  }
  Vector fit;
  fit.reserve(y.size());
  for (const auto& b : blocks) fit.insert(fit.end(), b.count, b.value());
  return fit;
}

Vector isotonic_pava(std::span<const double> y) {
  const Vector ones(y.size(), 1.0);
  return isotonic_pava(y, ones);
}

namespace {

void check_pair(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ConfigError("spearman: inputs differ in length");
  if (x.size() < 2) throw DegenerateSampleError("spearman: need at least two observations");
  auto constant = [](std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [&](double a) { return a == v[0]; });
  };
  if (constant(x) || constant(y)) throw DegenerateSampleError("spearman: constant input");
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
  check_pair(x, y);
  const Vector rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double spearman_rank_difference(std::span<const double> x, std::span<const double> y) {
  check_pair(x, y);
  const Vector rx = average_ranks(x), ry = average_ranks(y);
  auto has_ties = [](const Vector& r) {
    return std::any_of(r.begin(), r.end(), [](double v) { return v != std::floor(v); }) ||
           std::set<double>(r.begin(), r.end()).size() != r.size();
  };
  if (has_ties(rx) || has_ties(ry)) {
    throw DegenerateSampleError("spearman_rank_difference: ties present");
  }
  const double n = static_cast<double>(x.size());
  double sum_d2 = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) sum_d2 += (rx[i] - ry[i]) * (rx[i] - ry[i]);
  return 1.0 - 6.0 * sum_d2 / (n * (n * n - 1.0));
}

}  // namespace dleaf::stats
