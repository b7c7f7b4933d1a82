#pragma once

// Nonparametric statistics used by the trace analyses: Wilcoxon signed-rank
// test, isotonic regression by pool-adjacent-violators, Spearman correlation.

#include <cstddef>
#include <span>
#include <string>

#include "dleaf/tensor.hpp"

namespace dleaf::stats {

enum class Alternative { two_sided, greater, less };
enum class WilcoxonMethod { automatic, exact, normal };

// Up to this many nonzero differences the automatic method is exact.
inline constexpr std::size_t kWilcoxonExactLimit = 25;

std::string to_string(Alternative a);
Alternative parse_alternative(const std::string& s);

struct PairedSample {
  Vector x;
  Vector y;
};

struct TestResult {
  double statistic = 0.0;  // W = sum sign(d_i) R_i
  double p_value = 1.0;
  std::size_t n_effective = 0;
  std::string method;  // "exact" or "normal-approx"
};

// 1-based ranks; tied values share the average of their positions.
Vector average_ranks(std::span<const double> values);

// Zero differences are dropped and |d| ranked with average ranks. The exact
// null distribution of W is built by counting sign assignments; the normal
// approximation uses var = sum R_i^2 (tie-corrected) and a continuity
// correction of one unit of W. DegenerateSampleError when every difference
// is zero.
TestResult wilcoxon_signed_rank(std::span<const double> differences,
                                Alternative alternative = Alternative::two_sided,
                                WilcoxonMethod method = WilcoxonMethod::automatic);
TestResult wilcoxon_signed_rank(const PairedSample& sample,
                                Alternative alternative = Alternative::two_sided,
                                WilcoxonMethod method = WilcoxonMethod::automatic);

// Weighted least-squares non-decreasing fit. EmptyInputError for no data;
// ConfigError for mismatched lengths, negative weights or zero total weight.
Vector isotonic_pava(std::span<const double> y, std::span<const double> w);
Vector isotonic_pava(std::span<const double> y);

// Pearson correlation of average ranks. DegenerateSampleError when n < 2 or
// either input is constant.
double spearman(std::span<const double> x, std::span<const double> y);
// 1 - 6 sum d^2 / (n (n^2 - 1)); only valid without ties (DegenerateSampleError otherwise).
double spearman_rank_difference(std::span<const double> x, std::span<const double> y);

}  // namespace dleaf::stats
