#pragma once

// Numerical check of the link between the DPO gradient at initialisation and
// attention fusion, on a linear-logit (logistic) output model
//   pi_W(y | x) = exp(o_y^T W x) / sum_y' exp(o_y'^T W x).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "dleaf/engine.hpp"
#include "dleaf/tensor.hpp"

namespace dleaf::dpo {

// outputs holds one classification vector o_y per row (V x d).
struct LogisticModel {
  Matrix weights;  // d x d
  Matrix outputs;  // V x d
};

// "positive" is the preferred continuation, "negative" the hallucinated one.
struct PreferencePair {
  Vector x_positive;
  Vector x_negative;
  std::size_t y_positive = 0;
  std::size_t y_negative = 0;
};

Vector probabilities(const Matrix& weights, const Matrix& outputs, std::span<const double> x);
double logistic_prob(const LogisticModel& model, std::span<const double> x, std::size_t y);
double log_prob(const Matrix& weights, const Matrix& outputs, std::span<const double> x, std::size_t y);

// -mean log sigmoid(beta * [(log pi_W - log pi_ref)(y+|x+) - (log pi_W - log pi_ref)(y-|x-)]).
double dpo_loss(const Matrix& weights, const Matrix& reference, const Matrix& outputs,
                std::span<const PreferencePair> pairs, double beta);

enum class GradientForm {
  simplified,  // -(beta/N) sum (o_{y+} x+^T - o_{y-} x-^T), no normaliser terms
  exact,             // true gradient at W = W_ref, softmax expectations and sigma'(0) included
};

// Gradient with respect to W laid out like W (d x d), i.e. entry (i, j) is
// dL/dW_ij, so o x^T terms appear as outer products o_i x_j.
Matrix analytic_grad_init(const Matrix& reference, const Matrix& outputs,
                          std::span<const PreferencePair> pairs, double beta, GradientForm form);

// Exact gradient at an arbitrary W.
Matrix dpo_grad(const Matrix& weights, const Matrix& reference, const Matrix& outputs,
                std::span<const PreferencePair> pairs, double beta);

// Central differences, one entry at a time.
Matrix fd_grad(const std::function<double(const Matrix&)>& loss, const Matrix& at, double eps);

double frobenius_norm(const Matrix& m);
// ||a - reference||_F / ||reference||_F (absolute error when reference is zero).
double relative_frobenius_error(const Matrix& a, const Matrix& reference);

struct DpoInstance {
  LogisticModel reference;
  std::vector<PreferencePair> pairs;
  double beta = 0.5;
};

// Seeded random instance. With shared_context, x+ = x- per pair.
DpoInstance random_instance(std::uint64_t seed, std::size_t dim, std::size_t vocab,
                            std::size_t num_pairs, bool shared_context, double beta = 0.5);

// One attention layer followed by a residual ReLU feed-forward block,
// where the layer's weakest heads are fused toward its best head.
struct ToyLayer {
  Matrix attention;  // H x K, stochastic rows
  Matrix values;     // K x d
  ImageSpan span;
  HeadSelection selection;
  Matrix w_in;       // d x f
  Vector b_in;
  Matrix w_out;      // f x d
  Vector b_out;
};

Vector toy_layer_output(const ToyLayer& layer, double gamma);

struct FeatureGapInstance {
  ToyLayer layer;
  Vector x_preferred;  // the layer output with the corrected heads fully replaced (gamma = 1)
};

FeatureGapInstance make_feature_gap_instance(std::uint64_t seed, std::size_t dim = 8,
                                             std::size_t heads = 4, std::size_t keys = 12);

// ||output(gamma) - x_preferred|| for each gamma.
Vector feature_gap_demo(const ToyLayer& layer, std::span<const double> x_preferred,
                        std::span<const double> gammas);

struct DpoCheckOptions {
  std::uint64_t seed = 7;
  std::size_t instances = 20;
  std::size_t dim = 8;
  std::size_t vocab = 16;
  std::size_t pairs = 4;
  double beta = 0.5;
  double fd_eps = 1e-5;
  Vector gamma_grid{0.0, 0.25, 0.5, 0.75, 1.0};
};

struct DpoCheckReport {
  double max_init_loss_error = 0.0;     // |L(W_ref) - ln 2|
  double max_fd_relative_error = 0.0;   // exact analytic vs central differences
  double max_shared_ratio_error = 0.0;  // |exact / simplified - 1/2| over entries
  double mean_distinct_discrepancy = 0.0;  // ||exact - simplified/2||_F / ||exact||_F, x+ != x-
  Vector feature_gap;
  bool feature_gap_monotone = false;
  bool loss_ok = false, gradient_ok = false, ratio_ok = false;
  bool passed() const { return loss_ok && gradient_ok && ratio_ok && feature_gap_monotone; }
};

inline constexpr double kInitLossTolerance = 1e-12;
inline constexpr double kFdTolerance = 1e-5;
inline constexpr double kRatioTolerance = 1e-9;

DpoCheckReport run_dpo_check(const DpoCheckOptions& options = {});

}  // namespace dleaf::dpo
