#include "dleaf/dpo.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "dleaf/error.hpp"

namespace dleaf::dpo {

namespace {

void check_dims(const Matrix& weights, const Matrix& outputs, std::span<const double> x) {
  if (weights.rows() != outputs.cols() || weights.cols() != x.size()) {
    throw ShapeError("logistic model: dimension mismatch");
  }
}

Vector logits(const Matrix& weights, const Matrix& outputs, std::span<const double> x) {
  check_dims(weights, outputs, x);
  Vector wx(weights.rows(), 0.0);
  for (std::size_t i = 0; i < weights.rows(); ++i) {
    for (std::size_t j = 0; j < weights.cols(); ++j) wx[i] += weights(i, j) * x[j];
  }
  Vector out(outputs.rows(), 0.0);
  for (std::size_t y = 0; y < outputs.rows(); ++y) {
    for (std::size_t i = 0; i < outputs.cols(); ++i) out[y] += outputs(y, i) * wx[i];
  }
  return out;
}

double log_sigmoid(double z) { return z >= 0.0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z)); }
double sigmoid(double z) { return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

// Adds scale * (o_y - E_pi[o]) x^T into grad (or scale * o_y x^T when expected is false).
void add_score_gradient(Matrix& grad, const Matrix& weights, const Matrix& outputs,
                        std::span<const double> x, std::size_t y, double scale, bool expected) {
  Vector direction(outputs.row(y).begin(), outputs.row(y).end());
  if (expected) {
    const Vector p = probabilities(weights, outputs, x);
    for (std::size_t v = 0; v < outputs.rows(); ++v) {
      for (std::size_t i = 0; i < direction.size(); ++i) direction[i] -= p[v] * outputs(v, i);
    }
  }
  for (std::size_t i = 0; i < grad.rows(); ++i) {
    for (std::size_t j = 0; j < grad.cols(); ++j) grad(i, j) += scale * direction[i] * x[j];
  }
}

void check_pairs(std::span<const PreferencePair> pairs, const Matrix& outputs) {
  if (pairs.empty()) throw EmptyInputError("dpo: no preference pairs");
  for (const auto& p : pairs) {
    if (p.y_positive >= outputs.rows() || p.y_negative >= outputs.rows()) {
      throw ShapeError("dpo: token outside the vocabulary");
    }
  }
}

}  // namespace

Vector probabilities(const Matrix& weights, const Matrix& outputs, std::span<const double> x) {
  Vector z = logits(weights, outputs, x);
  const double peak = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (double& v : z) {
    v = std::exp(v - peak);
    total += v;
  }
  for (double& v : z) v /= total;
  return z;
}

double logistic_prob(const LogisticModel& model, std::span<const double> x, std::size_t y) {
  const Vector p = probabilities(model.weights, model.outputs, x);
  if (y >= p.size()) throw ShapeError("logistic_prob: token outside the vocabulary");
  return p[y];
}

double log_prob(const Matrix& weights, const Matrix& outputs, std::span<const double> x, std::size_t y) {
  const Vector z = logits(weights, outputs, x);
  if (y >= z.size()) throw ShapeError("log_prob: token outside the vocabulary");
  const double peak = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (double v : z) total += std::exp(v - peak);
  return z[y] - peak - std::log(total);
}

double dpo_loss(const Matrix& weights, const Matrix& reference, const Matrix& outputs,
                std::span<const PreferencePair> pairs, double beta) {
  check_pairs(pairs, outputs);
  double total = 0.0;
  for (const auto& p : pairs) {
    const double pos = log_prob(weights, outputs, p.x_positive, p.y_positive) -
                       log_prob(reference, outputs, p.x_positive, p.y_positive);
    const double neg = log_prob(weights, outputs, p.x_negative, p.y_negative) -
                       log_prob(reference, outputs, p.x_negative, p.y_negative);
    total += log_sigmoid(beta * (pos - neg));
  }
  return -total / static_cast<double>(pairs.size());
}

Matrix analytic_grad_init(const Matrix& reference, const Matrix& outputs,
                          std::span<const PreferencePair> pairs, double beta, GradientForm form) {
  check_pairs(pairs, outputs);
  Matrix grad(reference.rows(), reference.cols());
  const double n = static_cast<double>(pairs.size());
  const bool exact = form == GradientForm::exact;
  // sigma'(0) = 1/2 enters only the exact form.
  const double scale = exact ? -beta / (2.0 * n) : -beta / n;
  for (const auto& p : pairs) {
    add_score_gradient(grad, reference, outputs, p.x_positive, p.y_positive, scale, exact);
    add_score_gradient(grad, reference, outputs, p.x_negative, p.y_negative, -scale, exact);
  }
  return grad;
}

Matrix dpo_grad(const Matrix& weights, const Matrix& reference, const Matrix& outputs,
                std::span<const PreferencePair> pairs, double beta) {
  check_pairs(pairs, outputs);
  Matrix grad(weights.rows(), weights.cols());
  const double n = static_cast<double>(pairs.size());
  for (const auto& p : pairs) {
    const double pos = log_prob(weights, outputs, p.x_positive, p.y_positive) -
                       log_prob(reference, outputs, p.x_positive, p.y_positive);
    const double neg = log_prob(weights, outputs, p.x_negative, p.y_negative) -
                       log_prob(reference, outputs, p.x_negative, p.y_negative);
    const double scale = -beta * sigmoid(-beta * (pos - neg)) / n;
    add_score_gradient(grad, weights, outputs, p.x_positive, p.y_positive, scale, true);
    add_score_gradient(grad, weights, outputs, p.x_negative, p.y_negative, -scale, true);
  }
  return grad;
}

Matrix fd_grad(const std::function<double(const Matrix&)>& loss, const Matrix& at, double eps) {
  if (!(eps > 0.0)) throw ConfigError("fd_grad: eps must be positive");
  Matrix grad(at.rows(), at.cols());
  Matrix probe = at;
  for (std::size_t i = 0; i < at.rows(); ++i) {
    for (std::size_t j = 0; j < at.cols(); ++j) {
      const double original = probe(i, j);
      probe(i, j) = original + eps;
      const double up = loss(probe);
      probe(i, j) = original - eps;
      const double down = loss(probe);
      probe(i, j) = original;
      grad(i, j) = (up - down) / (2.0 * eps);
    }
  }
  return grad;
}

double frobenius_norm(const Matrix& m) {
  double total = 0.0;
  for (double v : m.data()) total += v * v;
  return std::sqrt(total);
}

double relative_frobenius_error(const Matrix& a, const Matrix& reference) {
  if (a.rows() != reference.rows() || a.cols() != reference.cols()) {
    throw ShapeError("relative_frobenius_error: shape mismatch");
  }
  Matrix diff(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) diff(i, j) = a(i, j) - reference(i, j);
  }
  const double ref = frobenius_norm(reference);
  return ref == 0.0 ? frobenius_norm(diff) : frobenius_norm(diff) / ref;
}

DpoInstance random_instance(std::uint64_t seed, std::size_t dim, std::size_t vocab,
                            std::size_t num_pairs, bool shared_context, double beta) {
  if (vocab < 2) throw ConfigError("dpo instance needs at least two tokens");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> token(0, vocab - 1);
  auto gaussian = [&](std::size_t r, std::size_t c, double s) {
    Matrix m(r, c);
    for (double& v : m.data()) v = s * normal(rng);
    return m;
  };
  DpoInstance inst;
  inst.beta = beta;
  inst.reference.weights = gaussian(dim, dim, 0.5);
  inst.reference.outputs = gaussian(vocab, dim, 1.0);
  for (std::size_t k = 0; k < num_pairs; ++k) {
    PreferencePair p;
    p.x_positive.resize(dim);
    for (double& v : p.x_positive) v = normal(rng);
    if (shared_context) {
      p.x_negative = p.x_positive;
    } else {
      p.x_negative.resize(dim);
      for (double& v : p.x_negative) v = normal(rng);
    }
    p.y_positive = token(rng);
    do {
      p.y_negative = token(rng);
    } while (p.y_negative == p.y_positive);
    inst.pairs.push_back(std::move(p));
  }
  return inst;
}

Vector toy_layer_output(const ToyLayer& layer, double gamma) {
  AttentionSnapshot snap{0, layer.attention};
  fuse_heads(snap, layer.selection, gamma, layer.span, false);
  const std::size_t heads = snap.num_heads(), keys = snap.num_keys(), d = layer.values.cols();
  if (layer.values.rows() != keys || d % heads != 0) throw ShapeError("toy layer: bad shapes");
  const std::size_t hd = d / heads;
  Vector mixed(d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t t = 0; t < keys; ++t) {
      for (std::size_t j = 0; j < hd; ++j) mixed[h * hd + j] += snap.rows(h, t) * layer.values(t, h * hd + j);
    }
  }
  Vector hidden(layer.w_in.cols(), 0.0);
  for (std::size_t k = 0; k < hidden.size(); ++k) {
    double acc = layer.b_in[k];
    for (std::size_t i = 0; i < d; ++i) acc += mixed[i] * layer.w_in(i, k);
    hidden[k] = std::max(acc, 0.0);
  }
  Vector out = mixed;
  for (std::size_t i = 0; i < d; ++i) {
    double acc = layer.b_out[i];
    for (std::size_t k = 0; k < hidden.size(); ++k) acc += hidden[k] * layer.w_out(k, i);
    out[i] += acc;
  }
  return out;
}

FeatureGapInstance make_feature_gap_instance(std::uint64_t seed, std::size_t dim, std::size_t heads,
                                             std::size_t keys) {
  if (heads < 2 || dim % heads != 0 || keys < 4) throw ConfigError("feature gap instance: bad shape");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  ToyLayer layer;
  layer.span = {1, keys - 1};
  layer.attention = Matrix(heads, keys);
  // Head 0 focuses on the image span; the rest mostly look at text keys.
  for (std::size_t h = 0; h < heads; ++h) {
    const double image_share = h == 0 ? 0.9 : 0.1 + 0.1 * unit(rng);
    double span_total = 0.0, text_total = 0.0;
    Vector raw(keys);
    for (std::size_t t = 0; t < keys; ++t) {
      raw[t] = 0.1 + unit(rng);
      (t >= layer.span.begin && t < layer.span.end ? span_total : text_total) += raw[t];
    }
    for (std::size_t t = 0; t < keys; ++t) {
      const bool image = t >= layer.span.begin && t < layer.span.end;
      layer.attention(h, t) = image ? image_share * raw[t] / span_total
                                    : (1.0 - image_share) * raw[t] / text_total;
    }
  }
  layer.values = Matrix(keys, dim);
  for (double& v : layer.values.data()) v = normal(rng);

  Vector scores(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t t = layer.span.begin; t < layer.span.end; ++t) scores[h] += layer.attention(h, t);
  }
  layer.selection = select_heads(scores, heads - 1);

  const std::size_t width = 2 * dim;
  const double scale = 0.1 / std::sqrt(static_cast<double>(dim));
  layer.w_in = Matrix(dim, width);
  for (double& v : layer.w_in.data()) v = scale * normal(rng);
  layer.b_in = Vector(width, 0.0);
  layer.w_out = Matrix(width, dim);
  for (double& v : layer.w_out.data()) v = scale * normal(rng);
  layer.b_out = Vector(dim, 0.0);

  FeatureGapInstance inst{layer, {}};
  inst.x_preferred = toy_layer_output(inst.layer, 1.0);
  return inst;
}

Vector feature_gap_demo(const ToyLayer& layer, std::span<const double> x_preferred,
                        std::span<const double> gammas) {
  Vector gaps;
  gaps.reserve(gammas.size());
  for (double g : gammas) {
    const Vector out = toy_layer_output(layer, g);
    if (out.size() != x_preferred.size()) throw ShapeError("feature gap: size mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) total += (out[i] - x_preferred[i]) * (out[i] - x_preferred[i]);
    gaps.push_back(std::sqrt(total));
  }
  return gaps;
}

DpoCheckReport run_dpo_check(const DpoCheckOptions& o) {
  DpoCheckReport r;
  const double ln2 = std::log(2.0);
  double discrepancy = 0.0;
  for (std::size_t k = 0; k < o.instances; ++k) {
    const DpoInstance inst = random_instance(o.seed + k, o.dim, o.vocab, o.pairs, false, o.beta);
    const Matrix& ref = inst.reference.weights;
    const Matrix& out = inst.reference.outputs;
    r.max_init_loss_error =
        std::max(r.max_init_loss_error, std::fabs(dpo_loss(ref, ref, out, inst.pairs, o.beta) - ln2));

    const Matrix exact = analytic_grad_init(ref, out, inst.pairs, o.beta, GradientForm::exact);
    const Matrix numeric = fd_grad(
        [&](const Matrix& w) { return dpo_loss(w, ref, out, inst.pairs, o.beta); }, ref, o.fd_eps);
    r.max_fd_relative_error = std::max(r.max_fd_relative_error, relative_frobenius_error(numeric, exact));

    const Matrix simplified = analytic_grad_init(ref, out, inst.pairs, o.beta, GradientForm::simplified);
    Matrix half = simplified;
    for (double& v : half.data()) v *= 0.5;
    discrepancy += relative_frobenius_error(half, exact);

    const DpoInstance shared = random_instance(o.seed + 1000 + k, o.dim, o.vocab, o.pairs, true, o.beta);
    const Matrix s_exact = analytic_grad_init(shared.reference.weights, shared.reference.outputs,
                                              shared.pairs, o.beta, GradientForm::exact);
    const Matrix s_simple = analytic_grad_init(shared.reference.weights, shared.reference.outputs,
                                               shared.pairs, o.beta, GradientForm::simplified);
    for (std::size_t i = 0; i < s_exact.data().size(); ++i) {
      const double a = s_exact.data()[i], b = s_simple.data()[i];
      const double err = std::fabs(b) > 1e-12 ? std::fabs(a / b - 0.5) : std::fabs(a);
      r.max_shared_ratio_error = std::max(r.max_shared_ratio_error, err);
    }
  }
  r.mean_distinct_discrepancy = o.instances ? discrepancy / static_cast<double>(o.instances) : 0.0;

  const FeatureGapInstance gap = make_feature_gap_instance(o.seed);
  r.feature_gap = feature_gap_demo(gap.layer, gap.x_preferred, o.gamma_grid);
  r.feature_gap_monotone = true;
  for (std::size_t i = 1; i < r.feature_gap.size(); ++i) {
    if (r.feature_gap[i] > r.feature_gap[i - 1]) r.feature_gap_monotone = false;
  }
  r.loss_ok = r.max_init_loss_error <= kInitLossTolerance;
  r.gradient_ok = r.max_fd_relative_error < kFdTolerance;
  r.ratio_ok = r.max_shared_ratio_error <= kRatioTolerance;
  return r;
}

}  // namespace dleaf::dpo
