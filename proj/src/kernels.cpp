#include "dleaf/kernels.hpp"

#include <algorithm>
#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "dleaf/error.hpp"

namespace dleaf::kernels {

void set_num_threads(int n) {
#ifdef _OPENMP
  omp_set_num_threads(std::max(1, n));
#else
  (void)n;
#endif
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace {

void check_matvec(std::span<const double> x, const Matrix& w, std::span<double> y) {
  if (x.size() != w.rows() || y.size() != w.cols()) {
    throw ShapeError("matvec: operand sizes do not match");
  }
}

// y[j] += x[i] * w(i, j) for j in [begin, end), i outermost. Every y[j] sees
// the same i order whatever the column split.
inline void matvec_columns(std::span<const double> x, const Matrix& w, std::span<double> y,
                           std::size_t begin, std::size_t end) {
  for (std::size_t j = begin; j < end; ++j) y[j] = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    const double* row = w.row(i).data();
    for (std::size_t j = begin; j < end; ++j) y[j] += xi * row[j];
  }
}

inline constexpr std::size_t kColumnBlock = 64;

inline void softmax_in_place(std::span<double> row) {
  double peak = row[0];
  for (double v : row) peak = std::max(peak, v);
  double total = 0.0;
  for (double& v : row) {
    v = std::exp(v - peak);
    total += v;
  }
  for (double& v : row) v /= total;
}

inline void head_probs(std::span<const double> query, std::span<const double> keys,
                       std::size_t num_keys, std::size_t head, std::size_t head_dim,
                       std::span<double> out) {
  const std::size_t d = query.size();
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  const std::size_t offset = head * head_dim;
  for (std::size_t t = 0; t < num_keys; ++t) {
    const double* k = keys.data() + t * d + offset;
    double acc = 0.0;
    for (std::size_t j = 0; j < head_dim; ++j) acc += query[offset + j] * k[j];
    out[t] = acc * scale;
  }
  softmax_in_place(out.first(num_keys));
}

inline void head_mix(const Matrix& probs, std::span<const double> values, std::size_t head,
                     std::size_t head_dim, std::size_t d, std::span<double> out) {
  const std::size_t offset = head * head_dim;
  for (std::size_t j = 0; j < head_dim; ++j) out[offset + j] = 0.0;
  for (std::size_t t = 0; t < probs.cols(); ++t) {
    const double a = probs(head, t);
    const double* v = values.data() + t * d + offset;
    for (std::size_t j = 0; j < head_dim; ++j) out[offset + j] += a * v[j];
  }
}

void check_attention(std::span<const double> query, std::span<const double> keys,
                     std::size_t num_keys, std::size_t num_heads, const Matrix& probs) {
  if (num_heads == 0 || query.size() % num_heads != 0 || num_keys == 0 ||
      keys.size() < num_keys * query.size() || probs.rows() != num_heads ||
      probs.cols() != num_keys) {
    throw ShapeError("attention_probs: operand sizes do not match");
  }
}

}  // namespace

void matvec(std::span<const double> x, const Matrix& w, std::span<double> y) {
  check_matvec(x, w, y);
  const std::size_t cols = w.cols();
  const auto blocks = static_cast<std::ptrdiff_t>((cols + kColumnBlock - 1) / kColumnBlock);
#pragma omp parallel for schedule(static) if (x.size() * y.size() >= kParallelMinWork)
  for (std::ptrdiff_t b = 0; b < blocks; ++b) {
    const std::size_t begin = static_cast<std::size_t>(b) * kColumnBlock;
    matvec_columns(x, w, y, begin, std::min(cols, begin + kColumnBlock));
  }
}

void attention_probs(std::span<const double> query, std::span<const double> keys,
                     std::size_t num_keys, std::size_t num_heads, Matrix& probs) {
  check_attention(query, keys, num_keys, num_heads, probs);
  const std::size_t head_dim = query.size() / num_heads;
  const auto heads = static_cast<std::ptrdiff_t>(num_heads);
#pragma omp parallel for schedule(static) if (num_keys * query.size() >= kParallelMinWork)
  for (std::ptrdiff_t h = 0; h < heads; ++h) {
    const auto hh = static_cast<std::size_t>(h);
    head_probs(query, keys, num_keys, hh, head_dim, probs.row(hh));
  }
}

void attention_mix(const Matrix& probs, std::span<const double> values, std::span<double> out) {
  const std::size_t num_heads = probs.rows();
  if (num_heads == 0 || out.size() % num_heads != 0 ||
      values.size() < probs.cols() * out.size()) {
    throw ShapeError("attention_mix: operand sizes do not match");
  }
  const std::size_t d = out.size();
  const std::size_t head_dim = d / num_heads;
  const auto heads = static_cast<std::ptrdiff_t>(num_heads);
#pragma omp parallel for schedule(static) if (probs.cols() * d >= kParallelMinWork)
  for (std::ptrdiff_t h = 0; h < heads; ++h) {
    head_mix(probs, values, static_cast<std::size_t>(h), head_dim, d, out);
  }
}

namespace serial {

void matvec(std::span<const double> x, const Matrix& w, std::span<double> y) {
  check_matvec(x, w, y);
  for (double& v : y) v = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t j = 0; j < w.cols(); ++j) y[j] += x[i] * w(i, j);
  }
}

void attention_probs(std::span<const double> query, std::span<const double> keys,
                     std::size_t num_keys, std::size_t num_heads, Matrix& probs) {
  check_attention(query, keys, num_keys, num_heads, probs);
  const std::size_t d = query.size();
  const std::size_t head_dim = d / num_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  for (std::size_t h = 0; h < num_heads; ++h) {
    for (std::size_t t = 0; t < num_keys; ++t) {
      double acc = 0.0;
      for (std::size_t j = 0; j < head_dim; ++j) {
        acc += query[h * head_dim + j] * keys[t * d + h * head_dim + j];
      }
      probs(h, t) = acc * scale;
    }
    double peak = probs(h, 0);
    for (std::size_t t = 1; t < num_keys; ++t) peak = std::max(peak, probs(h, t));
    double total = 0.0;
    for (std::size_t t = 0; t < num_keys; ++t) {
      probs(h, t) = std::exp(probs(h, t) - peak);
      total += probs(h, t);
    }
    for (std::size_t t = 0; t < num_keys; ++t) probs(h, t) /= total;
  }
}

void attention_mix(const Matrix& probs, std::span<const double> values, std::span<double> out) {
  const std::size_t num_heads = probs.rows();
  if (num_heads == 0 || out.size() % num_heads != 0 ||
      values.size() < probs.cols() * out.size()) {
    throw ShapeError("attention_mix: operand sizes do not match");
  }
  const std::size_t d = out.size();
  const std::size_t head_dim = d / num_heads;
  for (std::size_t h = 0; h < num_heads; ++h) {
    for (std::size_t j = 0; j < head_dim; ++j) out[h * head_dim + j] = 0.0;
    for (std::size_t t = 0; t < probs.cols(); ++t) {
      for (std::size_t j = 0; j < head_dim; ++j) {
        out[h * head_dim + j] += probs(h, t) * values[t * d + h * head_dim + j];
      }
    }
  }
}

}  // namespace serial

}  // namespace dleaf::kernels
