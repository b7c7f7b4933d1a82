#pragma once

// Data-parallel inner loops of the forward pass and the trace analyses.
//
// Every kernel in `dleaf::kernels` has a plain serial twin in
// `dleaf::kernels::serial`. The parallel versions split work across OpenMP
// threads but keep each output element's accumulation order identical to the
// serial version, so the two agree bit for bit. Tests compare them directly and
// bench/ measures the crossover.

#include <cstddef>
#include <exception>
#include <span>

#include "dleaf/tensor.hpp"

namespace dleaf::kernels {

// Below this many multiply-adds a kernel stays on the calling thread.
inline constexpr std::size_t kParallelMinWork = std::size_t{1} << 15;

void set_num_threads(int n);
int max_threads();

// y = x W, with W stored rows = x.size(), cols = y.size().
void matvec(std::span<const double> x, const Matrix& w, std::span<double> y);

// Causal scaled dot-product scores of one query against `num_keys` cached keys
// (row-major num_keys x d), softmaxed per head into probs (H x num_keys).
void attention_probs(std::span<const double> query, std::span<const double> keys,
                     std::size_t num_keys, std::size_t num_heads, Matrix& probs);

// out[h*dh + j] = sum_t probs(h, t) * values(t, h*dh + j).
void attention_mix(const Matrix& probs, std::span<const double> values,
                   std::span<double> out);

namespace serial {
void matvec(std::span<const double> x, const Matrix& w, std::span<double> y);
void attention_probs(std::span<const double> query, std::span<const double> keys,
                     std::size_t num_keys, std::size_t num_heads, Matrix& probs);
void attention_mix(const Matrix& probs, std::span<const double> values,
                   std::span<double> out);
}  // namespace serial

// Runs fn(i) for i in [0, n) across threads. The first exception thrown by
// any iteration is rethrown on the calling thread after the loop.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  std::exception_ptr error;
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    try {
      fn(static_cast<std::size_t>(i));
    } catch (...) {
#pragma omp critical(dleaf_parallel_for_error)
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
}

}  // namespace dleaf::kernels
