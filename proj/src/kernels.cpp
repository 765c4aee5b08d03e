#include "cprune/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <atomic>
#include <cmath>

namespace cprune::kernels {

namespace {

std::atomic<Backend> g_backend{Backend::serial};

// Below this many multiply-accumulates a parallel region costs more than it saves.
constexpr std::size_t kParallelWork = 1u << 16;

inline void matmul_row(const double* x, const double* w, double* y, std::size_t in,
                       std::size_t out) {
  std::fill(y, y + out, 0.0);
  for (std::size_t k = 0; k < in; ++k) {
    const double a = x[k];
    if (a == 0.0) continue;
    const double* wk = w + k * out;
    for (std::size_t o = 0; o < out; ++o) y[o] += a * wk[o];
  }
}

inline void attention_row(const double* q, const double* k, const double* v, std::size_t i,
                          std::size_t n_kv, std::size_t stride, std::size_t offset,
                          std::size_t dim, std::size_t first_visible, double* probs,
                          double* out) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  const double* qi = q + i * stride + offset;
  double* pi = probs + i * n_kv;
  const std::size_t visible = std::min(n_kv, first_visible + i + 1);
  double mx = -INFINITY;
  for (std::size_t c = 0; c < visible; ++c) {
    const double* kc = k + c * stride + offset;
    double s = 0.0;
    for (std::size_t d = 0; d < dim; ++d) s += qi[d] * kc[d];
    s *= scale;
    pi[c] = s;
    mx = std::max(mx, s);
  }
  double sum = 0.0;
  for (std::size_t c = 0; c < visible; ++c) {
    pi[c] = std::exp(pi[c] - mx);
    sum += pi[c];
  }
  const double inv = 1.0 / sum;
  for (std::size_t c = 0; c < visible; ++c) pi[c] *= inv;
  for (std::size_t c = visible; c < n_kv; ++c) pi[c] = 0.0;

  double* oi = out + i * stride + offset;
  std::fill(oi, oi + dim, 0.0);
  for (std::size_t c = 0; c < visible; ++c) {
    const double a = pi[c];
    const double* vc = v + c * stride + offset;
    for (std::size_t d = 0; d < dim; ++d) oi[d] += a * vc[d];
  }
}

}  // namespace

void set_backend(Backend b) { g_backend.store(b); }
Backend backend() { return g_backend.load(); }

void softmax(std::span<double> v) {
  if (v.empty()) return;
  const double mx = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (double& x : v) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (double& x : v) x /= sum;
}

void relu(std::span<double> v) {
  for (double& x : v) x = x > 0.0 ? x : 0.0;
}

namespace serial {

void matmul(const double* x, const double* w, double* y, std::size_t n, std::size_t in,
            std::size_t out) {
  for (std::size_t i = 0; i < n; ++i) matmul_row(x + i * in, w, y + i * out, in, out);
}

void attention_head(const double* q, const double* k, const double* v, std::size_t n_q,
                    std::size_t n_kv, std::size_t stride, std::size_t offset, std::size_t dim,
                    std::size_t first_visible, double* probs, double* out) {
  for (std::size_t i = 0; i < n_q; ++i)
    attention_row(q, k, v, i, n_kv, stride, offset, dim, first_visible, probs, out);
}

}  // namespace serial

namespace omp {

void matmul(const double* x, const double* w, double* y, std::size_t n, std::size_t in,
            std::size_t out) {
  const bool par = n > 1 && n * in * out >= kParallelWork && !omp_in_parallel();
  const auto rows = static_cast<long>(n);
#pragma omp parallel for schedule(static) if (par)
  for (long i = 0; i < rows; ++i) matmul_row(x + i * in, w, y + i * out, in, out);
}

void attention_head(const double* q, const double* k, const double* v, std::size_t n_q,
                    std::size_t n_kv, std::size_t stride, std::size_t offset, std::size_t dim,
                    std::size_t first_visible, double* probs, double* out) {
  const bool par = n_q > 1 && n_q * n_kv * dim >= kParallelWork && !omp_in_parallel();
  const auto rows = static_cast<long>(n_q);
#pragma omp parallel for schedule(static) if (par)
  for (long i = 0; i < rows; ++i)
    attention_row(q, k, v, static_cast<std::size_t>(i), n_kv, stride, offset, dim,
                  first_visible, probs, out);
}

}  // namespace omp

void matmul(const double* x, const double* w, double* y, std::size_t n, std::size_t in,
            std::size_t out) {
  if (backend() == Backend::omp)
    omp::matmul(x, w, y, n, in, out);
  else
    serial::matmul(x, w, y, n, in, out);
}

void attention_head(const double* q, const double* k, const double* v, std::size_t n_q,
                    std::size_t n_kv, std::size_t stride, std::size_t offset, std::size_t dim,
                    std::size_t first_visible, double* probs, double* out) {
  if (backend() == Backend::omp)
    omp::attention_head(q, k, v, n_q, n_kv, stride, offset, dim, first_visible, probs, out);
  else
    serial::attention_head(q, k, v, n_q, n_kv, stride, offset, dim, first_visible, probs, out);
}

}  // namespace cprune::kernels
