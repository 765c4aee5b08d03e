#pragma once

// Dense inner loops used by the engine. Every kernel has a serial reference
// and an OpenMP variant; both accumulate each output element in the same
// order, so their results are bitwise identical for any thread count.

#include <cstddef>
#include <span>

namespace cprune::kernels {

enum class Backend { serial, omp };

void set_backend(Backend b);
Backend backend();

// Numerically stable in-place softmax.
void softmax(std::span<double> v);

void relu(std::span<double> v);

namespace serial {

// y[n x out] = x[n x in] * w[in x out], all row-major. y is overwritten.
void matmul(const double* x, const double* w, double* y, std::size_t n, std::size_t in,
            std::size_t out);

// Scaled dot-product attention for one head. q holds n_q rows, k and v hold
// n_kv rows; all three share row stride `stride` and the head occupies columns
// [offset, offset + dim). Query row i sees key rows [0, first_visible + i].
// probs (n_q x n_kv) receives the attention weights, zero past the visible
// prefix; out receives the mixed values in the head's columns.
void attention_head(const double* q, const double* k, const double* v, std::size_t n_q,
                    std::size_t n_kv, std::size_t stride, std::size_t offset, std::size_t dim,
                    std::size_t first_visible, double* probs, double* out);

}  // namespace serial

namespace omp {

void matmul(const double* x, const double* w, double* y, std::size_t n, std::size_t in,
            std::size_t out);

void attention_head(const double* q, const double* k, const double* v, std::size_t n_q,
                    std::size_t n_kv, std::size_t stride, std::size_t offset, std::size_t dim,
                    std::size_t first_visible, double* probs, double* out);

}  // namespace omp

// Dispatch on the process-wide backend.
void matmul(const double* x, const double* w, double* y, std::size_t n, std::size_t in,
            std::size_t out);
void attention_head(const double* q, const double* k, const double* v, std::size_t n_q,
                    std::size_t n_kv, std::size_t stride, std::size_t offset, std::size_t dim,
                    std::size_t first_visible, double* probs, double* out);

}  // namespace cprune::kernels
