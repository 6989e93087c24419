// Copyright 2026 cmstew authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "cmstew/common.hpp"

// Data-parallel inner kernels.  Every parallel loop partitions independent
// output elements and accumulates each element in the same (k-ascending)
// order as the serial reference, so results are bit-identical for any
// thread count.  Reductions to a scalar stay serial for the same reason.
namespace cmstew::kernels {

// Thread cap; 0 means "whatever OpenMP would use".  CMSTEW_THREADS wins.
void set_thread_cap(int cap);
int thread_cap();
void configure_threads_from_env();
int effective_threads();

// Work sizes below this run serially; parallel overhead dominates.
inline constexpr std::int64_t kParallelCutoff = 1 << 15;

// Serial reference: C[m x n] (+)= op(A) . op(B), row-major, dense.
// ta: A is stored [k x m] and used transposed.  tb likewise for B [n x k].
template <typename S>
void gemm_ref(bool ta, bool tb, int m, int n, int k,
              const S* a, const S* b, S* c, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      S s = accumulate ? c[static_cast<std::int64_t>(i) * n + j] : S(0);
      for (int p = 0; p < k; ++p) {
        const S av = ta ? a[static_cast<std::int64_t>(p) * m + i]
                        : a[static_cast<std::int64_t>(i) * k + p];
        const S bv = tb ? b[static_cast<std::int64_t>(j) * k + p]
                        : b[static_cast<std::int64_t>(p) * n + j];
        s += av * bv;
      }
      c[static_cast<std::int64_t>(i) * n + j] = s;
    }
  }
}

template <typename S>
void gemm(bool ta, bool tb, int m, int n, int k,
          const S* a, const S* b, S* c, bool accumulate) {
  const std::int64_t work = static_cast<std::int64_t>(m) * n * k;
  const bool par = work >= kParallelCutoff && m >= 2;
#pragma omp parallel for schedule(static) num_threads(effective_threads()) \
    if (par)
  for (int i = 0; i < m; ++i) {
    S* crow = c + static_cast<std::int64_t>(i) * n;
    if (!accumulate) {
      for (int j = 0; j < n; ++j) crow[j] = S(0);
    }
    if (!tb) {
      // k-outer, j-inner: row updates vectorize, order per element is
      // k-ascending exactly as in gemm_ref.
      for (int p = 0; p < k; ++p) {
        const S av = ta ? a[static_cast<std::int64_t>(p) * m + i]
                        : a[static_cast<std::int64_t>(i) * k + p];
        const S* brow = b + static_cast<std::int64_t>(p) * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    } else {
      for (int j = 0; j < n; ++j) {
        const S* brow = b + static_cast<std::int64_t>(j) * k;
        S s = crow[j];
        for (int p = 0; p < k; ++p) {
          const S av = ta ? a[static_cast<std::int64_t>(p) * m + i]
                          : a[static_cast<std::int64_t>(i) * k + p];
          s += av * brow[p];
        }
        crow[j] = s;
      }
    }
  }
}

template <typename S, typename F>
void map_ref(std::int64_t n, const S* x, S* y, F f) {
  for (std::int64_t i = 0; i < n; ++i) y[i] = f(x[i]);
}

template <typename S, typename F>
void map(std::int64_t n, const S* x, S* y, F f) {
  const bool par = n >= kParallelCutoff;
#pragma omp parallel for schedule(static) num_threads(effective_threads()) \
    if (par)
  for (std::int64_t i = 0; i < n; ++i) y[i] = f(x[i]);
}

template <typename S, typename F>
void zip_ref(std::int64_t n, const S* a, const S* b, S* y, F f) {
  for (std::int64_t i = 0; i < n; ++i) y[i] = f(a[i], b[i]);
}

template <typename S, typename F>
void zip(std::int64_t n, const S* a, const S* b, S* y, F f) {
  const bool par = n >= kParallelCutoff;
#pragma omp parallel for schedule(static) num_threads(effective_threads()) \
    if (par)
  for (std::int64_t i = 0; i < n; ++i) y[i] = f(a[i], b[i]);
}

// y[i] += f(a[i], b[i]); gradient accumulation form.
template <typename S, typename F>
void zip_acc(std::int64_t n, const S* a, const S* b, S* y, F f) {
  const bool par = n >= kParallelCutoff;
#pragma omp parallel for schedule(static) num_threads(effective_threads()) \
    if (par)
  for (std::int64_t i = 0; i < n; ++i) y[i] += f(a[i], b[i]);
}

// y += alpha * x
template <typename S>
void axpy(std::int64_t n, S alpha, const S* x, S* y) {
  const bool par = n >= kParallelCutoff;
#pragma omp parallel for schedule(static) num_threads(effective_threads()) \
    if (par)
  for (std::int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// Serial on purpose: scalar reductions must not depend on thread count.
template <typename S>
double sum(std::int64_t n, const S* x) {
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) s += static_cast<double>(x[i]);
  return s;
}

// out[j] += sum over rows of x[., j]; row-ascending, deterministic.
template <typename S>
void add_col_sums(int rows, int cols, const S* x, S* out) {
  for (int i = 0; i < rows; ++i) {
    const S* row = x + static_cast<std::int64_t>(i) * cols;
    for (int j = 0; j < cols; ++j) out[j] += row[j];
  }
}

}  // namespace cmstew::kernels
