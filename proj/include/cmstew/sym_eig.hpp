// Copyright 2026 cmstew authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <vector>

#include "cmstew/common.hpp"

namespace cmstew {

// Cyclic Jacobi eigendecomposition of a symmetric matrix, double precision.
// Deterministic sweep order; no external solver dependency in the core
// library.  Eigenpairs come back sorted by descending eigenvalue with a
// fixed sign convention (largest-magnitude component positive), columns of
// `evecs` are the eigenvectors.
inline void sym_eig(int n, const double* a_in, std::vector<double>& evals,
                    std::vector<double>& evecs) {
  std::vector<double> a(a_in, a_in + static_cast<std::size_t>(n) * n);
  evecs.assign(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) evecs[static_cast<std::size_t>(i) * n + i] = 1.0;

  auto A = [&](int r, int c) -> double& { return a[static_cast<std::size_t>(r) * n + c]; };
  auto V = [&](int r, int c) -> double& { return evecs[static_cast<std::size_t>(r) * n + c]; };

  double scale = 0.0;
  for (double v : a) scale += v * v;
  scale = std::sqrt(scale);
  // Machine-precision convergence: downstream spectral maps (inverse
  // square roots in particular) amplify residual eigenvalue error, so a
  // looser threshold leaks visible noise into whitened products.
  const double tol = (scale > 0.0 ? scale : 1.0) * 1e-15;

  for (int sweep = 0; sweep < 64; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) off += A(p, q) * A(p, q);
    if (std::sqrt(off) <= tol) break;

    int rotations = 0;
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        const double apq = A(p, q);
        if (std::abs(apq) <= tol * 1e-3) continue;
        ++rotations;
        const double tau = (A(q, q) - A(p, p)) / (2.0 * apq);
        const double t = (tau >= 0.0)
                             ? 1.0 / (tau + std::sqrt(1.0 + tau * tau))
                             : -1.0 / (-tau + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = t * c;

        A(p, p) -= t * apq;
        A(q, q) += t * apq;
        A(p, q) = 0.0;
        A(q, p) = 0.0;
        for (int r = 0; r < n; ++r) {
          if (r == p || r == q) continue;
          const double arp = A(r, p), arq = A(r, q);
          A(r, p) = c * arp - s * arq;
          A(p, r) = A(r, p);
          A(r, q) = s * arp + c * arq;
          A(q, r) = A(r, q);
        }
        for (int r = 0; r < n; ++r) {
          const double vrp = V(r, p), vrq = V(r, q);
          V(r, p) = c * vrp - s * vrq;
          V(r, q) = s * vrp + c * vrq;
        }
      }
    }
    if (rotations == 0) break;
  }

  evals.resize(static_cast<std::size_t>(n));
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    evals[static_cast<std::size_t>(i)] = A(i, i);
    order[static_cast<std::size_t>(i)] = i;
  }
  for (int i = 0; i < n; ++i) {
    int best = i;
    for (int j = i + 1; j < n; ++j) {
      if (evals[static_cast<std::size_t>(order[j])] >
          evals[static_cast<std::size_t>(order[best])])
        best = j;
    }
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(best)]);
  }

  std::vector<double> sorted_vals(static_cast<std::size_t>(n));
  std::vector<double> sorted_vecs(static_cast<std::size_t>(n) * n);
  for (int j = 0; j < n; ++j) {
    const int src = order[static_cast<std::size_t>(j)];
    sorted_vals[static_cast<std::size_t>(j)] = evals[static_cast<std::size_t>(src)];
    int arg = 0;
    double mag = 0.0;
    for (int r = 0; r < n; ++r) {
      const double v = evecs[static_cast<std::size_t>(r) * n + src];
      if (std::abs(v) > mag) {
        mag = std::abs(v);
        arg = r;
      }
    }
    const double sgn = evecs[static_cast<std::size_t>(arg) * n + src] < 0.0 ? -1.0 : 1.0;
    for (int r = 0; r < n; ++r)
      sorted_vecs[static_cast<std::size_t>(r) * n + j] =
          sgn * evecs[static_cast<std::size_t>(r) * n + src];
  }
  evals = std::move(sorted_vals);
  evecs = std::move(sorted_vecs);
}

// B = U f(lambda) U^T for symmetric A; eigenvalues pass through `f`.
template <typename F>
void sym_apply(int n, const double* a, double* out, F f) {
  std::vector<double> evals, evecs;
  sym_eig(n, a, evals, evecs);
  for (double& v : evals) v = f(v);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int k = 0; k < n; ++k)
        s += evecs[static_cast<std::size_t>(i) * n + k] * evals[static_cast<std::size_t>(k)] *
             evecs[static_cast<std::size_t>(j) * n + k];
      out[static_cast<std::size_t>(i) * n + j] = s;
    }
  }
}

}  // namespace cmstew
