// Copyright 2026 cmstew authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "cmstew/kernels.hpp"
#include "cmstew/rng.hpp"
#include "cmstew/sym_eig.hpp"
#include "cmstew/tape.hpp"

namespace cmstew::ops {

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  const auto& av = a.val();
  const auto& bv = b.val();
  check_arg(av.rank() == 2 && bv.rank() == 2, "matmul: rank-2 operands required");
  check_arg(av.cols() == bv.rows(),
            cat("matmul: inner dims ", av.cols(), " vs ", bv.rows()));
  const int m = av.rows(), k = av.cols(), n = bv.cols();
  TensorT<S> out({m, n});
  kernels::gemm(false, false, m, n, k, av.data(), bv.data(), out.data(), false);
  const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
  Var<S> o = t.push(std::move(out), ng, nullptr);
  if (ng) {
    t.set_backprop(o.id, [&t, ai = a.id, bi = b.id, oi = o.id, m, n, k] {
      const S* g = t.grad(oi).data();
      if (t.needs_grad(ai))
        kernels::gemm(false, true, m, k, n, g, t.value(bi).data(),
                      t.grad(ai).data(), true);
      if (t.needs_grad(bi))
        kernels::gemm(true, false, k, n, m, t.value(ai).data(), g,
                      t.grad(bi).data(), true);
    });
  }
  return o;
}

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  check_arg(a.val().same_shape(b.val()),
            cat("add: shape ", shape_str(a.shape()), " vs ", shape_str(b.shape())));
  TensorT<S> out(a.val().shape());
  kernels::zip(out.size(), a.val().data(), b.val().data(), out.data(),
               [](S x, S y) { return x + y; });
  const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
  Var<S> o = t.push(std::move(out), ng, nullptr);
  if (ng) {
    t.set_backprop(o.id, [&t, ai = a.id, bi = b.id, oi = o.id] {
      const auto& g = t.grad(oi);
      if (t.needs_grad(ai)) kernels::axpy(g.size(), S(1), g.data(), t.grad(ai).data());
      if (t.needs_grad(bi)) kernels::axpy(g.size(), S(1), g.data(), t.grad(bi).data());
    });
  }
  return o;
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  check_arg(a.val().same_shape(b.val()),
            cat("sub: shape ", shape_str(a.shape()), " vs ", shape_str(b.shape())));
  TensorT<S> out(a.val().shape());
  kernels::zip(out.size(), a.val().data(), b.val().data(), out.data(),
               [](S x, S y) { return x - y; });
  const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
  Var<S> o = t.push(std::move(out), ng, nullptr);
  if (ng) {
    t.set_backprop(o.id, [&t, ai = a.id, bi = b.id, oi = o.id] {
      const auto& g = t.grad(oi);
      if (t.needs_grad(ai)) kernels::axpy(g.size(), S(1), g.data(), t.grad(ai).data());
      if (t.needs_grad(bi)) kernels::axpy(g.size(), S(-1), g.data(), t.grad(bi).data());
    });
  }
  return o;
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  check_arg(a.val().same_shape(b.val()),
            cat("mul: shape ", shape_str(a.shape()), " vs ", shape_str(b.shape())));
  TensorT<S> out(a.val().shape());
  kernels::zip(out.size(), a.val().data(), b.val().data(), out.data(),
               [](S x, S y) { return x * y; });
  const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
  Var<S> o = t.push(std::move(out), ng, nullptr);
  if (ng) {
    t.set_backprop(o.id, [&t, ai = a.id, bi = b.id, oi = o.id] {
      const auto& g = t.grad(oi);
      if (t.needs_grad(ai))
        kernels::zip_acc(g.size(), g.data(), t.value(bi).data(), t.grad(ai).data(),
                         [](S gv, S bv) { return gv * bv; });
      if (t.needs_grad(bi))
        kernels::zip_acc(g.size(), g.data(), t.value(ai).data(), t.grad(bi).data(),
                         [](S gv, S av) { return gv * av; });
    });
  }
  return o;
}

template <typename S>
Var<S> scale(Var<S> a, S c) {
  Tape<S>& t = *a.tape;
  TensorT<S> out(a.val().shape());
  kernels::map(out.size(), a.val().data(), out.data(), [c](S x) { return c * x; });
  const bool ng = t.needs_grad(a.id);
  Var<S> o = t.push(std::move(out), ng, nullptr);
  if (ng) {
    t.set_backprop(o.id, [&t, ai = a.id, oi = o.id, c] {
      kernels::axpy(t.grad(oi).size(), c, t.grad(oi).data(), t.grad(ai).data());
    });
  }
  return o;
}

// x [m x n] + row vector v [n], broadcast over rows.
template <typename S>
Var<S> add_rowvec(Var<S> x, Var<S> v) {
  Tape<S>& t = *x.tape;
  const auto& xv = x.val();
  check_arg(xv.rank() == 2 && v.val().rank() == 1 && v.val().dim(0) == xv.cols(),
            cat("add_rowvec: ", shape_str(x.shape()), " vs ", shape_str(v.shape())));
  const int m = xv.rows(), n = xv.cols();
  TensorT<S> out({m, n});
  const S* vd = v.val().data();
  const S* xd = xv.data();
  S* od = out.data();
  const bool par = out.size() >= kernels::kParallelCutoff;
#pragma omp parallel for schedule(static) num_threads(kernels::effective_threads()) \
    if (par)
  for (int i = 0; i < m; ++i) {
    const std::int64_t off = static_cast<std::int64_t>(i) * n;
    for (int j = 0; j < n; ++j) od[off + j] = xd[off + j] + vd[j];
  }
  const bool ng = t.needs_grad(x.id) || t.needs_grad(v.id);
  Var<S> o = t.push(std::move(out), ng, nullptr);
  if (ng) {
    t.set_backprop(o.id, [&t, xi = x.id, vi = v.id, oi = o.id, m, n] {
      const auto& g = t.grad(oi);
      if (t.needs_grad(xi)) kernels::axpy(g.size(), S(1), g.data(), t.grad(xi).data());
      if (t.needs_grad(vi)) kernels::add_col_sums(m, n, g.data(), t.grad(vi).data());
    });
  }
  return o;
}

template <typename S>
Var<S> sigmoid(Var<S> a) {
  Tape<S>& t = *a.tape;
  TensorT<S> out(a.val().shape());
  kernels::map(out.size(), a.val().data(), out.data(),
               [](S x) { return S(1) / (S(1) + std::exp(-x)); });
  const bool ng = t.needs_grad(a.id);
  Var<S> o = t.push(std::move(out), ng, nullptr);
  if (ng) {
    t.set_backprop(o.id, [&t, ai = a.id, oi = o.id] {
      kernels::zip_acc(t.grad(oi).size(), t.grad(oi).data(), t.value(oi).data(),
                       t.grad(ai).data(),
                       [](S g, S y) { return g * y * (S(1) - y); });
    });
  }
  return o;
}

template <typename S>
Var<S> tanh_act(Var<S> a) {
  Tape<S>& t = *a.tape;
  TensorT<S> out(a.val().shape());
  kernels::map(out.size(), a.val().data(), out.data(), [](S x) { return std::tanh(x); });
  const bool ng = t.needs_grad(a.id);
  Var<S> o = t.push(std::move(out), ng, nullptr);
  if (ng) {
    t.set_backprop(o.id, [&t, ai = a.id, oi = o.id] {
      kernels::zip_acc(t.grad(oi).size(), t.grad(oi).data(), t.value(oi).data(),
                       t.grad(ai).data(),
                       [](S g, S y) { return g * (S(1) - y * y); });
    });
  }
  return o;
}

// Subgradient 0 at the kink.
template <typename S>
Var<S> relu(Var<S> a) {
  Tape<S>& t = *a.tape;
  TensorT<S> out(a.val().shape());
  kernels::map(out.size(), a.val().data(), out.data(),
               [](S x) { return x > S(0) ? x : S(0); });
  const bool ng = t.needs_grad(a.id);
  Var<S> o = t.push(std::move(out), ng, nullptr);
  if (ng) {
    t.set_backprop(o.id, [&t, ai = a.id, oi = o.id] {
      kernels::zip_acc(t.grad(oi).size(), t.grad(oi).data(), t.value(ai).data(),
                       t.grad(ai).data(),
                       [](S g, S x) { return x > S(0) ? g : S(0); });
    });
  }
  return o;
}

// Row-wise softmax with max subtraction.
template <typename S>
Var<S> softmax_rows(Var<S> a) {
  Tape<S>& t = *a.tape;
  const auto& av = a.val();
  check_arg(av.rank() == 2 && av.cols() >= 1, "softmax_rows: rank-2 input required");
  const int m = av.rows(), n = av.cols();
  TensorT<S> out({m, n});
  for (int i = 0; i < m; ++i) {
    const S* xr = av.data() + static_cast<std::int64_t>(i) * n;
    S* yr = out.data() + static_cast<std::int64_t>(i) * n;
    S mx = xr[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
    S z = S(0);
    for (int j = 0; j < n; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      z += yr[j];
    }
    for (int j = 0; j < n; ++j) yr[j] /= z;
  }
  const bool ng = t.needs_grad(a.id);
  Var<S> o = t.push(std::move(out), ng, nullptr);
  if (ng) {
    t.set_backprop(o.id, [&t, ai = a.id, oi = o.id, m, n] {
      const auto& g = t.grad(oi);
      const auto& y = t.value(oi);
      auto& dx = t.grad(ai);
      for (int i = 0; i < m; ++i) {
        const std::int64_t off = static_cast<std::int64_t>(i) * n;
        S dot = S(0);
        for (int j = 0; j < n; ++j) dot += g[off + j] * y[off + j];
        for (int j = 0; j < n; ++j) dx[off + j] += y[off + j] * (g[off + j] - dot);
      }
    });
  }
  return o;
}

// Per-row normalization (biased variance) with learned gain/shift.
template <typename S>
Var<S> layer_norm(Var<S> x, Var<S> gamma, Var<S> beta, S eps) {
  Tape<S>& t = *x.tape;
  const auto& xv = x.val();
  check_arg(xv.rank() == 2, "layer_norm: rank-2 input required");
  const int m = xv.rows(), n = xv.cols();
  check_arg(gamma.val().rank() == 1 && gamma.val().dim(0) == n &&
                beta.val().rank() == 1 && beta.val().dim(0) == n,
            "layer_norm: gain/shift must match feature width");
  auto xhat = std::make_shared<TensorT<S>>(std::vector<int>{m, n});
  auto inv_std = std::make_shared<std::vector<S>>(static_cast<std::size_t>(m));
  TensorT<S> out({m, n});
  const S* gd = gamma.val().data();
  const S* bd = beta.val().data();
  for (int i = 0; i < m; ++i) {
    const S* xr = xv.data() + static_cast<std::int64_t>(i) * n;
    S mu = S(0);
    for (int j = 0; j < n; ++j) mu += xr[j];
    mu /= S(n);
    S var = S(0);
    for (int j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= S(n);
    const S is = S(1) / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(i)] = is;
    S* hr = xhat->data() + static_cast<std::int64_t>(i) * n;
    S* yr = out.data() + static_cast<std::int64_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      hr[j] = (xr[j] - mu) * is;
      yr[j] = gd[j] * hr[j] + bd[j];
    }
  }
  const bool ng = t.needs_grad(x.id) || t.needs_grad(gamma.id) || t.needs_grad(beta.id);
  Var<S> o = t.push(std::move(out), ng, nullptr);
  if (ng) {
    t.set_backprop(o.id, [&t, xi = x.id, gi = gamma.id, bi = beta.id, oi = o.id,
                          xhat, inv_std, m, n] {
      const auto& g = t.grad(oi);
      const S* gam = t.value(gi).data();
      for (int i = 0; i < m; ++i) {
        const std::int64_t off = static_cast<std::int64_t>(i) * n;
        const S* hr = xhat->data() + off;
        if (t.needs_grad(gi) || t.needs_grad(bi)) {
          auto& dgam = t.grad(gi);
          auto& dbet = t.grad(bi);
          for (int j = 0; j < n; ++j) {
            dgam[j] += g[off + j] * hr[j];
            dbet[j] += g[off + j];
          }
        }
        if (t.needs_grad(xi)) {
          S mean_dh = S(0), mean_dh_h = S(0);
          for (int j = 0; j < n; ++j) {
            const S dh = g[off + j] * gam[j];
            mean_dh += dh;
            mean_dh_h += dh * hr[j];
          }
          mean_dh /= S(n);
          mean_dh_h /= S(n);
          const S is = (*inv_std)[static_cast<std::size_t>(i)];
          auto& dx = t.grad(xi);
          for (int j = 0; j < n; ++j) {
            const S dh = g[off + j] * gam[j];
            dx[off + j] += is * (dh - mean_dh - hr[j] * mean_dh_h);
          }
        }
      }
    });
  }
  return o;
}

// Inverted dropout; masks come from their own stream so batch order
// elsewhere never perturbs them.  Identity when not training.
template <typename S>
Var<S> dropout(Var<S> x, double rate, std::uint64_t seed, bool train) {
  check_arg(rate >= 0.0 && rate < 1.0, cat("dropout: rate ", rate, " outside [0,1)"));
  if (!train || rate == 0.0) return x;
  Tape<S>& t = *x.tape;
  auto mask = std::make_shared<std::vector<S>>(static_cast<std::size_t>(x.val().size()));
  Rng rng(seed);
  const S inv_keep = S(1.0 / (1.0 - rate));
  for (auto& mv : *mask) mv = rng.uniform() >= rate ? inv_keep : S(0);
  TensorT<S> out(x.val().shape());
  const S* md = mask->data();
  kernels::zip(out.size(), x.val().data(), md, out.data(),
               [](S xv, S mv) { return xv * mv; });
  const bool ng = t.needs_grad(x.id);
  Var<S> o = t.push(std::move(out), ng, nullptr);
  if (ng) {
    t.set_backprop(o.id, [&t, xi = x.id, oi = o.id, mask] {
      kernels::zip_acc(t.grad(oi).size(), t.grad(oi).data(), mask->data(),
                       t.grad(xi).data(), [](S g, S mv) { return g * mv; });
    });
  }
  return o;
}

template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  check_arg(!parts.empty(), "concat_cols: no inputs");
  Tape<S>& t = *parts[0].tape;
  const int m = parts[0].val().rows();
  int total = 0;
  bool ng = false;
  for (const auto& p : parts) {
    check_arg(p.val().rank() == 2 && p.val().rows() == m,
              "concat_cols: row counts differ");
    total += p.val().cols();
    ng = ng || t.needs_grad(p.id);
  }
  TensorT<S> out({m, total});
  int at = 0;
  for (const auto& p : parts) {
    const int w = p.val().cols();
    for (int i = 0; i < m; ++i) {
      const S* src = p.val().data() + static_cast<std::int64_t>(i) * w;
      S* dst = out.data() + static_cast<std::int64_t>(i) * total + at;
      for (int j = 0; j < w; ++j) dst[j] = src[j];
    }
    at += w;
  }
  Var<S> o = t.push(std::move(out), ng, nullptr);
  if (ng) {
    std::vector<int> ids;
    std::vector<int> widths;
    for (const auto& p : parts) {
      ids.push_back(p.id);
      widths.push_back(p.val().cols());
    }
    t.set_backprop(o.id, [&t, ids, widths, oi = o.id, m, total] {
      const auto& g = t.grad(oi);
      int at2 = 0;
      for (std::size_t k = 0; k < ids.size(); ++k) {
        const int w = widths[k];
        if (t.needs_grad(ids[k])) {
          auto& dx = t.grad(ids[k]);
          for (int i = 0; i < m; ++i) {
            const S* src = g.data() + static_cast<std::int64_t>(i) * total + at2;
            S* dst = dx.data() + static_cast<std::int64_t>(i) * w;
            for (int j = 0; j < w; ++j) dst[j] += src[j];
          }
        }
        at2 += w;
      }
    });
  }
  return o;
}

template <typename S>
Var<S> reshape(Var<S> a, std::vector<int> shape) {
  Tape<S>& t = *a.tape;
  check_arg(TensorT<S>::count(shape) == a.val().size(),
            cat("reshape: ", shape_str(a.shape()), " to ", shape_str(shape)));
  TensorT<S> out(std::move(shape));
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a.val()[i];
  const bool ng = t.needs_grad(a.id);
  Var<S> o = t.push(std::move(out), ng, nullptr);
  if (ng) {
    t.set_backprop(o.id, [&t, ai = a.id, oi = o.id] {
      kernels::axpy(t.grad(oi).size(), S(1), t.grad(oi).data(), t.grad(ai).data());
    });
  }
  return o;
}

template <typename S>
Var<S> sum_all(Var<S> a) {
  Tape<S>& t = *a.tape;
  S s = S(0);
  for (std::int64_t i = 0; i < a.val().size(); ++i) s += a.val()[i];
  const bool ng = t.needs_grad(a.id);
  Var<S> o = t.push(TensorT<S>({1}, {s}), ng, nullptr);
  if (ng) {
    t.set_backprop(o.id, [&t, ai = a.id, oi = o.id] {
      const S g = t.grad(oi)[0];
      auto& dx = t.grad(ai);
      for (std::int64_t i = 0; i < dx.size(); ++i) dx[i] += g;
    });
  }
  return o;
}

template <typename S>
Var<S> mean_all(Var<S> a) {
  check_arg(a.val().size() > 0, "mean_all: empty input");
  return scale(sum_all(a), S(1) / S(a.val().size()));
}

// sum(x .* w) for a fixed weight tensor; asymmetric scalarizer used by the
// finite-difference checks so transposition bugs cannot cancel out.
template <typename S>
Var<S> weighted_sum(Var<S> a, TensorT<S> w) {
  Tape<S>& t = *a.tape;
  check_arg(a.val().same_shape(w), "weighted_sum: weight shape mismatch");
  S s = S(0);
  for (std::int64_t i = 0; i < w.size(); ++i) s += a.val()[i] * w[i];
  const bool ng = t.needs_grad(a.id);
  auto wp = std::make_shared<TensorT<S>>(std::move(w));
  Var<S> o = t.push(TensorT<S>({1}, {s}), ng, nullptr);
  if (ng) {
    t.set_backprop(o.id, [&t, ai = a.id, oi = o.id, wp] {
      const S g = t.grad(oi)[0];
      auto& dx = t.grad(ai);
      for (std::int64_t i = 0; i < dx.size(); ++i) dx[i] += g * (*wp)[i];
    });
  }
  return o;
}

// Mean squared error over all elements.
template <typename S>
Var<S> mse_loss(Var<S> pred, TensorT<S> target) {
  Tape<S>& t = *pred.tape;
  check_arg(pred.val().same_shape(target), "mse_loss: target shape mismatch");
  check_arg(target.size() > 0, "mse_loss: empty target");
  const std::int64_t n = target.size();
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(pred.val()[i]) - static_cast<double>(target[i]);
    s += d * d;
  }
  const bool ng = t.needs_grad(pred.id);
  auto tp = std::make_shared<TensorT<S>>(std::move(target));
  Var<S> o = t.push(TensorT<S>({1}, {static_cast<S>(s / static_cast<double>(n))}), ng, nullptr);
  if (ng) {
    t.set_backprop(o.id, [&t, pi = pred.id, oi = o.id, tp, n] {
      const S g = t.grad(oi)[0] * S(2) / S(n);
      kernels::zip_acc(n, t.value(pi).data(), tp->data(), t.grad(pi).data(),
                       [g](S p, S y) { return g * (p - y); });
    });
  }
  return o;
}

// Binary cross-entropy on probabilities.  Inputs are clamped away from 0/1
// and the gradient is zeroed where the clamp engaged.
template <typename S>
Var<S> bce_loss(Var<S> pred, TensorT<S> target, S clamp_eps = S(1e-7)) {
  Tape<S>& t = *pred.tape;
  check_arg(pred.val().same_shape(target), "bce_loss: target shape mismatch");
  check_arg(target.size() > 0, "bce_loss: empty target");
  const std::int64_t n = target.size();
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double p = std::min(std::max(static_cast<double>(pred.val()[i]),
                                       static_cast<double>(clamp_eps)),
                              1.0 - static_cast<double>(clamp_eps));
    const double y = static_cast<double>(target[i]);
    s -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
  }
  const bool ng = t.needs_grad(pred.id);
  auto tp = std::make_shared<TensorT<S>>(std::move(target));
  Var<S> o = t.push(TensorT<S>({1}, {static_cast<S>(s / static_cast<double>(n))}), ng, nullptr);
  if (ng) {
    t.set_backprop(o.id, [&t, pi = pred.id, oi = o.id, tp, n, clamp_eps] {
      const S g = t.grad(oi)[0] / S(n);
      const auto& pv = t.value(pi);
      auto& dx = t.grad(pi);
      for (std::int64_t i = 0; i < n; ++i) {
        const S p = pv[i];
        if (p < clamp_eps || p > S(1) - clamp_eps) continue;
        dx[i] += g * (p - (*tp)[i]) / (p * (S(1) - p));
      }
    });
  }
  return o;
}

// Mean absolute error over all elements; sign subgradient, 0 at ties.
template <typename S>
Var<S> mae_loss(Var<S> pred, TensorT<S> target) {
  Tape<S>& t = *pred.tape;
  check_arg(pred.val().same_shape(target), "mae_loss: target shape mismatch");
  check_arg(target.size() > 0, "mae_loss: empty target");
  const std::int64_t n = target.size();
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i)
    s += std::abs(static_cast<double>(pred.val()[i]) - static_cast<double>(target[i]));
  const bool ng = t.needs_grad(pred.id);
  auto tp = std::make_shared<TensorT<S>>(std::move(target));
  Var<S> o = t.push(TensorT<S>({1}, {static_cast<S>(s / static_cast<double>(n))}), ng, nullptr);
  if (ng) {
    t.set_backprop(o.id, [&t, pi = pred.id, oi = o.id, tp, n] {
      const S g = t.grad(oi)[0] / S(n);
      kernels::zip_acc(n, t.value(pi).data(), tp->data(), t.grad(pi).data(),
                       [g](S p, S y) {
                         return p > y ? g : (p < y ? -g : S(0));
                       });
    });
  }
  return o;
}

// MAE over a row subset; masked rows contribute neither error nor count.
template <typename S>
Var<S> mae_loss_masked(Var<S> pred, TensorT<S> target,
                       std::vector<unsigned char> keep_row) {
  Tape<S>& t = *pred.tape;
  check_arg(pred.val().same_shape(target), "mae_loss: target shape mismatch");
  check_arg(target.rank() == 2, "mae_loss: rank-2 input required for row masking");
  const int rows = target.rows(), cols = target.cols();
  check_arg(static_cast<int>(keep_row.size()) == rows, "mae_loss: mask length mismatch");
  std::int64_t kept = 0;
  for (unsigned char k : keep_row) kept += k ? 1 : 0;
  check_arg(kept > 0, "mae_loss: every row is masked");
  const std::int64_t n = kept * cols;
  double s = 0.0;
  for (int i = 0; i < rows; ++i) {
    if (!keep_row[static_cast<std::size_t>(i)]) continue;
    for (int j = 0; j < cols; ++j)
      s += std::abs(static_cast<double>(pred.val().at(i, j)) -
                    static_cast<double>(target.at(i, j)));
  }
  const bool ng = t.needs_grad(pred.id);
  auto tp = std::make_shared<TensorT<S>>(std::move(target));
  auto mask = std::make_shared<std::vector<unsigned char>>(std::move(keep_row));
  Var<S> o = t.push(TensorT<S>({1}, {static_cast<S>(s / static_cast<double>(n))}), ng, nullptr);
  if (ng) {
    t.set_backprop(o.id, [&t, pi = pred.id, oi = o.id, tp, mask, rows, cols, n] {
      const S g = t.grad(oi)[0] / S(n);
      const auto& pv = t.value(pi);
      auto& pg = t.grad(pi);
      for (int i = 0; i < rows; ++i) {
        if (!(*mask)[static_cast<std::size_t>(i)]) continue;
        for (int j = 0; j < cols; ++j) {
          const S p = pv.at(i, j), y = tp->at(i, j);
          pg.at(i, j) += p > y ? g : (p < y ? -g : S(0));
        }
      }
    });
  }
  return o;
}

namespace detail {

// C[m x n] = op(A) . op(B) in double, serial; DCCA matrices are small.
inline void dgemm(bool ta, bool tb, int m, int n, int k, const double* a,
                  const double* b, double* c) {
  kernels::gemm_ref(ta, tb, m, n, k, a, b, c, false);
}

}  // namespace detail

// Sum of singular values of T = Saa^-1/2 Sab Sbb^-1/2 computed from the
// regularized covariances of the (centered) inputs.  Differentiable in
// both inputs; all internals run in double regardless of S.
template <typename S>
Var<S> dcca_corr(Var<S> a, Var<S> b, double r1, double r2, double eigen_floor) {
  Tape<S>& t = *a.tape;
  const auto& av = a.val();
  const auto& bv = b.val();
  check_arg(av.rank() == 2 && bv.rank() == 2, "dcca: rank-2 inputs required");
  check_arg(av.rows() == bv.rows(),
            cat("dcca: sample counts ", av.rows(), " vs ", bv.rows()));
  const int N = av.rows(), da = av.cols(), db = bv.cols();
  if (N < 2) throw NumericError(cat("dcca: need at least 2 samples, got ", N));

  // Centered copies, double.
  auto Ac = std::make_shared<std::vector<double>>(static_cast<std::size_t>(N) * da);
  auto Bc = std::make_shared<std::vector<double>>(static_cast<std::size_t>(N) * db);
  auto center = [N](const auto& src, std::vector<double>& dst, int d) {
    std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < d; ++j)
        mean[static_cast<std::size_t>(j)] += static_cast<double>(src[static_cast<std::int64_t>(i) * d + j]);
    for (double& m : mean) m /= N;
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < d; ++j)
        dst[static_cast<std::size_t>(i) * d + j] =
            static_cast<double>(src[static_cast<std::int64_t>(i) * d + j]) -
            mean[static_cast<std::size_t>(j)];
  };
  center(av, *Ac, da);
  center(bv, *Bc, db);

  const double denom = static_cast<double>(N - 1);
  std::vector<double> Saa(static_cast<std::size_t>(da) * da);
  std::vector<double> Sbb(static_cast<std::size_t>(db) * db);
  std::vector<double> Sab(static_cast<std::size_t>(da) * db);
  detail::dgemm(true, false, da, da, N, Ac->data(), Ac->data(), Saa.data());
  detail::dgemm(true, false, db, db, N, Bc->data(), Bc->data(), Sbb.data());
  detail::dgemm(true, false, da, db, N, Ac->data(), Bc->data(), Sab.data());
  for (auto& v : Saa) v /= denom;
  for (auto& v : Sbb) v /= denom;
  for (auto& v : Sab) v /= denom;
  for (int i = 0; i < da; ++i) Saa[static_cast<std::size_t>(i) * da + i] += r1;
  for (int i = 0; i < db; ++i) Sbb[static_cast<std::size_t>(i) * db + i] += r2;
  auto all_finite = [](const std::vector<double>& m) {
    for (double v : m)
      if (!std::isfinite(v)) return false;
    return true;
  };
  if (!all_finite(Saa)) throw NumericError("dcca: non-finite covariance Saa");
  if (!all_finite(Sbb)) throw NumericError("dcca: non-finite covariance Sbb");
  if (!all_finite(Sab)) throw NumericError("dcca: non-finite covariance Sab");

  auto isa = std::make_shared<std::vector<double>>(static_cast<std::size_t>(da) * da);
  auto isb = std::make_shared<std::vector<double>>(static_cast<std::size_t>(db) * db);
  auto floor_inv_sqrt = [eigen_floor](double l) {
    return 1.0 / std::sqrt(l < eigen_floor ? eigen_floor : l);
  };
  sym_apply(da, Saa.data(), isa->data(), floor_inv_sqrt);
  sym_apply(db, Sbb.data(), isb->data(), floor_inv_sqrt);

  auto T = std::make_shared<std::vector<double>>(static_cast<std::size_t>(da) * db);
  {
    std::vector<double> tmp(static_cast<std::size_t>(da) * db);
    detail::dgemm(false, false, da, db, da, isa->data(), Sab.data(), tmp.data());
    detail::dgemm(false, false, da, db, db, tmp.data(), isb->data(), T->data());
  }

  std::vector<double> M(static_cast<std::size_t>(db) * db);
  detail::dgemm(true, false, db, db, da, T->data(), T->data(), M.data());
  auto V = std::make_shared<std::vector<double>>();
  std::vector<double> lam;
  sym_eig(db, M.data(), lam, *V);
  auto sv = std::make_shared<std::vector<double>>(static_cast<std::size_t>(db));
  double corr = 0.0;
  for (int i = 0; i < db; ++i) {
    // Eigenvalues at or below the floor are indistinguishable from the
    // eigensolver's noise; the square root would amplify that noise into
    // the value, so they contribute exactly zero (a normalized latent has
    // rank-deficient covariance, which parks one eigenvalue here).
    const double l = lam[static_cast<std::size_t>(i)];
    (*sv)[static_cast<std::size_t>(i)] = l > eigen_floor ? std::sqrt(l) : 0.0;
    corr += (*sv)[static_cast<std::size_t>(i)];
  }

  const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
  Var<S> o = t.push(TensorT<S>({1}, {static_cast<S>(corr)}), ng, nullptr);
  if (ng) {
    t.set_backprop(o.id, [&t, ai = a.id, bi = b.id, oi = o.id, Ac, Bc, isa, isb,
                          T, V, sv, N, da, db, denom] {
      const double g = static_cast<double>(t.grad(oi)[0]);
      if (g == 0.0) return;
      // Upolar = T V diag(1/sv) V^T, with zero where sv vanishes.
      std::vector<double> Vs(static_cast<std::size_t>(db) * db);
      std::vector<double> VsT(static_cast<std::size_t>(db) * db);
      for (int i = 0; i < db; ++i) {
        const double s = (*sv)[static_cast<std::size_t>(i)];
        const double inv = s > 1e-12 ? 1.0 / s : 0.0;
        for (int r = 0; r < db; ++r) {
          Vs[static_cast<std::size_t>(r) * db + i] = (*V)[static_cast<std::size_t>(r) * db + i] * inv;
          VsT[static_cast<std::size_t>(r) * db + i] = (*V)[static_cast<std::size_t>(r) * db + i] * s;
        }
      }
      std::vector<double> inner(static_cast<std::size_t>(db) * db);
      detail::dgemm(false, true, db, db, db, Vs.data(), V->data(), inner.data());
      std::vector<double> Upolar(static_cast<std::size_t>(da) * db);
      detail::dgemm(false, false, da, db, db, T->data(), inner.data(), Upolar.data());

      // grad_ab = isa Upolar isb
      std::vector<double> tmp_ab(static_cast<std::size_t>(da) * db);
      std::vector<double> grad_ab(static_cast<std::size_t>(da) * db);
      detail::dgemm(false, false, da, db, da, isa->data(), Upolar.data(), tmp_ab.data());
      detail::dgemm(false, false, da, db, db, tmp_ab.data(), isb->data(), grad_ab.data());

      // grad_aa = -1/2 isa (Upolar T^T) isa
      std::vector<double> UT(static_cast<std::size_t>(da) * da);
      detail::dgemm(false, true, da, da, db, Upolar.data(), T->data(), UT.data());
      std::vector<double> tmp_aa(static_cast<std::size_t>(da) * da);
      std::vector<double> grad_aa(static_cast<std::size_t>(da) * da);
      detail::dgemm(false, false, da, da, da, isa->data(), UT.data(), tmp_aa.data());
      detail::dgemm(false, false, da, da, da, tmp_aa.data(), isa->data(), grad_aa.data());
      for (auto& v : grad_aa) v *= -0.5;

      // grad_bb = -1/2 isb (V diag(sv) V^T) isb
      std::vector<double> VDV(static_cast<std::size_t>(db) * db);
      detail::dgemm(false, true, db, db, db, VsT.data(), V->data(), VDV.data());
      std::vector<double> tmp_bb(static_cast<std::size_t>(db) * db);
      std::vector<double> grad_bb(static_cast<std::size_t>(db) * db);
      detail::dgemm(false, false, db, db, db, isb->data(), VDV.data(), tmp_bb.data());
      detail::dgemm(false, false, db, db, db, tmp_bb.data(), isb->data(), grad_bb.data());
      for (auto& v : grad_bb) v *= -0.5;

      // dA = g/(N-1) (2 Ac grad_aa + Bc grad_ab^T)
      if (t.needs_grad(ai)) {
        std::vector<double> dA(static_cast<std::size_t>(N) * da);
        detail::dgemm(false, false, N, da, da, Ac->data(), grad_aa.data(), dA.data());
        std::vector<double> dA2(static_cast<std::size_t>(N) * da);
        detail::dgemm(false, true, N, da, db, Bc->data(), grad_ab.data(), dA2.data());
        auto& dst = t.grad(ai);
        for (std::int64_t i = 0; i < dst.size(); ++i)
          dst[i] += static_cast<S>(g / denom *
                                   (2.0 * dA[static_cast<std::size_t>(i)] +
                                    dA2[static_cast<std::size_t>(i)]));
      }
      // dB = g/(N-1) (2 Bc grad_bb + Ac grad_ab)
      if (t.needs_grad(bi)) {
        std::vector<double> dB(static_cast<std::size_t>(N) * db);
        detail::dgemm(false, false, N, db, db, Bc->data(), grad_bb.data(), dB.data());
        std::vector<double> dB2(static_cast<std::size_t>(N) * db);
        detail::dgemm(false, false, N, db, da, Ac->data(), grad_ab.data(), dB2.data());
        auto& dst = t.grad(bi);
        for (std::int64_t i = 0; i < dst.size(); ++i)
          dst[i] += static_cast<S>(g / denom *
                                   (2.0 * dB[static_cast<std::size_t>(i)] +
                                    dB2[static_cast<std::size_t>(i)]));
      }
    });
  }
  return o;
}

// Scaled dot-product attention over clip-local windows: rows mix only
// within their own clip.  Dropout acts on the attention weights.
template <typename S>
Var<S> attention_core(Var<S> q, Var<S> k, Var<S> v, const ClipSpans& spans,
                      double attn_dropout, std::uint64_t seed, bool train) {
  Tape<S>& t = *q.tape;
  check_arg(q.val().rank() == 2 && k.val().rank() == 2 && v.val().rank() == 2,
            "attention: rank-2 inputs required");
  check_arg(q.val().rows() == k.val().rows() && k.val().rows() == v.val().rows(),
            "attention: row counts differ");
  check_arg(q.val().cols() == k.val().cols(), "attention: query/key width differ");
  check_arg(spans.total() == q.val().rows(), "attention: spans do not cover rows");
  const int dk = q.val().cols();
  const int dv = v.val().cols();
  const S scal = S(1.0 / std::sqrt(static_cast<double>(dk)));

  std::int64_t attn_elems = 0;
  for (int c = 0; c < spans.clips(); ++c) attn_elems += spans.len(c) * spans.len(c);
  auto attn = std::make_shared<std::vector<S>>(static_cast<std::size_t>(attn_elems));
  auto mask = std::make_shared<std::vector<S>>();
  const bool use_drop = train && attn_dropout > 0.0;
  if (use_drop) {
    mask->resize(static_cast<std::size_t>(attn_elems));
    Rng rng(seed);
    const S inv_keep = S(1.0 / (1.0 - attn_dropout));
    for (auto& mv : *mask) mv = rng.uniform() >= attn_dropout ? inv_keep : S(0);
  }

  TensorT<S> out({static_cast<int>(spans.total()), dv});
  std::int64_t attn_off = 0;
  for (int c = 0; c < spans.clips(); ++c) {
    const int tl = static_cast<int>(spans.len(c));
    const std::int64_t row0 = spans.begin(c);
    const S* qc = q.val().data() + row0 * dk;
    const S* kc = k.val().data() + row0 * dk;
    const S* vc = v.val().data() + row0 * dv;
    S* ac = attn->data() + attn_off;
    kernels::gemm(false, true, tl, tl, dk, qc, kc, ac, false);
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(tl) * tl; ++i) ac[i] *= scal;
    for (int i = 0; i < tl; ++i) {
      S* row = ac + static_cast<std::int64_t>(i) * tl;
      S mx = row[0];
      for (int j = 1; j < tl; ++j) mx = std::max(mx, row[j]);
      S z = S(0);
      for (int j = 0; j < tl; ++j) {
        row[j] = std::exp(row[j] - mx);
        z += row[j];
      }
      for (int j = 0; j < tl; ++j) row[j] /= z;
    }
    if (use_drop) {
      const S* mc = mask->data() + attn_off;
      std::vector<S> dropped(static_cast<std::size_t>(tl) * tl);
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(tl) * tl; ++i)
        dropped[static_cast<std::size_t>(i)] = ac[i] * mc[i];
      kernels::gemm(false, false, tl, dv, tl, dropped.data(), vc,
                    out.data() + row0 * dv, false);
    } else {
      kernels::gemm(false, false, tl, dv, tl, ac, vc, out.data() + row0 * dv, false);
    }
    attn_off += static_cast<std::int64_t>(tl) * tl;
  }

  const bool ng = t.needs_grad(q.id) || t.needs_grad(k.id) || t.needs_grad(v.id);
  Var<S> o = t.push(std::move(out), ng, nullptr);
  if (ng) {
    t.set_backprop(o.id, [&t, qi = q.id, ki = k.id, vi = v.id, oi = o.id, spans,
                          attn, mask, use_drop, dk, dv, scal] {
      const auto& g = t.grad(oi);
      std::int64_t attn_off2 = 0;
      for (int c = 0; c < spans.clips(); ++c) {
        const int tl = static_cast<int>(spans.len(c));
        const std::int64_t row0 = spans.begin(c);
        const S* gc = g.data() + row0 * dv;
        const S* ac = attn->data() + attn_off2;
        const S* mc = use_drop ? mask->data() + attn_off2 : nullptr;
        const S* qc = t.value(qi).data() + row0 * dk;
        const S* kc = t.value(ki).data() + row0 * dk;
        const S* vc = t.value(vi).data() + row0 * dv;

        std::vector<S> a_eff(static_cast<std::size_t>(tl) * tl);
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(tl) * tl; ++i)
          a_eff[static_cast<std::size_t>(i)] = use_drop ? ac[i] * mc[i] : ac[i];

        if (t.needs_grad(vi)) {
          kernels::gemm(true, false, tl, dv, tl, a_eff.data(), gc,
                        t.grad(vi).data() + row0 * dv, true);
        }
        if (t.needs_grad(qi) || t.needs_grad(ki)) {
          std::vector<S> dA(static_cast<std::size_t>(tl) * tl);
          kernels::gemm(false, true, tl, tl, dv, gc, vc, dA.data(), false);
          if (use_drop) {
            for (std::int64_t i = 0; i < static_cast<std::int64_t>(tl) * tl; ++i)
              dA[static_cast<std::size_t>(i)] *= mc[i];
          }
          // softmax rows backward, then the 1/sqrt(dk) scale.
          std::vector<S> dS(static_cast<std::size_t>(tl) * tl);
          for (int i = 0; i < tl; ++i) {
            const std::int64_t off = static_cast<std::int64_t>(i) * tl;
            S dot = S(0);
            for (int j = 0; j < tl; ++j) dot += dA[static_cast<std::size_t>(off + j)] * ac[off + j];
            for (int j = 0; j < tl; ++j)
              dS[static_cast<std::size_t>(off + j)] =
                  ac[off + j] * (dA[static_cast<std::size_t>(off + j)] - dot) * scal;
          }
          if (t.needs_grad(qi))
            kernels::gemm(false, false, tl, dk, tl, dS.data(), kc,
                          t.grad(qi).data() + row0 * dk, true);
          if (t.needs_grad(ki))
            kernels::gemm(true, false, tl, dk, tl, dS.data(), qc,
                          t.grad(ki).data() + row0 * dk, true);
        }
        attn_off2 += static_cast<std::int64_t>(tl) * tl;
      }
    });
  }
  return o;
}

}  // namespace cmstew::ops
