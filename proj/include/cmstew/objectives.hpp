// Copyright 2026 cmstew authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "cmstew/models.hpp"
#include "cmstew/ops.hpp"

namespace cmstew {

struct DccaOptions {
  double r1 = 1e-3;
  double r2 = 1e-3;
  double eigen_floor = 1e-12;
};

// Lp: mean squared error for regression, binary cross-entropy for
// classification (conventional sign, i.e. a quantity to minimize).
template <typename S>
Var<S> prediction_loss(Task task, Var<S> pred, TensorT<S> target) {
  return task == Task::classification ? ops::bce_loss(pred, std::move(target))
                                      : ops::mse_loss(pred, std::move(target));
}

// La: negated total correlation between the two latent views, so that
// minimizing the objective aligns them.
template <typename S>
Var<S> alignment_loss(Var<S> strong_latent, Var<S> weak_latent, const DccaOptions& o) {
  return ops::scale(
      ops::dcca_corr(strong_latent, weak_latent, o.r1, o.r2, o.eigen_floor), S(-1));
}

// Lt: mean absolute error between reconstructed and standardized strong
// features.
template <typename S>
Var<S> translation_loss(Var<S> recon, TensorT<S> strong_target) {
  return ops::mae_loss(recon, std::move(strong_target));
}

// L = Lp + alpha * La + beta * Lt.  Absent terms are simply not added so
// their graphs are never built.
template <typename S>
Var<S> total_loss(Var<S> lp, std::optional<Var<S>> la, std::optional<Var<S>> lt,
                  double alpha, double beta) {
  Var<S> total = lp;
  if (la) total = ops::add(total, ops::scale(*la, static_cast<S>(alpha)));
  if (lt) total = ops::add(total, ops::scale(*lt, static_cast<S>(beta)));
  return total;
}

// Scalar form used by the training loop; rejects a non-finite term by name
// so divergence reports say which loss blew up.
inline double total_loss_value(double lp, std::optional<double> la,
                               std::optional<double> lt, double alpha, double beta) {
  auto want_finite = [](double v, const char* term) {
    if (!std::isfinite(v))
      throw DivergenceError(cat("non-finite ", term, " (", v, ")"));
  };
  want_finite(lp, "loss_p");
  double total = lp;
  if (la) {
    want_finite(*la, "loss_a");
    total += alpha * *la;
  }
  if (lt) {
    want_finite(*lt, "loss_t");
    total += beta * *lt;
  }
  return total;
}

// Fraction of predictions on the correct side of the threshold; a value
// exactly at the threshold counts as a positive call.
inline double binary_accuracy(const std::vector<double>& pred,
                              const std::vector<double>& label,
                              double threshold = 0.5) {
  check_arg(pred.size() == label.size(), "accuracy: size mismatch");
  check_arg(!pred.empty(), "accuracy: empty input");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int p = pred[i] >= threshold ? 1 : 0;
    const int y = label[i] >= 0.5 ? 1 : 0;
    if (p == y) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

// Support-weighted mean of the per-class F1 scores over both classes.
// A class with zero precision+recall contributes F1 = 0.
inline double weighted_f1(const std::vector<double>& pred,
                          const std::vector<double>& label) {
  check_arg(pred.size() == label.size(), "weighted_f1: size mismatch");
  check_arg(!pred.empty(), "weighted_f1: empty input");
  auto f1_for = [&](int positive) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const int p = pred[i] >= 0.5 ? 1 : 0;
      const int y = label[i] >= 0.5 ? 1 : 0;
      if (p == positive && y == positive) ++tp;
      else if (p == positive) ++fp;
      else if (y == positive) ++fn;
    }
    const double prec_den = tp + fp, rec_den = tp + fn;
    const double prec = prec_den > 0 ? tp / prec_den : 0.0;
    const double rec = rec_den > 0 ? tp / rec_den : 0.0;
    return prec + rec > 0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
  };
  double support_pos = 0;
  for (double y : label) support_pos += y >= 0.5 ? 1.0 : 0.0;
  const double support_neg = static_cast<double>(label.size()) - support_pos;
  return (f1_for(1) * support_pos + f1_for(0) * support_neg) /
         static_cast<double>(label.size());
}

// Concordance correlation, population (1/N) statistics throughout.
inline double ccc(const std::vector<double>& pred, const std::vector<double>& label) {
  check_arg(pred.size() == label.size(), "ccc: size mismatch");
  check_arg(!pred.empty(), "ccc: empty input");
  const double n = static_cast<double>(pred.size());
  double mp = 0, my = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    mp += pred[i];
    my += label[i];
  }
  mp /= n;
  my /= n;
  double vp = 0, vy = 0, cov = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double dp = pred[i] - mp, dy = label[i] - my;
    vp += dp * dp;
    vy += dy * dy;
    cov += dp * dy;
  }
  vp /= n;
  vy /= n;
  cov /= n;
  const double denom = vp + vy + (mp - my) * (mp - my);
  if (denom == 0.0)
    throw NumericError("ccc: degenerate inputs, denominator is zero");
  return 2.0 * cov / denom;
}

}  // namespace cmstew
