// Copyright 2026 cmstew authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <unordered_set>
#include <vector>

#include "cmstew/rng.hpp"
#include "cmstew/tensor.hpp"

namespace cmstew {

struct GradCheckReport {
  double max_err = 0.0;  // max over coords of |analytic-central| / max(1,|central|)
  std::string worst_param;
  std::int64_t worst_coord = -1;
  std::int64_t coords_checked = 0;
};

// Central-difference check of analytic gradients, double precision.
// `loss_and_grad` must zero grads, run forward+backward and return the
// loss; `loss_only` must run forward alone with the current parameter
// values.  Coordinates are subsampled per parameter above
// `max_coords_per_param`.
inline GradCheckReport finite_difference_check(
    const std::function<double()>& loss_and_grad,
    const std::function<double()>& loss_only,
    const std::vector<ParameterT<double>*>& params, double eps,
    std::int64_t max_coords_per_param, Rng& rng) {
  check_arg(eps >= 1e-6 && eps <= 1e-4,
            cat("finite_difference_check: eps ", eps, " outside [1e-6, 1e-4]"));
  check_arg(max_coords_per_param > 0, "finite_difference_check: need coords > 0");

  const double base = loss_and_grad();
  if (!std::isfinite(base))
    throw NumericError("finite_difference_check: non-finite base loss");

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto* p : params)
    analytic.emplace_back(p->grad.data(), p->grad.data() + p->grad.size());

  GradCheckReport rep;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    ParameterT<double>& p = *params[pi];
    const std::int64_t n = p.value.size();
    std::vector<std::int64_t> coords;
    if (n <= max_coords_per_param) {
      coords.resize(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
    } else {
      std::unordered_set<std::int64_t> seen;
      while (static_cast<std::int64_t>(coords.size()) < max_coords_per_param) {
        const std::int64_t c = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n)));
        if (seen.insert(c).second) coords.push_back(c);
      }
    }
    for (std::int64_t c : coords) {
      const double orig = p.value[c];
      p.value[c] = orig + eps;
      const double lp = loss_only();
      p.value[c] = orig - eps;
      const double lm = loss_only();
      p.value[c] = orig;
      if (!std::isfinite(lp) || !std::isfinite(lm))
        throw NumericError(cat("finite_difference_check: non-finite loss while "
                               "perturbing ", p.name));
      const double central = (lp - lm) / (2.0 * eps);
      const double err = std::abs(analytic[pi][static_cast<std::size_t>(c)] - central) /
                         std::max(1.0, std::abs(central));
      ++rep.coords_checked;
      if (err > rep.max_err) {
        rep.max_err = err;
        rep.worst_param = p.name;
        rep.worst_coord = c;
      }
    }
  }
  return rep;
}

}  // namespace cmstew
