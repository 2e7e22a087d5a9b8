#pragma once

#include <cmath>
#include <functional>

#include "sfqn/autodiff.hpp"

namespace sfqn::ad {

struct GradCheckOptions {
  Real step = 1e-3;
  // Denominator floor so that two near-zero gradients compare absolutely.
  Real floor = 1e-6;
};

struct GradCheckResult {
  Real max_rel_error = 0;
  std::size_t worst_index = 0;
  DenseArray analytic;
  DenseArray numeric;
};

inline Real relative_error(Real a, Real b, Real floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Central finite differences against the reverse-mode gradient of a scalar
/// function. For spike nodes the reverse rule is the surrogate; run under
/// SpikeModeGuard(SpikeMode::smooth) so the forward matches it.
inline GradCheckResult grad_check(const std::function<Var(const Var&)>& f, const DenseArray& x,
                                  GradCheckOptions opts = {}) {
  GradCheckResult res;
  Var xv = parameter(x);
  Var y = f(xv);
  if (y.size() != 1) throw DimensionError("grad_check: function must return a scalar");
  if (!y.value().all_finite()) throw NumericError("grad_check: non-finite output");
  backward(y);
  res.analytic = xv.grad();
  res.numeric = DenseArray(x.shape());

  NoGradGuard no_grad;
  DenseArray probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + opts.step;
    const Real up = f(constant(probe)).value()[0];
    probe[i] = x[i] - opts.step;
    const Real down = f(constant(probe)).value()[0];
    probe[i] = x[i];
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericError("grad_check: non-finite output under perturbation");
    res.numeric[i] = (up - down) / (2 * opts.step);
    const Real e = relative_error(res.analytic[i], res.numeric[i], opts.floor);
    if (e > res.max_rel_error) {
      res.max_rel_error = e;
      res.worst_index = i;
    }
  }
  return res;
}

}  // namespace sfqn::ad
