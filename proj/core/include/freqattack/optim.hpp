#pragma once

#include <cmath>
#include <cstddef>
#include <functional>

#include "freqattack/ndarray.hpp"

namespace freqattack {

template <typename Real>
struct AdamState {
  std::size_t step = 0;
  NdArray<Real> first_moment;
  NdArray<Real> second_moment;
  Real beta1 = Real(0.9);
  Real beta2 = Real(0.999);
  Real epsilon = Real(1e-8);
};

/// One Adam update with bias correction. Moments are zero-initialised on the
/// first call; afterwards their shape must match `variable`.
template <typename Real>
void adam_step(AdamState<Real>& state, NdArray<Real>& variable, const NdArray<Real>& grad, Real lr) {
  require_same_shape(variable, grad, "adam_step gradient");
  if (!(lr > Real{0})) fail(ErrorKind::InvalidConfig, "adam_step learning rate must be > 0");
  if (state.first_moment.empty() && state.second_moment.empty()) {
    state.first_moment = NdArray<Real>(variable.shape());
    state.second_moment = NdArray<Real>(variable.shape());
  }
  require_same_shape(state.first_moment, variable, "adam_step first moment");
  require_same_shape(state.second_moment, variable, "adam_step second moment");

  ++state.step;
  const auto t = static_cast<Real>(state.step);
  const Real correction1 = Real{1} - std::pow(state.beta1, t);
  const Real correction2 = Real{1} - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < variable.size(); ++i) {
    Real& m = state.first_moment[i];
    Real& v = state.second_moment[i];
    m = state.beta1 * m + (Real{1} - state.beta1) * grad[i];
    v = state.beta2 * v + (Real{1} - state.beta2) * grad[i] * grad[i];
    variable[i] -= lr * (m / correction1) / (std::sqrt(v / correction2) + state.epsilon);
  }
  require_finite(variable, "adam_step produced non-finite values");
}

/// Central-difference gradient estimate (f(x+h·e_k) − f(x−h·e_k)) / 2h.
/// Throws NonFiniteEvaluation if any evaluation is not finite.
template <typename Real>
NdArray<Real> finite_diff_grad(const std::function<Real(const NdArray<Real>&)>& f,
                               const NdArray<Real>& point, Real h) {
  if (!(h > Real{0})) fail(ErrorKind::InvalidConfig, "finite difference step must be > 0");
  NdArray<Real> grad(point.shape());
  NdArray<Real> probe = point;
  for (std::size_t k = 0; k < point.size(); ++k) {
    probe[k] = point[k] + h;
    const Real up = f(probe);
    probe[k] = point[k] - h;
    const Real down = f(probe);
    probe[k] = point[k];
    if (!std::isfinite(up) || !std::isfinite(down)) {
      fail(ErrorKind::NonFiniteEvaluation, "finite difference probe " + std::to_string(k));
    }
    grad[k] = (up - down) / (Real{2} * h);
  }
  return grad;
}

}  // namespace freqattack
