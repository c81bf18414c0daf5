#pragma once

#include <cmath>
#include <stdexcept>

#include "metal/errors.hpp"
#include "metal/ndmath/dense_array.hpp"

namespace metal {

struct AdamState {
  long step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Vector m;
  Vector v;

  static AdamState for_size(Eigen::Index n, double lr = 1e-3) {
    AdamState s;
    s.lr = lr;
    s.m = Vector::Zero(n);
    s.v = Vector::Zero(n);
    return s;
  }
};

/// One bias-corrected Adam update (descent direction).
inline void adam_step(AdamState& state, Vector& params, const Vector& grads) {
  if (params.size() != grads.size() || state.m.size() != params.size() || state.v.size() != params.size())
    throw std::invalid_argument("adam_step: parameter, gradient and moment sizes differ");
  if (!grads.allFinite()) throw DivergenceError("adam_step: non-finite gradient");
  ++state.step;
  state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads;
  state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads.cwiseAbs2();
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  params.array() -= state.lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + state.eps);
}

}  // namespace metal
