#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "metal/errors.hpp"
#include "metal/ndmath/dense_array.hpp"

namespace metal {

struct CgResult {
  Vector x;
  double residual_norm = 0.0;
  int iterations = 0;
  std::vector<double> residual_history;  // ‖b - A·x‖ after each iteration, entry 0 is ‖b‖
};

/// Solves A·x = b for a symmetric positive-definite operator given only as a
/// matrix-vector product.
///
/// Uses the conjugate-residual recurrence: it spans the same Krylov spaces as
/// classical CG but minimizes ‖b - A·x‖₂ at every iteration, so the reported
/// residual never increases. Costs one operator application per iteration.
inline CgResult conjugate_gradient(const std::function<Vector(const Vector&)>& matvec, const Vector& b,
                                   int iterations, double residual_tolerance) {
  CgResult out;
  out.x = Vector::Zero(b.size());
  Vector r = b;
  double r_norm = r.norm();
  out.residual_history.push_back(r_norm);
  out.residual_norm = r_norm;
  if (r_norm <= residual_tolerance) return out;

  Vector ar = matvec(r);
  Vector p = r;
  Vector ap = ar;
  double r_ar = r.dot(ar);
  for (int it = 0; it < iterations; ++it) {
    const double ap_ap = ap.squaredNorm();
    if (!std::isfinite(r_ar) || !std::isfinite(ap_ap)) throw DivergenceError("conjugate_gradient: non-finite iterate");
    if (ap_ap == 0.0) break;
    const double alpha = r_ar / ap_ap;
    out.x += alpha * p;
    r -= alpha * ap;
    ++out.iterations;
    r_norm = r.norm();
    if (!std::isfinite(r_norm)) throw DivergenceError("conjugate_gradient: non-finite residual");
    out.residual_history.push_back(r_norm);
    out.residual_norm = r_norm;
    if (r_norm <= residual_tolerance) break;
    ar = matvec(r);
    const double r_ar_next = r.dot(ar);
    const double beta = r_ar_next / r_ar;
    r_ar = r_ar_next;
    p = r + beta * p;
    ap = ar + beta * ap;
  }
  return out;
}

}  // namespace metal
