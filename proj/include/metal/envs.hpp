#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>

#include "metal/errors.hpp"
#include "metal/ndmath/dense_array.hpp"
#include "metal/rng.hpp"

namespace metal {

// Point mass: state (x, y, vx, vy), action (ax, ay) in [-1, 1]².
// Pendulum:   state (cos θ, sin θ, θ̇),  action torque in [-2, 2].
enum class Body { PointMass, Pendulum };

struct MdpSpec {
  Body body = Body::PointMass;
  int state_dim = 4;
  int action_dim = 2;
  Vector action_low;
  Vector action_high;
  int horizon = 50;
  double gamma = 0.99;
  double control_cost = 0.05;
  // Fixed per-coordinate scale applied to states before they reach a policy.
  Vector observation_scale;
  // p0: velocity half-width (point mass) or angular-velocity half-width (pendulum)
  double init_velocity = 0.05;

  void validate() const {
    if (horizon < 1) throw std::invalid_argument("MdpSpec: horizon must be >= 1");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("MdpSpec: discount must lie in [0, 1)");
    if (action_low.size() != action_dim || action_high.size() != action_dim)
      throw std::invalid_argument("MdpSpec: action bounds do not match action dimension");
    if ((action_low.array() > action_high.array()).any())
      throw std::invalid_argument("MdpSpec: action bounds are not well ordered");
  }
};

inline MdpSpec point_mass_spec(int horizon = 50) {
  MdpSpec s;
  s.body = Body::PointMass;
  s.state_dim = 4;
  s.action_dim = 2;
  s.action_low = Vector::Constant(2, -1.0);
  s.action_high = Vector::Constant(2, 1.0);
  s.horizon = horizon;
  s.control_cost = 0.05;
  s.observation_scale = (Vector(4) << 10.0, 10.0, 1.0, 1.0).finished();
  s.init_velocity = 0.05;
  return s;
}

inline MdpSpec pendulum_spec(int horizon = 50) {
  MdpSpec s;
  s.body = Body::Pendulum;
  s.state_dim = 3;
  s.action_dim = 1;
  s.action_low = Vector::Constant(1, -2.0);
  s.action_high = Vector::Constant(1, 2.0);
  s.horizon = horizon;
  s.control_cost = 0.01;
  s.observation_scale = (Vector(3) << 1.0, 1.0, 4.0).finished();
  s.init_velocity = 0.5;
  return s;
}

enum class FamilyKind { GoalVelocity1d, GoalVelocity2d, ForwardBackward };

inline std::string to_string(FamilyKind k) {
  switch (k) {
    case FamilyKind::GoalVelocity1d: return "goal-velocity-1d";
    case FamilyKind::GoalVelocity2d: return "goal-velocity-2d";
    case FamilyKind::ForwardBackward: return "forward-backward";
  }
  return "?";
}

/// Reward-parameter set Ψ with uniform p(ψ): an interval, a box, or {±1}.
struct TaskFamily {
  FamilyKind kind = FamilyKind::GoalVelocity1d;
  Vector low;   // unused for forward-backward
  Vector high;

  int psi_dim() const { return kind == FamilyKind::GoalVelocity2d ? 2 : 1; }

  bool contains(const Vector& psi) const {
    if (psi.size() != psi_dim()) return false;
    if (kind == FamilyKind::ForwardBackward) return psi[0] == 1.0 || psi[0] == -1.0;
    return (psi.array() >= low.array()).all() && (psi.array() <= high.array()).all();
  }

  void validate(const MdpSpec& spec) const {
    if (kind == FamilyKind::GoalVelocity2d && spec.body != Body::PointMass)
      throw std::invalid_argument("TaskFamily: goal-velocity-2d needs the point-mass body");
    if (kind != FamilyKind::ForwardBackward) {
      if (low.size() != psi_dim() || high.size() != psi_dim())
        throw std::invalid_argument("TaskFamily: bounds must have " + std::to_string(psi_dim()) + " entries");
      if ((low.array() > high.array()).any()) throw std::invalid_argument("TaskFamily: bounds are not well ordered");
    }
  }

  static TaskFamily interval(double lo, double hi) {
    return {FamilyKind::GoalVelocity1d, Vector::Constant(1, lo), Vector::Constant(1, hi)};
  }
  static TaskFamily box(const Vector& lo, const Vector& hi) { return {FamilyKind::GoalVelocity2d, lo, hi}; }
  static TaskFamily forward_backward() { return {FamilyKind::ForwardBackward, Vector(), Vector()}; }
};

struct Task {
  FamilyKind kind = FamilyKind::GoalVelocity1d;
  Vector psi;
};

inline Task sample_task(const TaskFamily& family, Rng& rng) {
  Task t{family.kind, Vector(family.psi_dim())};
  if (family.kind == FamilyKind::ForwardBackward) {
    t.psi[0] = std::bernoulli_distribution(0.5)(rng) ? 1.0 : -1.0;
  } else {
    for (int i = 0; i < family.psi_dim(); ++i) t.psi[i] = uniform(rng, family.low[i], family.high[i]);
  }
  return t;
}

struct DynamicsVariant {
  std::string name = "nominal";
  double drag = 0.1;
  Vector gains;
  double dt = 0.05;

  void validate(const MdpSpec& spec) const {
    if (drag < 0.0) throw std::invalid_argument("DynamicsVariant: drag must be >= 0");
    if (!(dt > 0.0)) throw std::invalid_argument("DynamicsVariant: dt must be > 0");
    if (gains.size() != spec.action_dim) throw std::invalid_argument("DynamicsVariant: one gain per actuator");
    if ((gains.array() < 0.0).any() || (gains.array() > 1.0).any())
      throw std::invalid_argument("DynamicsVariant: gains must lie in [0, 1]");
  }
};

inline DynamicsVariant nominal_variant(const MdpSpec& spec) {
  return {"nominal", spec.body == Body::PointMass ? 0.1 : 0.05, Vector::Ones(spec.action_dim), 0.05};
}

inline DynamicsVariant low_friction_variant(const MdpSpec& spec) {
  auto v = nominal_variant(spec);
  v.name = "low-friction";
  v.drag *= 0.5;
  return v;
}

inline DynamicsVariant crippled_variant(const MdpSpec& spec) {
  auto v = nominal_variant(spec);
  v.name = "crippled";
  v.gains[0] = 0.0;
  return v;
}

inline DynamicsVariant variant_by_name(const MdpSpec& spec, const std::string& name) {
  if (name == "nominal") return nominal_variant(spec);
  if (name == "low-friction") return low_friction_variant(spec);
  if (name == "crippled") return crippled_variant(spec);
  throw std::invalid_argument("unknown dynamics variant '" + name + "' (nominal | low-friction | crippled)");
}

struct Transition {
  Vector state;
  Vector action;
  Vector next_state;
  double reward = 0.0;
  int t = 0;
};

inline Vector reset(const MdpSpec& spec, Rng& rng) {
  Vector s = Vector::Zero(spec.state_dim);
  if (spec.body == Body::PointMass) {
    s[2] = uniform(rng, -spec.init_velocity, spec.init_velocity);
    s[3] = uniform(rng, -spec.init_velocity, spec.init_velocity);
  } else {
    // uniform(-π, π]
    const double theta = std::numbers::pi - uniform(rng, 0.0, 2.0 * std::numbers::pi);
    s[0] = std::cos(theta);
    s[1] = std::sin(theta);
    s[2] = uniform(rng, -spec.init_velocity, spec.init_velocity);
  }
  return s;
}

inline Vector clip_action(const MdpSpec& spec, const Vector& a) {
  return a.cwiseMax(spec.action_low).cwiseMin(spec.action_high);
}

/// One deterministic integrator step of the true dynamics. `action` is
/// clipped to the bounds before use.
inline Vector step_dynamics(const MdpSpec& spec, const DynamicsVariant& variant, const Vector& state,
                            const Vector& action) {
  if (state.size() != spec.state_dim || action.size() != spec.action_dim)
    throw std::invalid_argument("step_dynamics: state/action dimension mismatch");
  if (!state.allFinite()) throw DivergenceError("step_dynamics: non-finite state");
  const Vector a = clip_action(spec, action);
  const double dt = variant.dt;
  Vector next(spec.state_dim);
  if (spec.body == Body::PointMass) {
    for (int i = 0; i < 2; ++i) {
      const double v = state[2 + i] + dt * (variant.gains[i] * a[i] - variant.drag * state[2 + i]);
      next[2 + i] = v;
      next[i] = state[i] + dt * v;
    }
  } else {
    constexpr double g = 9.8, l = 1.0, m = 1.0, max_speed = 8.0;
    const double theta = std::atan2(state[1], state[0]);
    const double acc = -(g / l) * std::sin(theta) - variant.drag * state[2] + variant.gains[0] * a[0] / (m * l * l);
    const double w = std::clamp(state[2] + dt * acc, -max_speed, max_speed);
    const double th = theta + dt * w;
    next << std::cos(th), std::sin(th), w;
  }
  return next;
}

/// Column-wise `step_dynamics`.
inline Matrix step_dynamics(const MdpSpec& spec, const DynamicsVariant& variant, const Matrix& states,
                            const Matrix& actions) {
  Matrix next(states.rows(), states.cols());
  for (Eigen::Index j = 0; j < states.cols(); ++j)
    next.col(j) = step_dynamics(spec, variant, Vector(states.col(j)), Vector(actions.col(j)));
  return next;
}

/// Reward r_ψ(s, a) on the applied (already clipped) action.
inline double reward(const MdpSpec& spec, const Task& task, const Vector& state, const Vector& action) {
  const double control = spec.control_cost * action.squaredNorm();
  const double v = state[2];  // vx for the point mass, θ̇ for the pendulum
  switch (task.kind) {
    case FamilyKind::GoalVelocity1d: return -std::abs(v - task.psi[0]) - control;
    case FamilyKind::GoalVelocity2d:
      return -(std::abs(state[2] - task.psi[0]) + std::abs(state[3] - task.psi[1])) - control;
    case FamilyKind::ForwardBackward: return task.psi[0] * v - control;
  }
  return 0.0;
}

}  // namespace metal
