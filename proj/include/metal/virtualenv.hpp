#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "metal/dynmodel.hpp"
#include "metal/envs.hpp"
#include "metal/errors.hpp"
#include "metal/policy.hpp"
#include "metal/rng.hpp"

namespace metal {

/// Counts real-environment steps. Only `TrueDynamics` with a counter attached
/// ever increments it.
struct SampleCounter {
  std::int64_t real = 0;
};

/// The true simulator as a batched step model. With `counter` null it serves
/// as the oracle substitute for a learned model.
struct TrueDynamics {
  MdpSpec spec;
  DynamicsVariant variant;
  SampleCounter* counter = nullptr;

  Matrix step(const Matrix& states, const Matrix& actions) const {
    if (counter) counter->real += states.cols();
    return step_dynamics(spec, variant, states, actions);
  }
};

struct Trajectory {
  Task task;
  Matrix states;    // state_dim × (T+1)
  Matrix actions;   // sampled (unclipped) actions, action_dim × T
  Matrix applied;   // clipped actions fed to the dynamics, action_dim × T
  Matrix features;  // policy inputs, input_dim × T
  Eigen::RowVectorXd rewards;
  bool diverged = false;

  int length() const { return static_cast<int>(rewards.size()); }
  double total_reward() const { return rewards.sum(); }

  std::vector<Transition> transitions() const {
    std::vector<Transition> out;
    for (int t = 0; t < length(); ++t)
      out.push_back({states.col(t), applied.col(t), states.col(t + 1), rewards[t], t});
    return out;
  }
};

struct ActionBatch {
  Matrix features;
  Matrix actions;
};

/// Reparameterized sample mean + std·ε, with ε drawn from each column's own stream.
inline ActionBatch act(const GaussianPolicy& policy, const Matrix& states, const Matrix& psi,
                       std::span<Rng* const> rngs) {
  ActionBatch out;
  out.features = policy.features(states, psi);
  out.actions = policy.mean(out.features);
  const Vector std = policy.stddev();
  for (Eigen::Index j = 0; j < out.actions.cols(); ++j)
    for (Eigen::Index i = 0; i < out.actions.rows(); ++i) out.actions(i, j) += std[i] * standard_normal(*rngs[j]);
  return out;
}

template <class A>
concept Actor = requires(const A& a, const Matrix& s, const Matrix& psi, std::span<Rng* const> rngs) {
  { act(a, s, psi, rngs) } -> std::same_as<ActionBatch>;
};

inline constexpr double kStateLimit = 100.0;

/// Per-trajectory lengths for collecting exactly `samples` transitions.
inline std::vector<int> collection_lengths(std::int64_t samples, int horizon) {
  std::vector<int> lengths;
  for (std::int64_t left = samples; left > 0; left -= horizon)
    lengths.push_back(static_cast<int>(std::min<std::int64_t>(left, horizon)));
  return lengths;
}

/// Rolls out one trajectory per entry of `tasks` in lockstep.
///
/// Trajectory i draws its reset and its action noise from the substream
/// (seed, i), so results do not depend on batch composition. With
/// `divergence_guard` (virtual rollouts), a non-finite prediction truncates
/// the trajectory before that step and a state beyond ±100 is clipped and
/// ends it; both set `diverged`.
template <Actor P, StepModel D>
std::vector<Trajectory> rollout(const P& policy, const D& dynamics, const MdpSpec& spec, std::span<const Task> tasks,
                                std::span<const int> lengths, std::uint64_t seed, bool divergence_guard) {
  if (tasks.size() != lengths.size()) throw std::invalid_argument("rollout: one length per trajectory");
  const auto n = tasks.size();
  std::vector<Rng> rngs;
  rngs.reserve(n);
  std::vector<Trajectory> out(n);
  std::vector<Vector> current(n);
  int max_len = 0;
  for (std::size_t i = 0; i < n; ++i) {
    rngs.emplace_back(substream_seed(seed, "trajectory", {i}));
    current[i] = reset(spec, rngs[i]);
    out[i].task = tasks[i];
    max_len = std::max(max_len, lengths[i]);
  }
  // Growable per-trajectory buffers, trimmed at the end.
  std::vector<std::vector<Vector>> st(n), ac(n), ap(n), ft(n);
  std::vector<std::vector<double>> rw(n);
  std::vector<bool> done(n, false);
  for (std::size_t i = 0; i < n; ++i) st[i].push_back(current[i]);

  for (int t = 0; t < max_len; ++t) {
    std::vector<std::size_t> live;
    for (std::size_t i = 0; i < n; ++i)
      if (!done[i] && t < lengths[i]) live.push_back(i);
    if (live.empty()) break;
    const auto b = static_cast<Eigen::Index>(live.size());
    const int psi_dim = static_cast<int>(tasks[live[0]].psi.size());
    Matrix s(spec.state_dim, b), psi(psi_dim, b);
    std::vector<Rng*> col_rngs(live.size());
    for (Eigen::Index j = 0; j < b; ++j) {
      s.col(j) = current[live[j]];
      psi.col(j) = tasks[live[j]].psi;
      col_rngs[j] = &rngs[live[j]];
    }
    ActionBatch a = act(policy, s, psi, col_rngs);
    Matrix applied(spec.action_dim, b);
    for (Eigen::Index j = 0; j < b; ++j) applied.col(j) = clip_action(spec, a.actions.col(j));
    Matrix next = dynamics.step(s, applied);
    for (Eigen::Index j = 0; j < b; ++j) {
      const auto i = live[j];
      Vector nx = next.col(j);
      if (!nx.allFinite()) {
        if (!divergence_guard) throw DivergenceError("rollout: non-finite state");
        out[i].diverged = true;
        done[i] = true;
        continue;
      }
      bool clipped = false;
      if (divergence_guard && nx.cwiseAbs().maxCoeff() > kStateLimit) {
        nx = nx.cwiseMax(-kStateLimit).cwiseMin(kStateLimit);
        clipped = true;
      }
      ft[i].push_back(a.features.col(j));
      ac[i].push_back(a.actions.col(j));
      ap[i].push_back(applied.col(j));
      rw[i].push_back(reward(spec, tasks[i], current[i], applied.col(j)));
      st[i].push_back(nx);
      current[i] = nx;
      if (clipped) {
        out[i].diverged = true;
        done[i] = true;
      }
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    auto& tr = out[i];
    const auto len = static_cast<Eigen::Index>(rw[i].size());
    tr.states.resize(spec.state_dim, len + 1);
    for (Eigen::Index t = 0; t <= len; ++t) tr.states.col(t) = st[i][t];
    tr.actions.resize(spec.action_dim, len);
    tr.applied.resize(spec.action_dim, len);
    tr.features.resize(ft[i].empty() ? 0 : ft[i][0].size(), len);
    tr.rewards.resize(len);
    for (Eigen::Index t = 0; t < len; ++t) {
      tr.actions.col(t) = ac[i][t];
      tr.applied.col(t) = ap[i][t];
      tr.features.col(t) = ft[i][t];
      tr.rewards[t] = rw[i][t];
    }
  }
  return out;
}

/// Same task for every trajectory.
template <Actor P, StepModel D>
std::vector<Trajectory> rollout(const P& policy, const D& dynamics, const MdpSpec& spec, const Task& task,
                                std::span<const int> lengths, std::uint64_t seed, bool divergence_guard) {
  const std::vector<Task> tasks(lengths.size(), task);
  return rollout(policy, dynamics, spec, std::span<const Task>(tasks), lengths, seed, divergence_guard);
}

/// Virtual trajectories inside the learned (or any substitute) model, from
/// fresh p₀ resets, full horizon, with the divergence guard on.
template <Actor P, StepModel D>
std::vector<Trajectory> virtual_rollouts(const P& policy, const D& model, const MdpSpec& spec, const Task& task,
                                         std::int64_t samples, std::uint64_t seed) {
  const int count = static_cast<int>((samples + spec.horizon - 1) / spec.horizon);
  const std::vector<int> lengths(static_cast<std::size_t>(std::max(count, 1)), spec.horizon);
  return rollout(policy, model, spec, task, lengths, seed, true);
}

template <Actor P, StepModel D>
Trajectory virtual_rollout(const P& policy, const D& model, const MdpSpec& spec, const Task& task,
                           std::uint64_t seed) {
  const std::vector<int> lengths{spec.horizon};
  return std::move(rollout(policy, model, spec, task, lengths, seed, true).front());
}

struct ReturnEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  std::vector<double> returns;
};

inline ReturnEstimate summarize_returns(std::vector<double> returns) {
  ReturnEstimate est;
  est.returns = std::move(returns);
  const auto n = static_cast<double>(est.returns.size());
  if (est.returns.empty()) return est;
  for (double r : est.returns) est.mean += r;
  est.mean /= n;
  if (est.returns.size() > 1) {
    double ss = 0.0;
    for (double r : est.returns) ss += (r - est.mean) * (r - est.mean);
    est.std_error = std::sqrt(ss / (n - 1.0) / n);
  }
  return est;
}

/// Mean undiscounted H-step return over `n_rollouts` episodes ± standard error.
/// Real dynamics count their steps; virtual ones use the divergence guard.
template <Actor P, StepModel D>
ReturnEstimate estimate_return(const P& policy, const D& dynamics, const MdpSpec& spec, const Task& task,
                               int n_rollouts, std::uint64_t seed, bool divergence_guard = false) {
  if (n_rollouts < 1) throw std::invalid_argument("estimate_return: need at least one rollout");
  const std::vector<int> lengths(static_cast<std::size_t>(n_rollouts), spec.horizon);
  const auto trajs = rollout(policy, dynamics, spec, task, lengths, seed, divergence_guard);
  std::vector<double> returns;
  for (const auto& tr : trajs) returns.push_back(tr.total_reward());
  return summarize_returns(std::move(returns));
}

}  // namespace metal
