#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "metal/ndmath/cg.hpp"
#include "metal/policy.hpp"
#include "metal/virtualenv.hpp"

namespace metal {

struct TrustRegionConfig {
  double max_kl = 0.01;
  int cg_iterations = 10;
  double cg_damping = 0.1;
  double backtrack_coeff = 0.8;
  int max_backtracks = 10;
  double gae_lambda = 0.95;
  double gamma = 0.99;
  int baseline_epochs = 5;
  int baseline_minibatch = 128;

  void validate() const {
    if (!(max_kl > 0.0)) throw std::invalid_argument("trpo: max_kl must be > 0");
    if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) throw std::invalid_argument("trpo: gae_lambda must lie in [0, 1]");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("trpo: gamma must lie in [0, 1)");
    if (cg_iterations < 1 || max_backtracks < 1) throw std::invalid_argument("trpo: iteration counts must be >= 1");
    if (!(backtrack_coeff > 0.0 && backtrack_coeff < 1.0))
      throw std::invalid_argument("trpo: backtrack_coeff must lie in (0, 1)");
    if (cg_damping < 0.0) throw std::invalid_argument("trpo: cg_damping must be >= 0");
  }
};

struct GaeResult {
  std::vector<Eigen::RowVectorXd> raw;  // per trajectory, before normalization
  Eigen::RowVectorXd advantages;        // all steps, normalized to zero mean / unit std
  Eigen::RowVectorXd value_targets;     // all steps, discounted return-to-go
};

/// GAE(γ, λ) from per-step value predictions (`values[i]` has one entry per
/// step of trajectory i; the value after the last step is taken as 0).
inline GaeResult gae_advantages(const std::vector<Trajectory>& trajs, const std::vector<Eigen::RowVectorXd>& values,
                                double gamma, double lambda) {
  if (values.size() != trajs.size()) throw std::invalid_argument("gae_advantages: one value row per trajectory");
  GaeResult out;
  Eigen::Index total = 0;
  for (const auto& tr : trajs) total += tr.length();
  out.advantages.resize(total);
  out.value_targets.resize(total);
  Eigen::Index offset = 0;
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    const auto& r = trajs[i].rewards;
    const auto& v = values[i];
    const Eigen::Index len = r.size();
    if (v.size() != len) throw std::invalid_argument("gae_advantages: value row length mismatch");
    Eigen::RowVectorXd adv(len);
    double next_adv = 0.0, next_value = 0.0, ret = 0.0;
    for (Eigen::Index t = len - 1; t >= 0; --t) {
      const double delta = r[t] + gamma * next_value - v[t];
      next_adv = delta + gamma * lambda * next_adv;
      adv[t] = next_adv;
      next_value = v[t];
      ret = r[t] + gamma * ret;
      out.value_targets[offset + t] = ret;
    }
    out.advantages.segment(offset, len) = adv;
    out.raw.push_back(std::move(adv));
    offset += len;
  }
  if (total > 0) {
    const double mean = out.advantages.mean();
    out.advantages.array() -= mean;
    const double sd = std::sqrt(out.advantages.squaredNorm() / static_cast<double>(total));
    if (sd > 1e-8) out.advantages /= sd;
  }
  return out;
}

inline GaeResult gae_advantages(const std::vector<Trajectory>& trajs, const ValueBaseline& baseline, double gamma,
                                double lambda) {
  std::vector<Eigen::RowVectorXd> values;
  for (const auto& tr : trajs)
    values.push_back(tr.length() > 0 ? baseline.predict(tr.features) : Eigen::RowVectorXd());
  return gae_advantages(trajs, values, gamma, lambda);
}

/// Everything TRPO needs from a batch of trajectories.
struct PolicyBatch {
  Matrix features;
  Matrix actions;  // sampled, unclipped
  Eigen::RowVectorXd advantages;
};

inline PolicyBatch make_batch(const std::vector<Trajectory>& trajs, const Eigen::RowVectorXd& advantages) {
  PolicyBatch b;
  Eigen::Index total = 0;
  for (const auto& tr : trajs) total += tr.length();
  if (total == 0) return b;
  b.features.resize(trajs.front().features.rows(), total);
  b.actions.resize(trajs.front().actions.rows(), total);
  Eigen::Index off = 0;
  for (const auto& tr : trajs) {
    b.features.middleCols(off, tr.length()) = tr.features;
    b.actions.middleCols(off, tr.length()) = tr.actions;
    off += tr.length();
  }
  b.advantages = advantages;
  return b;
}

inline Matrix stack_features(const std::vector<Trajectory>& trajs) {
  Eigen::Index total = 0;
  for (const auto& tr : trajs) total += tr.length();
  Matrix f(trajs.empty() ? 0 : trajs.front().features.rows(), total);
  Eigen::Index off = 0;
  for (const auto& tr : trajs) {
    f.middleCols(off, tr.length()) = tr.features;
    off += tr.length();
  }
  return f;
}

/// Mean KL(old ‖ new) between diagonal Gaussians over the batch columns.
inline double mean_kl(const Matrix& old_mean, const Vector& old_log_std, const Matrix& new_mean,
                      const Vector& new_log_std) {
  const Vector old_var = (2.0 * old_log_std).array().exp();
  const Vector inv_new_var = (-2.0 * new_log_std).array().exp();
  const double log_ratio = (new_log_std - old_log_std).sum();
  const double var_term = 0.5 * old_var.cwiseProduct(inv_new_var).sum();
  const Matrix diff = new_mean - old_mean;
  const double mean_term = 0.5 * (diff.array().square().colwise() * inv_new_var.array()).sum() /
                           static_cast<double>(old_mean.cols());
  return log_ratio + var_term + mean_term - 0.5 * static_cast<double>(old_log_std.size());
}

/// Fisher information of the policy at its current parameters over the
/// batch, as a matrix-free product (Gauss-Newton form of the KL Hessian).
class FisherOperator {
 public:
  FisherOperator(const GaussianPolicy& policy, const Matrix& features) : policy_(policy), features_(features) {
    policy_.net().forward(features_, tape_);
    inv_var_ = (-2.0 * policy_.log_std()).array().exp();
  }

  Vector operator()(const Vector& v) const {
    const auto n_net = policy_.net().num_params();
    const auto n = static_cast<double>(features_.cols());
    const Matrix jv = policy_.net().jvp(features_, v.head(n_net));
    const Matrix u = (jv.array().colwise() * inv_var_.array()) / n;
    Vector out(v.size());
    Vector g_net = Vector::Zero(n_net);
    policy_.net().backward(tape_, u, g_net);
    out.head(n_net) = g_net;
    out.tail(policy_.action_dim()) = 2.0 * v.tail(policy_.action_dim());
    return out;
  }

 private:
  const GaussianPolicy& policy_;
  const Matrix& features_;
  Mlp::Tape tape_;
  Vector inv_var_;
};

/// Gradient of the surrogate mean(ratio · A) at the current parameters.
inline Vector surrogate_gradient(const GaussianPolicy& policy, const PolicyBatch& batch) {
  const auto n = static_cast<double>(batch.features.cols());
  Mlp::Tape tape;
  const Matrix mu = policy.net().forward(batch.features, tape);
  const Vector inv_var = (-2.0 * policy.log_std()).array().exp();
  const Matrix z = (batch.actions - mu).array().colwise() * inv_var.array();  // (a-μ)/σ²
  const Matrix g_out = (z.array().rowwise() * batch.advantages.array()) / n;
  Vector g(policy.num_params());
  Vector g_net = Vector::Zero(policy.net().num_params());
  policy.net().backward(tape, g_out, g_net);
  g.head(g_net.size()) = g_net;
  // d log π / d log σ = (a-μ)²/σ² - 1
  const Matrix sq = (batch.actions - mu).array().square().colwise() * inv_var.array() - 1.0;
  g.tail(policy.action_dim()) = (sq.array().rowwise() * batch.advantages.array()).rowwise().sum() / n;
  return g;
}

struct TrpoDiagnostics {
  bool accepted = false;
  bool nonfinite = false;
  double surrogate_change = 0.0;
  double kl = 0.0;
  int line_search_depth = -1;  // backtracks taken by the accepted step, -1 if none
  double gradient_norm = 0.0;
  Vector step;                 // accepted parameter change (empty if none)
};

/// One trust-region step: natural-gradient direction from the Fisher product
/// solved by the Krylov solver, scaled to the KL radius, then backtracking
/// until KL ≤ max_kl with a non-negative surrogate change. On failure the
/// policy is left exactly as it was.
inline TrpoDiagnostics trpo_step(GaussianPolicy& policy, const PolicyBatch& batch, const TrustRegionConfig& cfg) {
  TrpoDiagnostics diag;
  if (batch.features.cols() == 0) throw std::invalid_argument("trpo_step: empty batch");
  const Vector old_params = policy.params();
  const Vector old_log_std = policy.log_std();
  const Matrix old_mean = policy.mean(batch.features);
  const Eigen::RowVectorXd old_logp = policy.log_prob_given_mean(old_mean, batch.actions);
  const double old_surrogate = batch.advantages.mean();

  const Vector g = surrogate_gradient(policy, batch);
  diag.gradient_norm = g.norm();
  if (!g.allFinite()) {
    diag.nonfinite = true;
    return diag;
  }
  if (diag.gradient_norm == 0.0) return diag;

  const FisherOperator fisher(policy, batch.features);
  auto damped = [&](const Vector& v) -> Vector { return fisher(v) + cfg.cg_damping * v; };
  const CgResult cg = conjugate_gradient(damped, g, cfg.cg_iterations, 1e-10);
  const double shs = cg.x.dot(damped(cg.x));
  if (!(shs > 0.0) || !std::isfinite(shs)) {
    diag.nonfinite = !std::isfinite(shs);
    return diag;
  }
  const Vector full_step = std::sqrt(2.0 * cfg.max_kl / shs) * cg.x;

  double frac = 1.0;
  for (int k = 0; k < cfg.max_backtracks; ++k, frac *= cfg.backtrack_coeff) {
    policy.set_params(old_params + frac * full_step);
    const Matrix new_mean = policy.mean(batch.features);
    const double kl = mean_kl(old_mean, old_log_std, new_mean, policy.log_std());
    const Eigen::RowVectorXd ratio = (policy.log_prob_given_mean(new_mean, batch.actions) - old_logp).array().exp();
    const double surrogate = ratio.cwiseProduct(batch.advantages).mean();
    if (!std::isfinite(kl) || !std::isfinite(surrogate)) {
      diag.nonfinite = true;
      continue;
    }
    if (kl <= cfg.max_kl && surrogate - old_surrogate >= 0.0) {
      diag.accepted = true;
      diag.kl = kl;
      diag.surrogate_change = surrogate - old_surrogate;
      diag.line_search_depth = k;
      diag.step = policy.params() - old_params;
      return diag;
    }
  }
  policy.set_params(old_params);
  return diag;
}

/// Per-task learner: policy plus its value baseline.
struct PolicyState {
  GaussianPolicy policy;
  ValueBaseline baseline;

  PolicyState() = default;
  PolicyState(const MdpSpec& spec, int psi_dim, const std::vector<int>& hidden, Rng& rng, double init_log_std = 0.0)
      : policy(spec, psi_dim, hidden, rng, init_log_std), baseline(spec.state_dim + psi_dim, hidden, rng) {}
};

struct IterationStats {
  TrpoDiagnostics trpo;
  double baseline_loss = 0.0;
  double mean_return = 0.0;
  int samples = 0;
  int diverged = 0;
};

/// Advantages from the current baseline, one TRPO step, then a baseline refit
/// on the batch's returns-to-go.
inline IterationStats policy_iteration(PolicyState& learner, const std::vector<Trajectory>& trajs,
                                       const TrustRegionConfig& cfg, Rng& rng) {
  IterationStats stats;
  double total = 0.0;
  for (const auto& tr : trajs) {
    stats.samples += tr.length();
    stats.diverged += tr.diverged ? 1 : 0;
    total += tr.total_reward();
  }
  stats.mean_return = trajs.empty() ? 0.0 : total / static_cast<double>(trajs.size());
  if (stats.samples == 0) return stats;
  const GaeResult gae = gae_advantages(trajs, learner.baseline, cfg.gamma, cfg.gae_lambda);
  stats.trpo = trpo_step(learner.policy, make_batch(trajs, gae.advantages), cfg);
  stats.baseline_loss = fit_baseline(learner.baseline, stack_features(trajs), gae.value_targets, cfg.baseline_epochs,
                                     cfg.baseline_minibatch, rng);
  return stats;
}

}  // namespace metal
