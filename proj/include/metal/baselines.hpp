#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "metal/adapt.hpp"
#include "metal/trpo.hpp"

namespace metal {

struct MamlConfig {
  double alpha_first = 0.1;   // first test-time step
  double alpha_later = 0.05;  // subsequent test-time steps
  double alpha_train = 0.1;   // inner step during meta-training
  double beta = 0.01;
  int meta_iterations = 200;
  int meta_batch = 10;
  int rollouts = 20;
  int grad_steps = 3;

  static MamlConfig desk() { return {}; }
  static MamlConfig paper() {
    MamlConfig c;
    c.meta_iterations = 500;
    c.meta_batch = 40;
    return c;
  }

  void validate() const {
    if (!(alpha_first > 0.0 && alpha_later > 0.0 && alpha_train > 0.0 && beta > 0.0))
      throw std::invalid_argument("maml: step sizes must be > 0");
    if (meta_iterations < 0 || meta_batch < 1 || rollouts < 1 || grad_steps < 0)
      throw std::invalid_argument("maml: iteration counts out of range");
  }
};

/// Discounted return-to-go minus its per-timestep mean over the batch.
inline std::vector<Eigen::RowVectorXd> centered_returns_to_go(const std::vector<Trajectory>& trajs, double gamma) {
  std::vector<Eigen::RowVectorXd> rtg;
  int longest = 0;
  for (const auto& tr : trajs) {
    Eigen::RowVectorXd r(tr.length());
    double acc = 0.0;
    for (int t = tr.length() - 1; t >= 0; --t) r[t] = acc = tr.rewards[t] + gamma * acc;
    rtg.push_back(std::move(r));
    longest = std::max(longest, tr.length());
  }
  for (int t = 0; t < longest; ++t) {
    double sum = 0.0;
    int count = 0;
    for (const auto& r : rtg)
      if (t < r.size()) {
        sum += r[t];
        ++count;
      }
    for (auto& r : rtg)
      if (t < r.size()) r[t] -= sum / count;
  }
  return rtg;
}

/// Likelihood-ratio estimate of ∇η: the mean over all sampled steps of
/// ∇log π(a|s) times the centered return-to-go.
inline Vector policy_gradient(const GaussianPolicy& policy, const std::vector<Trajectory>& trajs, double gamma) {
  const auto adv = centered_returns_to_go(trajs, gamma);
  Eigen::Index total = 0;
  for (const auto& a : adv) total += a.size();
  if (total == 0) return Vector::Zero(policy.num_params());
  Eigen::RowVectorXd flat(total);
  Eigen::Index off = 0;
  for (const auto& a : adv) {
    flat.segment(off, a.size()) = a;
    off += a.size();
  }
  return surrogate_gradient(policy, make_batch(trajs, flat));
}

inline std::vector<Trajectory> collect_real(const GaussianPolicy& policy, const MdpSpec& spec,
                                            const DynamicsVariant& variant, const Task& task, int rollouts,
                                            std::uint64_t seed, SampleCounter* counter) {
  const std::vector<int> lengths(static_cast<std::size_t>(rollouts), spec.horizon);
  return rollout(policy, TrueDynamics{spec, variant, counter}, spec, task, lengths, seed, false);
}

struct MamlAdaptResult {
  GaussianPolicy policy;
  AdaptationCurve curve;
  std::int64_t real_samples = 0;
};

/// Test-time policy-gradient adaptation from θ: each step collects
/// `rollouts` real episodes and ascends with α_first, then α_later. Works for
/// the MAML initialization and for the ψ-conditioned oracle alike.
inline MamlAdaptResult maml_adapt(const GaussianPolicy& theta, const MdpSpec& spec, const DynamicsVariant& variant,
                                  const Task& task, int task_id, const MamlConfig& cfg, int n_steps,
                                  const EvalConfig& eval, std::uint64_t seed, double gamma = 0.99) {
  MamlAdaptResult res;
  res.policy = theta;
  res.curve.task_id = task_id;
  res.curve.task = task;
  SampleCounter counter;
  const auto es = eval_seed(seed, task_id);
  res.curve.points.push_back(to_point(0, evaluate_policy(res.policy, spec, variant, task, eval, es)));
  for (int k = 0; k < n_steps; ++k) {
    const auto trajs = collect_real(res.policy, spec, variant, task, cfg.rollouts,
                                    substream_seed(seed, "pg-adapt", {static_cast<std::uint64_t>(task_id),
                                                                      static_cast<std::uint64_t>(k)}),
                                    &counter);
    const double alpha = k == 0 ? cfg.alpha_first : cfg.alpha_later;
    res.policy.set_params(res.policy.params() + alpha * policy_gradient(res.policy, trajs, gamma));
    res.curve.points.push_back(to_point(counter.real, evaluate_policy(res.policy, spec, variant, task, eval, es)));
  }
  res.real_samples = counter.real;
  res.curve.check();
  return res;
}

/// Single-step adaptation θ′ = θ + α∇η̂_ψ(θ) without evaluation.
inline GaussianPolicy maml_adapt_step(const GaussianPolicy& theta, const MdpSpec& spec, const DynamicsVariant& variant,
                                      const Task& task, double alpha, int rollouts, std::uint64_t seed,
                                      SampleCounter* counter, double gamma = 0.99) {
  GaussianPolicy adapted = theta;
  const auto trajs = collect_real(theta, spec, variant, task, rollouts, seed, counter);
  adapted.set_params(theta.params() + alpha * policy_gradient(theta, trajs, gamma));
  return adapted;
}

/// First-order meta-training: per meta-iteration, adapt one step on each
/// task of a meta-batch, then ascend θ₀ along the mean post-adaptation
/// gradient (evaluated at the adapted parameters).
inline GaussianPolicy maml_metatrain(const MdpSpec& spec, const TaskFamily& family, const DynamicsVariant& variant,
                                     const MamlConfig& cfg, const std::vector<int>& hidden, double init_log_std,
                                     std::uint64_t seed, SampleCounter* counter, MetricsLog* log = nullptr,
                                     double gamma = 0.99) {
  cfg.validate();
  Rng init = make_rng(seed, "maml-init");
  GaussianPolicy theta(spec, 0, hidden, init, init_log_std);
  for (int it = 0; it < cfg.meta_iterations; ++it) {
    const auto iu = static_cast<std::uint64_t>(it);
    Rng task_rng = make_rng(seed, "maml-task", {iu});
    Vector meta_grad = Vector::Zero(theta.num_params());
    double pre = 0.0, post = 0.0;
    for (int b = 0; b < cfg.meta_batch; ++b) {
      const auto bu = static_cast<std::uint64_t>(b);
      const Task task = sample_task(family, task_rng);
      const auto before = collect_real(theta, spec, variant, task, cfg.rollouts,
                                       substream_seed(seed, "maml-pre", {iu, bu}), counter);
      GaussianPolicy adapted = theta;
      adapted.set_params(theta.params() + cfg.alpha_train * policy_gradient(theta, before, gamma));
      const auto after = collect_real(adapted, spec, variant, task, cfg.rollouts,
                                      substream_seed(seed, "maml-post", {iu, bu}), counter);
      meta_grad += policy_gradient(adapted, after, gamma);
      for (const auto& tr : before) pre += tr.total_reward();
      for (const auto& tr : after) post += tr.total_reward();
    }
    theta.set_params(theta.params() + cfg.beta * meta_grad / cfg.meta_batch);
    if (log) {
      const double n = static_cast<double>(cfg.meta_batch) * cfg.rollouts;
      log->record(it, "maml", "pre_return", pre / n);
      log->record(it, "maml", "post_return", post / n);
    }
  }
  return theta;
}

/// TRPO on the real environment with ψ resampled per episode and fed to the
/// policy, until `budget` real samples are used (whole batches only).
inline PolicyState oracle_train(const MdpSpec& spec, const TaskFamily& family, const DynamicsVariant& variant,
                                const std::vector<int>& hidden, double init_log_std, const TrustRegionConfig& trpo,
                                std::int64_t budget, int batch_samples, std::uint64_t seed, SampleCounter* counter,
                                MetricsLog* log = nullptr) {
  if (batch_samples < 1) throw std::invalid_argument("oracle_train: batch size must be >= 1");
  Rng init = make_rng(seed, "oracle-init");
  PolicyState learner(spec, family.psi_dim(), hidden, init, init_log_std);
  Rng baseline_rng = make_rng(seed, "oracle-baseline");
  const auto lengths = collection_lengths(batch_samples, spec.horizon);
  for (std::int64_t it = 0; (it + 1) * batch_samples <= budget; ++it) {
    const auto iu = static_cast<std::uint64_t>(it);
    std::vector<Task> tasks;
    for (std::size_t i = 0; i < lengths.size(); ++i) {
      Rng rng = make_rng(seed, "oracle-task", {iu, i});
      tasks.push_back(sample_task(family, rng));
    }
    const auto trajs = rollout(learner.policy, TrueDynamics{spec, variant, counter}, spec,
                               std::span<const Task>(tasks), lengths, substream_seed(seed, "oracle-rollout", {iu}),
                               false);
    const auto stats = policy_iteration(learner, trajs, trpo, baseline_rng);
    if (log) log->record(static_cast<int>(it), "oracle", "real_return", stats.mean_return);
  }
  return learner;
}

}  // namespace metal
