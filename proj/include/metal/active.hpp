#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "metal/adapt.hpp"
#include "metal/trainer.hpp"

namespace metal {

enum class RatingMethod { TrueGap, EstimatedGap };

inline std::string to_string(RatingMethod m) { return m == RatingMethod::TrueGap ? "true-gap" : "estimated-gap"; }

struct TaskRating {
  Task task;
  double mu = 0.0;
  RatingMethod method = RatingMethod::EstimatedGap;
  double virtual_return = std::numeric_limits<double>::quiet_NaN();  // true-gap only
  double real_return = std::numeric_limits<double>::quiet_NaN();     // true-gap only
  std::vector<double> snapshot_returns;                               // estimated-gap only
};

/// μ(ψ) = η̂ under the model − η̂ under the real dynamics, both estimated
/// from `n_rollouts` episodes drawn from the same seed. Real episodes are
/// charged to `counter`.
template <StepModel M>
TaskRating rate_true(const GaussianPolicy& policy, const M& model, const MdpSpec& spec, const DynamicsVariant& variant,
                     const Task& task, int n_rollouts, std::uint64_t seed, SampleCounter* counter) {
  TaskRating r;
  r.task = task;
  r.method = RatingMethod::TrueGap;
  r.virtual_return = estimate_return(policy, model, spec, task, n_rollouts, seed, true).mean;
  r.real_return = estimate_return(policy, TrueDynamics{spec, variant, counter}, spec, task, n_rollouts, seed).mean;
  r.mu = r.virtual_return - r.real_return;
  return r;
}

/// Mean of |a_i − a_j| over all unordered pairs.
inline double mean_pairwise_gap(std::span<const double> returns) {
  if (returns.size() < 2) throw std::invalid_argument("mean_pairwise_gap: need at least two values");
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < returns.size(); ++i)
    for (std::size_t j = i + 1; j < returns.size(); ++j, ++pairs) total += std::abs(returns[i] - returns[j]);
  return total / static_cast<double>(pairs);
}

/// μ̂(ψ): mean pairwise disagreement of the policy's virtual return across
/// model snapshots. Uses no real samples.
template <StepModel M>
TaskRating rate_estimated(const GaussianPolicy& policy, std::span<const M> snapshots, const MdpSpec& spec,
                          const Task& task, int n_rollouts, std::uint64_t seed) {
  if (snapshots.size() < 2) throw std::invalid_argument("rate_estimated: need at least two model snapshots");
  TaskRating r;
  r.task = task;
  r.method = RatingMethod::EstimatedGap;
  for (const auto& m : snapshots) r.snapshot_returns.push_back(estimate_return(policy, m, spec, task, n_rollouts, seed, true).mean);
  r.mu = mean_pairwise_gap(r.snapshot_returns);
  return r;
}

/// Linear-interpolation quantile of an unsorted sample (R type 7).
inline double quantile_linear(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("quantile_linear: empty sample");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= values.size()) return values.back();
  return values[lo] + (h - static_cast<double>(lo)) * (values[lo + 1] - values[lo]);
}

struct SkipRule {
  double quantile = 0.5;
  int warm_start = 5;   // L
  bool sliding = true;  // latest L ratings; otherwise the first L
  std::vector<double> history;

  void validate() const {
    if (!(quantile > 0.0 && quantile < 1.0)) throw std::invalid_argument("active: quantile must lie in (0, 1)");
    if (warm_start < 1) throw std::invalid_argument("active: warm_start must be >= 1");
  }
};

/// Skip iff at least L ratings were seen and μ is strictly below the
/// q-quantile of the reference window. The rating is recorded either way.
inline bool should_skip(SkipRule& rule, double mu) {
  bool skip = false;
  const auto l = static_cast<std::size_t>(rule.warm_start);
  if (rule.history.size() >= l) {
    const auto first = rule.sliding ? rule.history.end() - static_cast<std::ptrdiff_t>(l) : rule.history.begin();
    skip = mu < quantile_linear(std::vector<double>(first, first + static_cast<std::ptrdiff_t>(l)), rule.quantile);
  }
  rule.history.push_back(mu);
  return skip;
}

struct ActiveSettings {
  RatingMethod method = RatingMethod::EstimatedGap;
  double quantile = 0.5;
  int warm_start = 5;
  bool sliding = true;
  int n_rollouts = 5;
  int max_candidates = 0;  // 0: 10·n_tasks

  void validate(const HyperConfig& hyper) const {
    SkipRule{quantile, warm_start, sliding, {}}.validate();
    if (n_rollouts < 1) throw std::invalid_argument("active: n_rollouts must be >= 1");
    if (method == RatingMethod::EstimatedGap && hyper.n_inner < 2)
      throw std::invalid_argument("active: estimated-gap rating needs n_inner >= 2 model snapshots");
  }
};

struct ActiveEvent {
  int candidate = 0;
  Task task;
  bool rated = false;
  double mu = std::numeric_limits<double>::quiet_NaN();
  bool skipped = false;
};

struct ActiveResult {
  std::vector<ActiveEvent> events;
  int trained = 0;
  int skipped = 0;
};

/// Sequential training with task skipping. Candidates are drawn in order;
/// each is warmed up and rated, and skipped tasks never collect training
/// data. Runs until `n_tasks` tasks were trained.
inline ActiveResult train_active(SequentialTrainer& trainer, const ActiveSettings& a, MetricsLog* log = nullptr) {
  const HyperConfig& cfg = trainer.config();
  a.validate(cfg);
  SkipRule rule{a.quantile, a.warm_start, a.sliding, {}};
  auto& art = trainer.artifacts();
  ActiveResult out;
  const int max_candidates = a.max_candidates > 0 ? a.max_candidates : 10 * cfg.n_tasks;
  const std::string phase = "active-" + to_string(a.method);
  for (int c = art.next_task; out.trained < cfg.n_tasks; ++c) {
    if (c >= max_candidates) throw std::runtime_error("active: candidate limit reached before n_tasks were trained");
    const auto cu = static_cast<std::uint64_t>(c);
    ActiveEvent ev;
    ev.candidate = c;
    ev.task = task_for_index(trainer.family(), cfg.seed, cu);
    TaskRecord record;
    record.index = c;
    record.task = ev.task;
    const DynamicsModel backup = art.model;
    try {
      PolicyState learner = trainer.fresh_policy(cu);
      const bool had_data = !art.data.empty();
      const auto vt = trainer.warm_up(learner, ev.task, cu, static_cast<std::size_t>(cfg.n_inner));
      if (had_data) {
        const auto seed = substream_seed(cfg.seed, "rate", {cu});
        const TaskRating r =
            a.method == RatingMethod::TrueGap
                ? rate_true(learner.policy, art.model, trainer.spec(), trainer.variant(), ev.task, a.n_rollouts, seed,
                            &art.counter)
                : rate_estimated(learner.policy, std::span<const DynamicsModel>(vt.snapshots), trainer.spec(),
                                 ev.task, a.n_rollouts, seed);
        ev.rated = true;
        ev.mu = r.mu;
        ev.skipped = should_skip(rule, r.mu);
        if (log) {
          log->record(c, phase, "mu", r.mu);
          log->record(c, phase, "skipped", ev.skipped ? 1.0 : 0.0);
        }
      }
      if (!ev.skipped) trainer.slbo(learner, ev.task, cu, record);
    } catch (const DivergenceError& e) {
      art.model = backup;
      record.aborted = true;
      record.error = e.what();
      if (log) log->record(c, "abort", "diverged", 1.0);
    }
    record.real_samples = art.counter.real;
    art.next_task = c + 1;
    if (ev.skipped) {
      ++out.skipped;
    } else {
      ++out.trained;
      art.tasks.push_back(record);
    }
    out.events.push_back(ev);
    if (log) log->flush();
  }
  return out;
}

/// Per-task, per-point difference of two test suites run on the same tasks.
inline std::vector<AdaptationCurve> difference_curves(std::span<const AdaptationCurve> a,
                                                      std::span<const AdaptationCurve> b) {
  if (a.size() != b.size()) throw std::invalid_argument("difference_curves: suites differ in size");
  std::vector<AdaptationCurve> out;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].points.size() != b[i].points.size() || a[i].task_id != b[i].task_id)
      throw std::invalid_argument("difference_curves: suites are not aligned");
    AdaptationCurve d = a[i];
    for (std::size_t k = 0; k < d.points.size(); ++k) {
      if (a[i].points[k].samples != b[i].points[k].samples)
        throw std::invalid_argument("difference_curves: sample axes differ");
      d.points[k].mean_return -= b[i].points[k].mean_return;
      d.points[k].std_error = 0.0;
      d.points[k].ci = {};
    }
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace metal
