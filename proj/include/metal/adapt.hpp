#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "metal/parallel.hpp"
#include "metal/trainer.hpp"

namespace metal {

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

/// Percentile bootstrap interval for the mean of `values`.
inline Interval bootstrap_ci(std::span<const double> values, int resamples, Rng& rng, double level = 0.95) {
  if (values.empty()) throw std::invalid_argument("bootstrap_ci: no values");
  if (resamples < 1) throw std::invalid_argument("bootstrap_ci: need at least one resample");
  const auto n = values.size();
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<double> means(static_cast<std::size_t>(resamples));
  for (auto& m : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += values[pick(rng)];
    m = s / static_cast<double>(n);
  }
  std::sort(means.begin(), means.end());
  const double tail = 0.5 * (1.0 - level);
  const auto b = static_cast<double>(resamples);
  const auto lo = static_cast<std::size_t>(std::floor(tail * b));
  const auto hi = static_cast<std::size_t>(std::max(0.0, std::ceil((1.0 - tail) * b) - 1.0));
  return {means[std::min(lo, means.size() - 1)], means[std::min(hi, means.size() - 1)]};
}

struct PolicyEvaluation {
  double mean = 0.0;
  double std_error = 0.0;
  Interval ci;
  std::vector<double> returns;
};

struct EvalConfig {
  int n_eval = 10;
  int bootstrap = 1000;
};

/// Mean undiscounted return of `n_eval` real rollouts with a bootstrap CI.
/// Evaluation rollouts are not charged to any sample counter.
template <Actor P>
PolicyEvaluation evaluate_policy(const P& policy, const MdpSpec& spec, const DynamicsVariant& variant,
                                 const Task& task, const EvalConfig& eval, std::uint64_t seed) {
  if (eval.n_eval < 2) throw std::invalid_argument("evaluate_policy: n_eval must be >= 2");
  const auto est = estimate_return(policy, TrueDynamics{spec, variant, nullptr}, spec, task, eval.n_eval, seed);
  PolicyEvaluation out;
  out.mean = est.mean;
  out.std_error = est.std_error;
  out.returns = est.returns;
  Rng rng = make_rng(seed, "bootstrap");
  out.ci = bootstrap_ci(out.returns, eval.bootstrap, rng);
  return out;
}

/// Evaluation stream of a test task. Every method evaluated on the same task
/// sees the same resets and action noise streams.
inline std::uint64_t eval_seed(std::uint64_t seed, int task_id) {
  return substream_seed(seed, "eval", {static_cast<std::uint64_t>(task_id)});
}

struct CurvePoint {
  std::int64_t samples = 0;
  double mean_return = 0.0;
  double std_error = 0.0;
  Interval ci;
};

struct AdaptationCurve {
  int task_id = 0;
  Task task;
  std::vector<CurvePoint> points;

  void check() const {
    if (points.empty() || points.front().samples != 0)
      throw std::logic_error("AdaptationCurve: point 0 must sit at zero samples");
    for (std::size_t i = 1; i < points.size(); ++i)
      if (points[i].samples <= points[i - 1].samples)
        throw std::logic_error("AdaptationCurve: sample coordinates must increase strictly");
  }
};

inline CurvePoint to_point(std::int64_t samples, const PolicyEvaluation& e) {
  return {samples, e.mean, e.std_error, e.ci};
}

struct AdaptResult {
  PolicyState learner;
  AdaptationCurve curve;
  std::int64_t real_samples = 0;       // consumed by the whole adaptation
  std::int64_t zero_shot_samples = 0;  // consumed before curve point 0
};

struct AdaptSettings {
  HyperConfig hyper;  // virtual-training sub-settings; hyper.seed is ignored
  int n_warmup = 40;
  int n_slbo = 3;
  EvalConfig eval;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::vector<int> hidden_of(const Mlp& net) {
  const auto& w = net.widths();
  return {w.begin() + 1, w.end() - 1};
}

inline SequentialTrainer adaptation_trainer(const AdaptSettings& s, const MdpSpec& spec, const DynamicsVariant& variant,
                                            const TaskFamily& family, int n_warmup, const std::vector<int>& hidden) {
  HyperConfig cfg = s.hyper;
  cfg.seed = substream_seed(s.seed, "adapt");
  cfg.n_warmup = std::max(1, n_warmup);
  cfg.model_hidden = hidden;
  return SequentialTrainer(cfg, spec, family, variant);
}

inline TaskFamily family_of(const Task& task) {
  switch (task.kind) {
    case FamilyKind::ForwardBackward: return TaskFamily::forward_backward();
    case FamilyKind::GoalVelocity2d: return TaskFamily::box(task.psi, task.psi);
    case FamilyKind::GoalVelocity1d: break;
  }
  return TaskFamily::interval(task.psi[0], task.psi[0]);
}

/// n_slbo SLBO iterations on `trainer`, evaluating after each.
inline void continue_slbo(SequentialTrainer& trainer, AdaptResult& res, const AdaptSettings& s, const MdpSpec& spec,
                          const DynamicsVariant& variant, const Task& task, int task_id) {
  TaskRecord record;
  const auto index = static_cast<std::uint64_t>(task_id);
  const auto start = trainer.artifacts().counter.real;
  for (int j = 0; j < s.n_slbo; ++j) {
    trainer.slbo_iteration(res.learner, task, index, j, record);
    const auto e = evaluate_policy(res.learner.policy, spec, variant, task, s.eval, eval_seed(s.seed, task_id));
    res.curve.points.push_back(to_point(trainer.artifacts().counter.real - start, e));
  }
  res.real_samples = trainer.artifacts().counter.real - start;
}

}  // namespace detail

/// Test-time adaptation: fresh policy → warm-up on copies of (φ₀, D₀) with
/// zero real samples → curve point 0 → n_slbo SLBO iterations, each followed
/// by a curve point. φ₀ and D₀ are never modified.
inline AdaptResult adapt_ours(const DynamicsModel& phi0, const TransitionDataset& d0, const MdpSpec& spec,
                              const DynamicsVariant& variant, const Task& task, int task_id, const AdaptSettings& s,
                              MetricsLog* log = nullptr) {
  if (d0.empty()) throw std::invalid_argument("adapt_ours: dataset D0 is empty");
  SequentialTrainer trainer =
      detail::adaptation_trainer(s, spec, variant, detail::family_of(task), s.n_warmup, detail::hidden_of(phi0.net));
  trainer.restore(phi0, d0, 0, 0);
  trainer.attach_metrics(log);
  const auto index = static_cast<std::uint64_t>(task_id);
  AdaptResult res;
  res.curve.task_id = task_id;
  res.curve.task = task;
  res.learner = trainer.fresh_policy(index);
  if (s.n_warmup > 0) trainer.warm_up(res.learner, task, index);
  res.zero_shot_samples = trainer.artifacts().counter.real;
  const auto e0 = evaluate_policy(res.learner.policy, spec, variant, task, s.eval, eval_seed(s.seed, task_id));
  res.curve.points.push_back(to_point(0, e0));
  detail::continue_slbo(trainer, res, s, spec, variant, task, task_id);
  res.curve.check();
  return res;
}

/// Per-task SLBO from nothing: fresh model, empty dataset, the same fresh
/// policy `adapt_ours` would start from, no warm-up.
inline AdaptResult slbo_from_scratch(const MdpSpec& spec, const DynamicsVariant& variant, const Task& task,
                                     int task_id, const AdaptSettings& s, MetricsLog* log = nullptr) {
  SequentialTrainer trainer =
      detail::adaptation_trainer(s, spec, variant, detail::family_of(task), 1, s.hyper.model_hidden);
  trainer.attach_metrics(log);
  AdaptResult res;
  res.curve.task_id = task_id;
  res.curve.task = task;
  res.learner = trainer.fresh_policy(static_cast<std::uint64_t>(task_id));
  const auto e0 = evaluate_policy(res.learner.policy, spec, variant, task, s.eval, eval_seed(s.seed, task_id));
  res.curve.points.push_back(to_point(0, e0));
  detail::continue_slbo(trainer, res, s, spec, variant, task, task_id);
  res.curve.check();
  return res;
}

inline std::vector<Task> test_tasks(const TaskFamily& family, std::uint64_t seed, int n) {
  std::vector<Task> tasks;
  for (int i = 0; i < n; ++i) {
    Rng rng = make_rng(seed, "test-task", {static_cast<std::uint64_t>(i)});
    tasks.push_back(sample_task(family, rng));
  }
  return tasks;
}

struct AggregatePoint {
  std::int64_t samples = 0;
  double mean_return = 0.0;
  double std_error = 0.0;  // across tasks
  Interval ci;             // bootstrap over tasks
};

/// Pointwise across-task mean of per-task curve means, with a bootstrap CI
/// over tasks. Invariant under reordering of `curves`.
inline std::vector<AggregatePoint> aggregate_curves(std::span<const AdaptationCurve> curves, int resamples,
                                                    std::uint64_t seed) {
  if (curves.empty()) throw std::invalid_argument("aggregate_curves: no curves");
  const auto n_points = curves.front().points.size();
  for (const auto& c : curves) {
    if (c.points.size() != n_points) throw std::invalid_argument("aggregate_curves: curves differ in length");
    for (std::size_t k = 0; k < n_points; ++k)
      if (c.points[k].samples != curves.front().points[k].samples)
        throw std::invalid_argument("aggregate_curves: curves do not share sample coordinates");
  }
  std::vector<AggregatePoint> out;
  for (std::size_t k = 0; k < n_points; ++k) {
    std::vector<double> means;
    for (const auto& c : curves) means.push_back(c.points[k].mean_return);
    std::sort(means.begin(), means.end());
    const auto est = summarize_returns(means);
    Rng rng = make_rng(seed, "aggregate", {k});
    out.push_back({curves.front().points[k].samples, est.mean, est.std_error, bootstrap_ci(means, resamples, rng)});
  }
  return out;
}

struct TestSuiteResult {
  std::vector<AdaptationCurve> curves;
  std::vector<AggregatePoint> aggregate;
  std::int64_t real_samples = 0;
};

/// Adapts independently to `n_test` tasks drawn from `family` (test tasks
/// run in parallel on `s.hyper.workers` threads).
inline TestSuiteResult run_test_suite(const DynamicsModel& phi0, const TransitionDataset& d0, const MdpSpec& spec,
                                      const TaskFamily& family, const DynamicsVariant& variant, int n_test,
                                      const AdaptSettings& s) {
  if (n_test < 1) throw std::invalid_argument("run_test_suite: n_test must be >= 1");
  const auto tasks = test_tasks(family, s.seed, n_test);
  TestSuiteResult out;
  out.curves.resize(static_cast<std::size_t>(n_test));
  std::vector<std::int64_t> used(static_cast<std::size_t>(n_test), 0);
  parallel_for(n_test, s.hyper.workers, [&](int i) {
    auto res = adapt_ours(phi0, d0, spec, variant, tasks[static_cast<std::size_t>(i)], i, s);
    used[static_cast<std::size_t>(i)] = res.real_samples;
    out.curves[static_cast<std::size_t>(i)] = std::move(res.curve);
  });
  for (auto u : used) out.real_samples += u;
  out.aggregate = aggregate_curves(out.curves, s.eval.bootstrap, s.seed);
  return out;
}

// ---------------------------------------------------------------------------
// CSV output

inline std::string format_psi(const Vector& psi) {
  std::ostringstream os;
  os << std::setprecision(10);
  for (Eigen::Index i = 0; i < psi.size(); ++i) os << (i ? ";" : "") << psi[i];
  return os.str();
}

inline void write_curves_csv(const std::filesystem::path& path, std::span<const AdaptationCurve> curves) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "task_id,psi,samples,mean_return,ci_lo,ci_hi\n" << std::setprecision(10);
  for (const auto& c : curves)
    for (const auto& p : c.points)
      os << c.task_id << ',' << format_psi(c.task.psi) << ',' << p.samples << ',' << p.mean_return << ','
         << p.ci.lo << ',' << p.ci.hi << '\n';
}

struct CurveRow {
  int task_id = 0;
  std::string psi;
  std::int64_t samples = 0;
  double mean_return = 0.0, ci_lo = 0.0, ci_hi = 0.0;
};

inline std::vector<CurveRow> read_curves_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::getline(is, line);
  if (line != "task_id,psi,samples,mean_return,ci_lo,ci_hi") throw FormatError(path.string() + ": unexpected header");
  std::vector<CurveRow> rows;
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() != 6) throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected 6 columns");
    rows.push_back({std::stoi(cells[0]), cells[1], std::stoll(cells[2]), std::stod(cells[3]), std::stod(cells[4]),
                    std::stod(cells[5])});
  }
  return rows;
}

inline void write_aggregate_csv(const std::filesystem::path& path, const std::string& method,
                                std::span<const AggregatePoint> points, bool append = false) {
  const bool header = !append || !std::filesystem::exists(path);
  std::ofstream os(path, append ? std::ios::app : std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  if (header) os << "method,samples,mean_return,std_error,ci_lo,ci_hi\n";
  os << std::setprecision(10);
  for (const auto& p : points)
    os << method << ',' << p.samples << ',' << p.mean_return << ',' << p.std_error << ',' << p.ci.lo << ','
       << p.ci.hi << '\n';
}

}  // namespace metal
