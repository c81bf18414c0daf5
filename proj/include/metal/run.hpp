#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "metal/active.hpp"
#include "metal/adapt.hpp"
#include "metal/baselines.hpp"
#include "metal/config.hpp"
#include "metal/trainer.hpp"

namespace metal {

namespace fs = std::filesystem;

inline constexpr const char* kModelFile = "model.metalnn";
inline constexpr const char* kDatasetFile = "dataset.metalds";
inline constexpr const char* kMetricsFile = "metrics.csv";
inline constexpr const char* kResolvedConfigFile = "config.resolved.yaml";
inline constexpr const char* kFailedMarker = "FAILED";

/// [psi_dim], network arrays, log-std.
inline void save_policy(const fs::path& path, const GaussianPolicy& policy) {
  std::vector<DenseArray> arrays{DenseArray({1}, {static_cast<double>(policy.psi_dim())})};
  auto net = mlp_to_arrays(policy.net());
  arrays.insert(arrays.end(), net.begin(), net.end());
  arrays.push_back(DenseArray::from_vector(policy.log_std()));
  binio::write_atomically(path, [&](std::ostream& os) { write_param_block(os, arrays); });
}

inline void write_text(const fs::path& path, const std::string& text) {
  binio::write_atomically(path, [&](std::ostream& os) { os << text; });
}

inline void write_task_table(const fs::path& path, const std::vector<TaskRecord>& tasks) {
  std::ostringstream os;
  os << "task,psi,aborted,collect_return,virtual_return,model_loss,real_samples\n" << std::setprecision(10);
  for (const auto& t : tasks)
    os << t.index << ',' << format_psi(t.task.psi) << ',' << (t.aborted ? 1 : 0) << ',' << t.collect_return << ','
       << t.virtual_return << ',' << t.model_loss << ',' << t.real_samples << '\n';
  write_text(path, os.str());
}

struct RunContext {
  const ExperimentConfig& cfg;
  fs::path out;
  std::ostream& log;
};

/// Saves model, dataset and a per-task model copy after every task.
inline std::function<void(const TaskRecord&)> checkpoint_writer(const SequentialTrainer& trainer, const fs::path& out,
                                                                std::ostream& log) {
  return [&trainer, out, &log](const TaskRecord& rec) {
    const auto& art = trainer.artifacts();
    save_dataset(out / kDatasetFile, art.data);
    save_model_checkpoint(out / kModelFile, art.model, art.next_task, art.counter.real, art.data.size());
    std::ostringstream name;
    name << "task_" << std::setw(4) << std::setfill('0') << rec.index << ".metalnn";
    save_model_checkpoint(out / "checkpoints" / name.str(), art.model, art.next_task, art.counter.real,
                          art.data.size());
    log << "task " << rec.index << " psi=" << format_psi(rec.task.psi) << (rec.aborted ? " ABORTED" : "")
        << " real_samples=" << art.counter.real << " collect_return=" << rec.collect_return << '\n';
  };
}

/// Loads a train run's checkpoint + dataset, refusing mismatched pairs.
inline std::pair<Checkpoint, TransitionDataset> load_run(const fs::path& dir) {
  Checkpoint ck = load_model_checkpoint(dir / kModelFile);
  TransitionDataset data = load_dataset(dir / kDatasetFile);
  if (data.size() != ck.dataset_size)
    throw FormatError("checkpoint in " + dir.string() + " records " + std::to_string(ck.dataset_size) +
                      " transitions but the dataset holds " + std::to_string(data.size()));
  return {std::move(ck), std::move(data)};
}

inline void run_train(const RunContext& ctx) {
  const auto& cfg = ctx.cfg;
  const MdpSpec spec = cfg.spec();
  SequentialTrainer trainer(cfg.hyper, spec, cfg.family, variant_by_name(spec, cfg.variant));
  const bool resuming = cfg.resume && fs::exists(ctx.out / kModelFile);
  if (resuming) {
    auto [ck, data] = load_run(ctx.out);
    trainer.restore(std::move(ck.model), std::move(data), ck.real_samples, ck.next_task);
    ctx.log << "resuming at task " << ck.next_task << " with " << ck.real_samples << " real samples\n";
  }
  MetricsLog metrics;
  metrics.open(ctx.out / kMetricsFile, resuming);
  trainer.attach_metrics(&metrics);
  fs::create_directories(ctx.out / "checkpoints");
  trainer.run(checkpoint_writer(trainer, ctx.out, ctx.log));
  const auto& art = trainer.artifacts();
  if (!art.tasks.empty()) write_task_table(ctx.out / (resuming ? "tasks.resumed.csv" : "tasks.csv"), art.tasks);
  ctx.log << "done: " << art.next_task << " tasks, " << art.counter.real << " real samples, " << art.data.size()
          << " transitions\n";
}

inline AdaptSettings adapt_settings(const ExperimentConfig& cfg, int n_slbo) {
  AdaptSettings s;
  s.hyper = cfg.hyper;
  s.n_warmup = cfg.adapt.n_warmup.value_or(cfg.hyper.n_warmup);
  s.n_slbo = n_slbo;
  s.eval = cfg.eval;
  s.seed = substream_seed(cfg.seed, "test-suite");
  return s;
}

inline void run_adapt(const RunContext& ctx) {
  const auto& cfg = ctx.cfg;
  const MdpSpec spec = cfg.spec();
  const fs::path source = cfg.adapt.source;
  auto [ck, data] = load_run(source);
  const TaskFamily family = cfg.adapt.family.value_or(cfg.family);
  const DynamicsVariant variant = variant_by_name(spec, cfg.adapt.variant.value_or(cfg.variant));
  const AdaptSettings s = adapt_settings(cfg, cfg.adapt.n_slbo);
  const auto suite = run_test_suite(ck.model, data, spec, family, variant, cfg.adapt.n_test, s);
  write_curves_csv(ctx.out / "curves_ours.csv", suite.curves);
  write_aggregate_csv(ctx.out / "summary.csv", "ours", suite.aggregate);
  if (cfg.adapt.scratch) {
    const auto tasks = test_tasks(family, s.seed, cfg.adapt.n_test);
    std::vector<AdaptationCurve> scratch(tasks.size());
    parallel_for(static_cast<int>(tasks.size()), cfg.hyper.workers, [&](int i) {
      scratch[static_cast<std::size_t>(i)] = slbo_from_scratch(spec, variant, tasks[static_cast<std::size_t>(i)], i, s).curve;
    });
    write_curves_csv(ctx.out / "curves_scratch.csv", scratch);
    write_aggregate_csv(ctx.out / "summary.csv", "scratch", aggregate_curves(scratch, s.eval.bootstrap, s.seed), true);
  }
  ctx.log << "adapted " << cfg.adapt.n_test << " tasks; " << suite.real_samples << " real samples\n";
  for (const auto& p : suite.aggregate)
    ctx.log << "  samples=" << p.samples << " mean_return=" << p.mean_return << " ci=[" << p.ci.lo << ", "
            << p.ci.hi << "]\n";
}

inline void run_baseline(const RunContext& ctx) {
  const auto& cfg = ctx.cfg;
  const MdpSpec spec = cfg.spec();
  const DynamicsVariant variant = variant_by_name(spec, cfg.variant);
  const auto& mc = cfg.baseline.maml_cfg;
  const AdaptSettings s = adapt_settings(cfg, mc.grad_steps);
  const auto tasks = test_tasks(cfg.family, s.seed, cfg.baseline.n_test);
  MetricsLog metrics;
  metrics.open(ctx.out / kMetricsFile);
  SampleCounter counter;
  metrics.track(&counter.real);
  if (mc.rollouts * cfg.hyper.horizon != cfg.hyper.n_collect)
    ctx.log << "warning: baseline rollouts per step (" << mc.rollouts * cfg.hyper.horizon
            << " samples) differ from n_collect (" << cfg.hyper.n_collect << "); sample axes will not align\n";
  auto adapt_all = [&](const GaussianPolicy& theta, const std::string& name) {
    std::vector<AdaptationCurve> curves(tasks.size());
    parallel_for(static_cast<int>(tasks.size()), cfg.hyper.workers, [&](int i) {
      curves[static_cast<std::size_t>(i)] =
          maml_adapt(theta, spec, variant, tasks[static_cast<std::size_t>(i)], i, mc, mc.grad_steps, cfg.eval, s.seed,
                     cfg.hyper.trpo.gamma)
              .curve;
    });
    write_curves_csv(ctx.out / ("curves_" + name + ".csv"), curves);
    write_aggregate_csv(ctx.out / "summary.csv", name, aggregate_curves(curves, s.eval.bootstrap, s.seed),
                        fs::exists(ctx.out / "summary.csv"));
  };
  if (fs::exists(ctx.out / "summary.csv")) fs::remove(ctx.out / "summary.csv");
  if (cfg.baseline.maml) {
    const auto theta = maml_metatrain(spec, cfg.family, variant, mc, cfg.hyper.policy_hidden, cfg.hyper.init_log_std,
                                      substream_seed(cfg.seed, "maml"), &counter, &metrics, cfg.hyper.trpo.gamma);
    save_policy(ctx.out / "maml_policy.metalnn", theta);
    ctx.log << "maml meta-training used " << counter.real << " real samples\n";
    metrics.flush();
    adapt_all(theta, "maml");
  }
  if (cfg.baseline.oracle) {
    const auto start = counter.real;
    const auto oracle = oracle_train(spec, cfg.family, variant, cfg.hyper.policy_hidden, cfg.hyper.init_log_std,
                                     cfg.hyper.trpo, cfg.baseline.oracle_budget, cfg.hyper.n_collect,
                                     substream_seed(cfg.seed, "oracle"), &counter, &metrics);
    save_policy(ctx.out / "oracle_policy.metalnn", oracle.policy);
    ctx.log << "oracle training used " << counter.real - start << " real samples\n";
    metrics.flush();
    adapt_all(oracle.policy, "oracle");
  }
}

inline void run_active(const RunContext& ctx) {
  const auto& cfg = ctx.cfg;
  const MdpSpec spec = cfg.spec();
  const DynamicsVariant variant = variant_by_name(spec, cfg.variant);
  const AdaptSettings s = adapt_settings(cfg, cfg.adapt.n_slbo);
  auto train_dir = [&](const std::string& name) {
    fs::create_directories(ctx.out / name);
    return ctx.out / name;
  };
  std::vector<AdaptationCurve> reference;
  if (cfg.active.compare) {
    const auto dir = train_dir("non-active");
    SequentialTrainer trainer(cfg.hyper, spec, cfg.family, variant);
    MetricsLog metrics;
    metrics.open(dir / kMetricsFile);
    trainer.attach_metrics(&metrics);
    trainer.run();
    const auto& art = trainer.artifacts();
    save_dataset(dir / kDatasetFile, art.data);
    save_model_checkpoint(dir / kModelFile, art.model, art.next_task, art.counter.real, art.data.size());
    reference = run_test_suite(art.model, art.data, spec, cfg.family, variant, cfg.active.n_test, s).curves;
    write_curves_csv(dir / "curves_ours.csv", reference);
    ctx.log << "non-active: " << art.counter.real << " real samples\n";
  }
  const fs::path diff_path = ctx.out / "active_difference.csv";
  if (fs::exists(diff_path)) fs::remove(diff_path);
  for (const RatingMethod method : cfg.active.methods) {
    const auto name = to_string(method);
    const auto dir = train_dir(name);
    ActiveSettings settings = cfg.active.settings;
    settings.method = method;
    SequentialTrainer trainer(cfg.hyper, spec, cfg.family, variant);
    MetricsLog metrics;
    metrics.open(dir / kMetricsFile);
    trainer.attach_metrics(&metrics);
    const ActiveResult result = train_active(trainer, settings, &metrics);
    const auto& art = trainer.artifacts();
    save_dataset(dir / kDatasetFile, art.data);
    save_model_checkpoint(dir / kModelFile, art.model, art.next_task, art.counter.real, art.data.size());
    {
      std::ostringstream os;
      os << "candidate,psi,rated,mu,skipped\n" << std::setprecision(10);
      for (const auto& e : result.events)
        os << e.candidate << ',' << format_psi(e.task.psi) << ',' << (e.rated ? 1 : 0) << ',' << e.mu << ','
           << (e.skipped ? 1 : 0) << '\n';
      write_text(dir / "ratings.csv", os.str());
    }
    ctx.log << name << ": trained " << result.trained << ", skipped " << result.skipped << ", "
            << art.counter.real << " real samples\n";
    if (!cfg.active.compare) continue;
    const auto curves = run_test_suite(art.model, art.data, spec, cfg.family, variant, cfg.active.n_test, s).curves;
    write_curves_csv(dir / "curves_ours.csv", curves);
    const auto diff = difference_curves(curves, reference);
    const auto agg = aggregate_curves(diff, s.eval.bootstrap, s.seed);
    const bool header = !fs::exists(diff_path);
    std::ofstream os(diff_path, std::ios::app);
    if (header) os << "rating,samples,mean_difference,std_error,ci_lo,ci_hi\n";
    os << std::setprecision(10);
    for (const auto& p : agg)
      os << name << ',' << p.samples << ',' << p.mean_return << ',' << p.std_error << ',' << p.ci.lo << ','
         << p.ci.hi << '\n';
  }
}

/// Runs one experiment. Writes the resolved configuration first; any
/// failure leaves the partial outputs plus a FAILED marker holding the error.
inline int run(const ExperimentConfig& cfg, const fs::path& out, std::ostream& log = std::cout) {
  fs::create_directories(out);
  if (fs::exists(out / kFailedMarker)) fs::remove(out / kFailedMarker);
  write_text(out / kResolvedConfigFile, emit_config(cfg));
  const RunContext ctx{cfg, out, log};
  try {
    if (cfg.mode == "train") run_train(ctx);
    else if (cfg.mode == "adapt") run_adapt(ctx);
    else if (cfg.mode == "baseline") run_baseline(ctx);
    else if (cfg.mode == "active") run_active(ctx);
    else throw ConfigError("unknown mode " + cfg.mode);
  } catch (const std::exception& e) {
    std::ofstream(out / kFailedMarker) << e.what() << '\n';
    log << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace metal
