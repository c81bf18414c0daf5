#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "metal/dynmodel.hpp"
#include "metal/envs.hpp"
#include "metal/metrics.hpp"
#include "metal/trpo.hpp"
#include "metal/virtualenv.hpp"

namespace metal {

struct HyperConfig {
  int n_tasks = 30;
  int n_warmup = 40;
  int n_slbo = 1;
  int n_collect = 1000;
  int n_inner = 4;
  int n_model = 100;
  int n_policy = 20;
  int n_trpo = 1000;
  int horizon = 50;
  int k = 2;
  int model_batch = 128;
  double model_lr = 1e-3;
  std::vector<int> model_hidden{128, 128};
  std::vector<int> policy_hidden{32, 32};
  double init_log_std = 0.0;
  TrustRegionConfig trpo;
  std::uint64_t seed = 0;
  int workers = 1;

  static HyperConfig desk() { return {}; }

  static HyperConfig paper() {
    HyperConfig c;
    c.n_tasks = 100;
    c.n_collect = 4000;
    c.n_trpo = 4000;
    c.n_policy = 40;
    c.horizon = 200;
    c.model_hidden = {500, 500};
    return c;
  }

  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v < 1) throw std::invalid_argument(std::string("hyper: ") + name + " must be >= 1");
    };
    positive(n_tasks, "n_tasks");
    positive(n_warmup, "n_warmup");
    positive(n_collect, "n_collect");
    positive(n_inner, "n_inner");
    positive(n_model, "n_model");
    positive(n_policy, "n_policy");
    positive(n_trpo, "n_trpo");
    positive(horizon, "horizon");
    positive(k, "k");
    positive(model_batch, "model_batch");
    positive(workers, "workers");
    if (n_slbo < 0) throw std::invalid_argument("hyper: n_slbo must be >= 0");
    if (!(model_lr > 0.0)) throw std::invalid_argument("hyper: model_lr must be > 0");
    if (model_hidden.empty() || policy_hidden.empty()) throw std::invalid_argument("hyper: hidden layer lists must be non-empty");
    for (int w : model_hidden) positive(w, "model_hidden width");
    for (int w : policy_hidden) positive(w, "policy_hidden width");
    if (k >= horizon) throw std::invalid_argument("hyper: k must be smaller than the horizon");
    trpo.validate();
  }
};

inline std::int64_t variant_index(const std::string& name) {
  if (name == "nominal") return 0;
  if (name == "low-friction") return 1;
  if (name == "crippled") return 2;
  return -1;
}

struct VirtualTrainingResult {
  std::vector<DynamicsModel> snapshots;  // model after each of the last `keep` inner iterations
  double model_loss = std::numeric_limits<double>::quiet_NaN();
  double virtual_return = std::numeric_limits<double>::quiet_NaN();
  int accepted_steps = 0;
  int policy_steps = 0;
  int diverged_rollouts = 0;
};

/// n_inner × [n_model Adam steps on φ, then n_policy × (n_trpo virtual
/// samples → TRPO step + baseline refit)]. Touches no real environment.
/// All randomness derives from `stream`.
inline VirtualTrainingResult virtual_training(PolicyState& learner, DynamicsModel& model, const TransitionDataset& data,
                                              const MdpSpec& spec, const Task& task, const HyperConfig& cfg,
                                              int n_inner, std::uint64_t stream, std::size_t keep_snapshots = 0,
                                              MetricsLog* log = nullptr, int task_index = -1,
                                              std::string_view phase = "virtual") {
  if (data.empty()) throw std::invalid_argument("virtual_training: dataset is empty");
  VirtualTrainingResult out;
  for (int it = 0; it < n_inner; ++it) {
    Rng model_rng(substream_seed(stream, "model", {static_cast<std::uint64_t>(it)}));
    const auto trace = train_model(model, data, cfg.n_model, cfg.k, cfg.model_batch, model_rng);
    if (!trace.empty()) out.model_loss = trace.back();
    Rng baseline_rng(substream_seed(stream, "baseline", {static_cast<std::uint64_t>(it)}));
    double kl = 0.0;
    int accepted = 0;
    for (int p = 0; p < cfg.n_policy; ++p) {
      const auto seed = substream_seed(stream, "rollout", {static_cast<std::uint64_t>(it), static_cast<std::uint64_t>(p)});
      const auto trajs = virtual_rollouts(learner.policy, model, spec, task, cfg.n_trpo, seed);
      const IterationStats stats = policy_iteration(learner, trajs, cfg.trpo, baseline_rng);
      out.virtual_return = stats.mean_return;
      out.diverged_rollouts += stats.diverged;
      if (stats.trpo.accepted) {
        ++accepted;
        kl += stats.trpo.kl;
      }
    }
    out.accepted_steps += accepted;
    out.policy_steps += cfg.n_policy;
    if (static_cast<std::size_t>(n_inner - it) <= keep_snapshots) out.snapshots.push_back(model);
    if (log) {
      log->record(task_index, phase, "model_loss", out.model_loss);
      log->record(task_index, phase, "virtual_return", out.virtual_return);
      log->record(task_index, phase, "trpo_accept_rate", static_cast<double>(accepted) / cfg.n_policy);
      log->record(task_index, phase, "trpo_mean_kl", accepted > 0 ? kl / accepted : 0.0);
    }
  }
  return out;
}

struct TaskRecord {
  int index = 0;
  Task task;
  bool aborted = false;
  std::string error;
  double collect_return = std::numeric_limits<double>::quiet_NaN();  // mean return of the last real collection
  double virtual_return = std::numeric_limits<double>::quiet_NaN();
  double model_loss = std::numeric_limits<double>::quiet_NaN();
  std::int64_t real_samples = 0;  // global counter after the task
};

/// Everything that persists across tasks.
struct TrainingArtifacts {
  DynamicsModel model;
  TransitionDataset data;
  SampleCounter counter;
  int next_task = 0;
  std::vector<TaskRecord> tasks;
};

inline Task task_for_index(const TaskFamily& family, std::uint64_t seed, std::uint64_t index) {
  Rng rng = make_rng(seed, "task", {index});
  return sample_task(family, rng);
}

/// The sequential multi-task loop. Only the model and the dataset carry over
/// between tasks; each task starts from a freshly initialized policy.
class SequentialTrainer {
 public:
  SequentialTrainer(HyperConfig cfg, MdpSpec spec, TaskFamily family, DynamicsVariant variant)
      : cfg_(std::move(cfg)), spec_(std::move(spec)), family_(std::move(family)), variant_(std::move(variant)) {
    spec_.horizon = cfg_.horizon;
    cfg_.validate();
    spec_.validate();
    family_.validate(spec_);
    variant_.validate(spec_);
    Rng rng = make_rng(cfg_.seed, "model-init");
    art_.model = DynamicsModel(spec_.state_dim, spec_.action_dim, cfg_.model_hidden, rng, cfg_.model_lr);
    art_.data = TransitionDataset(spec_.state_dim, spec_.action_dim);
  }

  const HyperConfig& config() const { return cfg_; }
  const MdpSpec& spec() const { return spec_; }
  const TaskFamily& family() const { return family_; }
  const DynamicsVariant& variant() const { return variant_; }
  TrainingArtifacts& artifacts() { return art_; }
  const TrainingArtifacts& artifacts() const { return art_; }

  void attach_metrics(MetricsLog* log) {
    log_ = log;
    if (log_) log_->track(&art_.counter.real);
  }

  /// Replaces model, dataset, counter and position (resume).
  void restore(DynamicsModel model, TransitionDataset data, std::int64_t real_samples, int next_task) {
    if (model.state_dim() != spec_.state_dim || model.action_dim() != spec_.action_dim ||
        data.state_dim() != spec_.state_dim || data.action_dim() != spec_.action_dim)
      throw std::invalid_argument("restore: checkpoint does not match the environment");
    if (model.net.widths() != Mlp(model_widths()).widths())
      throw std::invalid_argument("restore: checkpoint model architecture differs from the configuration");
    art_.model = std::move(model);
    art_.data = std::move(data);
    art_.counter.real = real_samples;
    art_.next_task = next_task;
  }

  PolicyState fresh_policy(std::uint64_t index) const {
    Rng rng = make_rng(cfg_.seed, "policy-init", {index});
    return PolicyState(spec_, 0, cfg_.policy_hidden, rng, cfg_.init_log_std);
  }

  /// Warm-up on the current model; a no-op while the dataset is empty.
  VirtualTrainingResult warm_up(PolicyState& learner, const Task& task, std::uint64_t index,
                                std::size_t keep_snapshots = 0) {
    if (art_.data.empty()) return {};
    return virtual_training(learner, art_.model, art_.data, spec_, task, cfg_, cfg_.n_warmup,
                            substream_seed(cfg_.seed, "warmup", {index}), keep_snapshots, log_,
                            static_cast<int>(index), "warmup");
  }

  /// One SLBO iteration j: collect n_collect real samples into D with the
  /// current policy, then n_inner virtual iterations.
  void slbo_iteration(PolicyState& learner, const Task& task, std::uint64_t index, int j, TaskRecord& record) {
    const auto ju = static_cast<std::uint64_t>(j);
    const TrueDynamics real{spec_, variant_, &art_.counter};
    const auto lengths = collection_lengths(cfg_.n_collect, cfg_.horizon);
    const auto trajs =
        rollout(learner.policy, real, spec_, task, lengths, substream_seed(cfg_.seed, "collect", {index, ju}), false);
    double total = 0.0;
    for (const auto& tr : trajs) {
      const auto transitions = tr.transitions();
      art_.data.append_segment(transitions, static_cast<std::int64_t>(index), variant_index(variant_.name));
      total += tr.total_reward();
    }
    record.collect_return = total / static_cast<double>(trajs.size());
    if (log_) log_->record(static_cast<int>(index), "collect", "real_return", record.collect_return);
    const auto vt = virtual_training(learner, art_.model, art_.data, spec_, task, cfg_, cfg_.n_inner,
                                     substream_seed(cfg_.seed, "slbo", {index, ju}), 0, log_,
                                     static_cast<int>(index), "slbo");
    record.virtual_return = vt.virtual_return;
    record.model_loss = vt.model_loss;
  }

  void slbo(PolicyState& learner, const Task& task, std::uint64_t index, TaskRecord& record) {
    for (int j = 0; j < cfg_.n_slbo; ++j) slbo_iteration(learner, task, index, j, record);
  }

  /// One outer iteration. Divergence aborts the task: the model is rolled back
  /// to its state at task start, collected data and sample counts are kept.
  TaskRecord run_task(int index) {
    const auto iu = static_cast<std::uint64_t>(index);
    TaskRecord record;
    record.index = index;
    record.task = task_for_index(family_, cfg_.seed, iu);
    const DynamicsModel backup = art_.model;
    try {
      PolicyState learner = fresh_policy(iu);
      warm_up(learner, record.task, iu);
      slbo(learner, record.task, iu, record);
    } catch (const DivergenceError& e) {
      art_.model = backup;
      record.aborted = true;
      record.error = e.what();
      if (log_) log_->record(index, "abort", "diverged", 1.0);
    }
    record.real_samples = art_.counter.real;
    return record;
  }

  /// Runs tasks next_task … n_tasks-1. `on_task_end` fires after each one
  /// (checkpointing hook).
  const TrainingArtifacts& run(const std::function<void(const TaskRecord&)>& on_task_end = {}) {
    for (int index = art_.next_task; index < cfg_.n_tasks; ++index) {
      TaskRecord record = run_task(index);
      art_.tasks.push_back(record);
      art_.next_task = index + 1;
      if (log_) {
        log_->record(index, "task", "psi0", record.task.psi[0]);
        log_->flush();
      }
      if (on_task_end) on_task_end(record);
    }
    return art_;
  }

 private:
  std::vector<int> model_widths() const {
    std::vector<int> w{spec_.state_dim + spec_.action_dim};
    w.insert(w.end(), cfg_.model_hidden.begin(), cfg_.model_hidden.end());
    w.push_back(spec_.state_dim);
    return w;
  }

  HyperConfig cfg_;
  MdpSpec spec_;
  TaskFamily family_;
  DynamicsVariant variant_;
  TrainingArtifacts art_;
  MetricsLog* log_ = nullptr;
};

inline TrainingArtifacts train_sequential(const HyperConfig& cfg, const MdpSpec& spec, const TaskFamily& family,
                                          const DynamicsVariant& variant, MetricsLog* log = nullptr) {
  SequentialTrainer trainer(cfg, spec, family, variant);
  trainer.attach_metrics(log);
  trainer.run();
  return std::move(trainer.artifacts());
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr double kCheckpointVersion = 1.0;

struct Checkpoint {
  DynamicsModel model;
  int next_task = 0;
  std::int64_t real_samples = 0;
  std::int64_t dataset_size = 0;
};

/// Model arrays followed by [version, next_task, real_samples, dataset_size].
inline void save_model_checkpoint(const std::filesystem::path& path, const DynamicsModel& model, int next_task,
                                  std::int64_t real_samples, std::int64_t dataset_size) {
  auto arrays = model_to_arrays(model);
  arrays.push_back(DenseArray({4}, {kCheckpointVersion, static_cast<double>(next_task),
                                    static_cast<double>(real_samples), static_cast<double>(dataset_size)}));
  binio::write_atomically(path, [&](std::ostream& os) { write_param_block(os, arrays); });
}

inline Checkpoint load_model_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  const auto arrays = read_param_block(is);
  Checkpoint ck;
  std::size_t used = 0;
  ck.model = model_from_arrays(arrays, &used);
  if (used >= arrays.size() || arrays[used].size() != 4)
    throw FormatError("checkpoint " + path.string() + ": missing trainer metadata");
  const auto& meta = arrays[used];
  if (meta[0] != kCheckpointVersion)
    throw FormatError("checkpoint " + path.string() + ": unsupported version " + std::to_string(meta[0]));
  ck.next_task = static_cast<int>(meta[1]);
  ck.real_samples = static_cast<std::int64_t>(meta[2]);
  ck.dataset_size = static_cast<std::int64_t>(meta[3]);
  return ck;
}

}  // namespace metal
