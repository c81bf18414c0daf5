#pragma once

#include <yaml-cpp/yaml.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "metal/active.hpp"
#include "metal/adapt.hpp"
#include "metal/baselines.hpp"
#include "metal/trainer.hpp"

namespace metal {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdaptModeConfig {
  std::string source;  // directory of a train run
  int n_test = 10;
  std::optional<int> n_warmup;  // default: hyper.n_warmup
  int n_slbo = 3;
  std::optional<TaskFamily> family;    // test-time shift; default: training family
  std::optional<std::string> variant;  // test-time dynamics; default: training dynamics
  bool scratch = false;                // also run per-task SLBO from scratch
};

struct BaselineModeConfig {
  bool maml = true;
  bool oracle = true;
  int n_test = 10;
  std::int64_t oracle_budget = 200000;
  MamlConfig maml_cfg;
};

struct ActiveModeConfig {
  std::vector<RatingMethod> methods{RatingMethod::EstimatedGap, RatingMethod::TrueGap};
  ActiveSettings settings;
  bool compare = true;  // also train the non-active loop and emit the difference curves
  int n_test = 10;
};

struct ExperimentConfig {
  std::string mode = "train";
  std::string preset = "desk";
  std::uint64_t seed = 0;
  std::string body = "point-mass";
  TaskFamily family = TaskFamily::interval(0.0, 2.0);
  std::string variant = "nominal";
  HyperConfig hyper;
  EvalConfig eval;
  AdaptModeConfig adapt;
  BaselineModeConfig baseline;
  ActiveModeConfig active;
  bool resume = false;

  MdpSpec spec() const {
    MdpSpec s = body == "pendulum" ? pendulum_spec(hyper.horizon) : point_mass_spec(hyper.horizon);
    return s;
  }

  /// Cross-field checks; throws ConfigError.
  void validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("config: " + msg); };
    if (mode != "train" && mode != "adapt" && mode != "baseline" && mode != "active")
      fail("mode must be train | adapt | baseline | active, got '" + mode + "'");
    if (body != "point-mass" && body != "pendulum") fail("env.body must be point-mass | pendulum");
    try {
      const MdpSpec s = spec();
      hyper.validate();
      family.validate(s);
      variant_by_name(s, variant).validate(s);
      if (adapt.family) adapt.family->validate(s);
      if (adapt.variant) variant_by_name(s, *adapt.variant);
      baseline.maml_cfg.validate();
      if (mode == "active") active.settings.validate(hyper);
    } catch (const std::invalid_argument& e) {
      fail(e.what());
    }
    if (eval.n_eval < 2) fail("eval.n_eval must be >= 2");
    if (eval.bootstrap < 1) fail("eval.bootstrap must be >= 1");
    if (adapt.n_test < 1 || baseline.n_test < 1 || active.n_test < 1) fail("n_test must be >= 1");
    if (adapt.n_slbo < 0) fail("adapt.n_slbo must be >= 0");
    if (adapt.n_warmup && *adapt.n_warmup < 0) fail("adapt.n_warmup must be >= 0");
    if (mode == "adapt" && adapt.source.empty()) fail("adapt.source (directory of a train run) is required");
    if (baseline.oracle_budget < 0) fail("baseline.oracle_budget must be >= 0");
    if (active.methods.empty()) fail("active.rating must name at least one method");
  }
};

namespace config_detail {

inline std::string where(const YAML::Node& node) {
  const auto m = node.Mark();
  if (m.line < 0) return "";
  return "line " + std::to_string(m.line + 1) + ", column " + std::to_string(m.column + 1) + ": ";
}

[[noreturn]] inline void fail(const YAML::Node& node, const std::string& msg) {
  throw ConfigError("config: " + where(node) + msg);
}

inline void require_map(const YAML::Node& node, const std::string& path) {
  if (!node.IsMap()) fail(node, "'" + path + "' must be a mapping");
}

/// Rejects keys outside `allowed`.
inline void check_keys(const YAML::Node& node, const std::set<std::string>& allowed, const std::string& path) {
  require_map(node, path);
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    if (!allowed.contains(key)) {
      std::string known;
      for (const auto& k : allowed) known += (known.empty() ? "" : ", ") + k;
      fail(kv.first, "unknown key '" + key + "' in " + path + " (allowed: " + known + ")");
    }
  }
}

template <class T>
void read(const YAML::Node& parent, const char* key, T& out) {
  const YAML::Node node = parent[key];
  if (!node) return;
  try {
    out = node.as<T>();
  } catch (const YAML::Exception&) {
    fail(node, std::string("bad value for '") + key + "'");
  }
}

inline void read_positive(const YAML::Node& parent, const char* key, int& out) {
  read(parent, key, out);
  if (parent[key] && out < 0) fail(parent[key], std::string("'") + key + "' must be non-negative");
}

inline Vector read_vector(const YAML::Node& node, const char* key) {
  if (!node.IsSequence()) fail(node, std::string("'") + key + "' must be a list of numbers");
  Vector v(static_cast<Eigen::Index>(node.size()));
  for (std::size_t i = 0; i < node.size(); ++i) {
    try {
      v[static_cast<Eigen::Index>(i)] = node[i].as<double>();
    } catch (const YAML::Exception&) {
      fail(node[i], std::string("'") + key + "' entries must be numbers");
    }
  }
  return v;
}

inline TaskFamily read_family(const YAML::Node& node, const std::string& path) {
  check_keys(node, {"kind", "low", "high"}, path);
  std::string kind = "goal-velocity-1d";
  read(node, "kind", kind);
  TaskFamily f;
  if (kind == "goal-velocity-1d") f.kind = FamilyKind::GoalVelocity1d;
  else if (kind == "goal-velocity-2d") f.kind = FamilyKind::GoalVelocity2d;
  else if (kind == "forward-backward") f.kind = FamilyKind::ForwardBackward;
  else fail(node["kind"], "unknown task family '" + kind + "' (goal-velocity-1d | goal-velocity-2d | forward-backward)");
  if (f.kind == FamilyKind::ForwardBackward) {
    if (node["low"] || node["high"]) fail(node, "forward-backward takes no bounds");
    return f;
  }
  if (!node["low"] || !node["high"]) fail(node, path + " needs 'low' and 'high'");
  f.low = read_vector(node["low"], "low");
  f.high = read_vector(node["high"], "high");
  if (f.low.size() != f.psi_dim() || f.high.size() != f.psi_dim())
    fail(node, path + ": bounds must have " + std::to_string(f.psi_dim()) + " entries for " + kind);
  return f;
}

inline std::vector<int> read_widths(const YAML::Node& node, const char* key) {
  const Vector v = read_vector(node, key);
  std::vector<int> w;
  for (double x : v) {
    if (x < 1 || x != std::floor(x)) fail(node, std::string("'") + key + "' widths must be positive integers");
    w.push_back(static_cast<int>(x));
  }
  return w;
}

inline void read_trpo(const YAML::Node& node, TrustRegionConfig& t) {
  check_keys(node,
             {"max_kl", "cg_iterations", "cg_damping", "backtrack_coeff", "max_backtracks", "gae_lambda", "gamma",
              "baseline_epochs", "baseline_minibatch"},
             "hyper.trpo");
  read(node, "max_kl", t.max_kl);
  read(node, "cg_iterations", t.cg_iterations);
  read(node, "cg_damping", t.cg_damping);
  read(node, "backtrack_coeff", t.backtrack_coeff);
  read(node, "max_backtracks", t.max_backtracks);
  read(node, "gae_lambda", t.gae_lambda);
  read(node, "gamma", t.gamma);
  read(node, "baseline_epochs", t.baseline_epochs);
  read(node, "baseline_minibatch", t.baseline_minibatch);
}

inline void read_hyper(const YAML::Node& node, HyperConfig& h) {
  check_keys(node,
             {"n_tasks", "n_warmup", "n_slbo", "n_collect", "n_inner", "n_model", "n_policy", "n_trpo", "horizon", "k",
              "model_batch", "model_lr", "model_hidden", "policy_hidden", "init_log_std", "workers", "trpo"},
             "hyper");
  read_positive(node, "n_tasks", h.n_tasks);
  read_positive(node, "n_warmup", h.n_warmup);
  read_positive(node, "n_slbo", h.n_slbo);
  read_positive(node, "n_collect", h.n_collect);
  read_positive(node, "n_inner", h.n_inner);
  read_positive(node, "n_model", h.n_model);
  read_positive(node, "n_policy", h.n_policy);
  read_positive(node, "n_trpo", h.n_trpo);
  read_positive(node, "horizon", h.horizon);
  read_positive(node, "k", h.k);
  read_positive(node, "model_batch", h.model_batch);
  read(node, "model_lr", h.model_lr);
  if (node["model_hidden"]) h.model_hidden = read_widths(node["model_hidden"], "model_hidden");
  if (node["policy_hidden"]) h.policy_hidden = read_widths(node["policy_hidden"], "policy_hidden");
  read(node, "init_log_std", h.init_log_std);
  read_positive(node, "workers", h.workers);
  if (node["trpo"]) read_trpo(node["trpo"], h.trpo);
}

inline RatingMethod read_method(const YAML::Node& node) {
  const auto s = node.as<std::string>();
  if (s == "true-gap") return RatingMethod::TrueGap;
  if (s == "estimated-gap") return RatingMethod::EstimatedGap;
  fail(node, "unknown rating '" + s + "' (true-gap | estimated-gap | both)");
}

}  // namespace config_detail

/// Builds the preset, then applies the YAML document on top. `preset_override`
/// (from the command line) wins over the document's `preset` key.
inline ExperimentConfig parse_config(const std::string& text, const std::string& mode,
                                     const std::optional<std::string>& preset_override = std::nullopt,
                                     const std::optional<std::uint64_t>& seed_override = std::nullopt) {
  using namespace config_detail;
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError("config: line " + std::to_string(e.mark.line + 1) + ", column " +
                      std::to_string(e.mark.column + 1) + ": " + e.msg);
  }
  if (!root || root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
  check_keys(root,
             {"mode", "preset", "seed", "env", "task_family", "dynamics", "hyper", "eval", "adapt", "baseline",
              "active", "resume"},
             "the top level");

  ExperimentConfig c;
  c.mode = mode;
  if (root["mode"]) {
    const auto m = root["mode"].as<std::string>();
    if (!mode.empty() && m != mode) fail(root["mode"], "config is for mode '" + m + "' but '" + mode + "' was requested");
    c.mode = m;
  }
  read(root, "preset", c.preset);
  if (preset_override) c.preset = *preset_override;
  if (c.preset == "desk") {
    c.hyper = HyperConfig::desk();
    c.baseline.maml_cfg = MamlConfig::desk();
  } else if (c.preset == "paper") {
    c.hyper = HyperConfig::paper();
    c.baseline.maml_cfg = MamlConfig::paper();
    c.adapt.n_test = 40;
    c.baseline.n_test = 40;
  } else {
    fail(root["preset"], "unknown preset '" + c.preset + "' (desk | paper)");
  }
  read(root, "seed", c.seed);
  if (seed_override) c.seed = *seed_override;
  read(root, "resume", c.resume);
  if (root["env"]) {
    check_keys(root["env"], {"body"}, "env");
    read(root["env"], "body", c.body);
  }
  if (root["task_family"]) c.family = read_family(root["task_family"], "task_family");
  read(root, "dynamics", c.variant);
  if (root["hyper"]) read_hyper(root["hyper"], c.hyper);
  c.hyper.seed = c.seed;
  if (const auto e = root["eval"]) {
    check_keys(e, {"n_eval", "bootstrap"}, "eval");
    read(e, "n_eval", c.eval.n_eval);
    read(e, "bootstrap", c.eval.bootstrap);
  }
  if (const auto a = root["adapt"]) {
    check_keys(a, {"source", "n_test", "n_warmup", "n_slbo", "task_family", "dynamics", "scratch"}, "adapt");
    read(a, "source", c.adapt.source);
    read(a, "n_test", c.adapt.n_test);
    if (a["n_warmup"]) c.adapt.n_warmup = a["n_warmup"].as<int>();
    read(a, "n_slbo", c.adapt.n_slbo);
    if (a["task_family"]) c.adapt.family = read_family(a["task_family"], "adapt.task_family");
    if (a["dynamics"]) c.adapt.variant = a["dynamics"].as<std::string>();
    read(a, "scratch", c.adapt.scratch);
  }
  if (const auto b = root["baseline"]) {
    check_keys(b, {"methods", "n_test", "oracle_budget", "maml"}, "baseline");
    if (b["methods"]) {
      c.baseline.maml = c.baseline.oracle = false;
      for (const auto& m : b["methods"]) {
        const auto s = m.as<std::string>();
        if (s == "maml") c.baseline.maml = true;
        else if (s == "oracle") c.baseline.oracle = true;
        else fail(m, "unknown baseline '" + s + "' (maml | oracle)");
      }
    }
    read(b, "n_test", c.baseline.n_test);
    read(b, "oracle_budget", c.baseline.oracle_budget);
    if (const auto m = b["maml"]) {
      auto& mc = c.baseline.maml_cfg;
      check_keys(m,
                 {"alpha_first", "alpha_later", "alpha_train", "beta", "meta_iterations", "meta_batch", "rollouts",
                  "grad_steps"},
                 "baseline.maml");
      read(m, "alpha_first", mc.alpha_first);
      read(m, "alpha_later", mc.alpha_later);
      read(m, "alpha_train", mc.alpha_train);
      read(m, "beta", mc.beta);
      read(m, "meta_iterations", mc.meta_iterations);
      read(m, "meta_batch", mc.meta_batch);
      read(m, "rollouts", mc.rollouts);
      read(m, "grad_steps", mc.grad_steps);
    }
  }
  if (const auto a = root["active"]) {
    check_keys(a, {"rating", "quantile", "warm_start", "window", "n_rollouts", "max_candidates", "compare", "n_test"},
               "active");
    if (const auto r = a["rating"]) {
      if (r.as<std::string>() == "both")
        c.active.methods = {RatingMethod::EstimatedGap, RatingMethod::TrueGap};
      else
        c.active.methods = {read_method(r)};
    }
    c.active.settings.method = c.active.methods.front();
    read(a, "quantile", c.active.settings.quantile);
    read(a, "warm_start", c.active.settings.warm_start);
    if (const auto w = a["window"]) {
      const auto s = w.as<std::string>();
      if (s != "sliding" && s != "first") fail(w, "active.window must be sliding | first");
      c.active.settings.sliding = s == "sliding";
    }
    read(a, "n_rollouts", c.active.settings.n_rollouts);
    read(a, "max_candidates", c.active.settings.max_candidates);
    read(a, "compare", c.active.compare);
    read(a, "n_test", c.active.n_test);
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path, const std::string& mode,
                                    const std::optional<std::string>& preset_override = std::nullopt,
                                    const std::optional<std::uint64_t>& seed_override = std::nullopt) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  try {
    return parse_config(ss.str(), mode, preset_override, seed_override);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

namespace config_detail {

inline void emit_family(YAML::Emitter& out, const TaskFamily& f) {
  out << YAML::BeginMap << YAML::Key << "kind" << YAML::Value << to_string(f.kind);
  if (f.kind != FamilyKind::ForwardBackward) {
    out << YAML::Key << "low" << YAML::Value << YAML::Flow << std::vector<double>(f.low.begin(), f.low.end());
    out << YAML::Key << "high" << YAML::Value << YAML::Flow << std::vector<double>(f.high.begin(), f.high.end());
  }
  out << YAML::EndMap;
}

}  // namespace config_detail

/// Every setting after presets, overrides and defaults, as YAML that
/// `parse_config` reads back to the same configuration.
inline std::string emit_config(const ExperimentConfig& c) {
  using config_detail::emit_family;
  YAML::Emitter out;
  out.SetDoublePrecision(17);
  const auto& h = c.hyper;
  out << YAML::BeginMap;
  out << YAML::Key << "mode" << YAML::Value << c.mode;
  out << YAML::Key << "preset" << YAML::Value << c.preset;
  out << YAML::Key << "seed" << YAML::Value << c.seed;
  out << YAML::Key << "resume" << YAML::Value << c.resume;
  out << YAML::Key << "env" << YAML::Value << YAML::BeginMap << YAML::Key << "body" << YAML::Value << c.body
      << YAML::EndMap;
  out << YAML::Key << "task_family" << YAML::Value;
  emit_family(out, c.family);
  out << YAML::Key << "dynamics" << YAML::Value << c.variant;
  out << YAML::Key << "hyper" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "n_tasks" << YAML::Value << h.n_tasks << YAML::Key << "n_warmup" << YAML::Value << h.n_warmup
      << YAML::Key << "n_slbo" << YAML::Value << h.n_slbo << YAML::Key << "n_collect" << YAML::Value << h.n_collect
      << YAML::Key << "n_inner" << YAML::Value << h.n_inner << YAML::Key << "n_model" << YAML::Value << h.n_model
      << YAML::Key << "n_policy" << YAML::Value << h.n_policy << YAML::Key << "n_trpo" << YAML::Value << h.n_trpo
      << YAML::Key << "horizon" << YAML::Value << h.horizon << YAML::Key << "k" << YAML::Value << h.k << YAML::Key
      << "model_batch" << YAML::Value << h.model_batch << YAML::Key << "model_lr" << YAML::Value << h.model_lr
      << YAML::Key << "model_hidden" << YAML::Value << YAML::Flow << h.model_hidden << YAML::Key << "policy_hidden"
      << YAML::Value << YAML::Flow << h.policy_hidden << YAML::Key << "init_log_std" << YAML::Value << h.init_log_std
      << YAML::Key << "workers" << YAML::Value << h.workers;
  out << YAML::Key << "trpo" << YAML::Value << YAML::BeginMap << YAML::Key << "max_kl" << YAML::Value << h.trpo.max_kl
      << YAML::Key << "cg_iterations" << YAML::Value << h.trpo.cg_iterations << YAML::Key << "cg_damping"
      << YAML::Value << h.trpo.cg_damping << YAML::Key << "backtrack_coeff" << YAML::Value << h.trpo.backtrack_coeff
      << YAML::Key << "max_backtracks" << YAML::Value << h.trpo.max_backtracks << YAML::Key << "gae_lambda"
      << YAML::Value << h.trpo.gae_lambda << YAML::Key << "gamma" << YAML::Value << h.trpo.gamma << YAML::Key
      << "baseline_epochs" << YAML::Value << h.trpo.baseline_epochs << YAML::Key << "baseline_minibatch"
      << YAML::Value << h.trpo.baseline_minibatch << YAML::EndMap;
  out << YAML::EndMap;
  out << YAML::Key << "eval" << YAML::Value << YAML::BeginMap << YAML::Key << "n_eval" << YAML::Value
      << c.eval.n_eval << YAML::Key << "bootstrap" << YAML::Value << c.eval.bootstrap << YAML::EndMap;
  out << YAML::Key << "adapt" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "source" << YAML::Value << c.adapt.source << YAML::Key << "n_test" << YAML::Value
      << c.adapt.n_test;
  if (c.adapt.n_warmup) out << YAML::Key << "n_warmup" << YAML::Value << *c.adapt.n_warmup;
  out << YAML::Key << "n_slbo" << YAML::Value << c.adapt.n_slbo;
  if (c.adapt.family) {
    out << YAML::Key << "task_family" << YAML::Value;
    emit_family(out, *c.adapt.family);
  }
  if (c.adapt.variant) out << YAML::Key << "dynamics" << YAML::Value << *c.adapt.variant;
  out << YAML::Key << "scratch" << YAML::Value << c.adapt.scratch << YAML::EndMap;
  std::vector<std::string> methods;
  if (c.baseline.maml) methods.push_back("maml");
  if (c.baseline.oracle) methods.push_back("oracle");
  const auto& m = c.baseline.maml_cfg;
  out << YAML::Key << "baseline" << YAML::Value << YAML::BeginMap << YAML::Key << "methods" << YAML::Value
      << YAML::Flow << methods << YAML::Key << "n_test" << YAML::Value << c.baseline.n_test << YAML::Key
      << "oracle_budget" << YAML::Value << c.baseline.oracle_budget;
  out << YAML::Key << "maml" << YAML::Value << YAML::BeginMap << YAML::Key << "alpha_first" << YAML::Value
      << m.alpha_first << YAML::Key << "alpha_later" << YAML::Value << m.alpha_later << YAML::Key << "alpha_train"
      << YAML::Value << m.alpha_train << YAML::Key << "beta" << YAML::Value << m.beta << YAML::Key
      << "meta_iterations" << YAML::Value << m.meta_iterations << YAML::Key << "meta_batch" << YAML::Value
      << m.meta_batch << YAML::Key << "rollouts" << YAML::Value << m.rollouts << YAML::Key << "grad_steps"
      << YAML::Value << m.grad_steps << YAML::EndMap << YAML::EndMap;
  const auto& a = c.active;
  out << YAML::Key << "active" << YAML::Value << YAML::BeginMap << YAML::Key << "rating" << YAML::Value
      << (a.methods.size() > 1 ? std::string("both") : to_string(a.methods.front())) << YAML::Key << "quantile"
      << YAML::Value << a.settings.quantile << YAML::Key << "warm_start" << YAML::Value << a.settings.warm_start
      << YAML::Key << "window" << YAML::Value << (a.settings.sliding ? "sliding" : "first") << YAML::Key
      << "n_rollouts" << YAML::Value << a.settings.n_rollouts << YAML::Key << "max_candidates" << YAML::Value
      << a.settings.max_candidates << YAML::Key << "compare" << YAML::Value << a.compare << YAML::Key << "n_test"
      << YAML::Value << a.n_test << YAML::EndMap;
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

}  // namespace metal
