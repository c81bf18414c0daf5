#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "metal/envs.hpp"
#include "metal/errors.hpp"
#include "metal/ndmath/adam.hpp"
#include "metal/ndmath/mlp.hpp"
#include "metal/ndmath/param_io.hpp"
#include "metal/rng.hpp"

namespace metal {

inline constexpr double kStdFloor = 1e-6;

/// Welford accumulator of per-coordinate mean and (population) variance.
class RunningStats {
 public:
  RunningStats() = default;
  explicit RunningStats(int dim) : mean_(Vector::Zero(dim)), m2_(Vector::Zero(dim)) {}

  void add(const Vector& x) {
    ++count_;
    const Vector delta = x - mean_;
    mean_ += delta / static_cast<double>(count_);
    m2_ += delta.cwiseProduct(x - mean_);
  }

  std::int64_t count() const { return count_; }
  const Vector& mean() const { return mean_; }
  Vector stddev() const {
    if (count_ == 0) return Vector::Ones(mean_.size());
    return (m2_ / static_cast<double>(count_)).cwiseMax(0.0).cwiseSqrt().cwiseMax(kStdFloor);
  }

 private:
  std::int64_t count_ = 0;
  Vector mean_;
  Vector m2_;
};

/// Affine input normalization for the model plus the scale of its
/// state-difference output. Identity until statistics are installed.
struct Normalizer {
  Vector state_mean, state_std;
  Vector action_mean, action_std;
  Vector diff_std;
  std::int64_t count = 0;

  static Normalizer identity(int state_dim, int action_dim) {
    return {Vector::Zero(state_dim), Vector::Ones(state_dim), Vector::Zero(action_dim),
            Vector::Ones(action_dim), Vector::Ones(state_dim), 0};
  }

  Matrix normalize_input(const Matrix& states, const Matrix& actions) const {
    Matrix x(states.rows() + actions.rows(), states.cols());
    x.topRows(states.rows()) = (states.colwise() - state_mean).array().colwise() / state_std.array();
    x.bottomRows(actions.rows()) = (actions.colwise() - action_mean).array().colwise() / action_std.array();
    return x;
  }

  Matrix normalize_state(const Matrix& s) const { return (s.colwise() - state_mean).array().colwise() / state_std.array(); }
  Matrix denormalize_state(const Matrix& z) const {
    return ((z.array().colwise() * state_std.array()).matrix()).colwise() + state_mean;
  }

  // The difference is only rescaled, never shifted: a zero network output
  // means "state unchanged" whatever the statistics are.
  Matrix denormalize_diff(const Matrix& out) const { return out.array().colwise() * diff_std.array(); }
};

/// Append-only store of real transitions, grouped into time-contiguous
/// segments, with running normalization statistics.
class TransitionDataset {
 public:
  struct Segment {
    std::int64_t begin = 0;
    std::int64_t length = 0;
  };

  TransitionDataset() = default;
  TransitionDataset(int state_dim, int action_dim)
      : state_dim_(state_dim), action_dim_(action_dim), state_stats_(state_dim), action_stats_(action_dim),
        diff_stats_(state_dim) {}

  int state_dim() const { return state_dim_; }
  int action_dim() const { return action_dim_; }
  std::int64_t size() const { return static_cast<std::int64_t>(rewards_.size()); }
  bool empty() const { return rewards_.empty(); }
  const std::vector<Segment>& segments() const { return segments_; }

  /// Appends one trajectory segment. Consecutive transitions must chain
  /// (next_state of one is the state of the next).
  void append_segment(std::span<const Transition> transitions, std::int64_t task_id, std::int64_t variant_id) {
    if (transitions.empty()) return;
    for (std::size_t i = 0; i < transitions.size(); ++i) {
      const auto& tr = transitions[i];
      if (tr.state.size() != state_dim_ || tr.next_state.size() != state_dim_ || tr.action.size() != action_dim_)
        throw std::invalid_argument("TransitionDataset: transition dimensions do not match dataset");
      if (i > 0 && (transitions[i - 1].next_state != tr.state || transitions[i - 1].t + 1 != tr.t))
        throw std::invalid_argument("TransitionDataset: segment is not time-contiguous");
    }
    segments_.push_back({size(), static_cast<std::int64_t>(transitions.size())});
    for (const auto& tr : transitions) {
      states_.insert(states_.end(), tr.state.data(), tr.state.data() + state_dim_);
      actions_.insert(actions_.end(), tr.action.data(), tr.action.data() + action_dim_);
      next_states_.insert(next_states_.end(), tr.next_state.data(), tr.next_state.data() + state_dim_);
      rewards_.push_back(tr.reward);
      steps_.push_back(tr.t);
      task_ids_.push_back(task_id);
      variant_ids_.push_back(variant_id);
      state_stats_.add(tr.state);
      action_stats_.add(tr.action);
      diff_stats_.add(tr.next_state - tr.state);
    }
  }

  Eigen::Map<const Vector> state(std::int64_t i) const { return {states_.data() + i * state_dim_, state_dim_}; }
  Eigen::Map<const Vector> action(std::int64_t i) const { return {actions_.data() + i * action_dim_, action_dim_}; }
  Eigen::Map<const Vector> next_state(std::int64_t i) const {
    return {next_states_.data() + i * state_dim_, state_dim_};
  }
  double reward(std::int64_t i) const { return rewards_[i]; }
  std::int64_t step(std::int64_t i) const { return steps_[i]; }
  std::int64_t task_id(std::int64_t i) const { return task_ids_[i]; }
  std::int64_t variant_id(std::int64_t i) const { return variant_ids_[i]; }

  Transition transition(std::int64_t i) const {
    return {Vector(state(i)), Vector(action(i)), Vector(next_state(i)), reward(i), static_cast<int>(step(i))};
  }

  /// Global indices of transitions that start a window of `k` consecutive
  /// transitions inside one segment.
  std::vector<std::int64_t> window_starts(int k) const {
    std::vector<std::int64_t> starts;
    for (const auto& seg : segments_)
      for (std::int64_t t = 0; t + k <= seg.length; ++t) starts.push_back(seg.begin + t);
    return starts;
  }

  Normalizer normalizer() const {
    return {state_stats_.mean(), state_stats_.stddev(), action_stats_.mean(), action_stats_.stddev(),
            diff_stats_.stddev(), state_stats_.count()};
  }

  /// Mean of the state differences (diagnostic; the model output is not centered).
  const Vector& diff_mean() const { return diff_stats_.mean(); }

 private:
  int state_dim_ = 0;
  int action_dim_ = 0;
  std::vector<double> states_, actions_, next_states_, rewards_;
  std::vector<std::int64_t> steps_, task_ids_, variant_ids_;
  std::vector<Segment> segments_;
  RunningStats state_stats_, action_stats_, diff_stats_;
};

/// M̂_φ: s′ = s + diff_std ⊙ MLP(normalize(s, a)).
struct DynamicsModel {
  Mlp net;
  Normalizer norm;
  AdamState adam;

  DynamicsModel() = default;

  DynamicsModel(int state_dim, int action_dim, const std::vector<int>& hidden, Rng& rng, double lr = 1e-3) {
    std::vector<int> widths{state_dim + action_dim};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(state_dim);
    net = Mlp::glorot(widths, rng);
    norm = Normalizer::identity(state_dim, action_dim);
    adam = AdamState::for_size(net.num_params(), lr);
  }

  int state_dim() const { return net.output_dim(); }
  int action_dim() const { return net.input_dim() - net.output_dim(); }

  /// Batched next-state prediction; actions are used as given (callers clip).
  Matrix step(const Matrix& states, const Matrix& actions) const {
    if (states.rows() != state_dim() || actions.rows() != action_dim() || states.cols() != actions.cols())
      throw std::invalid_argument("DynamicsModel: state/action dimension mismatch");
    Matrix next = states + norm.denormalize_diff(net.forward(norm.normalize_input(states, actions)));
    if (!next.allFinite()) throw DivergenceError("DynamicsModel: non-finite prediction");
    return next;
  }
};

inline Vector predict(const DynamicsModel& model, const Vector& state, const Vector& action) {
  return model.step(Matrix(state), Matrix(action)).col(0);
}

/// Anything with `Matrix step(const Matrix& states, const Matrix& actions) const`.
template <class M>
concept StepModel = requires(const M& m, const Matrix& s, const Matrix& a) {
  { m.step(s, a) } -> std::convertible_to<Matrix>;
};

/// L⁽ᵏ⁾ = (1/k) Σᵢ ‖ŝ_{t+i} − s_{t+i}‖₂ for a segment of k+1 states and k
/// actions, rolling ŝ forward from ŝ_t = s_t. The norm is not squared.
template <StepModel M>
double k_step_loss(const M& model, const Matrix& states, const Matrix& actions, int k) {
  if (k < 1) throw std::invalid_argument("k_step_loss: k must be >= 1");
  if (states.cols() < k + 1 || actions.cols() < k)
    throw std::invalid_argument("k_step_loss: segment shorter than k+1 states");
  Matrix s_hat = states.col(0);
  double total = 0.0;
  for (int i = 0; i < k; ++i) {
    s_hat = model.step(s_hat, Matrix(actions.col(i)));
    total += (s_hat.col(0) - states.col(i + 1)).norm();
  }
  return total / k;
}

/// B windows of k transitions: states[i] holds the i-th state of every
/// window (one window per column), actions[i] the i-th action.
struct WindowBatch {
  std::vector<Matrix> states;   // k + 1 entries, each state_dim × B
  std::vector<Matrix> actions;  // k entries, each action_dim × B
};

inline WindowBatch gather_windows(const TransitionDataset& data, std::span<const std::int64_t> starts, int k) {
  const auto b = static_cast<Eigen::Index>(starts.size());
  WindowBatch batch;
  batch.states.assign(k + 1, Matrix(data.state_dim(), b));
  batch.actions.assign(k, Matrix(data.action_dim(), b));
  for (Eigen::Index j = 0; j < b; ++j) {
    const auto g = starts[j];
    batch.states[0].col(j) = data.state(g);
    for (int i = 0; i < k; ++i) {
      batch.actions[i].col(j) = data.action(g + i);
      batch.states[i + 1].col(j) = data.next_state(g + i);
    }
  }
  return batch;
}

/// Batch-mean k-step loss; if `grad` is non-null it receives d(loss)/d(params)
/// (backpropagated through the k-step rollout).
inline double k_step_loss_and_grad(const DynamicsModel& model, const WindowBatch& batch, Vector* grad) {
  const int k = static_cast<int>(batch.actions.size());
  const auto b = batch.states[0].cols();
  const Normalizer& nm = model.norm;
  const int sd = model.state_dim();

  std::vector<Mlp::Tape> tapes(k);
  std::vector<Matrix> s_hat(k + 1);
  s_hat[0] = batch.states[0];
  for (int i = 0; i < k; ++i) {
    const Matrix out = model.net.forward(nm.normalize_input(s_hat[i], batch.actions[i]), tapes[i]);
    s_hat[i + 1] = s_hat[i] + nm.denormalize_diff(out);
  }
  const double scale = 1.0 / (static_cast<double>(k) * static_cast<double>(b));
  double loss = 0.0;
  std::vector<Matrix> err_dir(k + 1);  // d‖e‖/de per column
  for (int i = 1; i <= k; ++i) {
    const Matrix e = s_hat[i] - batch.states[i];
    const Eigen::RowVectorXd norms = e.colwise().norm();
    loss += norms.sum();
    err_dir[i] = Matrix::Zero(e.rows(), e.cols());
    for (Eigen::Index j = 0; j < b; ++j)
      if (norms[j] > 0.0) err_dir[i].col(j) = e.col(j) / norms[j];
  }
  loss *= scale;
  if (!std::isfinite(loss)) throw DivergenceError("k-step loss is not finite");
  if (grad == nullptr) return loss;

  *grad = Vector::Zero(model.net.num_params());
  Matrix g_state = Matrix::Zero(sd, b);  // dL/dŝ_{i+1}
  for (int i = k - 1; i >= 0; --i) {
    g_state += scale * err_dir[i + 1];
    const Matrix g_out = g_state.array().colwise() * nm.diff_std.array();
    const Matrix g_in = model.net.backward(tapes[i], g_out, *grad);
    // ŝ_{i+1} = ŝ_i + f(normalize(ŝ_i)): identity path plus the network path.
    g_state += (g_in.topRows(sd).array().colwise() / nm.state_std.array()).matrix();
  }
  if (!grad->allFinite()) throw DivergenceError("k-step loss gradient is not finite");
  return loss;
}

/// Refreshes the normalizer from `data`, then runs `steps` Adam steps on
/// batches of `batch_size` uniformly sampled k-windows. Returns the loss of
/// every step.
inline std::vector<double> train_model(DynamicsModel& model, const TransitionDataset& data, int steps, int k,
                                       int batch_size, Rng& rng) {
  if (data.empty()) throw std::invalid_argument("train_model: dataset is empty");
  const auto starts = data.window_starts(k);
  if (starts.empty()) throw std::invalid_argument("train_model: no segment holds k+1 states");
  std::vector<double> trace;
  if (steps <= 0) return trace;
  model.norm = data.normalizer();
  std::uniform_int_distribution<std::size_t> pick(0, starts.size() - 1);
  std::vector<std::int64_t> chosen(batch_size);
  Vector grad;
  for (int step = 0; step < steps; ++step) {
    for (auto& c : chosen) c = starts[pick(rng)];
    const WindowBatch batch = gather_windows(data, chosen, k);
    trace.push_back(k_step_loss_and_grad(model, batch, &grad));
    adam_step(model.adam, model.net.params(), grad);
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Persistence

inline constexpr std::string_view kDatasetMagic = "METALDS1";

/// "METALDS1", state_dim, action_dim, then per segment: length followed by
/// (s, a, s′, r, t, task-id, variant-id) records. Little-endian 64-bit words.
inline void write_dataset(std::ostream& os, const TransitionDataset& data) {
  binio::put_magic(os, kDatasetMagic);
  binio::put_u64(os, static_cast<std::uint64_t>(data.state_dim()));
  binio::put_u64(os, static_cast<std::uint64_t>(data.action_dim()));
  for (const auto& seg : data.segments()) {
    binio::put_u64(os, static_cast<std::uint64_t>(seg.length));
    for (std::int64_t i = seg.begin; i < seg.begin + seg.length; ++i) {
      for (double v : data.state(i)) binio::put_f64(os, v);
      for (double v : data.action(i)) binio::put_f64(os, v);
      for (double v : data.next_state(i)) binio::put_f64(os, v);
      binio::put_f64(os, data.reward(i));
      binio::put_u64(os, static_cast<std::uint64_t>(data.step(i)));
      binio::put_u64(os, static_cast<std::uint64_t>(data.task_id(i)));
      binio::put_u64(os, static_cast<std::uint64_t>(data.variant_id(i)));
    }
  }
}

inline TransitionDataset read_dataset(std::istream& is) {
  binio::expect_magic(is, kDatasetMagic);
  const auto sd = binio::get_u64(is);
  const auto ad = binio::get_u64(is);
  if (sd == 0 || ad == 0 || sd > 1024 || ad > 1024) throw FormatError("dataset: implausible dimensions");
  TransitionDataset data(static_cast<int>(sd), static_cast<int>(ad));
  std::uint64_t length = 0;
  while (binio::try_get_u64(is, length)) {
    std::vector<Transition> seg(length);
    std::int64_t task = 0, variant = 0;
    for (auto& tr : seg) {
      tr.state.resize(static_cast<Eigen::Index>(sd));
      tr.action.resize(static_cast<Eigen::Index>(ad));
      tr.next_state.resize(static_cast<Eigen::Index>(sd));
      for (auto& v : tr.state) v = binio::get_f64(is);
      for (auto& v : tr.action) v = binio::get_f64(is);
      for (auto& v : tr.next_state) v = binio::get_f64(is);
      tr.reward = binio::get_f64(is);
      tr.t = static_cast<int>(binio::get_u64(is));
      task = static_cast<std::int64_t>(binio::get_u64(is));
      variant = static_cast<std::int64_t>(binio::get_u64(is));
    }
    data.append_segment(seg, task, variant);
  }
  return data;
}

inline void save_dataset(const std::filesystem::path& path, const TransitionDataset& data) {
  binio::write_atomically(path, [&](std::ostream& os) { write_dataset(os, data); });
}

inline TransitionDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open dataset " + path.string());
  return read_dataset(is);
}

/// Arrays of a model checkpoint: [layers, state_dim, action_dim], network,
/// normalizer (6 arrays), Adam moments and [step, lr, β₁, β₂, ε].
inline std::vector<DenseArray> model_to_arrays(const DynamicsModel& m) {
  std::vector<DenseArray> out;
  out.push_back(DenseArray({3}, {static_cast<double>(m.net.num_layers()), static_cast<double>(m.state_dim()),
                                 static_cast<double>(m.action_dim())}));
  auto net = mlp_to_arrays(m.net);
  out.insert(out.end(), net.begin(), net.end());
  for (const Vector* v : {&m.norm.state_mean, &m.norm.state_std, &m.norm.action_mean, &m.norm.action_std,
                          &m.norm.diff_std})
    out.push_back(DenseArray::from_vector(*v));
  out.push_back(DenseArray({1}, {static_cast<double>(m.norm.count)}));
  out.push_back(DenseArray::from_vector(m.adam.m));
  out.push_back(DenseArray::from_vector(m.adam.v));
  out.push_back(DenseArray({5}, {static_cast<double>(m.adam.step), m.adam.lr, m.adam.beta1, m.adam.beta2, m.adam.eps}));
  return out;
}

/// Inverse of `model_to_arrays`; `consumed` receives the number of arrays read.
inline DynamicsModel model_from_arrays(const std::vector<DenseArray>& arrays, std::size_t* consumed = nullptr) {
  if (arrays.empty() || arrays[0].size() != 3) throw FormatError("model checkpoint: missing header array");
  const auto layers = static_cast<std::size_t>(arrays[0][0]);
  const int sd = static_cast<int>(arrays[0][1]);
  const int ad = static_cast<int>(arrays[0][2]);
  const std::size_t needed = 1 + 2 * layers + 6 + 3;
  if (layers == 0 || arrays.size() < needed) throw FormatError("model checkpoint: too few arrays");
  DynamicsModel m;
  m.net = mlp_from_arrays(arrays, 1, layers);
  if (m.net.input_dim() != sd + ad || m.net.output_dim() != sd) throw FormatError("model checkpoint: dimension mismatch");
  std::size_t i = 1 + 2 * layers;
  m.norm.state_mean = arrays[i++].to_vector();
  m.norm.state_std = arrays[i++].to_vector();
  m.norm.action_mean = arrays[i++].to_vector();
  m.norm.action_std = arrays[i++].to_vector();
  m.norm.diff_std = arrays[i++].to_vector();
  m.norm.count = static_cast<std::int64_t>(arrays[i++][0]);
  if (m.norm.state_mean.size() != sd || m.norm.state_std.size() != sd || m.norm.action_mean.size() != ad ||
      m.norm.action_std.size() != ad || m.norm.diff_std.size() != sd)
    throw FormatError("model checkpoint: normalizer shape mismatch");
  m.adam.m = arrays[i++].to_vector();
  m.adam.v = arrays[i++].to_vector();
  const auto& meta = arrays[i++];
  if (meta.size() != 5 || m.adam.m.size() != m.net.num_params() || m.adam.v.size() != m.net.num_params())
    throw FormatError("model checkpoint: optimizer state mismatch");
  m.adam.step = static_cast<long>(meta[0]);
  m.adam.lr = meta[1];
  m.adam.beta1 = meta[2];
  m.adam.beta2 = meta[3];
  m.adam.eps = meta[4];
  if (consumed) *consumed = i;
  return m;
}

}  // namespace metal
