#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "metal/envs.hpp"
#include "metal/ndmath/adam.hpp"
#include "metal/ndmath/mlp.hpp"
#include "metal/rng.hpp"

namespace metal {

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;

/// Diagonal Gaussian policy: mean from an MLP, state-independent log-std.
///
/// The network sees the state divided by the MDP's fixed observation scale,
/// followed by ψ when the policy is task-conditioned (psi_dim > 0).
/// Flat parameter layout: [network parameters, log-std].
class GaussianPolicy {
 public:
  GaussianPolicy() = default;

  GaussianPolicy(const MdpSpec& spec, int psi_dim, const std::vector<int>& hidden, Rng& rng,
                 double init_log_std = 0.0)
      : obs_scale_(spec.observation_scale), psi_dim_(psi_dim) {
    std::vector<int> widths{spec.state_dim + psi_dim};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(spec.action_dim);
    net_ = Mlp::glorot(widths, rng);
    log_std_ = Vector::Constant(spec.action_dim, std::clamp(init_log_std, kLogStdMin, kLogStdMax));
  }

  int input_dim() const { return net_.input_dim(); }
  int action_dim() const { return net_.output_dim(); }
  int psi_dim() const { return psi_dim_; }
  const Mlp& net() const { return net_; }
  Mlp& net() { return net_; }
  const Vector& log_std() const { return log_std_; }
  Vector stddev() const { return log_std_.array().exp(); }

  Eigen::Index num_params() const { return net_.num_params() + log_std_.size(); }

  Vector params() const {
    Vector p(num_params());
    p << net_.params(), log_std_;
    return p;
  }

  /// Installs parameters; log-std entries are clamped to [-5, 2].
  void set_params(const Vector& p) {
    if (p.size() != num_params()) throw std::invalid_argument("GaussianPolicy::set_params: size mismatch");
    net_.params() = p.head(net_.num_params());
    log_std_ = p.tail(log_std_.size()).cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
  }

  /// Network inputs for a batch of states (and per-column ψ when conditioned).
  Matrix features(const Matrix& states, const Matrix& psi) const {
    Matrix x(input_dim(), states.cols());
    x.topRows(states.rows()) = states.array().colwise() / obs_scale_.array();
    if (psi_dim_ > 0) {
      if (psi.rows() != psi_dim_ || psi.cols() != states.cols())
        throw std::invalid_argument("GaussianPolicy: ψ batch does not match conditioning dimension");
      x.bottomRows(psi_dim_) = psi;
    }
    return x;
  }

  Matrix mean(const Matrix& features) const { return net_.forward(features); }

  /// log π(a|x) for every column.
  Eigen::RowVectorXd log_prob(const Matrix& features, const Matrix& actions) const {
    return log_prob_given_mean(mean(features), actions);
  }

  Eigen::RowVectorXd log_prob_given_mean(const Matrix& means, const Matrix& actions) const {
    const Vector inv_std = (-log_std_).array().exp();
    const Matrix z = (actions - means).array().colwise() * inv_std.array();
    const double constant = log_std_.sum() + 0.5 * action_dim() * std::log(2.0 * std::numbers::pi);
    return (-0.5 * z.colwise().squaredNorm()).array() - constant;
  }

 private:
  Mlp net_;
  Vector log_std_;
  Vector obs_scale_;
  int psi_dim_ = 0;
};

/// State-value regressor used as the advantage baseline.
struct ValueBaseline {
  Mlp net;
  AdamState adam;

  ValueBaseline() = default;
  ValueBaseline(int input_dim, const std::vector<int>& hidden, Rng& rng, double lr = 1e-3) {
    std::vector<int> widths{input_dim};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(1);
    net = Mlp::glorot(widths, rng);
    adam = AdamState::for_size(net.num_params(), lr);
  }

  Eigen::RowVectorXd predict(const Matrix& features) const { return net.forward(features).row(0); }
};

/// Mean-squared-error regression of the baseline onto `targets` with Adam,
/// `epochs` shuffled passes in minibatches. Returns the final full-batch loss.
inline double fit_baseline(ValueBaseline& baseline, const Matrix& features, const Eigen::RowVectorXd& targets,
                           int epochs, int minibatch, Rng& rng) {
  const auto n = features.cols();
  if (targets.size() != n) throw std::invalid_argument("fit_baseline: one target per state");
  if (n == 0) return 0.0;
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  const Eigen::Index mb = std::max<Eigen::Index>(1, std::min<Eigen::Index>(minibatch, n));
  Vector grad;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (Eigen::Index begin = 0; begin < n; begin += mb) {
      const Eigen::Index count = std::min(mb, n - begin);
      Matrix x(features.rows(), count);
      Eigen::RowVectorXd y(count);
      for (Eigen::Index j = 0; j < count; ++j) {
        x.col(j) = features.col(order[static_cast<std::size_t>(begin + j)]);
        y[j] = targets[order[static_cast<std::size_t>(begin + j)]];
      }
      Mlp::Tape tape;
      const Matrix out = baseline.net.forward(x, tape);
      const Matrix g_out = (2.0 / static_cast<double>(count)) * (out.row(0) - y);
      grad = Vector::Zero(baseline.net.num_params());
      baseline.net.backward(tape, g_out, grad);
      adam_step(baseline.adam, baseline.net.params(), grad);
    }
  }
  return (baseline.predict(features) - targets).squaredNorm() / static_cast<double>(n);
}

}  // namespace metal
