#include <gtest/gtest.h>

#include <cmath>

#include "metal/trpo.hpp"
#include "checks.hpp"
#include "oracles.hpp"

using namespace metal;

namespace {

Trajectory with_rewards(std::vector<double> r) {
  Trajectory tr;
  tr.rewards = Eigen::Map<Eigen::RowVectorXd>(r.data(), static_cast<Eigen::Index>(r.size()));
  return tr;
}

}  // namespace

TEST(Gae, ExactBaselineOfConstantRewardGivesZero) {
  // r = 1 forever truncated at T: V(t) = Σ_{i<T−t} γ^i, so every δ_t = 0.
  const double gamma = 0.9;
  const int T = 6;
  std::vector<Trajectory> trajs{with_rewards(std::vector<double>(T, 1.0))};
  Eigen::RowVectorXd v(T);
  for (int t = 0; t < T; ++t) v[t] = (1.0 - std::pow(gamma, T - t)) / (1.0 - gamma);
  const auto g = gae_advantages(trajs, {v}, gamma, 0.95);
  EXPECT_LT(g.raw[0].cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LT((g.value_targets - v).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Gae, LambdaOneZeroBaselineIsDiscountedReturn) {
  std::vector<Trajectory> trajs{with_rewards({1.0, -2.0, 0.5, 3.0}), with_rewards({2.0, 2.0})};
  const auto g = gae_advantages(trajs, {Eigen::RowVectorXd::Zero(4), Eigen::RowVectorXd::Zero(2)}, 0.5, 1.0);
  EXPECT_NEAR(g.raw[0][0], 1.0 - 1.0 + 0.125 + 0.375, 1e-15);
  EXPECT_NEAR(g.raw[0][2], 0.5 + 1.5, 1e-15);
  EXPECT_NEAR(g.raw[1][0], 3.0, 1e-15);
  EXPECT_EQ(g.value_targets[0], g.raw[0][0]);
}

TEST(Gae, ThreeStepHandRecursion) {
  const double gamma = 0.99, lambda = 0.95;
  std::vector<Trajectory> trajs{with_rewards({0.3, -1.2, 0.7})};
  Eigen::RowVectorXd v(3);
  v << 0.5, -0.4, 1.1;
  const double d2 = 0.7 - 1.1;
  const double d1 = -1.2 + gamma * 1.1 + 0.4;
  const double d0 = 0.3 + gamma * -0.4 - 0.5;
  const double a2 = d2, a1 = d1 + gamma * lambda * a2, a0 = d0 + gamma * lambda * a1;
  const auto g = gae_advantages(trajs, {v}, gamma, lambda);
  EXPECT_NEAR(g.raw[0][0], a0, 1e-15);
  EXPECT_NEAR(g.raw[0][1], a1, 1e-15);
  EXPECT_NEAR(g.raw[0][2], a2, 1e-15);
  EXPECT_NEAR(g.advantages.mean(), 0.0, 1e-15);
  EXPECT_NEAR(g.advantages.squaredNorm() / 3.0, 1.0, 1e-14);
}

TEST(Policy, LogProbMatchesIndependentDensity) {
  Rng rng(1);
  const auto spec = point_mass_spec();
  GaussianPolicy p(spec, 0, {8}, rng, -0.3);
  Vector params = p.params();
  params.tail(2) << -0.7, 0.4;
  p.set_params(params);
  const Matrix x = Matrix::Random(4, 20), a = Matrix::Random(2, 20) * 2.0;
  const auto lp = p.log_prob(x, a);
  const Matrix mu = p.mean(x);
  for (Eigen::Index j = 0; j < 20; ++j) {
    const double ref = oracle::gaussian_log_density({a(0, j), a(1, j)}, {mu(0, j), mu(1, j)},
                                                    {std::exp(-0.7), std::exp(0.4)});
    EXPECT_NEAR(lp[j], ref, 1e-10);
  }
}

TEST(Policy, LogStdClamped) {
  Rng rng(2);
  GaussianPolicy p(point_mass_spec(), 0, {4}, rng);
  Vector params = p.params();
  params.tail(2) << -9.0, 5.0;
  p.set_params(params);
  EXPECT_EQ(p.log_std()[0], kLogStdMin);
  EXPECT_EQ(p.log_std()[1], kLogStdMax);
}

TEST(Fisher, MatchesSecondDifferenceOfKl) {
  for (std::uint64_t seed = 10; seed < 15; ++seed) {
    auto rb = checks::random_batch(seed, 32);
    const GaussianPolicy base = rb.policy;
    const Matrix m0 = base.mean(rb.batch.features);
    const FisherOperator fisher(base, rb.batch.features);
    auto kl_at = [&](const Vector& p) {
      GaussianPolicy q = base;
      q.set_params(p);
      return mean_kl(m0, base.log_std(), q.mean(rb.batch.features), q.log_std());
    };
    Rng rng(seed);
    const auto n = base.num_params();
    Vector v(n);
    for (auto& e : v) e = standard_normal(rng);
    const Vector fv = fisher(v);
    std::vector<double> proj, fd;
    const double eps = 1e-4;
    for (int k = 0; k < 20; ++k) {
      Vector u(n);
      for (auto& e : u) e = standard_normal(rng);
      const Vector p = base.params();
      const double h = (kl_at(p + eps * (u + v)) - kl_at(p + eps * (u - v)) - kl_at(p - eps * (u - v)) +
                        kl_at(p - eps * (u + v))) /
                       (4.0 * eps * eps);
      fd.push_back(h);
      proj.push_back(u.dot(fv));
    }
    EXPECT_LT(oracle::relative_error(proj, fd), 1e-3) << "seed " << seed;
  }
}

TEST(TrpoStep, ZeroAdvantagesLeavePolicyUnchanged) {
  auto rb = checks::random_batch(20);
  rb.batch.advantages.setZero();
  const Vector before = rb.policy.params();
  const auto d = trpo_step(rb.policy, rb.batch, TrustRegionConfig{});
  EXPECT_FALSE(d.accepted);
  EXPECT_EQ(d.gradient_norm, 0.0);
  EXPECT_EQ(rb.policy.params(), before);
}

TEST(TrpoStep, NonFiniteAdvantagesRejected) {
  auto rb = checks::random_batch(21);
  rb.batch.advantages[3] = NAN;
  const Vector before = rb.policy.params();
  const auto d = trpo_step(rb.policy, rb.batch, TrustRegionConfig{});
  EXPECT_FALSE(d.accepted);
  EXPECT_TRUE(d.nonfinite);
  EXPECT_EQ(rb.policy.params(), before);
}

TEST(TrpoStep, FuzzTrustRegionAndImprovement) {
  const TrustRegionConfig cfg;
  const auto r = checks::trpo_fuzz(100, 1000, cfg);
  EXPECT_TRUE(r.rejected_restored);
  EXPECT_LE(r.worst_kl_ratio, 1.5);
  EXPECT_GE(r.worst_surrogate_change, -1e-12);
  EXPECT_LT(r.worst_kl_mismatch, 1e-9);
  EXPECT_GT(r.accepted, 90);
}

TEST(TrpoStep, OneDimensionalNaturalStep) {
  const auto r = checks::natural_step_1d();
  ASSERT_TRUE(r.accepted);
  EXPECT_LT(r.weight_step, 1e-12);
  EXPECT_LT(r.max_error, 1e-6);
}

TEST(FitBaseline, ZeroTargetsZeroNetIsNoOp) {
  Rng rng(4);
  ValueBaseline vb(3, {8}, rng);
  vb.net.params().setZero();
  const double loss = fit_baseline(vb, Matrix::Random(3, 40), Eigen::RowVectorXd::Zero(40), 5, 16, rng);
  EXPECT_EQ(loss, 0.0);
  EXPECT_EQ(vb.net.params(), Vector::Zero(vb.net.num_params()));
}

TEST(FitBaseline, ZeroEpochsUnchanged) {
  Rng rng(5);
  ValueBaseline vb(2, {8}, rng);
  const Vector before = vb.net.params();
  fit_baseline(vb, Matrix::Random(2, 10), Eigen::RowVectorXd::Ones(10), 0, 4, rng);
  EXPECT_EQ(vb.net.params(), before);
}

TEST(FitBaseline, LearnsLinearTargets) {
  Rng rng(6);
  ValueBaseline vb(1, {16, 16}, rng, 1e-2);
  Matrix x(1, 200);
  for (auto& v : x.reshaped()) v = uniform(rng, -1.0, 1.0);
  const Eigen::RowVectorXd y = 2.0 * x.row(0).array() - 0.5;
  EXPECT_LT(fit_baseline(vb, x, y, 200, 32, rng), 1e-3);
}

TEST(PolicyIteration, ImprovesSurrogateOnVirtualData) {
  const auto spec = point_mass_spec();
  Rng rng(7);
  PolicyState learner(spec, 0, {16, 16}, rng);
  const TrueDynamics oracle{spec, nominal_variant(spec), nullptr};
  const Task task{FamilyKind::GoalVelocity1d, Vector::Constant(1, 1.0)};
  const auto trajs = virtual_rollouts(learner.policy, oracle, spec, task, 1000, 8);
  const auto stats = policy_iteration(learner, trajs, TrustRegionConfig{}, rng);
  EXPECT_EQ(stats.samples, 1000);
  EXPECT_TRUE(stats.trpo.accepted);
  EXPECT_GE(stats.trpo.surrogate_change, 0.0);
  EXPECT_LE(stats.trpo.kl, 0.01);
}
