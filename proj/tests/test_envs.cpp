#include <gtest/gtest.h>

#include <cmath>

#include "metal/envs.hpp"
#include "metal/virtualenv.hpp"

using namespace metal;

namespace {

Vector vec(std::initializer_list<double> xs) {
  Vector v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v[i++] = x;
  return v;
}

Task goal1(double psi) { return {FamilyKind::GoalVelocity1d, vec({psi})}; }

}  // namespace

TEST(Reset, SeededResetsAgree) {
  const auto spec = point_mass_spec();
  Rng a(9), b(9);
  EXPECT_EQ(reset(spec, a), reset(spec, b));
}

TEST(Reset, PointMassSupport) {
  const auto spec = point_mass_spec();
  Rng rng(1);
  for (int i = 0; i < 10000; ++i) {
    const Vector s = reset(spec, rng);
    EXPECT_EQ(s[0], 0.0);
    EXPECT_EQ(s[1], 0.0);
    ASSERT_LE(std::abs(s[2]), 0.05);
    ASSERT_LE(std::abs(s[3]), 0.05);
  }
}

TEST(Reset, PendulumAngularVelocityMean) {
  const auto spec = pendulum_spec();
  Rng rng(2);
  double sum = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const Vector s = reset(spec, rng);
    ASSERT_NEAR(s[0] * s[0] + s[1] * s[1], 1.0, 1e-12);
    ASSERT_LE(std::abs(s[2]), 0.5);
    sum += s[2];
  }
  EXPECT_NEAR(sum / 100000.0, 0.0, 0.01);
}

TEST(StepDynamics, PointMassRestIsFixedPoint) {
  const auto spec = point_mass_spec();
  const Vector s = vec({0.3, -1.0, 0.0, 0.0});
  EXPECT_EQ(step_dynamics(spec, nominal_variant(spec), s, Vector::Zero(2)), s);
}

TEST(StepDynamics, PointMassEulerStep) {
  const auto spec = point_mass_spec();
  const Vector next = step_dynamics(spec, nominal_variant(spec), vec({2.0, 0.0, 1.0, 0.0}), Vector::Zero(2));
  EXPECT_NEAR(next[2], 0.995, 1e-15);
  EXPECT_NEAR(next[0], 2.0 + 0.04975, 1e-15);
  EXPECT_EQ(next[3], 0.0);
}

TEST(StepDynamics, ActionsClippedBeforeUse) {
  const auto spec = point_mass_spec();
  const auto v = nominal_variant(spec);
  const Vector s = vec({0, 0, 0, 0});
  EXPECT_EQ(step_dynamics(spec, v, s, vec({5.0, -9.0})), step_dynamics(spec, v, s, vec({1.0, -1.0})));
}

TEST(StepDynamics, PendulumEquilibrium) {
  const auto spec = pendulum_spec();
  const Vector s = vec({1.0, 0.0, 0.0});
  EXPECT_EQ(step_dynamics(spec, nominal_variant(spec), s, Vector::Zero(1)), s);
}

TEST(StepDynamics, PendulumSpeedClipped) {
  const auto spec = pendulum_spec();
  const Vector next = step_dynamics(spec, nominal_variant(spec), vec({0.0, 1.0, 7.99}), vec({2.0}));
  EXPECT_LE(std::abs(next[2]), 8.0);
}

TEST(StepDynamics, NonFiniteStateRejected) {
  const auto spec = point_mass_spec();
  EXPECT_THROW(step_dynamics(spec, nominal_variant(spec), vec({NAN, 0, 0, 0}), Vector::Zero(2)), DivergenceError);
}

TEST(Reward, GoalMet) {
  const auto spec = point_mass_spec();
  EXPECT_EQ(reward(spec, goal1(0.7), vec({0, 0, 0.7, 0.3}), Vector::Zero(2)), 0.0);
}

TEST(Reward, ForwardBackwardSignFlip) {
  const auto spec = point_mass_spec();
  EXPECT_EQ(reward(spec, {FamilyKind::ForwardBackward, vec({-1.0})}, vec({0, 0, 2.0, 0}), Vector::Zero(2)), -2.0);
}

TEST(Reward, GoalVelocity2d) {
  const auto spec = point_mass_spec();
  const double r = reward(spec, {FamilyKind::GoalVelocity2d, vec({0.0, 1.0})}, vec({0, 0, 1.0, 0.0}), vec({0.5, 0.0}));
  EXPECT_NEAR(r, -2.0125, 1e-15);
}

TEST(Reward, PendulumGoalVelocity) {
  const auto spec = pendulum_spec();
  EXPECT_NEAR(reward(spec, goal1(1.0), vec({1, 0, 3.0}), vec({2.0})), -2.0 - 0.04, 1e-15);
}

TEST(Reward, LipschitzInPsi) {
  const auto spec = point_mass_spec();
  Rng rng(5);
  for (int i = 0; i < 1000; ++i) {
    const Vector s = vec({0, 0, uniform(rng, -3, 3), uniform(rng, -3, 3)});
    const Vector a = vec({uniform(rng, -1, 1), uniform(rng, -1, 1)});
    const Vector p1 = vec({uniform(rng, -2, 2), uniform(rng, -2, 2)});
    const Vector p2 = vec({uniform(rng, -2, 2), uniform(rng, -2, 2)});
    const double d1 = std::abs(reward(spec, goal1(p1[0]), s, a) - reward(spec, goal1(p2[0]), s, a));
    EXPECT_LE(d1, std::abs(p1[0] - p2[0]) + 1e-12);
    const double d2 = std::abs(reward(spec, {FamilyKind::GoalVelocity2d, p1}, s, a) -
                               reward(spec, {FamilyKind::GoalVelocity2d, p2}, s, a));
    EXPECT_LE(d2, (p1 - p2).lpNorm<1>() + 1e-12);
  }
}

TEST(SampleTask, ForwardBackwardIsFair) {
  Rng rng(6);
  const auto fam = TaskFamily::forward_backward();
  int plus = 0;
  for (int i = 0; i < 10000; ++i) {
    const Task t = sample_task(fam, rng);
    ASSERT_TRUE(fam.contains(t.psi));
    plus += t.psi[0] > 0 ? 1 : 0;
  }
  EXPECT_NEAR(plus / 10000.0, 0.5, 0.02);
}

TEST(SampleTask, IntervalSupportAndReproducibility) {
  const auto fam = TaskFamily::interval(0.0, 2.0);
  Rng rng(7);
  for (int i = 0; i < 10000; ++i) {
    const double p = sample_task(fam, rng).psi[0];
    ASSERT_GE(p, 0.0);
    ASSERT_LE(p, 2.0);
  }
  Rng a(8), b(8);
  EXPECT_EQ(sample_task(fam, a).psi, sample_task(fam, b).psi);
}

TEST(SharedDynamics, RolloutStatesIndependentOfTask) {
  const auto spec = point_mass_spec();
  Rng init(3);
  const GaussianPolicy policy(spec, 0, {16}, init);
  const TrueDynamics real{spec, nominal_variant(spec), nullptr};
  const std::vector<int> lengths(4, spec.horizon);
  const auto a = rollout(policy, real, spec, goal1(0.2), lengths, 42, false);
  const auto b = rollout(policy, real, spec, goal1(1.9), lengths, 42, false);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].states, b[i].states);
    EXPECT_EQ(a[i].actions, b[i].actions);
    EXPECT_NE(a[i].rewards, b[i].rewards);
  }
}

TEST(Variants, ShiftedDynamicsCannotReachNominalState) {
  const auto spec = point_mass_spec();
  const Vector a = vec({1.0, 1.0});
  auto run = [&](const DynamicsVariant& v) {
    Vector s = Vector::Zero(4);
    for (int t = 0; t < spec.horizon; ++t) s = step_dynamics(spec, v, s, a);
    return s;
  };
  const Vector nominal = run(nominal_variant(spec));
  auto halved = nominal_variant(spec);
  halved.gains *= 0.5;
  // Both variants are monotone in the action, so the probe a = (1, 1) is the
  // fastest any action sequence can push x.
  EXPECT_GT(nominal[0], run(halved)[0] + 0.1);
  EXPECT_GT(nominal[0], run(crippled_variant(spec))[0] + 0.1);
  EXPECT_EQ(run(crippled_variant(spec))[2], 0.0);
  EXPECT_GT(run(low_friction_variant(spec))[2], nominal[2]);
}

TEST(Variants, ValidationAndLookup) {
  const auto spec = point_mass_spec();
  EXPECT_EQ(variant_by_name(spec, "crippled").gains[0], 0.0);
  EXPECT_DOUBLE_EQ(variant_by_name(spec, "low-friction").drag, 0.05);
  EXPECT_THROW(variant_by_name(spec, "icy"), std::invalid_argument);
  auto bad = nominal_variant(spec);
  bad.gains[1] = 1.5;
  EXPECT_THROW(bad.validate(spec), std::invalid_argument);
  MdpSpec s = spec;
  s.gamma = 1.0;
  EXPECT_THROW(s.validate(), std::invalid_argument);
}
