#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "checks.hpp"
#include "metal/dynmodel.hpp"
#include "metal/virtualenv.hpp"
#include "oracles.hpp"

using namespace metal;

namespace {

/// s′ = A s + B a.
struct LinearModel {
  Matrix a, b;
  Matrix step(const Matrix& s, const Matrix& u) const { return a * s + b * u; }
};

}  // namespace

TEST(Predict, ZeroNetworkIsIdentity) {
  Rng rng(1);
  DynamicsModel m(4, 2, {16, 16}, rng);
  m.net.params().setZero();
  m.norm = checks::random_action_data(3, 20, 2).normalizer();
  Vector s(4), a(2);
  s << 0.1, -0.2, 0.3, 0.4;
  a << 0.5, -0.5;
  EXPECT_EQ(predict(m, s, a), s);
}

TEST(Predict, DifferenceIsScaledNetworkOutput) {
  Rng rng(2);
  DynamicsModel m(4, 2, {16}, rng);
  m.norm = checks::random_action_data(3, 20, 3).normalizer();
  const Matrix s = Matrix::Random(4, 7), a = Matrix::Random(2, 7);
  const Matrix out = m.net.forward(m.norm.normalize_input(s, a));
  const Matrix diff = m.step(s, a) - s;
  for (Eigen::Index j = 0; j < 7; ++j)
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(diff(i, j), m.norm.diff_std[i] * out(i, j), 1e-15);
}

TEST(Normalizer, RoundTrip) {
  const auto norm = checks::random_action_data(4, 30, 4).normalizer();
  const Matrix x = Matrix::Random(4, 10) * 3.0;
  EXPECT_LT((norm.denormalize_state(norm.normalize_state(x)) - x).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Normalizer, MatchesTwoPassStatistics) {
  const auto d = checks::random_action_data(20, 50, 5);
  const auto norm = d.normalizer();
  const auto n = static_cast<double>(d.size());
  for (int i = 0; i < 4; ++i) {
    double mean = 0.0;
    for (std::int64_t k = 0; k < d.size(); ++k) mean += d.state(k)[i];
    mean /= n;
    double var = 0.0;
    for (std::int64_t k = 0; k < d.size(); ++k) var += (d.state(k)[i] - mean) * (d.state(k)[i] - mean);
    const double sd = std::max(std::sqrt(var / n), 1e-6);
    EXPECT_NEAR(norm.state_mean[i], mean, 1e-9);
    EXPECT_NEAR(norm.state_std[i], sd, 1e-9);
  }
  EXPECT_EQ(norm.count, d.size());
  EXPECT_GE(norm.state_std.minCoeff(), kStdFloor);  // x, y start at 0 but move
}

TEST(KStepLoss, OracleModelIsZero) {
  const auto spec = point_mass_spec();
  const TrueDynamics truth{spec, nominal_variant(spec), nullptr};
  const auto d = checks::random_action_data(1, 10, 6);
  Matrix s(4, 4), a(2, 3);
  for (int i = 0; i < 3; ++i) {
    s.col(i) = d.state(i);
    a.col(i) = d.action(i);
  }
  s.col(3) = d.next_state(2);
  EXPECT_EQ(k_step_loss(truth, s, a, 3), 0.0);
}

TEST(KStepLoss, OneStepIsEuclideanError) {
  LinearModel m{Matrix::Identity(2, 2) * 0.5, Matrix::Ones(2, 1)};
  Matrix s(2, 2), a(1, 1);
  s << 1.0, 4.0, 2.0, 0.0;
  a << 1.0;
  // ŝ₁ = (1.5, 2.0); error (−2.5, 2.0)
  EXPECT_NEAR(k_step_loss(m, s, a, 1), std::sqrt(2.5 * 2.5 + 4.0), 1e-15);
}

TEST(KStepLoss, TwoStepHandRollout) {
  Matrix A(2, 2), B(2, 1);
  A << 1.0, 0.1, 0.0, 0.9;
  B << 0.0, 0.5;
  const LinearModel m{A, B};
  Matrix s(2, 3), a(1, 2);
  s << 0.0, 0.1, 0.3,  //
      1.0, 1.2, 1.0;
  a << 0.4, -0.2;
  // ŝ₁ = (0.1, 0.9+0.2) = (0.1, 1.1); ŝ₂ = (0.1+0.11, 0.99−0.1) = (0.21, 0.89)
  const double e1 = std::sqrt(0.0 + 0.1 * 0.1);
  const double e2 = std::sqrt(0.09 * 0.09 + 0.11 * 0.11);
  EXPECT_NEAR(k_step_loss(m, s, a, 2), (e1 + e2) / 2.0, 1e-15);
  EXPECT_THROW(k_step_loss(m, s, a, 3), std::invalid_argument);
}

TEST(KStepLoss, BatchedLossMatchesScalarDefinition) {
  Rng rng(7);
  DynamicsModel m(4, 2, {16}, rng);
  const auto d = checks::random_action_data(5, 20, 8);
  m.norm = d.normalizer();
  const auto starts = d.window_starts(2);
  const std::vector<std::int64_t> pick{starts[0], starts[17], starts[40]};
  const auto batch = gather_windows(d, pick, 2);
  double ref = 0.0;
  for (int j = 0; j < 3; ++j) {
    Matrix s(4, 3), a(2, 2);
    for (int i = 0; i < 3; ++i) s.col(i) = batch.states[static_cast<std::size_t>(i)].col(j);
    for (int i = 0; i < 2; ++i) a.col(i) = batch.actions[static_cast<std::size_t>(i)].col(j);
    ref += k_step_loss(m, s, a, 2);
  }
  EXPECT_NEAR(k_step_loss_and_grad(m, batch, nullptr), ref / 3.0, 1e-14);
}

TEST(KStepLoss, GradientMatchesFiniteDifferences) {
  Rng rng(9);
  const auto d = checks::random_action_data(6, 25, 10);
  for (int k = 1; k <= 3; ++k) {
    DynamicsModel m(4, 2, {12, 12}, rng);
    m.norm = d.normalizer();
    std::vector<std::int64_t> pick;
    const auto starts = d.window_starts(k);
    for (int j = 0; j < 5; ++j) pick.push_back(starts[static_cast<std::size_t>(j * 13 % starts.size())]);
    const auto batch = gather_windows(d, pick, k);
    Vector grad;
    k_step_loss_and_grad(m, batch, &grad);
    auto loss = [&](const Vector& p) {
      DynamicsModel probe = m;
      probe.net.set_params(p);
      return k_step_loss_and_grad(probe, batch, nullptr);
    };
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(m.net.num_params()));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    const auto fd = oracle::finite_difference(loss, m.net.params(), idx);
    std::vector<double> an(grad.data(), grad.data() + grad.size());
    EXPECT_LT(oracle::relative_error(an, fd), 1e-4) << "k=" << k;
  }
}

TEST(Dataset, RejectsNonContiguousSegments) {
  TransitionDataset d(4, 2);
  Transition a{Vector::Zero(4), Vector::Zero(2), Vector::Ones(4), 0.0, 0};
  Transition b{Vector::Zero(4), Vector::Zero(2), Vector::Ones(4), 0.0, 1};
  const std::vector<Transition> seg{a, b};
  EXPECT_THROW(d.append_segment(seg, 0, 0), std::invalid_argument);
  EXPECT_TRUE(d.empty());
}

TEST(Dataset, WindowsStayInsideSegments) {
  const auto d = checks::random_action_data(3, 10, 11);
  EXPECT_EQ(d.size(), 30);
  const auto w = d.window_starts(2);
  EXPECT_EQ(w.size(), 3u * 9u);
  for (auto g : w) EXPECT_LE(g % 10, 8);
}

TEST(Dataset, BinaryRoundTrip) {
  const auto d = checks::random_action_data(4, 12, 12);
  std::stringstream ss;
  write_dataset(ss, d);
  EXPECT_EQ(ss.str().substr(0, 8), "METALDS1");
  const auto back = read_dataset(ss);
  ASSERT_EQ(back.size(), d.size());
  ASSERT_EQ(back.segments().size(), d.segments().size());
  for (std::int64_t i = 0; i < d.size(); ++i) {
    EXPECT_EQ(back.state(i), d.state(i));
    EXPECT_EQ(back.action(i), d.action(i));
    EXPECT_EQ(back.next_state(i), d.next_state(i));
    EXPECT_EQ(back.step(i), d.step(i));
    EXPECT_EQ(back.task_id(i), d.task_id(i));
  }
  EXPECT_EQ(back.normalizer().state_std, d.normalizer().state_std);
}

TEST(Dataset, BadMagicRefused) {
  std::stringstream ss("METALNN1");
  EXPECT_THROW(read_dataset(ss), FormatError);
}

TEST(TrainModel, ZeroStepsLeavesModelUnchanged) {
  Rng rng(13), fit(14);
  DynamicsModel m(4, 2, {16}, rng);
  const Vector before = m.net.params();
  EXPECT_TRUE(train_model(m, checks::random_action_data(2, 10, 15), 0, 2, 8, fit).empty());
  EXPECT_EQ(m.net.params(), before);
}

TEST(TrainModel, EmptyDatasetRejected) {
  Rng rng(16);
  DynamicsModel m(4, 2, {8}, rng);
  EXPECT_THROW(train_model(m, TransitionDataset(4, 2), 1, 2, 8, rng), std::invalid_argument);
}

TEST(TrainModel, DeterministicUnderSeed) {
  const auto d = checks::random_action_data(10, 20, 17);
  auto fit = [&] {
    Rng init(18), batches(19);
    DynamicsModel m(4, 2, {32}, init);
    train_model(m, d, 30, 2, 32, batches);
    return m.net.params();
  };
  EXPECT_EQ(fit(), fit());
}

TEST(TrainModel, LinearDynamicsLossDrops) {
  const auto d = checks::random_action_data(100, 50, 20);
  Rng init(21), batches(22);
  DynamicsModel m(4, 2, {64, 64}, init);
  const auto trace = train_model(m, d, 500, 2, 128, batches);
  ASSERT_EQ(trace.size(), 500u);
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 10; ++i) {
    first += trace[static_cast<std::size_t>(i)];
    last += trace[trace.size() - 1 - static_cast<std::size_t>(i)];
  }
  EXPECT_LT(last, 0.05 * first);
  EXPECT_EQ(m.adam.step, 500);
}

TEST(ModelArrays, RoundTripIncludingOptimizer) {
  Rng rng(23), b(24);
  DynamicsModel m(4, 2, {8, 8}, rng);
  train_model(m, checks::random_action_data(3, 10, 25), 3, 2, 4, b);
  const auto back = model_from_arrays(model_to_arrays(m));
  EXPECT_EQ(back.net.params(), m.net.params());
  EXPECT_EQ(back.norm.diff_std, m.norm.diff_std);
  EXPECT_EQ(back.adam.v, m.adam.v);
  EXPECT_EQ(back.adam.step, 3);
}
