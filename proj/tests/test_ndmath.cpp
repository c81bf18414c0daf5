#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <sstream>

#include "checks.hpp"
#include "metal/ndmath/adam.hpp"
#include "metal/ndmath/cg.hpp"
#include "metal/ndmath/dense_array.hpp"
#include "metal/ndmath/mlp.hpp"
#include "metal/ndmath/param_io.hpp"
#include "oracles.hpp"

using namespace metal;

TEST(DenseArray, RejectsDataShapeMismatch) {
  EXPECT_THROW(DenseArray({2, 3}, std::vector<double>(5)), std::invalid_argument);
  EXPECT_NO_THROW(DenseArray({2, 3}, std::vector<double>(6)));
}

TEST(DenseArray, RowMajorMatchesColumnView) {
  const DenseArray a({2, 3}, {1, 2, 3, 4, 5, 6});
  const auto m = a.as_columns();  // 3 features × 2 samples
  EXPECT_EQ(m(0, 1), 4.0);
  EXPECT_EQ(m(2, 0), 3.0);
  EXPECT_EQ(DenseArray::from_matrix(Matrix(m)), a);
}

TEST(Forward, ZeroNetworkGivesZero) {
  Mlp net({3, 5, 2});
  const DenseArray x({4, 3}, std::vector<double>(12, 1.7));
  const auto y = forward(net, x);
  EXPECT_EQ(y.shape(), (std::vector<std::size_t>{4, 2}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Forward, IdentityLayerReturnsInput) {
  Mlp net({3, 3});
  net.weight(0) = Matrix::Identity(3, 3);
  const DenseArray x({3}, {0.5, -2.0, 7.25});
  EXPECT_EQ(forward(net, x), x);
}

TEST(Forward, MatchesStraightLineOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Mlp net = Mlp::glorot({4, 7, 6, 3}, rng);
    for (auto& p : net.params()) p += 0.05 * standard_normal(rng);
    std::vector<double> x(4);
    for (auto& v : x) v = standard_normal(rng);
    const auto y = forward(net, DenseArray({4}, x));
    const auto ref = oracle::mlp_forward(net, x);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
  }
}

TEST(Forward, ShapeMismatchIsDescriptive) {
  Mlp net({3, 2});
  try {
    forward(net, DenseArray({2, 4}));
    FAIL() << "expected rejection";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("does not match network input width 3"), std::string::npos);
  }
}

TEST(Forward, Deterministic) {
  Rng rng(5);
  const Mlp net = Mlp::glorot({6, 32, 32, 2}, rng);
  Matrix x = Matrix::Random(6, 9);
  const Matrix a = net.forward(x), b = net.forward(x);
  EXPECT_EQ(0, std::memcmp(a.data(), b.data(), sizeof(double) * a.size()));
}

TEST(Gradients, ConstantLossGivesZero) {
  Rng rng(3);
  const Mlp net = Mlp::glorot({2, 4, 1}, rng);
  const auto grads = gradients(net, Matrix::Random(2, 5), [](const Matrix& y) {
    return LossAndGrad{3.0, Matrix::Zero(y.rows(), y.cols())};
  });
  ASSERT_EQ(grads.size(), 4u);
  EXPECT_EQ(grads[0].shape(), (std::vector<std::size_t>{4, 2}));
  for (const auto& g : grads)
    for (double v : g.data()) EXPECT_EQ(v, 0.0);
}

TEST(Gradients, LinearSquaredErrorClosedForm) {
  // L = Σ‖Wx + b − t‖²  ⇒  dL/dW = 2·Σ e xᵀ, dL/db = 2·Σ e.
  Rng rng(8);
  Mlp net = Mlp::glorot({3, 2}, rng);
  const Matrix x = Matrix::Random(3, 6), t = Matrix::Random(2, 6);
  const auto grads = gradients(net, x, [&](const Matrix& y) { return LossAndGrad{(y - t).squaredNorm(), 2.0 * (y - t)}; });
  const Matrix e = net.forward(x) - t;
  const Matrix dw = 2.0 * e * x.transpose();
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 3; ++j) EXPECT_NEAR(grads[0][static_cast<std::size_t>(i * 3 + j)], dw(i, j), 1e-12);
    EXPECT_NEAR(grads[1][static_cast<std::size_t>(i)], 2.0 * e.row(i).sum(), 1e-12);
  }
}

TEST(Gradients, NonFiniteLossSignalsDivergence) {
  Mlp net({2, 1});
  EXPECT_THROW(gradients(net, Matrix::Ones(2, 1),
                         [](const Matrix& y) { return LossAndGrad{NAN, Matrix::Zero(y.rows(), y.cols())}; }),
               DivergenceError);
}

TEST(Gradients, FiniteDifferencePolicyNet) {
  const auto r = checks::mlp_gradient_check({4, 32, 32, 2}, 100, 3, 0, 101);
  EXPECT_EQ(r.draws, 100);
  EXPECT_LT(r.worst_relative_error, 1e-4);
}

TEST(Gradients, FiniteDifferenceDeskModelNet) {
  const auto r = checks::mlp_gradient_check({6, 128, 128, 4}, 100, 3, 64, 102);
  EXPECT_LT(r.worst_relative_error, 1e-4);
}

TEST(Gradients, FiniteDifferencePaperModelNet) {
  const auto r = checks::mlp_gradient_check({6, 500, 500, 4}, 100, 2, 32, 103);
  EXPECT_LT(r.worst_relative_error, 1e-4);
}

TEST(Adam, ZeroGradientAtStepZeroIsNoOp) {
  auto s = AdamState::for_size(3);
  Vector p(3);
  p << 1, -2, 3;
  const Vector before = p;
  adam_step(s, p, Vector::Zero(3));
  EXPECT_EQ(p, before);
  EXPECT_EQ(s.step, 1);
}

TEST(Adam, FirstStepWithUnitGradient) {
  auto s = AdamState::for_size(4, 0.001);
  Vector p = Vector::Zero(4);
  adam_step(s, p, Vector::Ones(4));
  for (double v : p) EXPECT_NEAR(v, -0.001 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, MatchesScalarTraceWithAlternatingSigns) {
  auto s = AdamState::for_size(1, 0.01);
  Vector p = Vector::Constant(1, 0.5);
  adam_step(s, p, Vector::Constant(1, 1.0));
  adam_step(s, p, Vector::Constant(1, -1.0));
  // step 1: m=0.1, v=0.001, m̂=1, v̂=1        → x = 0.5 − 0.01/(1+1e-8)
  // step 2: m=0.09−0.1=−0.01, v=0.000999+0.001=0.001999
  //         m̂=−0.01/0.19, v̂=0.001999/0.001999=1
  double x = 0.5 - 0.01 * 1.0 / (1.0 + 1e-8);
  const double m2 = 0.9 * 0.1 - 0.1, v2 = 0.999 * 0.001 + 0.001;
  const double mh = m2 / (1.0 - 0.81), vh = v2 / (1.0 - 0.999 * 0.999);
  x -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
  EXPECT_NEAR(p[0], x, 1e-14);
  EXPECT_GE(s.v.minCoeff(), 0.0);
}

TEST(Adam, RejectsNonFiniteGradient) {
  auto s = AdamState::for_size(2);
  Vector p = Vector::Zero(2);
  EXPECT_THROW(adam_step(s, p, Vector::Constant(2, INFINITY)), DivergenceError);
  EXPECT_THROW(adam_step(s, p, Vector::Zero(3)), std::invalid_argument);
}

TEST(ConjugateGradient, IdentityConvergesInOneIteration) {
  Vector b(4);
  b << 1, 2, 3, 4;
  const auto r = conjugate_gradient([](const Vector& v) { return v; }, b, 10, 1e-12);
  EXPECT_EQ(r.iterations, 1);
  EXPECT_LT((r.x - b).norm(), 1e-15);
}

TEST(ConjugateGradient, ZeroRightHandSide) {
  const auto r = conjugate_gradient([](const Vector& v) { return Vector(3.0 * v); }, Vector::Zero(5), 10, 1e-12);
  EXPECT_EQ(r.x, Vector::Zero(5));
  EXPECT_EQ(r.iterations, 0);
}

TEST(ConjugateGradient, FiveByFiveMatchesDenseSolve) {
  std::mt19937_64 rng(77);
  const auto a = oracle::random_spd(5, rng);
  std::vector<double> b{1.0, -2.0, 0.5, 3.0, -1.5};
  Matrix am(5, 5);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) am(i, j) = a[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  const auto r = conjugate_gradient([&](const Vector& v) -> Vector { return am * v; },
                                    Eigen::Map<const Vector>(b.data(), 5), 20, 1e-14);
  const auto ref = oracle::dense_solve(a, b);
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(r.x[i], ref[static_cast<std::size_t>(i)], 1e-8);
}

TEST(ConjugateGradient, RandomSystemsAndMonotoneResidual) {
  const auto r = checks::cg_dense_check(100, 20, 78);
  EXPECT_LT(r.worst_abs_error, 1e-8);
  EXPECT_TRUE(r.residual_monotone);
}

TEST(ConjugateGradient, NonFiniteOperatorRaises) {
  EXPECT_THROW(conjugate_gradient([](const Vector& v) { return Vector(v * NAN); }, Vector::Ones(3), 5, 1e-12),
               DivergenceError);
}

TEST(ParamIo, RoundTripIsExact) {
  Rng rng(4);
  const Mlp net = Mlp::glorot({3, 8, 2}, rng);
  std::stringstream ss;
  write_param_block(ss, mlp_to_arrays(net));
  const auto arrays = read_param_block(ss);
  const Mlp back = mlp_from_arrays(arrays, 0, 2);
  EXPECT_EQ(back.widths(), net.widths());
  EXPECT_EQ(back.params(), net.params());
}

TEST(ParamIo, LittleEndianLayout) {
  std::stringstream ss;
  write_param_block(ss, {DenseArray({2}, {1.0, -0.5})});
  const std::string bytes = ss.str();
  ASSERT_EQ(bytes.size(), 8u + 8u + 8u + 16u);
  EXPECT_EQ(bytes.substr(0, 8), "METALNN1");
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 1);   // rank
  EXPECT_EQ(static_cast<unsigned char>(bytes[16]), 2);  // dim
  double v = 0.0;
  std::memcpy(&v, bytes.data() + 24, 8);
  EXPECT_EQ(v, 1.0);
}

TEST(ParamIo, BadMagicAndTruncationRefused) {
  std::stringstream bad("METALNN0xxxxxxxx");
  EXPECT_THROW(read_param_block(bad), FormatError);
  std::stringstream ss;
  write_param_block(ss, {DenseArray({3}, {1, 2, 3})});
  std::string s = ss.str();
  s.resize(s.size() - 4);
  std::stringstream cut(s);
  EXPECT_THROW(read_param_block(cut), FormatError);
}
