#include "mmsb/reference.hpp"

#include <gtest/gtest.h>

using namespace mmsb;

namespace {

BridgePairBatch constant_pairs(int n, const Vector& x0, const Vector& x1, double t0, double t1) {
  BridgePairBatch p;
  p.x_init = x0.transpose().replicate(n, 1);
  p.x_final = x1.transpose().replicate(n, 1);
  p.t_init = Vector::Constant(n, t0);
  p.t_final = Vector::Constant(n, t1);
  return p;
}

}  // namespace

TEST(Interp, EndpointsArePinnedBitExactly) {
  Rng rng(3);
  const int n = 64;
  BridgePairBatch p;
  p.x_init = rng.normal_matrix(n, 3);
  p.x_final = rng.normal_matrix(n, 3);
  p.t_init = Vector::Constant(n, 0.7);
  p.t_final = Vector::Constant(n, 2.3);
  const Matrix z = rng.normal_matrix(n, 3);
  const ReferenceConfig ref(1.3);
  EXPECT_TRUE((interp(p, p.t_init, z, ref).array() == p.x_init.array()).all());
  EXPECT_TRUE((interp(p, p.t_final, z, ref).array() == p.x_final.array()).all());
}

TEST(Interp, MidpointVarianceMonteCarlo) {
  // x0 = x1 = 0, sigma = 1, length 1, s = 0.5: variance 0.25.
  const int n = 200000;
  const auto p = constant_pairs(n, Vector::Zero(1), Vector::Zero(1), 0.0, 1.0);
  Rng rng(5);
  const Matrix x = interp(p, Vector::Constant(n, 0.5), rng.normal_matrix(n, 1), ReferenceConfig(1.0));
  const double mean = x.mean();
  const double var = (x.array() - mean).square().sum() / (n - 1);
  const double se = 0.25 * std::sqrt(2.0 / (n - 1));
  EXPECT_LT(std::abs(var - 0.25), 3 * se);
}

TEST(Interp, MomentsMatchBridgeLawAcrossTimes) {
  const int n = 100000;
  Vector x0(2), x1(2);
  x0 << -1.0, 2.0;
  x1 << 3.0, 0.5;
  const double t0 = 1.0, t1 = 3.0;
  const ReferenceConfig ref(0.8);
  const auto p = constant_pairs(n, x0, x1, t0, t1);
  Rng rng(17);
  // 36 independent checks: each gets a Bonferroni-level 4 SE bound, and the
  // pooled standardised error of each kind must sit within 3 SE.
  double zsum_mean = 0.0, zsum_var = 0.0;
  int checks = 0;
  for (int k = 1; k <= 9; ++k) {
    const double t = t0 + (t1 - t0) * k / 10.0;
    const Matrix x = interp(p, Vector::Constant(n, t), rng.normal_matrix(n, 2), ref);
    const auto bm = bridge_moments(x0, x1, t, t0, t1, ref);
    for (int j = 0; j < 2; ++j) {
      const double m = x.col(j).mean();
      const double v = (x.col(j).array() - m).square().sum() / (n - 1);
      const double zm = (m - bm.mean(j)) / std::sqrt(bm.variance / n);
      const double zv = (v - bm.variance) / (bm.variance * std::sqrt(2.0 / (n - 1)));
      EXPECT_LT(std::abs(zm), 4.0) << "s=" << k / 10.0;
      EXPECT_LT(std::abs(zv), 4.0) << "s=" << k / 10.0;
      zsum_mean += zm;
      zsum_var += zv;
      ++checks;
    }
  }
  EXPECT_LT(std::abs(zsum_mean) / std::sqrt(checks), 3.0);
  EXPECT_LT(std::abs(zsum_var) / std::sqrt(checks), 3.0);
}

TEST(Interp, Errors) {
  const auto p = constant_pairs(2, Vector::Zero(1), Vector::Ones(1), 0.0, 1.0);
  const Matrix z = Matrix::Zero(2, 1);
  EXPECT_THROW(interp(p, Vector::Constant(2, 1.5), z, ReferenceConfig(1.0)), RangeError);
  EXPECT_THROW(interp(p, Vector::Constant(2, -0.1), z, ReferenceConfig(1.0)), RangeError);
  auto bad = constant_pairs(2, Vector::Zero(1), Vector::Ones(1), 1.0, 1.0);
  EXPECT_THROW(interp(bad, Vector::Constant(2, 1.0), z, ReferenceConfig(1.0)), NumericError);
}

TEST(ForwardTarget, Examples) {
  Matrix x(1, 1), y(1, 1);
  x << 0.3;
  EXPECT_EQ(forward_target(x, x, Vector::Constant(1, 0.2), Vector::Constant(1, 1.0))(0, 0), 0.0);
  x << 0.0;
  y << 1.0;
  EXPECT_DOUBLE_EQ(forward_target(x, y, Vector::Constant(1, 0.0), Vector::Constant(1, 1.0))(0, 0), 1.0);
  x << 0.5;
  EXPECT_DOUBLE_EQ(forward_target(x, y, Vector::Constant(1, 0.75), Vector::Constant(1, 1.0))(0, 0), 2.0);
  EXPECT_THROW(forward_target(x, y, Vector::Constant(1, 1.0), Vector::Constant(1, 1.0)), NumericError);
}

TEST(BackwardTarget, Examples) {
  Matrix x(1, 1), y(1, 1);
  x << 0.3;
  EXPECT_EQ(backward_target(x, x, Vector::Constant(1, 0.7), Vector::Constant(1, 0.0))(0, 0), 0.0);
  x << 1.0;
  y << 0.0;
  EXPECT_DOUBLE_EQ(backward_target(x, y, Vector::Constant(1, 1.0), Vector::Constant(1, 0.0))(0, 0), -1.0);
  EXPECT_DOUBLE_EQ(backward_target(x, y, Vector::Constant(1, 0.25), Vector::Constant(1, 0.0))(0, 0), -4.0);
  EXPECT_THROW(backward_target(x, y, Vector::Constant(1, 0.0), Vector::Constant(1, 0.0)), NumericError);
}

TEST(BridgeMomentsOp, Examples) {
  Vector a(1), b(1);
  a << 2.0;
  b << 5.0;
  auto m = bridge_moments(a, b, 0.0, 0.0, 1.0, ReferenceConfig(1.0));
  EXPECT_EQ(m.mean(0), 2.0);
  EXPECT_EQ(m.variance, 0.0);
  m = bridge_moments(Vector::Zero(1), Vector::Zero(1), 0.5, 0.0, 1.0, ReferenceConfig(2.0));
  EXPECT_DOUBLE_EQ(m.variance, 1.0);
  a << -1.0;
  b << 3.0;
  EXPECT_DOUBLE_EQ(bridge_moments(a, b, 0.5, 0.0, 1.0, ReferenceConfig(1.0)).mean(0), 1.0);
  EXPECT_THROW(bridge_moments(a, b, 1.5, 0.0, 1.0, ReferenceConfig(1.0)), RangeError);
}

TEST(LossTimes, StayClearOfEndpoints) {
  Rng rng(9);
  for (int i = 0; i < 100000; ++i) {
    const double t = sample_loss_time(rng, 1.0, 3.0);
    ASSERT_GE(t, 1.0 + 2e-3);
    ASSERT_LE(t, 3.0 - 2e-3);
  }
}
