#include "mmsb/integrate.hpp"
#include "mmsb/metrics.hpp"
#include "mmsb/reference.hpp"

#include <gtest/gtest.h>

#include <array>
#include <numeric>

using namespace mmsb;

namespace {

/// Minimum mean squared distance over all bijections, by enumeration.
double brute_force_w2(const Matrix& a, const Matrix& b) {
  std::vector<int> perm(static_cast<std::size_t>(a.rows()));
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double c = 0.0;
    for (Eigen::Index i = 0; i < a.rows(); ++i) c += (a.row(i) - b.row(perm[static_cast<std::size_t>(i)])).squaredNorm();
    best = std::min(best, c);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return std::sqrt(best / a.rows());
}

/// Unbiased MMD^2 by explicit double sums.
double direct_mmd2(const Matrix& a, const Matrix& b, double h) {
  auto k = [h](const auto& x, const auto& y) { return std::exp(-(x - y).squaredNorm() / (2 * h * h)); };
  double aa = 0, bb = 0, ab = 0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.rows(); ++j)
      if (i != j) aa += k(a.row(i), a.row(j));
  for (Eigen::Index i = 0; i < b.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j)
      if (i != j) bb += k(b.row(i), b.row(j));
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j) ab += k(a.row(i), b.row(j));
  const double n = a.rows(), m = b.rows();
  return aa / (n * (n - 1)) + bb / (m * (m - 1)) - 2 * ab / (n * m);
}

Matrix permute_rows(const Matrix& x, const std::vector<int>& p) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) out.row(i) = x.row(p[static_cast<std::size_t>(i)]);
  return out;
}

}  // namespace

TEST(W2, IdenticalAndSinglePair) {
  Rng rng(1);
  const Matrix a = rng.normal_matrix(50, 3);
  EXPECT_EQ(w2_exact(a, a), 0.0);
  Matrix p(1, 1), q(1, 1);
  p << 0.0;
  q << 3.0;
  EXPECT_DOUBLE_EQ(w2_exact(p, q), 3.0);
}

TEST(W2, FourPointsMatchAllPermutations) {
  Matrix a(4, 1), b(4, 1);
  a << 0.0, 2.0, -1.0, 5.0;
  b << 1.0, 1.5, 4.0, -3.0;
  EXPECT_NEAR(w2_exact(a, b), brute_force_w2(a, b), 1e-12);
}

TEST(W2, MatchesEnumerationUpToSeven) {
  Rng rng(2);
  for (int trial = 0; trial < 60; ++trial) {
    const int n = 1 + trial % 7;
    const int d = 1 + trial % 3;
    const Matrix a = rng.normal_matrix(n, d);
    const Matrix b = rng.normal_matrix(n, d) * 2.0;
    ASSERT_NEAR(w2_exact(a, b), brute_force_w2(a, b), 1e-12) << "n=" << n << " d=" << d;
  }
}

TEST(W2, UnequalSizesAreSubsampledAndReported) {
  Rng rng(3);
  const Matrix a = rng.normal_matrix(30, 2), b = rng.normal_matrix(12, 2);
  const auto r = w2_exact_report(a, b, 5);
  EXPECT_EQ(r.n, 12);
  EXPECT_TRUE(r.subsampled);
  EXPECT_EQ(w2_exact_report(a, b, 5).value, r.value);
  EXPECT_FALSE(w2_exact_report(a, a).subsampled);
}

TEST(Metrics, SymmetricBitExactly) {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix a = rng.normal_matrix(40, 2), b = rng.normal_matrix(40, 2).array() + 0.5;
    EXPECT_EQ(w2_exact(a, b), w2_exact(b, a));
    EXPECT_EQ(mmd_rbf(a, b), mmd_rbf(b, a));
    EXPECT_EQ(sliced_w(a, b), sliced_w(b, a));
    const Matrix c = rng.normal_matrix(25, 2);
    EXPECT_EQ(w2_exact(a, c, 9), w2_exact(c, a, 9));
    EXPECT_EQ(mmd_rbf(a, c), mmd_rbf(c, a));
    EXPECT_EQ(sliced_w(a, c), sliced_w(c, a));
  }
}

TEST(Metrics, InvariantUnderRowPermutation) {
  Rng rng(5);
  const Matrix a = rng.normal_matrix(60, 3), b = rng.normal_matrix(60, 3).array() * 1.3;
  std::vector<int> p(60), q(60);
  std::iota(p.begin(), p.end(), 0);
  std::iota(q.begin(), q.end(), 0);
  std::shuffle(p.begin(), p.end(), rng.engine());
  std::shuffle(q.begin(), q.end(), rng.engine());
  const Matrix pa = permute_rows(a, p), pb = permute_rows(b, q);
  EXPECT_NEAR(w2_exact(a, b), w2_exact(pa, pb), 1e-12);
  EXPECT_NEAR(mmd_rbf(a, b), mmd_rbf(pa, pb), 1e-12);
  EXPECT_NEAR(sliced_w(a, b), sliced_w(pa, pb), 1e-12);
}

TEST(Mmd, IdenticalSamplesNearZero) {
  Rng rng(6);
  const Matrix a = rng.normal_matrix(200, 2);
  const auto r = mmd_rbf_report(a, a);
  EXPECT_EQ(r.value, 0.0);
  // Unbiased estimate on identical multisets is 2 (mean off-diagonal k - 1) / n.
  EXPECT_LE(std::abs(r.squared), 2.0 / 200);
}

TEST(Mmd, MatchesDirectDoubleSum) {
  Rng rng(7);
  const Matrix a = rng.normal_matrix(30, 2), b = rng.normal_matrix(20, 2).array() + 1.0;
  for (double h : {0.3, 1.0, 4.0}) {
    const auto r = mmd_rbf_report(a, b, h);
    EXPECT_NEAR(r.squared, direct_mmd2(a, b, h), 1e-12);
    EXPECT_EQ(r.bandwidth, h);
  }
}

TEST(Mmd, SaturatesForSeparatedClusters) {
  Rng rng(8);
  const Matrix a = rng.normal_matrix(50, 2) * 1e-3;
  const Matrix b = (rng.normal_matrix(50, 2) * 1e-3).array() + 100.0;
  const auto r = mmd_rbf_report(a, b, 1.0);
  EXPECT_NEAR(r.value, std::sqrt(2.0), 1e-3);
  EXPECT_NEAR(r.squared, direct_mmd2(a, b, 1.0), 1e-12);
}

TEST(Mmd, MedianBandwidthIsPooledMedianDistance) {
  Matrix a(2, 1), b(2, 1);
  a << 0.0, 1.0;
  b << 3.0, 7.0;
  // Pairwise distances: 1, 3, 7, 2, 6, 4 -> median of six is (3 + 4) / 2.
  EXPECT_DOUBLE_EQ(median_bandwidth(a, b), 3.5);
  EXPECT_DOUBLE_EQ(mmd_rbf_report(a, b).bandwidth, 3.5);
}

TEST(Swd, IdenticalIsZeroAndOneDimEqualsW2) {
  Rng rng(9);
  const Matrix a = rng.normal_matrix(100, 3);
  EXPECT_EQ(sliced_w(a, a), 0.0);
  const Matrix x = rng.normal_matrix(80, 1), y = rng.normal_matrix(80, 1).array() * 2.0 + 1.0;
  for (int p : {1, 5, 128}) EXPECT_NEAR(sliced_w(x, y, p, std::uint64_t{3}), w2_exact(x, y), 1e-12);
}

TEST(Swd, TranslationMatchesPerProjectionOracle) {
  Rng rng(10);
  const Matrix a = rng.normal_matrix(300, 3);
  Vector v(3);
  v << 0.4, -1.0, 2.0;
  const Matrix b = a.rowwise() + v.transpose();
  // The shift projects to |<u, v>| on each direction; replay the directions.
  Rng dirs(77);
  double expect = 0.0;
  for (int p = 0; p < 64; ++p) {
    Vector u(3);
    for (int k = 0; k < 3; ++k) u(k) = dirs.normal();
    expect += std::abs(u.dot(v)) / u.norm();
  }
  expect /= 64;
  const double swd = sliced_w(a, b, 64, std::uint64_t{77});
  EXPECT_NEAR(swd, expect, 1e-10);
  EXPECT_LE(swd, v.norm());
}

TEST(Swd, UnequalSizeQuantileCoupling) {
  // {0, 1} vs {0, 0.5, 1}: cost 0.25 on two quantile slabs of width 1/6.
  EXPECT_NEAR(w2_1d({0.0, 1.0}, {0.0, 0.5, 1.0}), std::sqrt(1.0 / 12.0), 1e-15);
  EXPECT_NEAR(w2_1d({2.0}, {0.0, 1.0, 5.0}), std::sqrt((4.0 + 1.0 + 9.0) / 3.0), 1e-15);
}

TEST(Moments, StraightLineTransportHasLinearMean) {
  struct Const {
    Matrix operator()(const Vector&, const Matrix& x) const { return Matrix::Constant(x.rows(), x.cols(), 2.0); }
  };
  struct Neg {
    Matrix operator()(const Vector&, const Matrix& x) const { return Matrix::Constant(x.rows(), x.cols(), -2.0); }
  };
  const TimeGrid g({0.0, 1.0, 2.0}, 20);
  Rng rng(11);
  const auto tr = ode_simulate(rng.normal_matrix(100, 2), Const{}, Neg{}, g, Direction::forward);
  const auto m = moment_track(tr, g);
  const double m0 = m.mean.front();
  for (std::size_t k = 0; k < m.t.size(); ++k) EXPECT_NEAR(m.mean[k], m0 + 2.0 * m.t[k], 1e-12);
}

TEST(Moments, BrownianVarianceGrowsLinearly) {
  struct Zero {
    Matrix operator()(const Vector&, const Matrix& x) const { return Matrix::Zero(x.rows(), x.cols()); }
  };
  const TimeGrid g({0.0, 2.0}, 20);
  Rng rng(12);
  const int n = 20000;
  const auto tr = sde_simulate(Matrix::Zero(n, 2), std::vector<int>(n, 0), Zero{}, Direction::forward, g, ReferenceConfig(1.0), rng);
  const auto m = moment_track(tr, g);
  for (std::size_t k = 1; k < m.t.size(); ++k) {
    const double t = m.t[k];
    EXPECT_NEAR(m.variance[k], t, 4 * t * std::sqrt(2.0 / n) / std::sqrt(2.0)) << t;
    // The anchor is the latest grid time not after t: the origin inside the
    // interval, t itself at the final grid time.
    if (t == 2.0) {
      EXPECT_DOUBLE_EQ(m.covariance[k], m.variance[k]);
    } else {
      EXPECT_EQ(m.covariance[k], 0.0);
    }
  }
}

TEST(Moments, PinnedBridgeFollowsBridgeVariance) {
  // Exact bridge drift toward 0 at t = 1.
  struct ToZero {
    Matrix operator()(const Vector& t, const Matrix& x) const {
      Matrix out(x.rows(), x.cols());
      for (Eigen::Index r = 0; r < x.rows(); ++r) out.row(r) = -x.row(r) / (1.0 - t(r));
      return out;
    }
  };
  const TimeGrid g({0.0, 1.0}, 200);
  const ReferenceConfig ref(1.0);
  Rng rng(13);
  const int n = 20000;
  const auto tr = sde_simulate(Matrix::Zero(n, 1), std::vector<int>(n, 0), ToZero{}, Direction::forward, g, ref, rng);
  const auto m = moment_track(tr, g);
  for (int k = 20; k < 200; k += 20) {
    const double t = m.t[static_cast<std::size_t>(k)];
    const double v = bridge_moments(Vector::Zero(1), Vector::Zero(1), t, 0.0, 1.0, ref).variance;
    EXPECT_NEAR(m.variance[static_cast<std::size_t>(k)], v, 0.03 + 4 * v * std::sqrt(2.0 / n)) << t;
  }
  // The last Euler step lands exactly on 0 before its noise increment.
  const double dt = 1.0 / 200.0;
  EXPECT_NEAR(m.variance.back(), dt, 4 * dt * std::sqrt(2.0 / n));
}

TEST(Crossing, NearestComponentAssignment) {
  // Components at (+-4, 2) then (+-4, -2); rows listed at t = 0, 0.5, 1.
  const TimeGrid g({0.0, 1.0}, 2);
  Matrix c0(2, 2), c1(2, 2);
  c0 << -4, 2, 4, 2;
  c1 << -4, -2, 4, -2;
  auto batch = [&](const std::vector<std::array<double, 6>>& rows) {
    TrajectoryBatch tr;
    const auto n = static_cast<Eigen::Index>(rows.size());
    tr.states.assign(3, Matrix(n, 2));
    tr.times.resize(n, 3);
    tr.mask = MaskMatrix::Ones(n, 2);
    tr.interval.assign(rows.size(), 0);
    for (Eigen::Index r = 0; r < n; ++r)
      for (int k = 0; k < 3; ++k) {
        tr.states[static_cast<std::size_t>(k)](r, 0) = rows[static_cast<std::size_t>(r)][2 * k];
        tr.states[static_cast<std::size_t>(k)](r, 1) = rows[static_cast<std::size_t>(r)][2 * k + 1];
        tr.times(r, k) = 0.5 * k;
      }
    return tr;
  };
  // Straight lanes, a side switch, and an excursion through the centre.
  const auto tr = batch({{-4, 2, -4, 0, -4, -2}, {4, 2, 4, 0, 4, -2}, {-4, 2, 0, 0, 4, -2}, {4, 2, 0.5, 0, 4, -2}});
  const auto rep = crossing_fraction(tr, g, {c0, c1});
  EXPECT_DOUBLE_EQ(rep.fraction, 0.5);
  ASSERT_EQ(rep.per_interval.size(), 1u);
  // With a swapped pairing only the switch through the centre is clean.
  const auto swapped = crossing_fraction(tr, g, {c0, c1}, {{1, 0}});
  EXPECT_DOUBLE_EQ(swapped.fraction, 0.75);
  EXPECT_THROW(crossing_fraction(tr, g, {c0}), DataError);
}

TEST(Report, AveragesPerTimeValues) {
  Rng rng(14);
  std::vector<Matrix> gen{rng.normal_matrix(40, 2), rng.normal_matrix(40, 2)};
  std::vector<Matrix> ref{rng.normal_matrix(40, 2), rng.normal_matrix(40, 2).array() + 1.0};
  const auto r = evaluate_marginals({1.0, 2.0}, gen, ref);
  ASSERT_EQ(r.swd.size(), 2u);
  EXPECT_DOUBLE_EQ(r.swd_avg, 0.5 * (r.swd[0] + r.swd[1]));
  EXPECT_DOUBLE_EQ(r.mmd_avg, 0.5 * (r.mmd[0] + r.mmd[1]));
  EXPECT_DOUBLE_EQ(r.w2_avg, 0.5 * (r.w2[0] + r.w2[1]));
  for (double v : r.mmd) EXPECT_GE(v, 0.0);
  EXPECT_GT(r.swd[1], r.swd[0]);
}
