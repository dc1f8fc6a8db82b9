#pragma once

// Two-sample metrics: exact-assignment W2, unbiased RBF MMD, sliced W2, and
// moment curves along trajectories. Arguments are put in a canonical order
// first, so every metric is exactly symmetric.

#include "mmsb/core.hpp"
#include "mmsb/integrate.hpp"

#include <algorithm>
#include <numeric>

namespace mmsb {

inline constexpr int kMaxAssignmentSize = 2000;
inline constexpr int kDefaultProjections = 128;

namespace detail {

/// Lexicographic order on (rows, cols, entries).
inline bool sample_less(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) return a.rows() < b.rows();
  if (a.cols() != b.cols()) return a.cols() < b.cols();
  for (Eigen::Index i = 0; i < a.size(); ++i)
    if (a.data()[i] != b.data()[i]) return a.data()[i] < b.data()[i];
  return false;
}

inline std::pair<const Matrix*, const Matrix*> canonical(const Matrix& a, const Matrix& b) {
  return sample_less(b, a) ? std::pair{&b, &a} : std::pair{&a, &b};
}

inline Matrix subsample_rows(const Matrix& x, Eigen::Index n, std::uint64_t seed) {
  if (x.rows() <= n) return x;
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(x.rows()));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  for (std::size_t i = 0; i < static_cast<std::size_t>(n); ++i) {
    const std::size_t j = i + rng.index(idx.size() - i);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(static_cast<std::size_t>(n));
  std::sort(idx.begin(), idx.end());
  Matrix out(n, x.cols());
  for (Eigen::Index i = 0; i < n; ++i) out.row(i) = x.row(idx[static_cast<std::size_t>(i)]);
  return out;
}

inline Matrix squared_distances(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.rows());
  for (Eigen::Index j = 0; j < b.rows(); ++j)
    for (Eigen::Index i = 0; i < a.rows(); ++i) c(i, j) = (a.row(i) - b.row(j)).squaredNorm();
  return c;
}

inline void check_samples(const Matrix& a, const Matrix& b, const char* who) {
  if (a.rows() < 1 || b.rows() < 1) throw DataError(std::string(who) + ": empty sample");
  if (a.cols() != b.cols()) throw DataError(std::string(who) + ": dimension mismatch");
  if (!a.allFinite() || !b.allFinite()) throw NumericError(std::string(who) + ": non-finite sample");
}

}  // namespace detail

/// Minimum-cost perfect matching on a square cost matrix (shortest augmenting
/// paths with potentials). Returns assignment[row] = column.
inline std::vector<int> solve_assignment(const Matrix& cost) {
  const int n = static_cast<int>(cost.rows());
  if (cost.cols() != n) throw DataError("solve_assignment: cost matrix must be square");
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based; p[j] is the row matched to column j, column 0 is the virtual root.
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0), v(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<int> p(static_cast<std::size_t>(n) + 1, 0), way(static_cast<std::size_t>(n) + 1, 0);
  std::vector<double> minv(static_cast<std::size_t>(n) + 1);
  std::vector<char> used(static_cast<std::size_t>(n) + 1);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> assignment(static_cast<std::size_t>(n));
  for (int j = 1; j <= n; ++j) assignment[static_cast<std::size_t>(p[j] - 1)] = j - 1;
  return assignment;
}

struct W2Result {
  double value = 0.0;
  int n = 0;               // points per side actually matched
  bool subsampled = false;
};

/// sqrt of the optimal assignment cost (mean squared Euclidean distance).
/// Unequal or oversized inputs are subsampled to a common n with `seed`.
inline W2Result w2_exact_report(const Matrix& a_in, const Matrix& b_in, std::uint64_t seed = 0) {
  detail::check_samples(a_in, b_in, "w2_exact");
  const auto [pa, pb] = detail::canonical(a_in, b_in);
  const Eigen::Index n = std::min({pa->rows(), pb->rows(), Eigen::Index{kMaxAssignmentSize}});
  W2Result res;
  res.n = static_cast<int>(n);
  res.subsampled = pa->rows() != n || pb->rows() != n;
  const Matrix a = detail::subsample_rows(*pa, n, seed);
  const Matrix b = detail::subsample_rows(*pb, n, splitmix64(seed));
  const Matrix cost = detail::squared_distances(a, b);
  const auto match = solve_assignment(cost);
  std::vector<double> terms(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) terms[static_cast<std::size_t>(i)] = cost(i, match[static_cast<std::size_t>(i)]);
  std::sort(terms.begin(), terms.end());
  double total = 0.0;
  for (double c : terms) total += c;
  res.value = std::sqrt(std::max(0.0, total / static_cast<double>(n)));
  return res;
}

inline double w2_exact(const Matrix& a, const Matrix& b, std::uint64_t seed = 0) {
  return w2_exact_report(a, b, seed).value;
}

/// Median pairwise Euclidean distance of the pooled sample.
inline double median_bandwidth(const Matrix& a, const Matrix& b) {
  Matrix pooled(a.rows() + b.rows(), a.cols());
  pooled << a, b;
  std::vector<double> d;
  d.reserve(static_cast<std::size_t>(pooled.rows() * (pooled.rows() - 1) / 2));
  for (Eigen::Index i = 0; i < pooled.rows(); ++i)
    for (Eigen::Index j = i + 1; j < pooled.rows(); ++j) d.push_back((pooled.row(i) - pooled.row(j)).norm());
  if (d.empty()) return 1.0;
  auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  double med = *mid;
  if (d.size() % 2 == 0) med = 0.5 * (med + *std::max_element(d.begin(), mid));
  return med > 0.0 ? med : 1.0;
}

struct MmdResult {
  double value = 0.0;      // sqrt(max(MMD^2, 0))
  double squared = 0.0;    // unbiased MMD^2 estimate (may be negative)
  double bandwidth = 0.0;
};

/// Unbiased MMD with k(x, y) = exp(-||x - y||^2 / (2 h^2)); h defaults to the
/// median heuristic.
inline MmdResult mmd_rbf_report(const Matrix& a_in, const Matrix& b_in,
                                double bandwidth = std::numeric_limits<double>::quiet_NaN()) {
  detail::check_samples(a_in, b_in, "mmd_rbf");
  if (a_in.rows() < 2 || b_in.rows() < 2) throw DataError("mmd_rbf: need at least 2 points per sample");
  const auto [pa, pb] = detail::canonical(a_in, b_in);
  const Matrix& a = *pa;
  const Matrix& b = *pb;
  MmdResult res;
  res.bandwidth = std::isnan(bandwidth) ? median_bandwidth(a, b) : bandwidth;
  if (!(res.bandwidth > 0.0)) throw ConfigError("mmd_rbf: bandwidth must be positive");
  const double g = 1.0 / (2.0 * res.bandwidth * res.bandwidth);
  auto within = [&](const Matrix& x) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      for (Eigen::Index j = i + 1; j < x.rows(); ++j) s += std::exp(-g * (x.row(i) - x.row(j)).squaredNorm());
    const double n = static_cast<double>(x.rows());
    return 2.0 * s / (n * (n - 1.0));
  };
  double cross = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j) cross += std::exp(-g * (a.row(i) - b.row(j)).squaredNorm());
  cross /= static_cast<double>(a.rows()) * static_cast<double>(b.rows());
  res.squared = within(a) + within(b) - 2.0 * cross;
  res.value = std::sqrt(std::max(0.0, res.squared));
  return res;
}

inline double mmd_rbf(const Matrix& a, const Matrix& b,
                      double bandwidth = std::numeric_limits<double>::quiet_NaN()) {
  return mmd_rbf_report(a, b, bandwidth).value;
}

/// 1-d W2 between empirical laws (quantile coupling; sizes may differ).
inline double w2_1d(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw DataError("w2_1d: empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double total = 0.0;
  if (a.size() == b.size()) {
    for (std::size_t i = 0; i < a.size(); ++i) total += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(total / static_cast<double>(a.size()));
  }
  // Walk the merged quantile levels k/na and l/nb.
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double level = 0.0;
  while (i < a.size() && j < b.size()) {
    const double next_a = static_cast<double>(i + 1) / na;
    const double next_b = static_cast<double>(j + 1) / nb;
    const double next = std::min(next_a, next_b);
    total += (next - level) * (a[i] - b[j]) * (a[i] - b[j]);
    level = next;
    if (next_a <= next) ++i;
    if (next_b <= next) ++j;
  }
  return std::sqrt(total);
}

/// Mean over random unit directions of the 1-d W2 of the projected samples.
inline double sliced_w(const Matrix& a_in, const Matrix& b_in, int num_projections, Rng& rng) {
  detail::check_samples(a_in, b_in, "sliced_w");
  if (num_projections < 1) throw ConfigError("sliced_w: need at least one projection");
  const auto [pa, pb] = detail::canonical(a_in, b_in);
  const Eigen::Index d = pa->cols();
  double total = 0.0;
  for (int p = 0; p < num_projections; ++p) {
    Vector u(d);
    for (Eigen::Index k = 0; k < d; ++k) u(k) = rng.normal();
    double norm = u.norm();
    if (norm == 0.0) {
      u.setZero();
      u(0) = 1.0;
      norm = 1.0;
    }
    u /= norm;
    const Vector xa = *pa * u, xb = *pb * u;
    total += w2_1d({xa.data(), xa.data() + xa.size()}, {xb.data(), xb.data() + xb.size()});
  }
  return total / num_projections;
}

inline double sliced_w(const Matrix& a, const Matrix& b, int num_projections = kDefaultProjections,
                       std::uint64_t seed = 0) {
  Rng rng(seed);
  return sliced_w(a, b, num_projections, rng);
}

// ---------------------------------------------------------------------------
// Moment curves

struct MomentCurves {
  std::vector<double> t;
  std::vector<double> mean;        // averaged over coordinates
  std::vector<double> variance;    // per-coordinate variance, averaged
  std::vector<double> covariance;  // cov(X_t, X_anchor) per coordinate, averaged
  std::vector<double> anchor;      // most recent grid time at or before t
};

/// Curves along a trajectory whose rows share step times (ODE or chained SDE).
inline MomentCurves moment_track(const TrajectoryBatch& traj, const TimeGrid& grid) {
  if (traj.rows() < 2) throw DataError("moment_track: need at least two paths");
  MomentCurves out;
  const double n = static_cast<double>(traj.rows());
  const int steps = traj.steps();
  auto find_step = [&](double time) {
    for (int k = 0; k <= steps; ++k)
      if (std::abs(traj.times(0, k) - time) <= 1e-9 * std::max(1.0, std::abs(time))) return k;
    return -1;
  };
  for (int k = 0; k <= steps; ++k) {
    const double t = traj.times(0, k);
    const Matrix& x = traj.states[static_cast<std::size_t>(k)];
    const Eigen::RowVectorXd mu = x.colwise().mean();
    const Matrix xc = x.rowwise() - mu;
    double anchor = grid.start();
    for (double g : grid.times())
      if (g <= t + 1e-9 * std::max(1.0, std::abs(t))) anchor = g;
    const int ka = find_step(anchor);
    const Matrix& y = ka >= 0 ? traj.states[static_cast<std::size_t>(ka)] : traj.initial();
    const Matrix yc = y.rowwise() - y.colwise().mean();
    out.t.push_back(t);
    out.mean.push_back(mu.mean());
    out.variance.push_back((xc.colwise().squaredNorm().array() / (n - 1.0)).mean());
    out.covariance.push_back(((xc.array() * yc.array()).colwise().sum() / (n - 1.0)).mean());
    out.anchor.push_back(anchor);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Component crossing

struct CrossingReport {
  double fraction = 0.0;             // rows crossing in at least one interval
  std::vector<double> per_interval;  // rows crossing in each interval
};

/// Nearest-component assignment oracle for mixture marginals. components[k]
/// holds the component means at grid time k; pairing[i][a] is the component
/// at t_{i+1} that component a at t_i should reach (identity when empty). A
/// row crosses interval i when its endpoint components break the pairing or
/// when its midpoint state is nearest the bridge midpoint of another pair.
inline CrossingReport crossing_fraction(const TrajectoryBatch& traj, const TimeGrid& grid,
                                        const std::vector<Matrix>& components,
                                        const std::vector<std::vector<int>>& pairing = {}) {
  const int M = grid.marginals();
  if (static_cast<int>(components.size()) != M) throw DataError("crossing_fraction: one component table per grid time");
  if (!pairing.empty() && static_cast<int>(pairing.size()) != M - 1)
    throw DataError("crossing_fraction: one pairing per interval");
  auto nearest = [](const Matrix& centres, const Eigen::RowVectorXd& x) {
    Eigen::Index best = 0;
    (centres.rowwise() - x).rowwise().squaredNorm().minCoeff(&best);
    return static_cast<int>(best);
  };
  const Eigen::Index n = traj.rows();
  std::vector<char> any(static_cast<std::size_t>(n), 0);
  CrossingReport rep;
  for (int i = 0; i + 1 < M; ++i) {
    const Matrix& ca = components[static_cast<std::size_t>(i)];
    const Matrix& cb = components[static_cast<std::size_t>(i) + 1];
    Matrix mids(ca.rows() * cb.rows(), ca.cols());
    for (Eigen::Index a = 0; a < ca.rows(); ++a)
      for (Eigen::Index b = 0; b < cb.rows(); ++b) mids.row(a * cb.rows() + b) = 0.5 * (ca.row(a) + cb.row(b));
    const Matrix x0 = state_at(traj, grid.time(i)), x1 = state_at(traj, grid.time(i + 1));
    const Matrix xm = state_at(traj, 0.5 * (grid.time(i) + grid.time(i + 1)));
    int crossed = 0;
    for (Eigen::Index r = 0; r < n; ++r) {
      const int a = nearest(ca, x0.row(r)), b = nearest(cb, x1.row(r));
      const int want = pairing.empty() ? a : pairing[static_cast<std::size_t>(i)][static_cast<std::size_t>(a)];
      const int mid = nearest(mids, xm.row(r));
      if (b != want || mid != a * static_cast<int>(cb.rows()) + want) {
        ++crossed;
        any[static_cast<std::size_t>(r)] = 1;
      }
    }
    rep.per_interval.push_back(static_cast<double>(crossed) / static_cast<double>(n));
  }
  rep.fraction = static_cast<double>(std::count(any.begin(), any.end(), 1)) / static_cast<double>(n);
  return rep;
}

// ---------------------------------------------------------------------------
// Report

struct MetricReport {
  std::vector<double> times;
  std::vector<double> w2;
  std::vector<double> mmd;
  std::vector<double> mmd_bandwidth;
  std::vector<double> swd;
  double w2_avg = 0.0;
  double mmd_avg = 0.0;
  double swd_avg = 0.0;
  double path_energy = std::numeric_limits<double>::quiet_NaN();
};

/// Compares generated samples with held-out samples at each listed time.
inline MetricReport evaluate_marginals(const std::vector<double>& times, const std::vector<Matrix>& generated,
                                       const std::vector<Matrix>& reference, bool with_w2 = true,
                                       std::uint64_t seed = 0) {
  if (generated.size() != times.size() || reference.size() != times.size())
    throw DataError("evaluate_marginals: one sample per time required");
  MetricReport rep;
  rep.times = times;
  for (std::size_t i = 0; i < times.size(); ++i) {
    const auto m = mmd_rbf_report(generated[i], reference[i]);
    rep.mmd.push_back(m.value);
    rep.mmd_bandwidth.push_back(m.bandwidth);
    rep.swd.push_back(sliced_w(generated[i], reference[i], kDefaultProjections, seed + i));
    rep.w2.push_back(with_w2 ? w2_exact(generated[i], reference[i], seed + i)
                             : std::numeric_limits<double>::quiet_NaN());
  }
  auto avg = [](const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  rep.w2_avg = avg(rep.w2);
  rep.mmd_avg = avg(rep.mmd);
  rep.swd_avg = avg(rep.swd);
  return rep;
}

}  // namespace mmsb
