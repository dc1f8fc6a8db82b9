#pragma once

// Discrete ground truth for chain-structured multi-marginal entropic OT with a
// Brownian reference. The joint law is kept in factored form
//   pi(x_0..x_K) ~ prod_i u_i(x_i) prod_i K_i(x_i, x_{i+1}),
//   K_i(x, y) = exp(-||y - x||^2 / (2 sigma^2 (t_{i+1} - t_i))),
// and every quantity is computed by forward/backward message passing in log space.

#include "mmsb/core.hpp"
#include "mmsb/reference.hpp"

#include <numeric>

namespace mmsb {

class SinkhornNonConvergence : public NumericError {
 public:
  SinkhornNonConvergence(const std::string& what, std::vector<double> history)
      : NumericError(what), history_(std::move(history)) {}
  const std::vector<double>& history() const { return history_; }

 private:
  std::vector<double> history_;
};

namespace detail {

inline double logsumexp(const Eigen::Ref<const Vector>& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

}  // namespace detail

struct DiscreteCoupling {
  std::vector<Matrix> supports;    // n_i x d atoms per grid time
  std::vector<Vector> weights;     // prescribed marginals
  std::vector<Vector> log_potentials;
  std::vector<double> times;
  double sigma = 1.0;
  std::vector<double> residual_history;   // max L1 marginal residual after each cycle
  std::vector<double> objective_history;  // dual objective sum_i <mu_i, log u_i> - log Z after each cycle
  int iterations = 0;

  int marginals() const { return static_cast<int>(supports.size()); }
  int dim() const { return static_cast<int>(supports.front().cols()); }

  /// log K_i as an n_i x n_{i+1} table.
  Matrix log_kernel(int i) const {
    const Matrix& x = supports[static_cast<std::size_t>(i)];
    const Matrix& y = supports[static_cast<std::size_t>(i) + 1];
    const double scale = 2.0 * sigma * sigma * (times[static_cast<std::size_t>(i) + 1] - times[static_cast<std::size_t>(i)]);
    Matrix lk(x.rows(), y.rows());
    for (Eigen::Index b = 0; b < y.rows(); ++b)
      for (Eigen::Index a = 0; a < x.rows(); ++a) lk(a, b) = -(y.row(b) - x.row(a)).squaredNorm() / scale;
    return lk;
  }

  /// alpha_i: log mass flowing into x_i from the left; beta_i from the right.
  void messages(std::vector<Vector>& alpha, std::vector<Vector>& beta) const {
    const int M = marginals();
    alpha.assign(static_cast<std::size_t>(M), Vector());
    beta.assign(static_cast<std::size_t>(M), Vector());
    alpha[0] = Vector::Zero(supports[0].rows());
    for (int i = 0; i + 1 < M; ++i) {
      const Matrix lk = log_kernel(i);
      const Vector left = alpha[static_cast<std::size_t>(i)] + log_potentials[static_cast<std::size_t>(i)];
      Vector next(lk.cols());
      for (Eigen::Index b = 0; b < lk.cols(); ++b) next(b) = detail::logsumexp(left + lk.col(b));
      alpha[static_cast<std::size_t>(i) + 1] = next;
    }
    beta[static_cast<std::size_t>(M) - 1] = Vector::Zero(supports.back().rows());
    for (int i = M - 2; i >= 0; --i) {
      const Matrix lk = log_kernel(i);
      const Vector right = beta[static_cast<std::size_t>(i) + 1] + log_potentials[static_cast<std::size_t>(i) + 1];
      Vector prev(lk.rows());
      for (Eigen::Index a = 0; a < lk.rows(); ++a) prev(a) = detail::logsumexp(right + lk.row(a).transpose());
      beta[static_cast<std::size_t>(i)] = prev;
    }
  }

  double log_partition() const {
    std::vector<Vector> alpha, beta;
    messages(alpha, beta);
    return detail::logsumexp(alpha[0] + log_potentials[0] + beta[0]);
  }

  /// Marginal of the factored joint at grid index i.
  Vector marginal(int i) const {
    std::vector<Vector> alpha, beta;
    messages(alpha, beta);
    const Vector l = alpha[static_cast<std::size_t>(i)] + log_potentials[static_cast<std::size_t>(i)] + beta[static_cast<std::size_t>(i)];
    return (l.array() - detail::logsumexp(l)).exp();
  }

  /// Joint law of (X_{t_i}, X_{t_{i+1}}), an n_i x n_{i+1} table.
  Matrix pairwise(int i) const {
    if (i < 0 || i + 1 >= marginals()) throw RangeError("pairwise: interval index out of range");
    std::vector<Vector> alpha, beta;
    messages(alpha, beta);
    Matrix l = log_kernel(i);
    l.colwise() += alpha[static_cast<std::size_t>(i)] + log_potentials[static_cast<std::size_t>(i)];
    l.rowwise() += (beta[static_cast<std::size_t>(i) + 1] + log_potentials[static_cast<std::size_t>(i) + 1]).transpose();
    const double lz = detail::logsumexp(Eigen::Map<const Vector>(l.data(), l.size()));
    return (l.array() - lz).exp();
  }

  Vector potentials(int i) const { return log_potentials[static_cast<std::size_t>(i)].array().exp(); }

  /// Full joint table, row-major over (x_0, ..., x_K) with x_K fastest. Only for
  /// small problems (at most 3 marginals of at most 20 atoms).
  std::vector<double> joint() const {
    if (marginals() > 3) throw ConfigError("joint: at most 3 marginals may be materialised");
    for (const auto& s : supports)
      if (s.rows() > 20) throw ConfigError("joint: at most 20 atoms per marginal may be materialised");
    std::vector<Matrix> lk;
    for (int i = 0; i + 1 < marginals(); ++i) lk.push_back(log_kernel(i));
    std::vector<Eigen::Index> dims;
    for (const auto& s : supports) dims.push_back(s.rows());
    std::size_t total = 1;
    for (auto d : dims) total *= static_cast<std::size_t>(d);
    std::vector<double> logs(total);
    std::vector<Eigen::Index> idx(dims.size(), 0);
    for (std::size_t flat = 0; flat < total; ++flat) {
      std::size_t rem = flat;
      for (int i = marginals() - 1; i >= 0; --i) {
        idx[static_cast<std::size_t>(i)] = static_cast<Eigen::Index>(rem % static_cast<std::size_t>(dims[static_cast<std::size_t>(i)]));
        rem /= static_cast<std::size_t>(dims[static_cast<std::size_t>(i)]);
      }
      double l = 0.0;
      for (int i = 0; i < marginals(); ++i) l += log_potentials[static_cast<std::size_t>(i)](idx[static_cast<std::size_t>(i)]);
      for (int i = 0; i + 1 < marginals(); ++i) l += lk[static_cast<std::size_t>(i)](idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(i) + 1]);
      logs[flat] = l;
    }
    const double lz = detail::logsumexp(Eigen::Map<const Vector>(logs.data(), static_cast<Eigen::Index>(total)));
    for (double& v : logs) v = std::exp(v - lz);
    return logs;
  }

  /// Dual objective of the factored joint. Each projection maximises it over
  /// one potential, so it never decreases across cycles; its gap to the optimum
  /// equals KL(solution || current joint).
  double dual_objective() const {
    double d = -log_partition();
    for (int i = 0; i < marginals(); ++i)
      d += weights[static_cast<std::size_t>(i)].dot(log_potentials[static_cast<std::size_t>(i)]);
    return d;
  }

  double max_residual() const {
    double r = 0.0;
    for (int i = 0; i < marginals(); ++i)
      r = std::max(r, (marginal(i) - weights[static_cast<std::size_t>(i)]).lpNorm<1>());
    return r;
  }
};

/// Cyclic Bregman projections onto each marginal constraint. One cycle
/// recomputes the right messages, then sweeps left to right setting
/// log u_i = log mu_i - alpha_i - beta_i and advancing alpha.
inline DiscreteCoupling chain_sinkhorn(const std::vector<Matrix>& supports, const std::vector<Vector>& weights,
                                       const TimeGrid& grid, const ReferenceConfig& ref, double tol = 1e-10,
                                       int max_iter = 10000) {
  const int M = grid.marginals();
  if (static_cast<int>(supports.size()) != M || static_cast<int>(weights.size()) != M)
    throw DataError("chain_sinkhorn: one support and weight vector per grid time required");
  for (int i = 0; i < M; ++i) {
    const auto& s = supports[static_cast<std::size_t>(i)];
    const auto& w = weights[static_cast<std::size_t>(i)];
    if (s.rows() < 1) throw DataError("chain_sinkhorn: empty support at marginal " + std::to_string(i));
    if (s.cols() != supports[0].cols()) throw DataError("chain_sinkhorn: support dimension mismatch");
    if (w.size() != s.rows()) throw DataError("chain_sinkhorn: weight count mismatch at marginal " + std::to_string(i));
    if (!(w.array() > 0.0).all()) throw DataError("chain_sinkhorn: weights must be strictly positive");
    if (std::abs(w.sum() - 1.0) > 1e-9) throw DataError("chain_sinkhorn: weights must sum to 1");
  }
  DiscreteCoupling c;
  c.supports = supports;
  c.weights = weights;
  c.times = grid.times();
  c.sigma = ref.sigma;
  for (int i = 0; i < M; ++i) c.log_potentials.push_back(Vector::Zero(supports[static_cast<std::size_t>(i)].rows()));

  std::vector<Matrix> lk;
  for (int i = 0; i + 1 < M; ++i) lk.push_back(c.log_kernel(i));
  std::vector<Vector> logw;
  for (const auto& w : weights) logw.push_back(w.array().log());

  std::vector<Vector> alpha, beta;
  for (int it = 1; it <= max_iter; ++it) {
    c.messages(alpha, beta);
    for (int i = 0; i < M; ++i) {
      const auto si = static_cast<std::size_t>(i);
      c.log_potentials[si] = logw[si] - alpha[si] - beta[si];
      if (i + 1 < M) {
        const Vector left = alpha[si] + c.log_potentials[si];
        for (Eigen::Index b = 0; b < lk[si].cols(); ++b) alpha[si + 1](b) = detail::logsumexp(left + lk[si].col(b));
      }
    }
    c.iterations = it;
    const double res = c.max_residual();
    c.residual_history.push_back(res);
    c.objective_history.push_back(c.dual_objective());
    if (!std::isfinite(res)) throw SinkhornNonConvergence("chain_sinkhorn: non-finite residual", c.residual_history);
    if (res <= tol) return c;
  }
  throw SinkhornNonConvergence("chain_sinkhorn: residual " + std::to_string(c.residual_history.back()) +
                                   " above tolerance after " + std::to_string(max_iter) + " cycles",
                               c.residual_history);
}

inline double total_variation(const Matrix& p, const Matrix& q) {
  if (p.rows() != q.rows() || p.cols() != q.cols()) throw DataError("total_variation: shape mismatch");
  return 0.5 * (p - q).cwiseAbs().sum();
}

// ---------------------------------------------------------------------------
// Interior law

/// Mixture of isotropic Gaussians (zero-variance components are point masses).
struct GaussianMixture {
  Vector weights;
  Matrix means;    // components x d
  Vector variances;  // per component, per coordinate

  Vector mean() const { return means.transpose() * weights; }

  /// Per-coordinate variance of the mixture.
  Vector coordinate_variance() const {
    const Vector mu = mean();
    Vector second = Vector::Zero(means.cols());
    for (Eigen::Index c = 0; c < means.rows(); ++c)
      second += weights(c) * (means.row(c).transpose().cwiseAbs2().array() + variances(c)).matrix();
    return second - mu.cwiseAbs2();
  }

  Matrix sample(Eigen::Index n, Rng& rng) const {
    std::vector<double> cdf(static_cast<std::size_t>(weights.size()));
    std::partial_sum(weights.data(), weights.data() + weights.size(), cdf.begin());
    Matrix out(n, means.cols());
    for (Eigen::Index r = 0; r < n; ++r) {
      const double u = rng.uniform() * cdf.back();
      auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
      const Eigen::Index c = std::min<Eigen::Index>(it - cdf.begin(), weights.size() - 1);
      const double sd = std::sqrt(variances(c));
      for (Eigen::Index j = 0; j < means.cols(); ++j) out(r, j) = means(c, j) + sd * rng.normal();
    }
    return out;
  }
};

/// Law of X_t under the coupling glued with Brownian bridges: a mixture over
/// atom pairs of the interval containing t, weighted by the pairwise marginal.
inline GaussianMixture oracle_interior_marginal(const DiscreteCoupling& c, double t) {
  const TimeGrid grid(c.times, 2 * (c.marginals() - 1));
  const int i = grid.bridge_index(t);
  const Matrix pi = c.pairwise(i);
  const ReferenceConfig ref(c.sigma);
  const Matrix& xs = c.supports[static_cast<std::size_t>(i)];
  const Matrix& ys = c.supports[static_cast<std::size_t>(i) + 1];
  GaussianMixture m;
  m.weights.resize(pi.size());
  m.means.resize(pi.size(), xs.cols());
  m.variances.resize(pi.size());
  Eigen::Index k = 0;
  for (Eigen::Index b = 0; b < pi.cols(); ++b)
    for (Eigen::Index a = 0; a < pi.rows(); ++a, ++k) {
      const auto bm = bridge_moments(xs.row(a).transpose(), ys.row(b).transpose(), t, grid.time(i), grid.time(i + 1), ref);
      m.weights(k) = pi(a, b);
      m.means.row(k) = bm.mean.transpose();
      m.variances(k) = bm.variance;
    }
  return m;
}

/// Exact Markovian-projection drift of the oracle process. Forward:
/// (E[X_{t_{i+1}} | X_t = x] - x) / (t_{i+1} - t); backward:
/// (E[X_{t_i} | X_t = x] - x) / (t - t_i).
class OracleDrift {
 public:
  OracleDrift(const DiscreteCoupling& c, Direction dir)
      : coupling_(c), dir_(dir), grid_(c.times, 2 * (c.marginals() - 1)), ref_(c.sigma) {
    for (int i = 0; i + 1 < c.marginals(); ++i) log_pairs_.push_back(c.pairwise(i).array().log());
  }

  Matrix operator()(const Vector& t, const Matrix& x) const {
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) out.row(r) = drift_at(t(r), x.row(r).transpose()).transpose();
    return out;
  }

  Vector drift_at(double t, const Vector& x) const {
    int i = grid_.bridge_index(t);
    // At a grid time the relevant interval is the one the process is entering.
    if (dir_ == Direction::forward && i + 1 < grid_.marginals() - 1 && t == grid_.time(i + 1)) ++i;
    if (dir_ == Direction::backward && t == grid_.time(i) && i > 0) --i;
    const double t0 = grid_.time(i), t1 = grid_.time(i + 1);
    const double s = (t - t0) / (t1 - t0);
    const Matrix& xs = coupling_.supports[static_cast<std::size_t>(i)];
    const Matrix& ys = coupling_.supports[static_cast<std::size_t>(i) + 1];
    const Matrix& lp = log_pairs_[static_cast<std::size_t>(i)];
    const double var = ref_.variance() * (t1 - t0) * s * (1.0 - s);

    Matrix logw(lp.rows(), lp.cols());
    if (var <= 0.0) {
      // Pinned at an atom: condition on the nearest atom of the pinned side.
      if ((dir_ == Direction::forward && s != 0.0) || (dir_ == Direction::backward && s != 1.0))
        throw NumericError("oracle drift: singular at the target endpoint");
      const Matrix& side = s == 0.0 ? xs : ys;
      Eigen::Index best = 0;
      (side.rowwise() - x.transpose()).rowwise().squaredNorm().minCoeff(&best);
      logw.setConstant(-std::numeric_limits<double>::infinity());
      if (s == 0.0) logw.row(best) = lp.row(best);
      else logw.col(best) = lp.col(best);
    } else {
      for (Eigen::Index b = 0; b < lp.cols(); ++b)
        for (Eigen::Index a = 0; a < lp.rows(); ++a)
          logw(a, b) = lp(a, b) - ((1.0 - s) * xs.row(a) + s * ys.row(b) - x.transpose()).squaredNorm() / (2.0 * var);
    }
    const double lz = detail::logsumexp(Eigen::Map<const Vector>(logw.data(), logw.size()));
    const Matrix w = (logw.array() - lz).exp();
    if (dir_ == Direction::forward) {
      const Vector target = ys.transpose() * w.colwise().sum().transpose();
      return (target - x) / (t1 - t);
    }
    const Vector target = xs.transpose() * w.rowwise().sum();
    return (target - x) / (t - t0);
  }

 private:
  const DiscreteCoupling& coupling_;
  Direction dir_;
  TimeGrid grid_;
  ReferenceConfig ref_;
  std::vector<Matrix> log_pairs_;
};

// ---------------------------------------------------------------------------
// Empirical coupling of a model

struct EmpiricalCoupling {
  Matrix table;      // start atoms x end atoms, rows scaled to start weights
  Vector overflow;   // mass per start atom that landed outside every snap ball
  double snap_radius = 0.0;
  int paths_per_atom = 0;
};

/// Half the minimum distance between distinct atoms (infinite for one atom).
inline double snap_radius(const Matrix& atoms) {
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < atoms.rows(); ++i)
    for (Eigen::Index j = i + 1; j < atoms.rows(); ++j) best = std::min(best, (atoms.row(i) - atoms.row(j)).norm());
  return 0.5 * best;
}

/// Runs `paths_per_atom` paths from every start atom with simulate(starts) ->
/// endpoints and snaps endpoints to the nearest end atom.
template <class Simulate>
EmpiricalCoupling empirical_coupling(const Simulate& simulate, const Matrix& start_atoms, const Vector& start_weights,
                                     const Matrix& end_atoms, int paths_per_atom) {
  if (start_weights.size() != start_atoms.rows()) throw DataError("empirical_coupling: weight count mismatch");
  if (paths_per_atom < 1) throw ConfigError("empirical_coupling: need at least one path per atom");
  EmpiricalCoupling out;
  out.snap_radius = snap_radius(end_atoms);
  out.paths_per_atom = paths_per_atom;
  out.table = Matrix::Zero(start_atoms.rows(), end_atoms.rows());
  out.overflow = Vector::Zero(start_atoms.rows());
  for (Eigen::Index a = 0; a < start_atoms.rows(); ++a) {
    const Matrix starts = start_atoms.row(a).replicate(paths_per_atom, 1);
    const Matrix ends = simulate(starts);
    const double unit = start_weights(a) / paths_per_atom;
    for (Eigen::Index r = 0; r < ends.rows(); ++r) {
      Eigen::Index best = 0;
      const double d2 = (end_atoms.rowwise() - ends.row(r)).rowwise().squaredNorm().minCoeff(&best);
      if (std::sqrt(d2) <= out.snap_radius) out.table(a, best) += unit;
      else out.overflow(a) += unit;
    }
  }
  return out;
}

}  // namespace mmsb
