#pragma once

// Batched Euler-Maruyama over heterogeneous intervals with per-row step masks,
// and the probability-flow ODE across the whole horizon.

#include "mmsb/core.hpp"

#include <concepts>
#include <ostream>
#include <span>

namespace mmsb {

/// Anything evaluating a drift on n rows: f(t (n), x (n x d)) -> n x d.
template <class F>
concept DriftField = requires(const F& f, const Vector& t, const Matrix& x) {
  { f(t, x) } -> std::convertible_to<Matrix>;
};

using MaskMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

/// Paths on a shared step axis. states[k] holds every row after k steps;
/// mask(r, k) = 1 when step k (state k -> k + 1) moved row r. Frozen rows
/// carry their terminal state forward unchanged.
struct TrajectoryBatch {
  std::vector<Matrix> states;  // steps() + 1 entries, each n x d
  Matrix times;                // n x (steps() + 1)
  MaskMatrix mask;             // n x steps()
  std::vector<int> interval;   // -1 for rows spanning several intervals
  Direction direction = Direction::forward;

  int rows() const { return states.empty() ? 0 : static_cast<int>(states.front().rows()); }
  int dim() const { return states.empty() ? 0 : static_cast<int>(states.front().cols()); }
  int steps() const { return static_cast<int>(mask.cols()); }
  const Matrix& initial() const { return states.front(); }
  const Matrix& terminal() const { return states.back(); }
  int active_steps(int r) const {
    int c = 0;
    for (int k = 0; k < steps(); ++k) c += mask(r, k);
    return c;
  }
};

namespace detail {

inline Matrix gather_rows(const Matrix& x, const std::vector<Eigen::Index>& idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(idx[i]);
  return out;
}

inline void check_finite(const Matrix& x, const char* who, int step) {
  if (!x.allFinite())
    throw NumericError(std::string(who) + ": state diverged at step " + std::to_string(step));
}

/// Time of step k on interval i; the last step lands exactly on the endpoint.
inline double step_time(const TimeGrid& grid, int i, int k, Direction dir) {
  const int n = grid.steps(i);
  if (dir == Direction::forward)
    return k >= n ? grid.time(i + 1) : grid.time(i) + k * grid.dt(i);
  return k >= n ? grid.time(i) : grid.time(i + 1) - k * grid.dt(i);
}

template <DriftField F>
TrajectoryBatch run_sde(const Matrix& x_start, const std::vector<int>& intervals, const F& drift,
                        Direction dir, const TimeGrid& grid, const ReferenceConfig& ref, Rng& rng,
                        bool record) {
  const Eigen::Index n = x_start.rows();
  if (static_cast<Eigen::Index>(intervals.size()) != n)
    throw DataError("sde_simulate: one interval index per row required");
  if (n == 0 || x_start.cols() == 0) throw DataError("sde_simulate: empty start batch");
  check_finite(x_start, "sde_simulate", 0);
  int max_n = 0;
  for (int i : intervals) {
    if (i < 0 || i >= grid.intervals()) throw RangeError("sde_simulate: interval index out of range");
    max_n = std::max(max_n, grid.steps(i));
  }

  TrajectoryBatch out;
  out.direction = dir;
  out.interval = intervals;
  out.mask = MaskMatrix::Zero(n, max_n);
  out.times.resize(n, record ? max_n + 1 : 2);
  Matrix z = x_start;
  if (record) out.states.reserve(static_cast<std::size_t>(max_n) + 1);
  out.states.push_back(z);
  for (Eigen::Index r = 0; r < n; ++r) out.times(r, 0) = step_time(grid, intervals[r], 0, dir);

  std::vector<Eigen::Index> active;
  for (int k = 0; k < max_n; ++k) {
    active.clear();
    for (Eigen::Index r = 0; r < n; ++r)
      if (k < grid.steps(intervals[r])) active.push_back(r);
    // Noise is drawn for every row so the stream does not depend on the mask.
    const Matrix xi = rng.normal_matrix(n, x_start.cols());
    if (!active.empty()) {
      Vector t(static_cast<Eigen::Index>(active.size()));
      for (std::size_t a = 0; a < active.size(); ++a)
        t(static_cast<Eigen::Index>(a)) = step_time(grid, intervals[active[a]], k, dir);
      const Matrix v = drift(t, gather_rows(z, active));
      for (std::size_t a = 0; a < active.size(); ++a) {
        const Eigen::Index r = active[a];
        const double dt = grid.dt(intervals[r]);
        z.row(r) += v.row(static_cast<Eigen::Index>(a)) * dt + ref.sigma * std::sqrt(dt) * xi.row(r);
        out.mask(r, k) = 1;
      }
      check_finite(z, "sde_simulate", k + 1);
    }
    if (record) {
      out.states.push_back(z);
      for (Eigen::Index r = 0; r < n; ++r)
        out.times(r, k + 1) = step_time(grid, intervals[r], std::min(k + 1, grid.steps(intervals[r])), dir);
    }
  }
  if (!record) {
    out.states.push_back(z);
    for (Eigen::Index r = 0; r < n; ++r)
      out.times(r, 1) = step_time(grid, intervals[r], grid.steps(intervals[r]), dir);
  }
  return out;
}

}  // namespace detail

/// Euler-Maruyama from each row's interval start (forward) or end (backward):
///   z <- z + v(t_k, z) dt_i + sigma sqrt(dt_i) xi.
/// Rows stop after their interval's N_i steps.
template <DriftField F>
TrajectoryBatch sde_simulate(const Matrix& x_start, const std::vector<int>& intervals, const F& drift,
                             Direction dir, const TimeGrid& grid, const ReferenceConfig& ref, Rng& rng) {
  return detail::run_sde(x_start, intervals, drift, dir, grid, ref, rng, true);
}

/// Same dynamics as sde_simulate, keeping only the terminal states.
template <DriftField F>
Matrix sde_endpoints(const Matrix& x_start, const std::vector<int>& intervals, const F& drift,
                     Direction dir, const TimeGrid& grid, const ReferenceConfig& ref, Rng& rng) {
  return detail::run_sde(x_start, intervals, drift, dir, grid, ref, rng, false).terminal();
}

/// Forward-time probability-flow drift 1/2 (v_theta - v_phi). The backward
/// network points toward decreasing time, hence the sign.
template <DriftField Fw, DriftField Bw>
struct FlowDrift {
  const Fw& fwd;
  const Bw& bwd;
  Matrix operator()(const Vector& t, const Matrix& x) const { return 0.5 * (fwd(t, x) - bwd(t, x)); }
};

template <DriftField Fw, DriftField Bw>
FlowDrift(const Fw&, const Bw&) -> FlowDrift<Fw, Bw>;

/// Deterministic Euler integration of the probability-flow ODE from grid time
/// `start_index` to the end of the horizon in direction `dir`. For forward runs
/// `t_stop` > t_K continues past the last grid time using the last interval's
/// step; the final step is shortened to land on t_stop.
template <DriftField Fw, DriftField Bw>
TrajectoryBatch ode_simulate(const Matrix& x_start, const Fw& v_theta, const Bw& v_phi,
                             const TimeGrid& grid, Direction dir, int start_index = -1,
                             double t_stop = std::numeric_limits<double>::quiet_NaN()) {
  if (x_start.rows() == 0 || x_start.cols() == 0) throw DataError("ode_simulate: empty start batch");
  detail::check_finite(x_start, "ode_simulate", 0);
  const int K = grid.intervals();
  if (start_index < 0) start_index = dir == Direction::forward ? 0 : K;
  if (start_index > K) throw RangeError("ode_simulate: start index out of range");
  const FlowDrift flow{v_theta, v_phi};

  // Time knots: grid steps across each traversed interval, then extrapolation.
  std::vector<double> knots;
  if (dir == Direction::forward) {
    knots.push_back(grid.time(start_index));
    for (int i = start_index; i < K; ++i)
      for (int k = 1; k <= grid.steps(i); ++k) knots.push_back(detail::step_time(grid, i, k, dir));
    if (!std::isnan(t_stop)) {
      if (t_stop < grid.end()) throw RangeError("ode_simulate: stop time before horizon end");
      const double h = grid.dt(K - 1);
      double t = grid.end();
      while (t_stop - t > 1e-12 * std::max(1.0, std::abs(t_stop))) {
        t = std::min(t + h, t_stop);
        if (t_stop - t < 1e-9 * h) t = t_stop;
        knots.push_back(t);
      }
    }
  } else {
    knots.push_back(grid.time(start_index));
    for (int i = start_index - 1; i >= 0; --i)
      for (int k = 1; k <= grid.steps(i); ++k) knots.push_back(detail::step_time(grid, i, k, dir));
  }

  const Eigen::Index n = x_start.rows();
  const int steps = static_cast<int>(knots.size()) - 1;
  TrajectoryBatch out;
  out.direction = dir;
  out.interval.assign(static_cast<std::size_t>(n), -1);
  out.mask = MaskMatrix::Ones(n, steps);
  out.times.resize(n, steps + 1);
  out.states.reserve(static_cast<std::size_t>(steps) + 1);
  out.states.push_back(x_start);
  Matrix z = x_start;
  for (int k = 0; k < steps; ++k) {
    const Vector t = Vector::Constant(n, knots[static_cast<std::size_t>(k)]);
    const double h = knots[static_cast<std::size_t>(k) + 1] - knots[static_cast<std::size_t>(k)];
    z += flow(t, z) * h;  // h < 0 when running backward
    detail::check_finite(z, "ode_simulate", k + 1);
    out.states.push_back(z);
  }
  for (int k = 0; k <= steps; ++k) out.times.col(k).setConstant(knots[static_cast<std::size_t>(k)]);
  return out;
}

/// Monte Carlo path energy: sum_rows sum_active_steps ||v(t_k, x_k)||^2 |dt_k| / n
/// (left Riemann sum along the stored trajectory).
template <DriftField F>
double path_energy(const TrajectoryBatch& traj, const F& drift) {
  const Eigen::Index n = traj.rows();
  if (n == 0) return 0.0;
  double total = 0.0;
  for (int k = 0; k < traj.steps(); ++k) {
    std::vector<Eigen::Index> active;
    for (Eigen::Index r = 0; r < n; ++r)
      if (traj.mask(r, k)) active.push_back(r);
    if (active.empty()) continue;
    Vector t(static_cast<Eigen::Index>(active.size()));
    Vector h(static_cast<Eigen::Index>(active.size()));
    for (std::size_t a = 0; a < active.size(); ++a) {
      t(static_cast<Eigen::Index>(a)) = traj.times(active[a], k);
      h(static_cast<Eigen::Index>(a)) = std::abs(traj.times(active[a], k + 1) - traj.times(active[a], k));
    }
    const Matrix v = drift(t, detail::gather_rows(traj.states[static_cast<std::size_t>(k)], active));
    total += (v.rowwise().squaredNorm().array() * h.array()).sum();
  }
  return total / static_cast<double>(n);
}

/// State at time t along a trajectory with shared per-step times, linearly
/// interpolated between the two bracketing steps.
inline Matrix state_at(const TrajectoryBatch& traj, double t) {
  const int steps = traj.steps();
  const auto& knots = traj.times.row(0);
  const double lo = std::min(knots(0), knots(steps));
  const double hi = std::max(knots(0), knots(steps));
  if (t < lo - 1e-12 || t > hi + 1e-12) throw RangeError("state_at: time outside trajectory");
  for (int k = 0; k < steps; ++k) {
    const double a = knots(k), b = knots(k + 1);
    if ((t - a) * (t - b) <= 0.0) {
      if (t == a) return traj.states[static_cast<std::size_t>(k)];
      if (t == b) return traj.states[static_cast<std::size_t>(k) + 1];
      const double w = (t - a) / (b - a);
      return (1.0 - w) * traj.states[static_cast<std::size_t>(k)] + w * traj.states[static_cast<std::size_t>(k) + 1];
    }
  }
  return t == knots(0) ? traj.initial() : traj.terminal();
}

/// Joins per-interval trajectories whose rows continue one another.
inline TrajectoryBatch concat_trajectories(const std::vector<TrajectoryBatch>& parts) {
  if (parts.empty()) throw DataError("concat_trajectories: nothing to join");
  TrajectoryBatch out;
  out.direction = parts.front().direction;
  const Eigen::Index n = parts.front().rows();
  int steps = 0;
  for (const auto& p : parts) {
    if (p.rows() != n) throw DataError("concat_trajectories: row count mismatch");
    steps += p.steps();
  }
  out.interval.assign(static_cast<std::size_t>(n), -1);
  out.mask.resize(n, steps);
  out.times.resize(n, steps + 1);
  out.states.push_back(parts.front().initial());
  out.times.col(0) = parts.front().times.col(0);
  int at = 0;
  for (const auto& p : parts) {
    for (int k = 0; k < p.steps(); ++k) {
      out.states.push_back(p.states[static_cast<std::size_t>(k) + 1]);
      out.mask.col(at + k) = p.mask.col(k);
      out.times.col(at + k + 1) = p.times.col(k + 1);
    }
    at += p.steps();
  }
  return out;
}

/// Columns: row_id, step, t, x_1..x_d, mask (mask marks states reached by an
/// active step; the initial state counts as active).
inline void write_trajectory_csv(std::ostream& out, const TrajectoryBatch& traj) {
  out << "row_id,step,t";
  for (int j = 0; j < traj.dim(); ++j) out << ",x_" << (j + 1);
  out << ",mask\n";
  out.precision(17);
  for (int r = 0; r < traj.rows(); ++r)
    for (int k = 0; k <= traj.steps(); ++k) {
      out << r << ',' << k << ',' << traj.times(r, k);
      for (int j = 0; j < traj.dim(); ++j) out << ',' << traj.states[static_cast<std::size_t>(k)](r, j);
      out << ',' << (k == 0 ? 1 : static_cast<int>(traj.mask(r, k - 1))) << '\n';
    }
}

}  // namespace mmsb
