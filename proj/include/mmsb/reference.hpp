#pragma once

// Brownian reference: bridge sampling between endpoint pairs, bridge-matching
// drift targets and the analytic bridge law.

#include "mmsb/core.hpp"

namespace mmsb {

/// Endpoint pairs, one per row, each on its own interval [t_init, t_final].
struct BridgePairBatch {
  Matrix x_init;
  Matrix x_final;
  Vector t_init;
  Vector t_final;

  int rows() const { return static_cast<int>(x_init.rows()); }

  void validate() const {
    const auto n = x_init.rows();
    if (x_final.rows() != n || x_final.cols() != x_init.cols() || t_init.size() != n ||
        t_final.size() != n)
      throw DataError("bridge pair batch: shape mismatch");
    for (Eigen::Index r = 0; r < n; ++r)
      if (!(t_final(r) > t_init(r)))
        throw NumericError("bridge pair batch: degenerate interval at row " + std::to_string(r));
  }
};

/// One draw of the Brownian bridge at per-row times t:
///   (1 - s) x_init + s x_final + sqrt(sigma^2 (t_final - t_init) s (1 - s)) z,
/// with s = (t - t_init) / (t_final - t_init). Endpoints are reproduced exactly.
inline Matrix interp(const BridgePairBatch& pairs, const Vector& t, const Matrix& z,
                     const ReferenceConfig& ref) {
  pairs.validate();
  const auto n = pairs.x_init.rows();
  if (t.size() != n || z.rows() != n || z.cols() != pairs.x_init.cols())
    throw DataError("interp: shape mismatch");
  Matrix out(n, pairs.x_init.cols());
  for (Eigen::Index r = 0; r < n; ++r) {
    const double len = pairs.t_final(r) - pairs.t_init(r);
    if (!(t(r) >= pairs.t_init(r) && t(r) <= pairs.t_final(r)))
      throw RangeError("interp: time " + std::to_string(t(r)) + " outside its interval");
    const double s = (t(r) - pairs.t_init(r)) / len;
    const double scale = std::sqrt(ref.variance() * len * s * (1.0 - s));
    out.row(r) = (1.0 - s) * pairs.x_init.row(r) + s * pairs.x_final.row(r) + scale * z.row(r);
  }
  return out;
}

/// Forward bridge-matching target (x_final - x_t) / (t_final - t).
inline Matrix forward_target(const Matrix& x_t, const Matrix& x_final, const Vector& t,
                             const Vector& t_final) {
  if (x_t.rows() != x_final.rows() || x_t.cols() != x_final.cols() || t.size() != x_t.rows() ||
      t_final.size() != x_t.rows())
    throw DataError("forward_target: shape mismatch");
  Matrix out(x_t.rows(), x_t.cols());
  for (Eigen::Index r = 0; r < x_t.rows(); ++r) {
    const double gap = t_final(r) - t(r);
    if (!(gap > 0.0))
      throw NumericError("forward_target: singular at row " + std::to_string(r) +
                         " (t >= t_final)");
    out.row(r) = (x_final.row(r) - x_t.row(r)) / gap;
  }
  return out;
}

/// Backward bridge-matching target (x_init - x_t) / (t - t_init).
inline Matrix backward_target(const Matrix& x_t, const Matrix& x_init, const Vector& t,
                              const Vector& t_init) {
  if (x_t.rows() != x_init.rows() || x_t.cols() != x_init.cols() || t.size() != x_t.rows() ||
      t_init.size() != x_t.rows())
    throw DataError("backward_target: shape mismatch");
  Matrix out(x_t.rows(), x_t.cols());
  for (Eigen::Index r = 0; r < x_t.rows(); ++r) {
    const double gap = t(r) - t_init(r);
    if (!(gap > 0.0))
      throw NumericError("backward_target: singular at row " + std::to_string(r) +
                         " (t <= t_init)");
    out.row(r) = (x_init.row(r) - x_t.row(r)) / gap;
  }
  return out;
}

struct BridgeMoments {
  Vector mean;
  double variance;  // per coordinate
};

/// Law of the Brownian bridge pinned at x0 (time t_init) and x1 (time t_final).
inline BridgeMoments bridge_moments(const Vector& x0, const Vector& x1, double t, double t_init,
                                    double t_final, const ReferenceConfig& ref) {
  const double len = t_final - t_init;
  if (!(len > 0.0)) throw NumericError("bridge_moments: degenerate interval");
  if (!(t >= t_init && t <= t_final)) throw RangeError("bridge_moments: time outside interval");
  if (x0.size() != x1.size()) throw DataError("bridge_moments: dimension mismatch");
  const double s = (t - t_init) / len;
  return {(1.0 - s) * x0 + s * x1, ref.variance() * len * s * (1.0 - s)};
}

/// Distance from the interval ends below which loss times are never drawn.
inline constexpr double kSingularityGuard = 1e-3;

/// Uniform time in [t_init, t_final], clamped away from both ends by
/// kSingularityGuard times the interval length.
inline double sample_loss_time(Rng& rng, double t_init, double t_final) {
  const double len = t_final - t_init;
  const double t = rng.uniform(t_init, t_final);
  return std::clamp(t, t_init + kSingularityGuard * len, t_final - kSingularityGuard * len);
}

}  // namespace mmsb
