#pragma once

// Snapshot datasets: toy sequence generators, the tabular snapshot loader,
// pooled standardisation and CSV export.

#include "mmsb/core.hpp"

#include <numbers>
#include <optional>

namespace mmsb {

/// Geometry constants for the toy sequences.
namespace toy {
/// Translated two-component mixtures: marginal k has unit-variance components
/// at (+-kMixtureX, (-1)^k * kMixtureY).
inline constexpr double kMixtureX = 4.0;
inline constexpr double kMixtureY = 2.0;
/// Two moons (outer arc radius 1, inner arc shifted by (1, -0.5)).
inline constexpr double kMoonsNoise = 0.05;
/// Eight Gaussians on a circle; component covariance sqrt(0.1) * I.
inline constexpr double kEightRadius = 5.0;
inline constexpr double kEightVariance = 0.31622776601683794;  // sqrt(0.1)
/// 50-d alternating Gaussians N(+-0.1 * 1, I).
inline constexpr double kGaussianShift = 0.1;
inline constexpr int kGaussianDim = 50;
}  // namespace toy

struct Marginal {
  Matrix train;
  Matrix test;
};

/// Per-dimension affine standardisation (x - mean) / scale.
struct Standardizer {
  Vector mean;
  Vector scale;

  bool empty() const { return mean.size() == 0; }

  static Standardizer fit(const Matrix& pooled) {
    if (pooled.rows() < 2) throw DataError("standardisation needs at least two rows");
    Standardizer s;
    s.mean = pooled.colwise().mean().transpose();
    s.scale.resize(pooled.cols());
    for (Eigen::Index j = 0; j < pooled.cols(); ++j) {
      const double var = (pooled.col(j).array() - s.mean(j)).square().sum() /
                         static_cast<double>(pooled.rows() - 1);
      s.scale(j) = var > 0.0 ? std::sqrt(var) : 1.0;
    }
    return s;
  }

  Matrix apply(const Matrix& x) const {
    if (empty()) return x;
    return (x.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array();
  }
  Matrix invert(const Matrix& x) const {
    if (empty()) return x;
    return (x.array().rowwise() * scale.transpose().array()).matrix().rowwise() + mean.transpose();
  }
};

/// Unpaired samples at each grid time, with a held-out split.
struct MarginalDataset {
  std::string name;
  std::vector<double> times;
  std::vector<std::string> labels;
  std::vector<Marginal> marginals;
  Standardizer standardizer;

  int size() const { return static_cast<int>(marginals.size()); }
  int dim() const { return marginals.empty() ? 0 : static_cast<int>(marginals[0].train.cols()); }

  void validate() const {
    if (marginals.size() < 2) throw DataError("dataset needs at least two marginals");
    if (times.size() != marginals.size()) throw DataError("dataset times/marginals mismatch");
    const auto d = marginals[0].train.cols();
    for (std::size_t k = 0; k < marginals.size(); ++k) {
      const auto& m = marginals[k];
      if (m.train.rows() < 1) throw DataError("marginal " + std::to_string(k) + " has no train rows");
      if (m.train.cols() != d || (m.test.rows() > 0 && m.test.cols() != d))
        throw DataError("marginal " + std::to_string(k) + " has mismatched dimension");
    }
  }
};

namespace detail {

inline Matrix standard_normal(Rng& rng, int n, int d, double shift = 0.0) {
  Matrix x = rng.normal_matrix(n, d);
  x.array() += shift;
  return x;
}

inline Matrix translated_mixture(Rng& rng, int n, int k) {
  Matrix x(n, 2);
  const double y = (k % 2 == 0 ? 1.0 : -1.0) * toy::kMixtureY;
  for (int r = 0; r < n; ++r) {
    const double cx = rng.uniform() < 0.5 ? -toy::kMixtureX : toy::kMixtureX;
    x(r, 0) = cx + rng.normal();
    x(r, 1) = y + rng.normal();
  }
  return x;
}

inline Matrix moons(Rng& rng, int n) {
  Matrix x(n, 2);
  for (int r = 0; r < n; ++r) {
    const double theta = rng.uniform(0.0, std::numbers::pi);
    if (rng.uniform() < 0.5) {
      x(r, 0) = std::cos(theta);
      x(r, 1) = std::sin(theta);
    } else {
      x(r, 0) = 1.0 - std::cos(theta);
      x(r, 1) = 0.5 - std::sin(theta);
    }
    x(r, 0) += toy::kMoonsNoise * rng.normal();
    x(r, 1) += toy::kMoonsNoise * rng.normal();
  }
  return x;
}

inline Eigen::Vector2d eight_center(int c) {
  const double a = c * std::numbers::pi / 4.0;
  return {toy::kEightRadius * std::cos(a), toy::kEightRadius * std::sin(a)};
}

inline Matrix eight_gaussians(Rng& rng, int n) {
  Matrix x(n, 2);
  const double sd = std::sqrt(toy::kEightVariance);
  for (int r = 0; r < n; ++r) {
    const auto c = eight_center(static_cast<int>(rng.index(8)));
    x(r, 0) = c(0) + sd * rng.normal();
    x(r, 1) = c(1) + sd * rng.normal();
  }
  return x;
}

template <class Gen>
MarginalDataset build(std::string name, std::vector<double> times, int n_train, int n_test,
                      Gen&& gen) {
  if (n_train < 1 || n_test < 0) throw DataError("dataset sizes must be positive");
  MarginalDataset ds;
  ds.name = std::move(name);
  ds.times = std::move(times);
  for (std::size_t k = 0; k < ds.times.size(); ++k) {
    ds.labels.push_back(std::to_string(k));
    ds.marginals.push_back({gen(static_cast<int>(k), n_train), gen(static_cast<int>(k), n_test)});
  }
  return ds;
}

}  // namespace detail

/// Three translated two-component mixtures in 2-d at times 0, 1, 2. The exact
/// pairwise OT map moves each component vertically.
inline MarginalDataset gen_gaussian_mixture_sequence(int n_train, int n_test, std::uint64_t seed) {
  Rng rng(seed);
  return detail::build("mixture3", {0, 1, 2}, n_train, n_test,
                       [&](int k, int n) { return detail::translated_mixture(rng, n, k); });
}

/// N(0,I) -> Moons -> N(0,I) -> Moons at times 0..3 (or the first `marginals`).
inline MarginalDataset gen_moons_sequence(int n_train, int n_test, std::uint64_t seed,
                                          int marginals = 4) {
  Rng rng(seed);
  std::vector<double> times;
  for (int k = 0; k < marginals; ++k) times.push_back(k);
  return detail::build(marginals == 4 ? "moons4" : "moons" + std::to_string(marginals), times,
                       n_train, n_test, [&](int k, int n) {
                         return k % 2 == 0 ? detail::standard_normal(rng, n, 2)
                                           : detail::moons(rng, n);
                       });
}

/// N(0,I) -> 8Gaussians -> N(0,I) -> 8Gaussians at times 0..3.
inline MarginalDataset gen_8gaussians_sequence(int n_train, int n_test, std::uint64_t seed,
                                               int marginals = 4) {
  Rng rng(seed);
  std::vector<double> times;
  for (int k = 0; k < marginals; ++k) times.push_back(k);
  return detail::build(marginals == 4 ? "8gaussians4" : "8gaussians" + std::to_string(marginals),
                       times, n_train, n_test, [&](int k, int n) {
                         return k % 2 == 0 ? detail::standard_normal(rng, n, 2)
                                           : detail::eight_gaussians(rng, n);
                       });
}

/// N(-0.1*1, I), N(0.1*1, I), N(-0.1*1, I), N(0.1*1, I) in 50-d at times 0..3.
inline MarginalDataset gen_gaussian_50d(int n_train, int n_test, std::uint64_t seed,
                                        int dim = toy::kGaussianDim) {
  Rng rng(seed);
  return detail::build("gaussian50d", {0, 1, 2, 3}, n_train, n_test, [&](int k, int n) {
    const double shift = (k % 2 == 0 ? -1.0 : 1.0) * toy::kGaussianShift;
    return detail::standard_normal(rng, n, dim, shift);
  });
}

// ---------------------------------------------------------------------------
// Tabular snapshots

struct SnapshotTable {
  std::vector<std::string> labels;  // one per row
  Matrix features;
};

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r\"");
    const auto e = cell.find_last_not_of(" \t\r\"");
    out.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::optional<double> parse_number(const std::string& s) {
  if (s.empty()) return std::nullopt;
  std::size_t pos = 0;
  try {
    const double v = std::stod(s, &pos);
    if (pos != s.size()) return std::nullopt;
    return v;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

}  // namespace detail

inline SnapshotTable read_snapshot_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("snapshot table is empty");
  const auto header = detail::split_csv(line);
  if (header.size() < 2)
    throw DataError("snapshot table needs a timepoint column and at least one feature column");
  const std::size_t d = header.size() - 1;
  SnapshotTable tab;
  std::vector<double> values;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = detail::split_csv(line);
    if (cells.size() != header.size())
      throw DataError("snapshot table line " + std::to_string(lineno) + ": expected " +
                      std::to_string(header.size()) + " columns, got " +
                      std::to_string(cells.size()));
    if (cells[0].empty())
      throw DataError("snapshot table line " + std::to_string(lineno) + ": missing timepoint");
    tab.labels.push_back(cells[0]);
    for (std::size_t j = 1; j < cells.size(); ++j) {
      auto v = detail::parse_number(cells[j]);
      if (!v || !std::isfinite(*v))
        throw DataError("snapshot table line " + std::to_string(lineno) + ", column " +
                        std::to_string(j + 1) + ": non-numeric entry '" + cells[j] + "'");
      values.push_back(*v);
    }
  }
  const auto n = static_cast<Eigen::Index>(tab.labels.size());
  tab.features = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      values.data(), n, static_cast<Eigen::Index>(d));
  return tab;
}

/// Groups rows by timepoint (numeric order when every label is numeric,
/// lexicographic otherwise), withholds `n_test` random rows per marginal, and
/// standardises every split with mean/scale fitted on the pooled train rows.
inline MarginalDataset load_snapshot_table(const SnapshotTable& tab, int n_test,
                                           std::uint64_t seed, bool standardize = true,
                                           std::string name = "table") {
  if (n_test < 0) throw DataError("test count must be non-negative");
  std::vector<std::string> order;
  for (const auto& l : tab.labels)
    if (std::find(order.begin(), order.end(), l) == order.end()) order.push_back(l);
  if (order.size() < 2) throw DataError("snapshot table needs at least two timepoints");
  const bool numeric = std::all_of(order.begin(), order.end(),
                                   [](const std::string& s) { return detail::parse_number(s).has_value(); });
  if (numeric)
    std::sort(order.begin(), order.end(), [](const std::string& a, const std::string& b) {
      return *detail::parse_number(a) < *detail::parse_number(b);
    });
  else
    std::sort(order.begin(), order.end());

  MarginalDataset ds;
  ds.name = std::move(name);
  Rng rng(seed);
  for (std::size_t k = 0; k < order.size(); ++k) {
    std::vector<Eigen::Index> rows;
    for (std::size_t r = 0; r < tab.labels.size(); ++r)
      if (tab.labels[r] == order[k]) rows.push_back(static_cast<Eigen::Index>(r));
    if (static_cast<int>(rows.size()) <= n_test)
      throw DataError("timepoint '" + order[k] + "' has " + std::to_string(rows.size()) +
                      " rows, cannot withhold " + std::to_string(n_test));
    std::shuffle(rows.begin(), rows.end(), rng.engine());
    Marginal m;
    m.test.resize(n_test, tab.features.cols());
    m.train.resize(static_cast<Eigen::Index>(rows.size()) - n_test, tab.features.cols());
    // Train rows keep file order; the test rows are the first n_test of the shuffle.
    std::vector<Eigen::Index> train_rows(rows.begin() + n_test, rows.end());
    std::sort(train_rows.begin(), train_rows.end());
    for (int i = 0; i < n_test; ++i) m.test.row(i) = tab.features.row(rows[i]);
    for (std::size_t i = 0; i < train_rows.size(); ++i)
      m.train.row(static_cast<Eigen::Index>(i)) = tab.features.row(train_rows[i]);
    ds.labels.push_back(order[k]);
    ds.times.push_back(numeric ? *detail::parse_number(order[k]) : static_cast<double>(k));
    ds.marginals.push_back(std::move(m));
  }
  if (standardize) {
    Eigen::Index total = 0;
    for (const auto& m : ds.marginals) total += m.train.rows();
    Matrix pooled(total, tab.features.cols());
    Eigen::Index at = 0;
    for (const auto& m : ds.marginals) {
      pooled.middleRows(at, m.train.rows()) = m.train;
      at += m.train.rows();
    }
    ds.standardizer = Standardizer::fit(pooled);
    for (auto& m : ds.marginals) {
      m.train = ds.standardizer.apply(m.train);
      if (m.test.rows() > 0) m.test = ds.standardizer.apply(m.test);
    }
  }
  ds.validate();
  return ds;
}

inline MarginalDataset load_snapshot_table(const std::string& path, int n_test, std::uint64_t seed,
                                           bool standardize = true) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open snapshot table " + path);
  return load_snapshot_table(read_snapshot_csv(f), n_test, seed, standardize, path);
}

/// Writes (time, x_1..x_d) rows.
inline void write_samples_csv(std::ostream& out, const std::vector<double>& times,
                              const std::vector<Matrix>& samples) {
  if (samples.empty()) return;
  out << "time";
  for (Eigen::Index j = 0; j < samples[0].cols(); ++j) out << ",x_" << (j + 1);
  out << "\n";
  out.precision(17);
  for (std::size_t k = 0; k < samples.size(); ++k)
    for (Eigen::Index r = 0; r < samples[k].rows(); ++r) {
      out << times[k];
      for (Eigen::Index j = 0; j < samples[k].cols(); ++j) out << ',' << samples[k](r, j);
      out << "\n";
    }
}

/// Synthetic branching snapshot table standing in for a PCA-reduced
/// single-cell time course: a three-lineage process in a 3-d latent space,
/// embedded in `dim` dimensions with a decaying noise spectrum.
inline SnapshotTable gen_branching_table(int rows_per_time, int timepoints, int dim,
                                         std::uint64_t seed) {
  if (dim < 3 || timepoints < 2 || rows_per_time < 1) throw DataError("invalid surrogate shape");
  Rng rng(seed);
  // Random orthonormal embedding of the latent space.
  Matrix basis = rng.normal_matrix(dim, 3);
  Eigen::HouseholderQR<Matrix> qr(basis);
  Matrix embed = qr.householderQ() * Matrix::Identity(dim, 3);
  const Eigen::Vector3d branch[3] = {{1.0, 0.0, 0.0}, {-0.5, 0.866, 0.0}, {-0.5, -0.866, 0.3}};
  SnapshotTable tab;
  tab.features.resize(static_cast<Eigen::Index>(rows_per_time) * timepoints, dim);
  Eigen::Index row = 0;
  for (int k = 0; k < timepoints; ++k) {
    const double progress = static_cast<double>(k) / (timepoints - 1);
    for (int r = 0; r < rows_per_time; ++r, ++row) {
      const int b = static_cast<int>(rng.index(3));
      Eigen::Vector3d z = 2.5 * progress * branch[b];
      z(2) += 0.8 * std::sin(std::numbers::pi * progress);
      for (int j = 0; j < 3; ++j) z(j) += (0.25 + 0.3 * progress) * rng.normal();
      Vector x = embed * z;
      for (int j = 0; j < dim; ++j) x(j) += 0.35 / std::sqrt(1.0 + j) * rng.normal();
      tab.features.row(row) = x.transpose();
      tab.labels.push_back(std::to_string(k));
    }
  }
  return tab;
}

inline void write_snapshot_csv(std::ostream& out, const SnapshotTable& tab) {
  out << "timepoint";
  for (Eigen::Index j = 0; j < tab.features.cols(); ++j) out << ",pc" << (j + 1);
  out << "\n";
  out.precision(17);
  for (Eigen::Index r = 0; r < tab.features.rows(); ++r) {
    out << tab.labels[static_cast<std::size_t>(r)];
    for (Eigen::Index j = 0; j < tab.features.cols(); ++j) out << ',' << tab.features(r, j);
    out << "\n";
  }
}

}  // namespace mmsb
