#pragma once

// Model evaluation on held-out marginals and the text layouts used by the
// CLI reports.

#include "mmsb/imff.hpp"
#include "mmsb/metrics.hpp"

#include <iomanip>

namespace mmsb {

struct EvalOptions {
  Sampler sampler = Sampler::sde;
  std::uint64_t seed = 0;
  bool with_w2 = true;
  /// Cap on start rows (0 = every test row of the first marginal).
  int max_rows = 0;
};

struct ModelEvaluation {
  std::string dataset;
  Sampler sampler = Sampler::sde;
  std::vector<double> target_times;  // t_1 .. t_K
  MetricReport metrics;              // per target time
  double path_energy = 0.0;          // along the probability-flow ODE
  int rows = 0;
};

/// Pushes the first marginal's test rows forward through the model and
/// compares every later grid time with its test split. Path energy always
/// uses the ODE flow from the same start rows.
inline ModelEvaluation evaluate_model(const BridgeModel& model, const MarginalDataset& data, const EvalOptions& opt = {}) {
  if (data.size() != model.grid.marginals()) throw DataError("dataset and model grids have different marginal counts");
  for (int k = 0; k < data.size(); ++k) {
    if (data.marginals[static_cast<std::size_t>(k)].test.rows() < 2)
      throw DataError("marginal " + std::to_string(k) + " needs at least two test rows");
    if (std::abs(data.times[static_cast<std::size_t>(k)] - model.grid.time(k)) > 1e-9)
      throw DataError("dataset times do not match the model grid");
  }
  Matrix start = data.marginals[0].test;
  if (opt.max_rows > 0 && start.rows() > opt.max_rows) start = start.topRows(opt.max_rows).eval();
  Rng rng = Rng::for_worker(opt.seed, 31);
  const auto traj = generate(model, SampleBatch{start, 0, {}}, Direction::forward, opt.sampler, rng);
  const auto snaps = grid_snapshots(traj, model.grid);
  ModelEvaluation ev;
  ev.dataset = data.name;
  ev.sampler = opt.sampler;
  ev.rows = static_cast<int>(start.rows());
  std::vector<Matrix> gen, ref;
  for (int k = 1; k < data.size(); ++k) {
    ev.target_times.push_back(model.grid.time(k));
    gen.push_back(snaps[static_cast<std::size_t>(k)]);
    ref.push_back(data.marginals[static_cast<std::size_t>(k)].test);
  }
  ev.metrics = evaluate_marginals(ev.target_times, gen, ref, opt.with_w2, opt.seed);
  const auto ode = opt.sampler == Sampler::ode ? traj : ode_simulate(start, model.fwd, model.bwd, model.grid, Direction::forward);
  ev.path_energy = path_energy(ode, FlowDrift{model.fwd, model.bwd});
  return ev;
}

/// Per-grid-time SWD of SDE generations against the test splits, including
/// the start time (zero by construction).
inline std::vector<double> marginal_swd(const BridgeModel& model, const MarginalDataset& data, std::uint64_t seed,
                                        int max_rows = 0) {
  Matrix start = data.marginals[0].test;
  if (max_rows > 0 && start.rows() > max_rows) start = start.topRows(max_rows).eval();
  Rng rng = Rng::for_worker(seed, 37);
  const auto snaps = grid_snapshots(generate(model, SampleBatch{start, 0, {}}, Direction::forward, Sampler::sde, rng), model.grid);
  std::vector<double> out;
  for (int k = 0; k < data.size(); ++k)
    out.push_back(sliced_w(snaps[static_cast<std::size_t>(k)], data.marginals[static_cast<std::size_t>(k)].test,
                           kDefaultProjections, seed));
  return out;
}

namespace detail {

inline std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

}  // namespace detail

/// Full text report: per-time table, averages, and the two-metric layout
/// with t_1..t_K rows.
inline std::string format_report(const ModelEvaluation& ev, const std::string& model_name) {
  std::ostringstream os;
  os << "dataset: " << ev.dataset << "\n"
     << "model: " << model_name << "\n"
     << "sampler: " << (ev.sampler == Sampler::sde ? "sde" : "ode") << "\n"
     << "rows: " << ev.rows << "\n\n";
  const bool w2 = !ev.metrics.w2.empty();
  os << "time,W2,MMD,SWD,MMD_bandwidth\n";
  for (std::size_t k = 0; k < ev.target_times.size(); ++k) {
    os << ev.target_times[k] << ',' << (w2 ? detail::fixed(ev.metrics.w2[k]) : "--") << ','
       << detail::fixed(ev.metrics.mmd[k]) << ',' << detail::fixed(ev.metrics.swd[k]) << ','
       << detail::fixed(ev.metrics.mmd_bandwidth[k]) << "\n";
  }
  os << "Average," << (w2 ? detail::fixed(ev.metrics.w2_avg) : "--") << ',' << detail::fixed(ev.metrics.mmd_avg) << ','
     << detail::fixed(ev.metrics.swd_avg) << ",\n\n";
  os << "Setting,W2,Path Energy\n"
     << ev.dataset << " (" << (ev.target_times.size() == 1 ? "single bridge" : "multi-bridge") << "),"
     << (w2 ? detail::fixed(ev.metrics.w2_avg, 3) : "--") << ',' << detail::fixed(ev.path_energy, 3) << "\n\n";
  os << "Results on test set of embryoid body (layout; dataset: " << ev.dataset << ")\n"
     << "Time,MMD,SWD\n";
  for (std::size_t k = 0; k < ev.target_times.size(); ++k)
    os << "t_" << (k + 1) << ',' << detail::fixed(ev.metrics.mmd[k], 3) << ',' << detail::fixed(ev.metrics.swd[k], 3) << "\n";
  os << "Average," << detail::fixed(ev.metrics.mmd_avg, 3) << ',' << detail::fixed(ev.metrics.swd_avg, 3) << "\n";
  return os.str();
}

/// One row group of the static-coupling table.
struct BenchSeries {
  std::vector<double> w2;
  std::vector<double> energy;
};

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  if (v.size() < 2) return {m, std::numeric_limits<double>::quiet_NaN()};
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size() - 1))};
}

inline std::string format_mean_std(const std::vector<double>& v) {
  const auto [m, s] = mean_std(v);
  return std::isnan(s) ? detail::fixed(m, 3) : detail::fixed(m, 3) + " +- " + detail::fixed(s, 3);
}

/// Six-row table: single bridge, tripled single-bridge energy, multi-bridge.
inline std::string format_table1(const std::vector<std::pair<std::string, std::pair<BenchSeries, BenchSeries>>>& groups) {
  std::ostringstream os;
  os << "Setting,W2,Path Energy,seeds\n";
  for (const auto& [label, runs] : groups) {
    const auto& [single, multi] = runs;
    os << label << " (single bridge)," << format_mean_std(single.w2) << ',' << format_mean_std(single.energy) << ','
       << single.w2.size() << "\n";
    os << label << " x3,--," << detail::fixed(3.0 * mean_std(single.energy).first, 3) << ',' << single.w2.size() << "\n";
    os << label << " (multi-bridge)," << format_mean_std(multi.w2) << ',' << format_mean_std(multi.energy) << ','
       << multi.w2.size() << "\n";
  }
  return os.str();
}

}  // namespace mmsb
