#pragma once

// Training engine: warmup on the independent coupling, then alternating
// backward/forward bridge-matching phases on simulated couplings.

#include "mmsb/core.hpp"
#include "mmsb/datasets.hpp"
#include "mmsb/integrate.hpp"
#include "mmsb/net.hpp"
#include "mmsb/reference.hpp"

#include <filesystem>
#include <fstream>
#include <functional>

namespace mmsb {

struct PhaseRecord {
  int outer = 0;  // 0 for warmup
  Direction direction = Direction::forward;
  std::vector<double> losses;

  double mean_loss() const {
    if (losses.empty()) return 0.0;
    double s = 0.0;
    for (double l : losses) s += l;
    return s / static_cast<double>(losses.size());
  }
};

struct TrainingHistory {
  std::vector<PhaseRecord> phases;
  int completed_outer = 0;
};

struct BridgeModel {
  DriftNetwork fwd;
  DriftNetwork bwd;
  TimeGrid grid;
  ReferenceConfig ref;
  AdamState opt_fwd;
  AdamState opt_bwd;
  TrainingHistory history;

  BridgeModel(const TimeGrid& g, const ReferenceConfig& r, DriftNetwork f, DriftNetwork b)
      : fwd(std::move(f)), bwd(std::move(b)), grid(g), ref(r) {
    if (fwd.dim() != bwd.dim()) throw ConfigError("forward and backward networks must share a dimension");
  }

  /// Fresh model: both nets use `hidden`/`embed_dim`, time normalised to the grid.
  static BridgeModel create(const TimeGrid& g, const ReferenceConfig& r, int dim, std::vector<int> hidden,
                            std::uint64_t seed, int embed_dim = 64) {
    NetworkShape shape;
    shape.dim = dim;
    shape.hidden = std::move(hidden);
    shape.embed_dim = embed_dim;
    shape.t_origin = g.start();
    shape.t_scale = g.horizon();
    Rng rf = Rng::for_worker(seed, 101);
    Rng rb = Rng::for_worker(seed, 202);
    return BridgeModel(g, r, DriftNetwork(shape, rf), DriftNetwork(shape, rb));
  }

  int dim() const { return fwd.dim(); }
  DriftNetwork& net(Direction d) { return d == Direction::forward ? fwd : bwd; }
  AdamState& optimizer(Direction d) { return d == Direction::forward ? opt_fwd : opt_bwd; }
};

// ---------------------------------------------------------------------------
// Batches

/// Endpoint pairs stacked bridge by bridge, b rows each, plus each row's interval.
struct IntervalPairs {
  BridgePairBatch pairs;
  std::vector<int> intervals;
};

namespace detail {

inline void check_dataset(const MarginalDataset& data, const TimeGrid& grid) {
  if (static_cast<int>(data.marginals.size()) != grid.marginals())
    throw DataError("dataset has " + std::to_string(data.marginals.size()) + " marginals, grid has " +
                    std::to_string(grid.marginals()));
  for (std::size_t i = 0; i < data.marginals.size(); ++i)
    if (data.marginals[i].train.rows() == 0) throw DataError("marginal " + std::to_string(i) + " is empty");
}

}  // namespace detail

/// b independent draws from pi_{t_i} x pi_{t_{i+1}} for every bridge i.
inline IntervalPairs sample_independent_pairs(const MarginalDataset& data, const TimeGrid& grid, int b, Rng& rng) {
  detail::check_dataset(data, grid);
  const int K = grid.intervals();
  const Eigen::Index n = static_cast<Eigen::Index>(K) * b;
  const Eigen::Index d = data.marginals[0].train.cols();
  IntervalPairs out;
  out.pairs.x_init.resize(n, d);
  out.pairs.x_final.resize(n, d);
  out.pairs.t_init.resize(n);
  out.pairs.t_final.resize(n);
  out.intervals.resize(static_cast<std::size_t>(n));
  Eigen::Index r = 0;
  for (int i = 0; i < K; ++i) {
    const Matrix& a = data.marginals[static_cast<std::size_t>(i)].train;
    const Matrix& c = data.marginals[static_cast<std::size_t>(i) + 1].train;
    for (int k = 0; k < b; ++k, ++r) {
      out.pairs.x_init.row(r) = a.row(static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(a.rows()))));
      out.pairs.x_final.row(r) = c.row(static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(c.rows()))));
      out.pairs.t_init(r) = grid.time(i);
      out.pairs.t_final(r) = grid.time(i + 1);
      out.intervals[static_cast<std::size_t>(r)] = i;
    }
  }
  return out;
}

/// Loss times and bridge noise for one regression batch.
struct LossDraw {
  Vector t;
  Matrix z;
};

inline LossDraw sample_loss_draw(const IntervalPairs& p, Rng& rng) {
  LossDraw d;
  d.t.resize(p.pairs.rows());
  for (int r = 0; r < p.pairs.rows(); ++r) d.t(r) = sample_loss_time(rng, p.pairs.t_init(r), p.pairs.t_final(r));
  d.z = rng.normal_matrix(p.pairs.rows(), p.pairs.x_init.cols());
  return d;
}

/// One bridge-matching update of the network for `dir`: forward regresses on
/// (x_final - X_t)/(t_final - t), backward on (x_init - X_t)/(t - t_init).
inline double bridge_matching_step(BridgeModel& model, Direction dir, const IntervalPairs& p, const LossDraw& draw) {
  const Matrix xt = interp(p.pairs, draw.t, draw.z, model.ref);
  const Matrix target = dir == Direction::forward ? forward_target(xt, p.pairs.x_final, draw.t, p.pairs.t_final)
                                                  : backward_target(xt, p.pairs.x_init, draw.t, p.pairs.t_init);
  DriftNetwork& net = model.net(dir);
  Vector grad;
  const double loss = net.loss_and_grad(draw.t, xt, target, grad);
  if (!std::isfinite(loss)) throw NumericError("training loss is not finite");
  model.optimizer(dir).update(net.parameters(), grad);
  return loss;
}

// ---------------------------------------------------------------------------
// Phases

inline void prepare_optimizers(BridgeModel& model, double learning_rate) {
  for (Direction d : {Direction::forward, Direction::backward}) {
    AdamState& opt = model.optimizer(d);
    if (opt.m.size() != model.net(d).parameters().size())
      opt = AdamState(model.net(d).parameters().size(), learning_rate);
    opt.learning_rate = learning_rate;
  }
}

/// Warmup: for each direction, N_warmup regression steps on independent pairs.
inline void warmup(BridgeModel& model, const MarginalDataset& data, const TrainConfig& cfg) {
  detail::check_dataset(data, model.grid);
  cfg.validate(model.grid.intervals());
  prepare_optimizers(model, cfg.learning_rate);
  const int b = cfg.per_bridge(model.grid.intervals());
  Rng rng = Rng::for_worker(cfg.seed, 1);
  for (Direction dir : {Direction::forward, Direction::backward}) {
    PhaseRecord rec{0, dir, {}};
    rec.losses.reserve(static_cast<std::size_t>(cfg.warmup_steps));
    for (int step = 0; step < cfg.warmup_steps; ++step) {
      const IntervalPairs p = sample_independent_pairs(data, model.grid, b, rng);
      rec.losses.push_back(bridge_matching_step(model, dir, p, sample_loss_draw(p, rng)));
    }
    model.history.phases.push_back(std::move(rec));
  }
}

/// Replaces the simulated side of each pair: backward phases push x_init
/// through the forward SDE to get x_final; forward phases push x_final through
/// the backward SDE to get x_init.
inline void simulate_opposite(const BridgeModel& model, Direction dir, IntervalPairs& p, Rng& rng) {
  if (dir == Direction::backward)
    p.pairs.x_final = sde_endpoints(p.pairs.x_init, p.intervals, model.fwd, Direction::forward, model.grid, model.ref, rng);
  else
    p.pairs.x_init = sde_endpoints(p.pairs.x_final, p.intervals, model.bwd, Direction::backward, model.grid, model.ref, rng);
}

/// Rows drawn uniformly from a pool, b per bridge (pool stacked by bridge).
inline IntervalPairs draw_from_pool(const IntervalPairs& pool, int pool_per_bridge, int b, int K, Rng& rng) {
  IntervalPairs out;
  const Eigen::Index n = static_cast<Eigen::Index>(K) * b;
  const Eigen::Index d = pool.pairs.x_init.cols();
  out.pairs.x_init.resize(n, d);
  out.pairs.x_final.resize(n, d);
  out.pairs.t_init.resize(n);
  out.pairs.t_final.resize(n);
  out.intervals.resize(static_cast<std::size_t>(n));
  Eigen::Index r = 0;
  for (int i = 0; i < K; ++i)
    for (int k = 0; k < b; ++k, ++r) {
      const Eigen::Index src = static_cast<Eigen::Index>(i) * pool_per_bridge +
                               static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(pool_per_bridge)));
      out.pairs.x_init.row(r) = pool.pairs.x_init.row(src);
      out.pairs.x_final.row(r) = pool.pairs.x_final.row(src);
      out.pairs.t_init(r) = pool.pairs.t_init(src);
      out.pairs.t_final(r) = pool.pairs.t_final(src);
      out.intervals[static_cast<std::size_t>(r)] = pool.intervals[static_cast<std::size_t>(src)];
    }
  return out;
}

/// Called after each (outer iteration, direction) phase.
using PhaseCallback = std::function<void(const BridgeModel&, const PhaseRecord&)>;

/// N_finetune outer iterations, each running a backward then a forward phase
/// of N_inner steps. With ResampleMode::inner every inner step draws fresh
/// data pairs, loss times and bridge noise; with ResampleMode::outer one block
/// is drawn per outer iteration and shared by both phases. The opposite
/// endpoint is re-simulated with the current model at every inner step unless
/// endpoints are cached, in which case a pool is simulated once per phase.
inline void mm_imf(BridgeModel& model, const MarginalDataset& data, const TrainConfig& cfg,
                   const PhaseCallback& on_phase = {}) {
  detail::check_dataset(data, model.grid);
  cfg.validate(model.grid.intervals());
  prepare_optimizers(model, cfg.imf_rate());
  const int K = model.grid.intervals();
  const int b = cfg.per_bridge(K);
  Rng rng = Rng::for_worker(cfg.seed, 2 + static_cast<std::uint64_t>(model.history.completed_outer));
  for (int outer = 1; outer <= cfg.outer_iterations; ++outer) {
    IntervalPairs block;
    LossDraw block_draw;
    if (cfg.resample == ResampleMode::outer) {
      block = sample_independent_pairs(data, model.grid, b, rng);
      block_draw = sample_loss_draw(block, rng);
    }
    const int label = model.history.completed_outer + 1;
    for (Direction dir : {Direction::backward, Direction::forward}) {
      PhaseRecord rec{label, dir, {}};
      rec.losses.reserve(static_cast<std::size_t>(cfg.inner_steps));
      IntervalPairs pool;
      const int pool_per_bridge = b * cfg.cache_batches;
      int inner = 0;
      try {
        if (cfg.cache_endpoints) {
          pool = cfg.resample == ResampleMode::outer ? block
                                                     : sample_independent_pairs(data, model.grid, pool_per_bridge, rng);
          simulate_opposite(model, dir, pool, rng);
        }
        for (inner = 1; inner <= cfg.inner_steps; ++inner) {
          IntervalPairs p;
          LossDraw draw;
          if (cfg.cache_endpoints) {
            p = cfg.resample == ResampleMode::outer ? pool : draw_from_pool(pool, pool_per_bridge, b, K, rng);
            draw = cfg.resample == ResampleMode::outer ? block_draw : sample_loss_draw(p, rng);
          } else if (cfg.resample == ResampleMode::outer) {
            p = block;
            simulate_opposite(model, dir, p, rng);
            draw = block_draw;
          } else {
            p = sample_independent_pairs(data, model.grid, b, rng);
            simulate_opposite(model, dir, p, rng);
            draw = sample_loss_draw(p, rng);
          }
          rec.losses.push_back(bridge_matching_step(model, dir, p, draw));
        }
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " (outer iteration " + std::to_string(label) + ", " +
                           to_string(dir) + " phase, inner step " + std::to_string(inner) + ")");
      }
      model.history.phases.push_back(rec);
      if (dir == Direction::forward) model.history.completed_outer = label;
      if (on_phase) on_phase(model, rec);
    }
  }
}

// ---------------------------------------------------------------------------
// Generation

enum class Sampler { sde, ode };

inline Sampler parse_sampler(const std::string& s) {
  if (s == "sde") return Sampler::sde;
  if (s == "ode") return Sampler::ode;
  throw ConfigError("unknown sampler '" + s + "' (expected sde or ode)");
}

/// Paths from the start batch's grid time to the end of the horizon in `dir`.
/// SDE mode runs one interval at a time, starting each from the previous
/// interval's endpoint; ODE mode integrates the probability flow continuously.
inline TrajectoryBatch generate(const BridgeModel& model, const SampleBatch& start, Direction dir, Sampler sampler,
                                Rng& rng) {
  start.validate();
  if (start.grid_index < 0 || start.grid_index >= model.grid.marginals())
    throw RangeError("generate: start batch is not at a grid time");
  if (start.dim() != model.dim()) throw DataError("generate: start batch dimension does not match the model");
  const int K = model.grid.intervals();
  if (sampler == Sampler::ode) return ode_simulate(start.points, model.fwd, model.bwd, model.grid, dir, start.grid_index);

  std::vector<TrajectoryBatch> parts;
  Matrix x = start.points;
  if (dir == Direction::forward) {
    for (int i = start.grid_index; i < K; ++i) {
      parts.push_back(sde_simulate(x, std::vector<int>(static_cast<std::size_t>(x.rows()), i), model.fwd, dir, model.grid,
                                   model.ref, rng));
      x = parts.back().terminal();
    }
  } else {
    for (int i = start.grid_index - 1; i >= 0; --i) {
      parts.push_back(sde_simulate(x, std::vector<int>(static_cast<std::size_t>(x.rows()), i), model.bwd, dir, model.grid,
                                   model.ref, rng));
      x = parts.back().terminal();
    }
  }
  if (parts.empty()) {
    TrajectoryBatch t;
    t.direction = dir;
    t.states.push_back(start.points);
    t.times = Matrix::Constant(start.rows(), 1, model.grid.time(start.grid_index));
    t.mask.resize(start.rows(), 0);
    t.interval.assign(static_cast<std::size_t>(start.rows()), -1);
    return t;
  }
  return concat_trajectories(parts);
}

/// States at every grid time visited by a generated trajectory, in time order.
inline std::vector<Matrix> grid_snapshots(const TrajectoryBatch& traj, const TimeGrid& grid) {
  std::vector<Matrix> out(static_cast<std::size_t>(grid.marginals()));
  for (int k = 0; k <= traj.steps(); ++k) {
    const int g = grid.grid_index(traj.times(0, k));
    if (g >= 0) out[static_cast<std::size_t>(g)] = traj.states[static_cast<std::size_t>(k)];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline std::string model_header(const BridgeModel& m) {
  std::ostringstream os;
  os.precision(17);
  os << "kind=bridge-model\n"
     << "times=" << detail::join(m.grid.times()) << "\n"
     << "n_total_steps=" << m.grid.total_steps() << "\n"
     << "sigma=" << m.ref.sigma << "\n"
     << "completed_outer=" << m.history.completed_outer << "\n"
     << "nets=2\n"
     << describe(m.fwd.shape(), "forward.") << describe(m.bwd.shape(), "backward.");
  return os.str();
}

inline void save_model(std::ostream& out, const BridgeModel& m) {
  write_checkpoint(out, model_header(m), {&m.fwd.parameters(), &m.bwd.parameters()});
}

/// Writes to a temporary file in the same directory, then renames over `path`.
inline void save_model(const std::filesystem::path& path, const BridgeModel& m) {
  const auto tmp = path.parent_path() / (path.filename().string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + tmp.string());
    save_model(out, m);
    out.flush();
    if (!out) throw DataError("checkpoint write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline BridgeModel load_model(std::istream& in) {
  const auto h = HeaderFields::parse(read_checkpoint_header(in));
  if (h.get("kind") != "bridge-model") throw DataError("checkpoint does not hold a bridge model");
  const TimeGrid grid(h.list("times"), static_cast<int>(h.number("n_total_steps")));
  const ReferenceConfig ref(h.number("sigma"));
  const NetworkShape fs = h.shape("forward.");
  const NetworkShape bs = h.shape("backward.");
  Vector fp = detail::read_f64_le(in, fs.parameter_count());
  Vector bp = detail::read_f64_le(in, bs.parameter_count());
  BridgeModel m(grid, ref, DriftNetwork(fs, std::move(fp)), DriftNetwork(bs, std::move(bp)));
  m.history.completed_outer = static_cast<int>(h.number("completed_outer"));
  return m;
}

inline BridgeModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  return load_model(in);
}

}  // namespace mmsb
