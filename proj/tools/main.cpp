// mmsb: train / eval / sample / oracle / export-plot / bench-table1.

#include "mmsb/mmsb.hpp"
#include "mmsb/report.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace mmsb;

namespace {

constexpr std::uint64_t kDataSeed = 1;

// ---------------------------------------------------------------------------
// Datasets and configs

int toy_test_rows() { return 2000; }

MarginalDataset load_dataset(const std::string& spec) {
  if (spec == "mixture" || spec == "mixture3") return gen_gaussian_mixture_sequence(20000, toy_test_rows(), kDataSeed);
  if (spec == "moons4") return gen_moons_sequence(20000, toy_test_rows(), kDataSeed, 4);
  if (spec == "moons2") return gen_moons_sequence(20000, toy_test_rows(), kDataSeed, 2);
  if (spec == "8gaussians4") return gen_8gaussians_sequence(20000, toy_test_rows(), kDataSeed, 4);
  if (spec == "8gaussians2") return gen_8gaussians_sequence(20000, toy_test_rows(), kDataSeed, 2);
  if (spec == "gaussian50d") return gen_gaussian_50d(10000, toy_test_rows(), kDataSeed);
  if (spec == "surrogate100d") {
    auto ds = load_snapshot_table(gen_branching_table(3000, 5, 100, kDataSeed), 500, kDataSeed, true, "surrogate100d");
    return ds;
  }
  if (!fs::exists(spec))
    throw DataError("unknown dataset '" + spec +
                    "' (expected mixture, moons4, moons2, 8gaussians4, 8gaussians2, gaussian50d, surrogate100d or a CSV path)");
  std::ifstream f(spec);
  if (!f) throw DataError("cannot open snapshot table " + spec);
  const SnapshotTable tab = read_snapshot_csv(f);
  std::map<std::string, int> counts;
  for (const auto& l : tab.labels) ++counts[l];
  int smallest = std::numeric_limits<int>::max();
  for (const auto& [label, n] : counts) smallest = std::min(smallest, n);
  // Hold out a tenth of the smallest timepoint from every timepoint.
  return load_snapshot_table(tab, std::max(1, smallest / 10), kDataSeed, true, spec);
}

std::string join_times(const std::vector<double>& t) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < t.size(); ++i) os << (i ? ", " : "") << t[i];
  return os.str();
}

/// Built-in configs. `default` is a quick run; `desk` is the longer setting
/// used for metric reproduction.
std::string builtin_config(const std::string& name, const MarginalDataset& data) {
  const int K = data.size() - 1;
  const bool high_dim = data.dim() > 10;
  std::ostringstream os;
  os << "times = " << join_times(data.times) << "\n";
  if (name == "default") {
    os << "n_total_steps = " << 20 * K << "\n"
       << "sigma = 1.0\n"
       << "batch_size = " << 32 * K << "\n"
       << "warmup_steps = 300\n"
       << "outer_iterations = 2\n"
       << "inner_steps = 50\n"
       << "learning_rate = 1e-3\n"
       << "seed = 0\n"
       << "hidden = 64, 64\n"
       << "embed_dim = 16\n";
  } else if (name == "desk") {
    os << "n_total_steps = " << 100 * K << "\n"
       << "sigma = 1.0\n"
       << "batch_size = " << 85 * K << "\n"
       << "warmup_steps = " << (high_dim ? 4000 : 15000) << "\n"
       << "outer_iterations = 5\n"
       << "inner_steps = 1000\n"
       << "learning_rate = 1e-3\n"
       << "imf_learning_rate = 2e-4\n"
       << "seed = 0\n"
       << "hidden = " << (high_dim ? "256, 256, 256" : "128, 128, 128") << "\n"
       << "embed_dim = 64\n"
       << "cache_batches = 32\n";
  } else {
    throw ConfigError("unknown built-in config '" + name + "'");
  }
  return os.str();
}

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw DataError("cannot read " + p.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Hashing, manifest, lock

std::string sha1_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
  EVP_DigestUpdate(ctx, bytes.data(), bytes.size());
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

/// Same digest git assigns to a blob with this content.
std::string git_blob_hash(const std::string& content) {
  return sha1_hex("blob " + std::to_string(content.size()) + std::string(1, '\0') + content);
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

constexpr const char* kManifest = "manifest.json";
constexpr const char* kLock = ".lock";

class RunLock {
 public:
  explicit RunLock(const fs::path& dir) : path_(dir / kLock) {
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) throw DataError("run directory " + dir.string() + " is locked (" + path_.string() + " exists)");
    const std::string pid = std::to_string(::getpid()) + "\n";
    if (::write(fd_, pid.data(), pid.size()) < 0) { /* best effort */ }
  }
  ~RunLock() {
    ::close(fd_);
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
  int fd_ = -1;
};

json inventory(const fs::path& dir) {
  std::vector<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), dir).generic_string();
    if (rel == kManifest || rel == kLock || rel == std::string(kManifest) + ".tmp") continue;
    files.push_back(rel);
  }
  std::sort(files.begin(), files.end());
  json out = json::array();
  for (const auto& rel : files) {
    const std::string content = read_file(dir / rel);
    out.push_back({{"path", rel}, {"bytes", content.size()}, {"sha1", git_blob_hash(content)}});
  }
  return out;
}

void write_manifest(const fs::path& dir, json manifest) {
  manifest["outputs"] = inventory(dir);
  const fs::path tmp = dir / (std::string(kManifest) + ".tmp");
  {
    std::ofstream f(tmp, std::ios::trunc);
    f << manifest.dump(2) << "\n";
    if (!f) throw DataError("cannot write manifest in " + dir.string());
  }
  fs::rename(tmp, dir / kManifest);
}

// ---------------------------------------------------------------------------
// Output helpers

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      std::size_t pos = 0;
      out.push_back(std::stod(item, &pos));
      if (item.find_first_not_of(" \t", pos) != std::string::npos) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("not a number list: " + s);
    }
  }
  return out;
}

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::trunc);
  if (!f) throw DataError("cannot write " + p.string());
  f.precision(17);
  return f;
}

Direction parse_direction(const std::string& s) {
  if (s == "forward") return Direction::forward;
  if (s == "backward") return Direction::backward;
  throw ConfigError("unknown direction '" + s + "' (expected forward or backward)");
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config = "default";
  std::string dataset;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string resample = "inner";
  bool cache = false;
  bool dry_run = false;
};

int cmd_train(const TrainArgs& a) {
  const std::string started = utc_now();
  const MarginalDataset data = load_dataset(a.dataset);
  data.validate();
  const bool builtin = a.config == "default" || a.config == "desk";
  const std::string config_text = builtin ? builtin_config(a.config, data) : read_file(a.config);
  KeyValueConfig kv = KeyValueConfig::parse(config_text);
  if (a.seed) kv.set("seed", std::to_string(*a.seed));
  RunConfig rc = RunConfig::from(kv);
  if (a.resample == "inner") rc.train.resample = ResampleMode::inner;
  else if (a.resample == "outer") rc.train.resample = ResampleMode::outer;
  else throw ConfigError("--resample-times must be inner or outer");
  rc.train.cache_endpoints = a.cache;
  const TimeGrid grid = rc.grid();
  if (grid.marginals() != data.size())
    throw ConfigError("config has " + std::to_string(grid.marginals()) + " times but dataset " + data.name + " has " +
                      std::to_string(data.size()) + " marginals");
  for (int k = 0; k < data.size(); ++k)
    if (std::abs(grid.time(k) - data.times[static_cast<std::size_t>(k)]) > 1e-9)
      throw ConfigError("config times do not match the dataset timepoints");

  json cfg_json;
  for (const auto& [k, v] : kv.values()) cfg_json[k] = v;
  cfg_json["resample_times"] = a.resample;
  cfg_json["cache_endpoints"] = a.cache;
  cfg_json["dataset"] = a.dataset;
  cfg_json["threads"] = num_threads();
  if (a.dry_run) {
    std::cout << "config ok: " << data.name << ", " << data.size() << " marginals, d=" << data.dim() << ", "
              << grid.total_steps() << " steps, batch " << rc.train.batch_size << "\n"
              << kv.to_text();
    return 0;
  }
  if (a.out.empty()) throw ConfigError("--out is required unless --dry-run is given");
  const fs::path out(a.out);
  fs::create_directories(out / "checkpoints");
  RunLock lock(out);
  {
    auto f = open_out(out / "config.cfg");
    f << kv.to_text();
  }

  auto metrics = open_out(out / "metrics.ndjson");
  auto emit = [&](const json& j) { metrics << j.dump() << "\n" << std::flush; };
  auto model = BridgeModel::create(grid, rc.reference(), data.dim(), rc.hidden, rc.train.seed, rc.embed_dim);
  auto log_phase = [&](const PhaseRecord& r) {
    emit({{"event", "phase"},
          {"outer", r.outer},
          {"direction", to_string(r.direction)},
          {"steps", r.losses.size()},
          {"mean_loss", r.mean_loss()},
          {"final_loss", r.losses.empty() ? 0.0 : r.losses.back()}});
  };
  auto log_eval = [&](int outer) {
    const auto swd = marginal_swd(model, data, rc.train.seed + static_cast<std::uint64_t>(outer), 1000);
    emit({{"event", "eval"}, {"outer", outer}, {"times", data.times}, {"swd", swd}});
  };

  warmup(model, data, rc.train);
  for (const auto& r : model.history.phases) log_phase(r);
  save_model(out / "checkpoints" / "warmup.ckpt", model);
  log_eval(0);
  std::cerr << "warmup done (" << rc.train.warmup_steps << " steps per direction)\n";

  mm_imf(model, data, rc.train, [&](const BridgeModel& m, const PhaseRecord& r) {
    log_phase(r);
    if (r.direction != Direction::forward) return;
    char name[32];
    std::snprintf(name, sizeof name, "outer_%03d.ckpt", r.outer);
    save_model(out / "checkpoints" / name, m);
    log_eval(r.outer);
    std::cerr << "outer iteration " << r.outer << " done\n";
  });
  save_model(out / "model.ckpt", model);
  metrics.close();

  json manifest;
  manifest["command"] = "train";
  manifest["config"] = cfg_json;
  manifest["seed"] = rc.train.seed;
  manifest["input_hash"] = git_blob_hash(kv.to_text() + "\n" + (fs::exists(a.dataset) ? read_file(a.dataset) : a.dataset));
  manifest["started_at"] = started;
  manifest["finished_at"] = utc_now();
  write_manifest(out, manifest);
  std::cout << (out / "model.ckpt").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval / sample

int cmd_eval(const std::string& model_path, const std::string& dataset, const std::string& out, const std::string& sampler,
             std::uint64_t seed, bool no_w2) {
  const BridgeModel model = load_model(fs::path(model_path));
  const MarginalDataset data = load_dataset(dataset);
  EvalOptions opt;
  opt.sampler = parse_sampler(sampler);
  opt.seed = seed;
  opt.with_w2 = !no_w2;
  const auto ev = evaluate_model(model, data, opt);
  const std::string text = format_report(ev, model_path);
  if (!out.empty()) {
    auto f = open_out(out);
    f << text;
  }
  std::cout << text;
  return 0;
}

int cmd_sample(const std::string& model_path, const std::string& dataset, const std::string& out, const std::string& sampler,
               const std::string& direction, int from, int n, std::uint64_t seed, bool trajectories) {
  const BridgeModel model = load_model(fs::path(model_path));
  const MarginalDataset data = load_dataset(dataset);
  const Direction dir = parse_direction(direction);
  if (from < 0) from = dir == Direction::forward ? 0 : data.size() - 1;
  if (from >= data.size()) throw RangeError("--from is not a grid index of the dataset");
  Matrix start = data.marginals[static_cast<std::size_t>(from)].test;
  if (n > 0 && start.rows() > n) start = start.topRows(n).eval();
  Rng rng(seed);
  const auto traj = generate(model, SampleBatch{start, from, {}}, dir, parse_sampler(sampler), rng);
  auto f = open_out(out);
  if (trajectories) {
    write_trajectory_csv(f, traj);
  } else {
    const auto snaps = grid_snapshots(traj, model.grid);
    std::vector<double> times;
    std::vector<Matrix> samples;
    for (int k = 0; k < model.grid.marginals(); ++k)
      if (snaps[static_cast<std::size_t>(k)].size() > 0) {
        times.push_back(model.grid.time(k));
        samples.push_back(snaps[static_cast<std::size_t>(k)]);
      }
    write_samples_csv(f, times, samples);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// oracle

struct OracleArgs {
  std::string supports;
  int atoms = 5;
  int marginals = 3;
  int dim = 1;
  double sigma = 0.5;
  std::uint64_t seed = 0;
  std::string out;
  std::string grid;  // comma-separated grid times; default 0, 1, ..
  std::string interior = "";
  std::string model;
  int paths = 10000;
};

/// Reads rows `marginal,weight,x_1..x_d` (header optional).
void read_supports(const std::string& path, std::vector<Matrix>& s, std::vector<Vector>& w) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open supports file " + path);
  std::map<int, std::vector<std::vector<double>>> rows;
  std::string line;
  std::size_t dim = 0;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = detail::split_csv(line);
    std::vector<double> v;
    bool numeric = true;
    for (const auto& c : cells) {
      const auto x = detail::parse_number(c);
      if (!x) numeric = false;
      else v.push_back(*x);
    }
    if (!numeric) {
      if (lineno == 1) continue;
      throw DataError("supports line " + std::to_string(lineno) + ": non-numeric cell");
    }
    if (v.size() < 3) throw DataError("supports line " + std::to_string(lineno) + ": need marginal, weight, coordinates");
    if (dim == 0) dim = v.size() - 2;
    if (v.size() - 2 != dim) throw DataError("supports line " + std::to_string(lineno) + ": ragged row");
    rows[static_cast<int>(v[0])].push_back(v);
  }
  int expect = 0;
  for (const auto& [m, r] : rows) {
    if (m != expect++) throw DataError("supports: marginal indices must be 0..M-1");
    Matrix atoms(static_cast<Eigen::Index>(r.size()), static_cast<Eigen::Index>(dim));
    Vector weights(static_cast<Eigen::Index>(r.size()));
    for (std::size_t i = 0; i < r.size(); ++i) {
      weights(static_cast<Eigen::Index>(i)) = r[i][1];
      for (std::size_t j = 0; j < dim; ++j) atoms(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = r[i][j + 2];
    }
    s.push_back(atoms);
    w.push_back(weights);
  }
}

int cmd_oracle(const OracleArgs& a) {
  std::vector<Matrix> s;
  std::vector<Vector> w;
  if (!a.supports.empty()) {
    read_supports(a.supports, s, w);
  } else {
    if (a.atoms < 1 || a.marginals < 2 || a.dim < 1) throw ConfigError("need atoms >= 1, marginals >= 2, dim >= 1");
    Rng rng(a.seed);
    for (int m = 0; m < a.marginals; ++m) {
      s.push_back(rng.normal_matrix(a.atoms, a.dim) * 1.5);
      Vector x(a.atoms);
      for (int i = 0; i < a.atoms; ++i) x(i) = 0.5 + rng.uniform();
      w.push_back(x / x.sum());
    }
  }
  std::vector<double> times;
  if (a.grid.empty()) {
    for (std::size_t m = 0; m < s.size(); ++m) times.push_back(static_cast<double>(m));
  } else {
    times = parse_list(a.grid);
    if (times.size() != s.size())
      throw ConfigError("--grid has " + std::to_string(times.size()) + " times for " + std::to_string(s.size()) + " marginals");
  }
  const TimeGrid grid(times, 100 * static_cast<int>(s.size() - 1));
  const ReferenceConfig ref(a.sigma);
  const auto c = chain_sinkhorn(s, w, grid, ref);
  const fs::path out(a.out);
  fs::create_directories(out);
  {
    auto f = open_out(out / "supports.csv");
    f << "marginal,atom,weight";
    for (int j = 0; j < c.dim(); ++j) f << ",x_" << (j + 1);
    f << "\n";
    for (int m = 0; m < c.marginals(); ++m)
      for (Eigen::Index i = 0; i < s[static_cast<std::size_t>(m)].rows(); ++i) {
        f << m << ',' << i << ',' << w[static_cast<std::size_t>(m)](i);
        for (int j = 0; j < c.dim(); ++j) f << ',' << s[static_cast<std::size_t>(m)](i, j);
        f << "\n";
      }
  }
  {
    auto f = open_out(out / "pairwise.csv");
    f << "interval,a,b,mass\n";
    for (int i = 0; i + 1 < c.marginals(); ++i) {
      const Matrix p = c.pairwise(i);
      for (Eigen::Index x = 0; x < p.rows(); ++x)
        for (Eigen::Index y = 0; y < p.cols(); ++y) f << i << ',' << x << ',' << y << ',' << p(x, y) << "\n";
    }
  }
  {
    auto f = open_out(out / "residuals.csv");
    f << std::setprecision(17) << "cycle,max_l1_residual,dual_objective\n";
    for (std::size_t k = 0; k < c.residual_history.size(); ++k)
      f << (k + 1) << ',' << c.residual_history[k] << ',' << c.objective_history[k] << "\n";
  }
  {
    auto f = open_out(out / "potentials.csv");
    f << std::setprecision(17) << "marginal,atom,log_potential\n";
    for (int m = 0; m < c.marginals(); ++m)
      for (Eigen::Index i = 0; i < c.log_potentials[static_cast<std::size_t>(m)].size(); ++i)
        f << m << ',' << i << ',' << c.log_potentials[static_cast<std::size_t>(m)](i) << "\n";
  }
  if (!a.interior.empty()) {
    auto f = open_out(out / "interior.csv");
    f << "t,mean,variance\n";
    for (double t : parse_list(a.interior)) {
      const auto m = oracle_interior_marginal(c, t);
      f << t << ',' << m.mean().mean() << ',' << m.coordinate_variance().mean() << "\n";
    }
  }
  std::cout << "chain Sinkhorn converged in " << c.iterations << " cycles, residual " << c.max_residual() << "\n";
  if (!a.model.empty()) {
    const BridgeModel model = load_model(fs::path(a.model));
    if (model.grid.marginals() != c.marginals() || model.dim() != c.dim())
      throw DataError("model grid does not match the oracle supports");
    Rng rng(a.seed + 1);
    auto f = open_out(out / "empirical.csv");
    f << "interval,tv,overflow\n";
    for (int i = 0; i + 1 < c.marginals(); ++i) {
      auto sim = [&](const Matrix& x) {
        return sde_endpoints(x, std::vector<int>(static_cast<std::size_t>(x.rows()), i), model.fwd, Direction::forward,
                             model.grid, model.ref, rng);
      };
      const auto e = empirical_coupling(sim, s[static_cast<std::size_t>(i)], w[static_cast<std::size_t>(i)],
                                        s[static_cast<std::size_t>(i) + 1], a.paths);
      const double tv = total_variation(e.table, c.pairwise(i));
      f << i << ',' << tv << ',' << e.overflow.sum() << "\n";
      std::cout << "interval " << i << ": TV(empirical, oracle) = " << tv << "\n";
    }
  }
  return 0;
}

// ---------------------------------------------------------------------------
// export-plot

struct ExportArgs {
  std::string model;
  std::string dataset;
  std::string out;
  std::string quiver_times = "0.5";
  int quiver_grid = 20;
  std::string quiver_range;
  std::string field = "flow";
  std::string snapshot_times;
  int n = 500;
  bool moments = false;
};

int cmd_export_plot(const ExportArgs& a) {
  if (!fs::exists(a.model)) throw DataError("checkpoint not found: " + a.model);
  const BridgeModel model = load_model(fs::path(a.model));
  const fs::path out(a.out);
  fs::create_directories(out);

  Matrix start;
  std::vector<double> lo, hi;
  if (!a.dataset.empty()) {
    const auto data = load_dataset(a.dataset);
    if (data.dim() != model.dim()) throw DataError("dataset dimension does not match the model");
    start = data.marginals[0].test;
    if (a.n > 0 && start.rows() > a.n) start = start.topRows(a.n).eval();
    Vector mn = Vector::Constant(data.dim(), std::numeric_limits<double>::infinity()), mx = -mn;
    for (const auto& m : data.marginals) {
      mn = mn.cwiseMin(m.test.colwise().minCoeff().transpose());
      mx = mx.cwiseMax(m.test.colwise().maxCoeff().transpose());
    }
    for (int j = 0; j < data.dim(); ++j) {
      lo.push_back(mn(j));
      hi.push_back(mx(j));
    }
  } else {
    Rng rng(0);
    start = rng.normal_matrix(std::max(a.n, 2), model.dim());
    lo.assign(static_cast<std::size_t>(model.dim()), -3.0);
    hi.assign(static_cast<std::size_t>(model.dim()), 3.0);
  }

  // Quiver field.
  if (model.dim() == 2 && a.quiver_grid > 0) {
    if (!a.quiver_range.empty()) {
      const auto r = parse_list(a.quiver_range);
      if (r.size() != 4 || !(r[1] > r[0]) || !(r[3] > r[2])) throw ConfigError("--quiver-range needs xmin,xmax,ymin,ymax");
      lo = {r[0], r[2]};
      hi = {r[1], r[3]};
    }
    const int g = a.quiver_grid;
    Matrix pts(g * g, 2);
    for (int i = 0; i < g; ++i)
      for (int j = 0; j < g; ++j) {
        const double fx = g == 1 ? 0.5 : static_cast<double>(i) / (g - 1);
        const double fy = g == 1 ? 0.5 : static_cast<double>(j) / (g - 1);
        pts(i * g + j, 0) = lo[0] + fx * (hi[0] - lo[0]);
        pts(i * g + j, 1) = lo[1] + fy * (hi[1] - lo[1]);
      }
    for (double t : parse_list(a.quiver_times)) {
      const Vector tv = Vector::Constant(pts.rows(), t);
      Matrix uv;
      if (a.field == "forward") uv = model.fwd(tv, pts);
      else if (a.field == "backward") uv = model.bwd(tv, pts);
      else if (a.field == "flow") uv = FlowDrift{model.fwd, model.bwd}(tv, pts);
      else throw ConfigError("--field must be forward, backward or flow");
      std::ostringstream name;
      name << "quiver_t" << t << ".csv";
      auto f = open_out(out / name.str());
      f << "x,y,u,v\n";
      for (Eigen::Index r = 0; r < pts.rows(); ++r)
        f << pts(r, 0) << ',' << pts(r, 1) << ',' << uv(r, 0) << ',' << uv(r, 1) << "\n";
    }
  } else if (model.dim() != 2 && !a.quiver_range.empty()) {
    throw DataError("quiver export needs a 2-d model");
  }

  // Snapshots along the probability-flow ODE, continued past the last grid time if asked.
  std::vector<double> snap_times = a.snapshot_times.empty() ? model.grid.times() : parse_list(a.snapshot_times);
  double t_stop = model.grid.end();
  for (double t : snap_times) {
    if (t < model.grid.start()) throw RangeError("snapshot time before the first grid time");
    t_stop = std::max(t_stop, t);
  }
  const auto ode = ode_simulate(start, model.fwd, model.bwd, model.grid, Direction::forward, 0, t_stop);
  {
    auto f = open_out(out / "snapshots.csv");
    f << "t,row";
    for (int j = 0; j < model.dim(); ++j) f << ",x_" << (j + 1);
    f << "\n";
    for (double t : snap_times) {
      const Matrix x = state_at(ode, t);
      for (Eigen::Index r = 0; r < x.rows(); ++r) {
        f << t << ',' << r;
        for (int j = 0; j < model.dim(); ++j) f << ',' << x(r, j);
        f << "\n";
      }
    }
  }
  if (a.moments) {
    const auto flow = ode_simulate(start, model.fwd, model.bwd, model.grid, Direction::forward);
    const auto m = moment_track(flow, model.grid);
    auto f = open_out(out / "moments.csv");
    f << "t,mean,variance,covariance,anchor\n";
    for (std::size_t k = 0; k < m.t.size(); ++k)
      f << m.t[k] << ',' << m.mean[k] << ',' << m.variance[k] << ',' << m.covariance[k] << ',' << m.anchor[k] << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// bench-table1

int cmd_bench(const std::map<std::string, std::vector<std::string>>& runs, const std::string& out, std::uint64_t seed) {
  const std::vector<std::pair<std::string, std::string>> groups{{"Moons", "moons"}, {"8 Gaussians", "8gaussians"}};
  std::vector<std::pair<std::string, std::pair<BenchSeries, BenchSeries>>> table;
  for (const auto& [label, key] : groups) {
    std::pair<BenchSeries, BenchSeries> series;
    for (const char* kind : {"single", "multi"}) {
      const auto it = runs.find(key + "-" + kind);
      if (it == runs.end() || it->second.empty()) throw DataError("missing runs for " + key + "-" + kind);
      const auto data = load_dataset(key + (std::string(kind) == "single" ? "2" : "4"));
      BenchSeries& s = std::string(kind) == "single" ? series.first : series.second;
      for (const auto& path : it->second) {
        if (!fs::exists(path)) throw DataError("checkpoint not found: " + path);
        EvalOptions opt;
        opt.seed = seed;
        const auto ev = evaluate_model(load_model(fs::path(path)), data, opt);
        s.w2.push_back(ev.metrics.w2_avg);
        s.energy.push_back(ev.path_energy);
      }
    }
    table.emplace_back(label, series);
  }
  const std::string text = format_table1(table);
  if (!out.empty()) {
    auto f = open_out(out);
    f << text;
  }
  std::cout << text;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-marginal Schrodinger bridges by iterative Markovian factorized fitting"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Worker threads (0 = hardware concurrency)")->check(CLI::NonNegativeNumber);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Warmup then alternating bridge-matching phases");
  train->add_option("--config", ta.config, "Config file, or built-in 'default' / 'desk'");
  train->add_option("--dataset", ta.dataset, "Dataset name or snapshot CSV")->required();
  train->add_option("--out", ta.out, "Run directory");
  std::uint64_t train_seed = 0;
  auto* seed_opt = train->add_option("--seed", train_seed, "Override the config seed");
  train->add_option("--threads", threads, "Worker threads");
  train->add_option("--resample-times", ta.resample, "inner: fresh pairs every step; outer: one block per iteration")
      ->check(CLI::IsMember({"inner", "outer"}));
  train->add_flag("--cache-endpoints", ta.cache, "Simulate an endpoint pool once per phase");
  train->add_flag("--dry-run", ta.dry_run, "Validate the config and exit");

  std::string model, dataset, out, sampler = "sde", direction = "forward";
  std::uint64_t seed = 0;
  bool no_w2 = false;
  auto* eval = app.add_subcommand("eval", "Held-out metrics and path energy");
  eval->add_option("--model", model, "Checkpoint")->required();
  eval->add_option("--dataset", dataset, "Dataset name or snapshot CSV")->required();
  eval->add_option("--out", out, "Report file");
  eval->add_option("--sampler", sampler, "sde or ode");
  eval->add_option("--seed", seed);
  eval->add_flag("--no-w2", no_w2, "Skip the exact W2 computation");

  int from = -1, n = 0;
  bool traj = false;
  auto* sample = app.add_subcommand("sample", "Generate samples from a checkpoint");
  sample->add_option("--model", model)->required();
  sample->add_option("--dataset", dataset, "Supplies start points")->required();
  sample->add_option("--out", out, "CSV file")->required();
  sample->add_option("--sampler", sampler, "sde or ode");
  sample->add_option("--direction", direction, "forward or backward");
  sample->add_option("--from", from, "Start grid index");
  sample->add_option("-n", n, "Number of paths (0 = all test rows)");
  sample->add_option("--seed", seed);
  sample->add_flag("--trajectories", traj, "Write every step, not just grid times");

  OracleArgs oa;
  auto* oracle = app.add_subcommand("oracle", "Chain Sinkhorn on discrete supports");
  oracle->add_option("--supports", oa.supports, "CSV of marginal,weight,x_1..");
  oracle->add_option("--atoms", oa.atoms);
  oracle->add_option("--marginals", oa.marginals);
  oracle->add_option("--dim", oa.dim);
  oracle->add_option("--sigma", oa.sigma);
  oracle->add_option("--seed", oa.seed);
  oracle->add_option("--out", oa.out)->required();
  oracle->add_option("--grid", oa.grid, "Comma-separated grid times, one per marginal");
  oracle->add_option("--interior-times", oa.interior, "Comma-separated times for interior moments");
  oracle->add_option("--model", oa.model, "Compare the checkpoint's empirical coupling");
  oracle->add_option("--paths", oa.paths, "Paths per atom for the empirical coupling");

  ExportArgs ea;
  auto* exp = app.add_subcommand("export-plot", "Quiver field, snapshots and moment curves as CSV");
  exp->add_option("--model", ea.model)->required();
  exp->add_option("--dataset", ea.dataset, "Supplies start points and the quiver range");
  exp->add_option("--out", ea.out)->required();
  exp->add_option("--quiver-times", ea.quiver_times);
  exp->add_option("--quiver-grid", ea.quiver_grid);
  exp->add_option("--quiver-range", ea.quiver_range, "xmin,xmax,ymin,ymax");
  exp->add_option("--field", ea.field, "forward, backward or flow");
  exp->add_option("--snapshot-times", ea.snapshot_times, "Times may exceed the last grid time");
  exp->add_option("-n", ea.n, "Paths");
  exp->add_flag("--moments", ea.moments, "Write moment curves");

  std::map<std::string, std::vector<std::string>> runs;
  auto* bench = app.add_subcommand("bench-table1", "W2 and path energy table over seeds");
  for (const char* key : {"moons-single", "moons-multi", "8gaussians-single", "8gaussians-multi"})
    bench->add_option(std::string("--") + key, runs[key], "Checkpoints (one per seed)")->delimiter(',');
  bench->add_option("--out", out);
  bench->add_option("--seed", seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    set_num_threads(threads > 0 ? threads : static_cast<int>(std::thread::hardware_concurrency()));
    if (*train) {
      if (*seed_opt) ta.seed = train_seed;
      return cmd_train(ta);
    }
    if (*eval) return cmd_eval(model, dataset, out, sampler, seed, no_w2);
    if (*sample) return cmd_sample(model, dataset, out, sampler, direction, from, n, seed, traj);
    if (*oracle) return cmd_oracle(oa);
    if (*exp) return cmd_export_plot(ea);
    if (*bench) return cmd_bench(runs, out, seed);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric divergence: " << e.what() << "\n";
    return 4;
  } catch (const Error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
