#pragma once

// Shared domain types: time grid, reference/training configuration, seeded
// random streams and the error hierarchy used across the library.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmsb {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Errors

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Invalid configuration (CLI exit code 2).
struct ConfigError : Error {
  using Error::Error;
};

/// Malformed or insufficient data (CLI exit code 3).
struct DataError : Error {
  using Error::Error;
};

/// Non-finite values, singular evaluations, divergence (CLI exit code 4).
struct NumericError : Error {
  using Error::Error;
};

/// Argument outside its admissible range (times, indices).
struct RangeError : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Time grid

/// Ordered marginal times t_0 < ... < t_K with the per-interval Euler
/// discretisation. Steps are allocated proportionally to interval length,
/// N_i = max(floor(N_total * (t_{i+1} - t_i) / T), 2), and dt_i is chosen so
/// that N_i * dt_i is the interval length.
class TimeGrid {
 public:
  static constexpr int kMinStepsPerInterval = 2;

  TimeGrid(std::vector<double> times, int total_steps)
      : times_(std::move(times)), total_steps_(total_steps) {
    if (times_.size() < 2) throw ConfigError("time grid needs at least two times");
    for (std::size_t i = 0; i + 1 < times_.size(); ++i) {
      if (!(times_[i + 1] > times_[i]) || !std::isfinite(times_[i + 1]))
        throw ConfigError("time grid must be finite and strictly increasing");
    }
    const int k = intervals();
    if (total_steps_ < kMinStepsPerInterval * k)
      throw ConfigError("n_total_steps must be at least " +
                        std::to_string(kMinStepsPerInterval * k) + " for " +
                        std::to_string(k) + " intervals");
    const double horizon = this->horizon();
    steps_.resize(k);
    dt_.resize(k);
    for (int i = 0; i < k; ++i) {
      const double len = times_[i + 1] - times_[i];
      // The small slack keeps exact ratios such as 30*2/3 from flooring to 19.
      const double raw = static_cast<double>(total_steps_) * len / horizon;
      const int n = static_cast<int>(std::floor(raw * (1.0 + 1e-12) + 1e-9));
      steps_[i] = std::max(n, kMinStepsPerInterval);
      dt_[i] = len / steps_[i];
    }
  }

  const std::vector<double>& times() const { return times_; }
  double time(int i) const { return times_.at(i); }
  int intervals() const { return static_cast<int>(times_.size()) - 1; }
  int marginals() const { return static_cast<int>(times_.size()); }
  double start() const { return times_.front(); }
  double end() const { return times_.back(); }
  double horizon() const { return times_.back() - times_.front(); }
  double length(int i) const { return times_.at(i + 1) - times_.at(i); }
  int total_steps() const { return total_steps_; }
  int steps(int i) const { return steps_.at(i); }
  double dt(int i) const { return dt_.at(i); }
  int max_steps() const { return *std::max_element(steps_.begin(), steps_.end()); }
  const std::vector<int>& all_steps() const { return steps_; }

  /// Interval containing t. Ties at interior grid points resolve to the left
  /// interval; t_0 maps to interval 0.
  int bridge_index(double t) const {
    if (!(t >= times_.front() && t <= times_.back()))
      throw RangeError("time " + std::to_string(t) + " outside grid [" +
                       std::to_string(times_.front()) + ", " +
                       std::to_string(times_.back()) + "]");
    const auto it = std::lower_bound(times_.begin() + 1, times_.end(), t);
    return static_cast<int>(it - times_.begin()) - 1;
  }

  /// Index of t among the grid times, or -1.
  int grid_index(double t) const {
    for (int i = 0; i < marginals(); ++i)
      if (times_[i] == t) return i;
    return -1;
  }

 private:
  std::vector<double> times_;
  int total_steps_;
  std::vector<int> steps_;
  std::vector<double> dt_;
};

struct StepAllocation {
  int steps;
  double dt;
};

inline std::vector<StepAllocation> allocate_steps(const TimeGrid& grid) {
  std::vector<StepAllocation> out;
  for (int i = 0; i < grid.intervals(); ++i) out.push_back({grid.steps(i), grid.dt(i)});
  return out;
}

inline int bridge_index(const TimeGrid& grid, double t) { return grid.bridge_index(t); }

// ---------------------------------------------------------------------------
// Reference process and training configuration

/// Brownian reference sigma * B_t (zero drift).
struct ReferenceConfig {
  double sigma = 1.0;

  explicit ReferenceConfig(double s = 1.0) : sigma(s) {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ConfigError("sigma must be positive");
  }
  double variance() const { return sigma * sigma; }
  /// Entropic regularisation of the static multi-marginal problem.
  double epsilon_entropic() const { return 2.0 * sigma * sigma; }
};

enum class Direction { forward, backward };

inline const char* to_string(Direction d) { return d == Direction::forward ? "forward" : "backward"; }

/// When MM-IMF draws a fresh block of endpoint pairs and loss times.
enum class ResampleMode { outer, inner };

struct TrainConfig {
  int batch_size = 256;
  int warmup_steps = 1000;
  int outer_iterations = 5;
  int inner_steps = 500;
  double learning_rate = 2e-4;
  /// Rate for the MM-IMF phases; 0 keeps learning_rate.
  double imf_learning_rate = 0.0;
  std::uint64_t seed = 0;
  ResampleMode resample = ResampleMode::inner;
  bool cache_endpoints = false;
  /// Pool size (in batches) simulated per phase when endpoints are cached.
  int cache_batches = 8;

  void validate(int bridges) const {
    if (batch_size < 1 || warmup_steps < 1 || outer_iterations < 1 || inner_steps < 1)
      throw ConfigError("batch_size, warmup_steps, outer_iterations and inner_steps must be >= 1");
    if (bridges < 1 || batch_size % bridges != 0)
      throw ConfigError("batch_size " + std::to_string(batch_size) +
                        " is not divisible by the number of bridges " + std::to_string(bridges));
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (!(imf_learning_rate >= 0.0)) throw ConfigError("imf_learning_rate must be non-negative");
    if (cache_batches < 1) throw ConfigError("cache_batches must be >= 1");
  }
  int per_bridge(int bridges) const { return batch_size / bridges; }
  double imf_rate() const { return imf_learning_rate > 0.0 ? imf_learning_rate : learning_rate; }
};

// ---------------------------------------------------------------------------
// Sample batches

/// n x d points at a grid time, or at explicit per-row times for interior
/// states (`grid_index` < 0).
struct SampleBatch {
  Matrix points;
  int grid_index = -1;
  Vector times;

  int rows() const { return static_cast<int>(points.rows()); }
  int dim() const { return static_cast<int>(points.cols()); }

  void validate() const {
    if (points.rows() < 1 || points.cols() < 1) throw DataError("sample batch is empty");
    if (!points.allFinite()) throw NumericError("sample batch has non-finite entries");
    if (grid_index < 0 && times.size() != points.rows())
      throw DataError("interior sample batch needs one time per row");
  }
};

// ---------------------------------------------------------------------------
// Random numbers

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Deterministic stream of uniforms and standard normals.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(splitmix64(seed)) {}

  /// Independent stream for a worker: seed XOR index, hashed.
  static Rng for_worker(std::uint64_t seed, std::uint64_t worker) {
    return Rng(splitmix64(seed ^ worker));
  }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal() { return normal_(engine_); }
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }
  std::uint64_t next_u64() { return engine_(); }

  Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    // Row-major fill so the stream layout follows sample order.
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = normal();
    return m;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

// ---------------------------------------------------------------------------
// Flat key/value configuration

/// Parses `key = value` lines; `#` starts a comment. Unknown keys are errors.
class KeyValueConfig {
 public:
  static inline const std::vector<std::string> kKeys = {
      "times",       "n_total_steps", "sigma",         "batch_size", "warmup_steps",
      "outer_iterations", "inner_steps", "learning_rate", "seed"};
  /// Keys that fall back to defaults when absent.
  static inline const std::vector<std::string> kOptionalKeys = {"hidden", "embed_dim", "cache_batches",
                                                                    "imf_learning_rate"};

  static bool known(const std::string& key) {
    return std::find(kKeys.begin(), kKeys.end(), key) != kKeys.end() ||
           std::find(kOptionalKeys.begin(), kOptionalKeys.end(), key) != kOptionalKeys.end();
  }

  static KeyValueConfig parse(const std::string& text) {
    KeyValueConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find_first_of("=:");
      if (eq == std::string::npos)
        throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
      std::string key = trim(line.substr(0, eq));
      std::string value = trim(line.substr(eq + 1));
      if (!known(key))
        throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
      if (cfg.values_.count(key))
        throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
      cfg.values_[key] = value;
    }
    return cfg;
  }

  static KeyValueConfig load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& values() const { return values_; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  double get_double(const std::string& key) const { return to_double(require(key), key); }

  long long get_int(const std::string& key) const {
    const std::string& v = require(key);
    std::size_t pos = 0;
    long long out = 0;
    try {
      out = std::stoll(v, &pos);
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': not an integer: " + v);
    }
    if (pos != v.size()) throw ConfigError("config key '" + key + "': not an integer: " + v);
    return out;
  }

  std::uint64_t get_u64(const std::string& key) const {
    const std::string& v = require(key);
    std::size_t pos = 0;
    std::uint64_t out = 0;
    try {
      out = std::stoull(v, &pos);
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': not an unsigned integer: " + v);
    }
    if (pos != v.size() || v.front() == '-')
      throw ConfigError("config key '" + key + "': not an unsigned integer: " + v);
    return out;
  }

  std::vector<double> get_list(const std::string& key) const {
    std::string v = require(key);
    for (char& c : v)
      if (c == '[' || c == ']') c = ' ';
    std::vector<double> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (!item.empty()) out.push_back(to_double(item, key));
    }
    return out;
  }

  std::string to_text() const {
    std::string out;
    for (const auto* keys : {&kKeys, &kOptionalKeys})
      for (const auto& key : *keys)
        if (auto it = values_.find(key); it != values_.end()) out += key + " = " + it->second + "\n";
    return out;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  static double to_double(const std::string& v, const std::string& key) {
    std::size_t pos = 0;
    double out = 0.0;
    try {
      out = std::stod(v, &pos);
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': not a number: " + v);
    }
    if (pos != v.size()) throw ConfigError("config key '" + key + "': not a number: " + v);
    return out;
  }

  const std::string& require(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing config key '" + key + "'");
    return it->second;
  }

  std::map<std::string, std::string> values_;
};

/// Everything a training run needs, assembled from a KeyValueConfig.
struct RunConfig {
  std::vector<double> times;
  int n_total_steps = 60;
  double sigma = 1.0;
  TrainConfig train;
  std::vector<int> hidden = {256, 256, 256};
  int embed_dim = 64;

  static RunConfig from(const KeyValueConfig& kv) {
    RunConfig rc;
    for (const auto& key : KeyValueConfig::kKeys)
      if (!kv.has(key)) throw ConfigError("missing config key '" + key + "'");
    rc.times = kv.get_list("times");
    rc.n_total_steps = static_cast<int>(kv.get_int("n_total_steps"));
    rc.sigma = kv.get_double("sigma");
    rc.train.batch_size = static_cast<int>(kv.get_int("batch_size"));
    rc.train.warmup_steps = static_cast<int>(kv.get_int("warmup_steps"));
    rc.train.outer_iterations = static_cast<int>(kv.get_int("outer_iterations"));
    rc.train.inner_steps = static_cast<int>(kv.get_int("inner_steps"));
    rc.train.learning_rate = kv.get_double("learning_rate");
    rc.train.seed = kv.get_u64("seed");
    if (kv.has("hidden")) {
      rc.hidden.clear();
      for (double w : kv.get_list("hidden")) {
        if (w < 1 || w != std::floor(w)) throw ConfigError("config key 'hidden': widths must be positive integers");
        rc.hidden.push_back(static_cast<int>(w));
      }
      if (rc.hidden.empty()) throw ConfigError("config key 'hidden': need at least one layer");
    }
    if (kv.has("embed_dim")) rc.embed_dim = static_cast<int>(kv.get_int("embed_dim"));
    if (rc.embed_dim < 2 || rc.embed_dim % 2 != 0) throw ConfigError("embed_dim must be a positive even number");
    if (kv.has("cache_batches")) rc.train.cache_batches = static_cast<int>(kv.get_int("cache_batches"));
    if (kv.has("imf_learning_rate")) rc.train.imf_learning_rate = kv.get_double("imf_learning_rate");
    // Constructing these validates the grid and sigma.
    TimeGrid grid(rc.times, rc.n_total_steps);
    ReferenceConfig ref(rc.sigma);
    rc.train.validate(grid.intervals());
    return rc;
  }

  TimeGrid grid() const { return TimeGrid(times, n_total_steps); }
  ReferenceConfig reference() const { return ReferenceConfig(sigma); }
};

}  // namespace mmsb
