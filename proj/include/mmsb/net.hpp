#pragma once

// Time-conditioned drift network v(t, x): sinusoidal time features
// concatenated with x, SiLU hidden layers, linear output. Gradients are
// hand-derived reverse mode; parameters live in one flat vector.

#include "mmsb/core.hpp"
#include "mmsb/parallel.hpp"

#include <bit>
#include <cstring>
#include <istream>
#include <ostream>

namespace mmsb {

struct NetworkShape {
  int dim = 2;
  std::vector<int> hidden = {256, 256, 256};
  int embed_dim = 64;
  /// Time normalisation: t~ = (t - t_origin) / t_scale.
  double t_origin = 0.0;
  double t_scale = 1.0;

  int input_size() const { return dim + embed_dim; }
  int layers() const { return static_cast<int>(hidden.size()) + 1; }
  int fan_in(int l) const { return l == 0 ? input_size() : hidden[static_cast<std::size_t>(l - 1)]; }
  int fan_out(int l) const { return l == layers() - 1 ? dim : hidden[static_cast<std::size_t>(l)]; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (int l = 0; l < layers(); ++l)
      n += static_cast<std::size_t>(fan_out(l)) * (fan_in(l) + 1);
    return n;
  }

  void validate() const {
    if (dim < 1) throw ConfigError("network dimension must be positive");
    if (embed_dim < 2 || embed_dim % 2 != 0) throw ConfigError("time embedding size must be even");
    for (int h : hidden)
      if (h < 1) throw ConfigError("hidden widths must be positive");
    if (!(t_scale > 0.0)) throw ConfigError("time scale must be positive");
  }

  bool operator==(const NetworkShape&) const = default;
};

/// Highest angular frequency of the time features (on normalised time).
inline constexpr double kMaxTimeFrequency = 100.0;

/// Sinusoidal features of normalised time: [sin(w_j t~), cos(w_j t~)] with
/// w_j geometric between 1 and kMaxTimeFrequency.
inline Vector time_embed(double t, const NetworkShape& shape) {
  const int half = shape.embed_dim / 2;
  const double tn = (t - shape.t_origin) / shape.t_scale;
  Vector e(shape.embed_dim);
  for (int j = 0; j < half; ++j) {
    const double w = half == 1 ? 1.0 : std::pow(kMaxTimeFrequency, static_cast<double>(j) / (half - 1));
    e(j) = std::sin(w * tn);
    e(half + j) = std::cos(w * tn);
  }
  return e;
}

namespace detail {

/// Columns per GEMM call. Every product is issued with exactly this many
/// columns, so a column's value never depends on how the batch was split.
inline constexpr Eigen::Index kColumnChunk = 32;

/// y = W h + b on column chunks (features x batch layout).
inline void affine_chunked(const Eigen::Ref<const Matrix>& W, const Eigen::Ref<const Vector>& b,
                           const Matrix& h, Matrix& y) {
  const Eigen::Index n = h.cols();
  y.resize(W.rows(), n);
  const Eigen::Index chunks = (n + kColumnChunk - 1) / kColumnChunk;
  parallel_for(chunks, [&](long c) {
    const Eigen::Index j0 = c * kColumnChunk;
    const Eigen::Index nb = std::min(kColumnChunk, n - j0);
    Matrix ybuf(W.rows(), kColumnChunk);
    if (nb == kColumnChunk) {
      ybuf.noalias() = W * h.middleCols(j0, kColumnChunk);
    } else {
      Matrix hbuf = Matrix::Zero(h.rows(), kColumnChunk);
      hbuf.leftCols(nb) = h.middleCols(j0, nb);
      ybuf.noalias() = W * hbuf;
    }
    y.middleCols(j0, nb) = ybuf.leftCols(nb).colwise() + b;
  });
}

inline void silu_inplace(Matrix& z) {
  z.array() = z.array() / (1.0 + (-z.array()).exp());
}

}  // namespace detail

class DriftNetwork {
 public:
  DriftNetwork() = default;

  /// Uniform(+-1/sqrt(fan_in)) hidden weights and biases; zero output layer so
  /// the initial drift vanishes.
  DriftNetwork(NetworkShape shape, Rng& rng) : shape_(std::move(shape)) {
    shape_.validate();
    params_ = Vector::Zero(static_cast<Eigen::Index>(shape_.parameter_count()));
    build_offsets();
    for (int l = 0; l + 1 < shape_.layers(); ++l) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(shape_.fan_in(l)));
      const Eigen::Index count = shape_.fan_out(l) * (shape_.fan_in(l) + 1);
      for (Eigen::Index i = 0; i < count; ++i) params_(offsets_[l] + i) = rng.uniform(-bound, bound);
    }
  }

  DriftNetwork(NetworkShape shape, Vector params) : shape_(std::move(shape)), params_(std::move(params)) {
    shape_.validate();
    if (params_.size() != static_cast<Eigen::Index>(shape_.parameter_count()))
      throw DataError("parameter count " + std::to_string(params_.size()) +
                      " does not match architecture (" + std::to_string(shape_.parameter_count()) + ")");
    build_offsets();
  }

  const NetworkShape& shape() const { return shape_; }
  int dim() const { return shape_.dim; }
  const Vector& parameters() const { return params_; }
  Vector& parameters() { return params_; }

  /// Drift values, n x d.
  Matrix forward(const Vector& t, const Matrix& x) const {
    check_inputs(t, x);
    Matrix h = input_features(t, x);
    Matrix z;
    for (int l = 0; l < shape_.layers(); ++l) {
      detail::affine_chunked(weight(l), bias(l), h, z);
      if (l + 1 < shape_.layers()) detail::silu_inplace(z);
      h.swap(z);
    }
    return h.transpose();
  }

  Matrix operator()(const Vector& t, const Matrix& x) const { return forward(t, x); }

  /// loss = (1/B) sum_rows ||v(t, x) - target||^2 and its parameter gradient.
  double loss_and_grad(const Vector& t, const Matrix& x, const Matrix& target, Vector& grad) const {
    check_inputs(t, x);
    if (target.rows() != x.rows() || target.cols() != shape_.dim)
      throw DataError("loss_and_grad: target shape mismatch");
    if (!target.allFinite()) throw NumericError("loss_and_grad: non-finite target");
    const int L = shape_.layers();
    const double batch = static_cast<double>(x.rows());
    // inputs[l] feeds layer l; pre[l] is its affine output.
    std::vector<Matrix> inputs(static_cast<std::size_t>(L));
    std::vector<Matrix> pre(static_cast<std::size_t>(L));
    inputs[0] = input_features(t, x);
    for (int l = 0; l < L; ++l) {
      detail::affine_chunked(weight(l), bias(l), inputs[l], pre[l]);
      if (l + 1 < L) {
        inputs[l + 1] = pre[l];
        detail::silu_inplace(inputs[l + 1]);
      }
    }
    Matrix resid = pre[L - 1] - target.transpose();
    const double loss = resid.squaredNorm() / batch;

    grad.resize(params_.size());
    Matrix delta = (2.0 / batch) * resid;
    for (int l = L - 1; l >= 0; --l) {
      Eigen::Map<Matrix> gw(grad.data() + offsets_[l], shape_.fan_out(l), shape_.fan_in(l));
      Eigen::Map<Vector> gb(grad.data() + offsets_[l] + shape_.fan_out(l) * shape_.fan_in(l),
                            shape_.fan_out(l));
      gw.noalias() = delta * inputs[l].transpose();
      gb = delta.rowwise().sum();
      if (l == 0) break;
      Matrix up = weight(l).transpose() * delta;
      // silu'(z) = sig(z) (1 + z (1 - sig(z)))
      const auto& z = pre[l - 1].array();
      const Eigen::ArrayXXd sig = 1.0 / (1.0 + (-z).exp());
      delta = (up.array() * sig * (1.0 + z * (1.0 - sig))).matrix();
    }
    return loss;
  }

  /// Loss only (used by finite-difference checks).
  double loss(const Vector& t, const Matrix& x, const Matrix& target) const {
    return (forward(t, x) - target).squaredNorm() / static_cast<double>(x.rows());
  }

  Eigen::Map<const Matrix> weight(int l) const {
    return {params_.data() + offsets_[l], shape_.fan_out(l), shape_.fan_in(l)};
  }
  Eigen::Map<const Vector> bias(int l) const {
    return {params_.data() + offsets_[l] + shape_.fan_out(l) * shape_.fan_in(l), shape_.fan_out(l)};
  }

 private:
  void build_offsets() {
    offsets_.clear();
    Eigen::Index at = 0;
    for (int l = 0; l < shape_.layers(); ++l) {
      offsets_.push_back(at);
      at += shape_.fan_out(l) * (shape_.fan_in(l) + 1);
    }
  }

  void check_inputs(const Vector& t, const Matrix& x) const {
    if (x.cols() != shape_.dim || t.size() != x.rows())
      throw DataError("drift network: expected " + std::to_string(shape_.dim) +
                      "-d inputs with one time per row");
    if (!x.allFinite() || !t.allFinite()) throw NumericError("drift network: non-finite input");
  }

  Matrix input_features(const Vector& t, const Matrix& x) const {
    Matrix h(shape_.input_size(), x.rows());
    h.topRows(shape_.dim) = x.transpose();
    for (Eigen::Index r = 0; r < x.rows(); ++r)
      h.col(r).tail(shape_.embed_dim) = time_embed(t(r), shape_);
    return h;
  }

  NetworkShape shape_;
  Vector params_;
  std::vector<Eigen::Index> offsets_;
};

/// Adam with bias correction.
struct AdamState {
  double learning_rate = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Vector m;
  Vector v;
  long step = 0;

  AdamState() = default;
  AdamState(Eigen::Index size, double lr) : learning_rate(lr), m(Vector::Zero(size)), v(Vector::Zero(size)) {}

  void update(Vector& params, const Vector& grad) {
    if (m.size() != params.size()) {
      m = Vector::Zero(params.size());
      v = Vector::Zero(params.size());
    }
    if (grad.size() != params.size()) throw DataError("adam: gradient size mismatch");
    ++step;
    m = beta1 * m + (1.0 - beta1) * grad;
    v = beta2 * v + (1.0 - beta2) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    params.array() -= learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
};

inline void adam_step(AdamState& state, Vector& params, const Vector& grad) { state.update(params, grad); }

// ---------------------------------------------------------------------------
// Checkpoint blocks: a text header followed by little-endian float64 data.

namespace detail {

inline void write_f64_le(std::ostream& out, const Vector& v) {
  std::vector<char> buf(static_cast<std::size_t>(v.size()) * 8);
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    auto bits = std::bit_cast<std::uint64_t>(v(i));
    for (int b = 0; b < 8; ++b)
      buf[static_cast<std::size_t>(i) * 8 + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

inline Vector read_f64_le(std::istream& in, std::size_t count) {
  std::vector<unsigned char> buf(count * 8);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(in.gcount()) != buf.size()) throw DataError("checkpoint truncated");
  Vector v(static_cast<Eigen::Index>(count));
  for (std::size_t i = 0; i < count; ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(buf[i * 8 + b]) << (8 * b);
    v(static_cast<Eigen::Index>(i)) = std::bit_cast<double>(bits);
  }
  return v;
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

}  // namespace detail

inline std::string describe(const NetworkShape& s, const std::string& prefix) {
  std::ostringstream os;
  os.precision(17);
  os << prefix << "dim=" << s.dim << "\n"
     << prefix << "hidden=" << detail::join(s.hidden) << "\n"
     << prefix << "embed_dim=" << s.embed_dim << "\n"
     << prefix << "t_origin=" << s.t_origin << "\n"
     << prefix << "t_scale=" << s.t_scale << "\n"
     << prefix << "activation=silu\n"
     << prefix << "parameters=" << s.parameter_count() << "\n";
  return os.str();
}

/// Parsed key=value checkpoint header.
class HeaderFields {
 public:
  static HeaderFields parse(const std::string& text) {
    HeaderFields h;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      h.fields_[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return h;
  }
  bool has(const std::string& k) const { return fields_.count(k) != 0; }
  const std::string& get(const std::string& k) const {
    auto it = fields_.find(k);
    if (it == fields_.end()) throw DataError("checkpoint header missing '" + k + "'");
    return it->second;
  }
  double number(const std::string& k) const {
    try {
      return std::stod(get(k));
    } catch (const std::invalid_argument&) {
      throw DataError("checkpoint header: bad number for '" + k + "'");
    }
  }
  std::vector<double> list(const std::string& k) const {
    std::vector<double> out;
    std::stringstream ss(get(k));
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) out.push_back(std::stod(item));
    return out;
  }
  NetworkShape shape(const std::string& prefix) const {
    NetworkShape s;
    s.dim = static_cast<int>(number(prefix + "dim"));
    s.hidden.clear();
    for (double h : list(prefix + "hidden")) s.hidden.push_back(static_cast<int>(h));
    s.embed_dim = static_cast<int>(number(prefix + "embed_dim"));
    s.t_origin = number(prefix + "t_origin");
    s.t_scale = number(prefix + "t_scale");
    if (static_cast<std::size_t>(number(prefix + "parameters")) != s.parameter_count())
      throw DataError("checkpoint header: parameter count does not match architecture");
    return s;
  }

 private:
  std::map<std::string, std::string> fields_;
};

inline constexpr const char* kCheckpointMagic = "MMSB-CHECKPOINT 1";

/// Header text then the parameter blocks in order.
inline void write_checkpoint(std::ostream& out, const std::string& header,
                             const std::vector<const Vector*>& blocks) {
  out << kCheckpointMagic << "\n" << header.size() << "\n" << header;
  for (const Vector* b : blocks) detail::write_f64_le(out, *b);
  if (!out) throw DataError("checkpoint write failed");
}

inline std::string read_checkpoint_header(std::istream& in) {
  std::string magic, size_line;
  if (!std::getline(in, magic) || magic != kCheckpointMagic) throw DataError("not a checkpoint file");
  if (!std::getline(in, size_line)) throw DataError("checkpoint truncated");
  std::size_t n = 0;
  try {
    n = std::stoul(size_line);
  } catch (const std::exception&) {
    throw DataError("checkpoint header size malformed");
  }
  std::string header(n, '\0');
  in.read(header.data(), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) throw DataError("checkpoint truncated");
  return header;
}

inline void save_network(std::ostream& out, const DriftNetwork& net) {
  write_checkpoint(out, "nets=1\n" + describe(net.shape(), "net0."), {&net.parameters()});
}

inline DriftNetwork load_network(std::istream& in) {
  const auto h = HeaderFields::parse(read_checkpoint_header(in));
  NetworkShape s = h.shape("net0.");
  return DriftNetwork(s, detail::read_f64_le(in, s.parameter_count()));
}

}  // namespace mmsb
