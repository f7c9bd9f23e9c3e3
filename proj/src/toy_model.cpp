#include "toy_model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace msl {

ModelParams::ModelParams(int d_, int vocab_)
    : d(d_),
      vocab(vocab_),
      E(static_cast<std::size_t>(d_) * static_cast<std::size_t>(vocab_), 0.0),
      U(static_cast<std::size_t>(d_) * static_cast<std::size_t>(vocab_), 0.0),
      b(static_cast<std::size_t>(vocab_), 0.0) {}

double& ModelParams::at(std::size_t i) {
  if (i < E.size()) return E[i];
  i -= E.size();
  if (i < U.size()) return U[i];
  return b[i - U.size()];
}

double ModelParams::at(std::size_t i) const { return const_cast<ModelParams*>(this)->at(i); }

void ModelParams::set_zero() {
  std::fill(E.begin(), E.end(), 0.0);
  std::fill(U.begin(), U.end(), 0.0);
  std::fill(b.begin(), b.end(), 0.0);
}

void ModelParams::scale(double s) {
  for (auto& x : E) x *= s;
  for (auto& x : U) x *= s;
  for (auto& x : b) x *= s;
}

void ModelParams::add_scaled(const ModelParams& o, double s) {
  require(o.d == d && o.vocab == vocab, ErrorCode::InvalidArgument, "parameter shape mismatch");
  for (std::size_t i = 0; i < E.size(); ++i) E[i] += s * o.E[i];
  for (std::size_t i = 0; i < U.size(); ++i) U[i] += s * o.U[i];
  for (std::size_t i = 0; i < b.size(); ++i) b[i] += s * o.b[i];
}

double ModelParams::squared_norm() const {
  double acc = 0.0;
  for (double x : E) acc += x * x;
  for (double x : U) acc += x * x;
  for (double x : b) acc += x * x;
  return acc;
}

bool ModelParams::all_finite() const {
  auto ok = [](const std::vector<double>& v) {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  };
  return ok(E) && ok(U) && ok(b);
}

ModelParams init_params(std::uint64_t seed, int d, int vocab_size, double scale) {
  require(d >= 1, ErrorCode::InvalidArgument, "embedding width must be >= 1");
  require(vocab_size >= 1, ErrorCode::InvalidArgument, "vocab size must be >= 1");
  require(scale >= 0.0, ErrorCode::InvalidArgument, "init scale must be >= 0");
  ModelParams p(d, vocab_size);
  if (scale == 0.0) return p;
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& x : p.E) x = u(rng);
  for (auto& x : p.U) x = u(rng);
  for (auto& x : p.b) x = u(rng);
  return p;
}

std::vector<double> encode(const ModelParams& p, std::span<const TokenId> context) {
  require(!context.empty(), ErrorCode::InvalidArgument, "context must be non-empty");
  std::vector<double> h(static_cast<std::size_t>(p.d), 0.0);
  for (TokenId w : context) {
    require(w >= 0 && w < p.vocab, ErrorCode::InvalidArgument, "token id out of range: " + std::to_string(w));
    auto row = p.E_row(w);
    for (int k = 0; k < p.d; ++k) h[static_cast<std::size_t>(k)] += row[static_cast<std::size_t>(k)];
  }
  const double inv = 1.0 / static_cast<double>(context.size());
  for (auto& x : h) x *= inv;
  return h;
}

void logits_subset(const ModelParams& p, std::span<const double> h, std::span<const TokenId> ids, std::span<double> out) {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto u = p.U_row(ids[i]);
    double acc = p.b[static_cast<std::size_t>(ids[i])];
    for (int k = 0; k < p.d; ++k) acc += u[static_cast<std::size_t>(k)] * h[static_cast<std::size_t>(k)];
    out[i] = acc;
  }
}

void logits_full(const ModelParams& p, std::span<const double> h, std::span<double> out) {
  for (TokenId z = 0; z < p.vocab; ++z) {
    auto u = p.U_row(z);
    double acc = p.b[static_cast<std::size_t>(z)];
    for (int k = 0; k < p.d; ++k) acc += u[static_cast<std::size_t>(k)] * h[static_cast<std::size_t>(k)];
    out[static_cast<std::size_t>(z)] = acc;
  }
}

LogitsRow forward(const ModelParams& p, std::span<const TokenId> context) {
  auto h = encode(p, context);
  LogitsRow row;
  row.values.resize(static_cast<std::size_t>(p.vocab));
  row.context_len = context.size();
  logits_full(p, h, row.values);
  return row;
}

void backward_with_encoding(const ModelParams& p, std::span<const TokenId> context, std::span<const double> h,
                            std::span<const double> dlogits, ParamGradients& g) {
  require(dlogits.size() == static_cast<std::size_t>(p.vocab), ErrorCode::InvalidArgument, "dL/dlogits length mismatch");
  require(g.d == p.d && g.vocab == p.vocab, ErrorCode::InvalidArgument, "gradient buffer shape mismatch");
  const auto d = static_cast<std::size_t>(p.d);
  std::vector<double> dh(d, 0.0);
  for (TokenId z = 0; z < p.vocab; ++z) {
    double gz = dlogits[static_cast<std::size_t>(z)];
    if (gz == 0.0) continue;
    g.b[static_cast<std::size_t>(z)] += gz;
    auto gu = g.U_row(z);
    auto u = p.U_row(z);
    for (std::size_t k = 0; k < d; ++k) {
      gu[k] += gz * h[k];
      dh[k] += gz * u[k];
    }
  }
  const double inv = 1.0 / static_cast<double>(context.size());
  for (TokenId w : context) {
    auto ge = g.E_row(w);
    for (std::size_t k = 0; k < d; ++k) ge[k] += inv * dh[k];
  }
}

void backward(const ModelParams& p, std::span<const TokenId> context, std::span<const double> dlogits, ParamGradients& g) {
  auto h = encode(p, context);
  backward_with_encoding(p, context, h, dlogits, g);
}

ParamGradients backward(const ModelParams& p, std::span<const TokenId> context, std::span<const double> dlogits) {
  ParamGradients g(p.d, p.vocab);
  backward(p, context, dlogits, g);
  return g;
}

OptimizerState make_optimizer_state(const ModelParams& p) {
  return OptimizerState{ModelParams(p.d, p.vocab), ModelParams(p.d, p.vocab), 0};
}

namespace {

void check_update(const ModelParams& p, const ParamGradients& g, double lr) {
  require(lr > 0.0, ErrorCode::InvalidArgument, "learning rate must be > 0");
  require(g.d == p.d && g.vocab == p.vocab, ErrorCode::InvalidArgument, "gradient shape mismatch");
  require(g.all_finite(), ErrorCode::NumericAbort, "non-finite gradient");
}

}  // namespace

void sgd_step(ModelParams& p, const ParamGradients& g, double lr) {
  check_update(p, g, lr);
  p.add_scaled(g, -lr);
}

void adam_step(ModelParams& p, const ParamGradients& g, OptimizerState& s, double lr, const AdamConfig& cfg) {
  check_update(p, g, lr);
  ++s.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(s.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(s.step));
  const std::size_t n = p.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double gi = g.at(i);
    double& m = s.m.at(i);
    double& v = s.v.at(i);
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * gi;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * gi * gi;
    p.at(i) -= lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
  }
}

namespace {

constexpr char kMagic[8] = {'M', 'S', 'L', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  require(static_cast<bool>(is), ErrorCode::Io, "truncated checkpoint");
  return v;
}

void put_vec(std::ostream& os, const std::vector<double>& v) {
  os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void get_vec(std::istream& is, std::vector<double>& v) {
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  require(static_cast<bool>(is), ErrorCode::Io, "truncated checkpoint");
}

void put_params(std::ostream& os, const ModelParams& p) {
  put_vec(os, p.E);
  put_vec(os, p.U);
  put_vec(os, p.b);
}

void get_params(std::istream& is, ModelParams& p) {
  get_vec(is, p.E);
  get_vec(is, p.U);
  get_vec(is, p.b);
}

}  // namespace

void save_checkpoint(std::ostream& os, const ModelParams& p, const OptimizerState& s) {
  os.write(kMagic, sizeof(kMagic));
  put(os, kVersion);
  put(os, static_cast<std::int32_t>(p.d));
  put(os, static_cast<std::int32_t>(p.vocab));
  put(os, static_cast<std::int64_t>(s.step));
  put_params(os, p);
  put_params(os, s.m);
  put_params(os, s.v);
  require(static_cast<bool>(os), ErrorCode::Io, "failed writing checkpoint");
}

void load_checkpoint(std::istream& is, ModelParams& p, OptimizerState& s) {
  char magic[8];
  is.read(magic, sizeof(magic));
  require(static_cast<bool>(is) && std::memcmp(magic, kMagic, sizeof(kMagic)) == 0, ErrorCode::Io, "not a checkpoint file");
  auto version = get<std::uint32_t>(is);
  require(version == kVersion, ErrorCode::Io, "unsupported checkpoint version " + std::to_string(version));
  auto d = get<std::int32_t>(is);
  auto vocab = get<std::int32_t>(is);
  require(d >= 1 && vocab >= 1, ErrorCode::Io, "corrupt checkpoint header");
  auto step = get<std::int64_t>(is);
  p = ModelParams(d, vocab);
  s = make_optimizer_state(p);
  s.step = step;
  get_params(is, p);
  get_params(is, s.m);
  get_params(is, s.v);
}

void save_checkpoint_file(const std::string& path, const ModelParams& p, const OptimizerState& s) {
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorCode::Io, "cannot open " + path);
  save_checkpoint(os, p, s);
}

void load_checkpoint_file(const std::string& path, ModelParams& p, OptimizerState& s) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorCode::Io, "cannot open " + path);
  load_checkpoint(is, p, s);
}

}  // namespace msl
