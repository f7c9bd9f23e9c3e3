#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "common.hpp"

namespace msl {

// Mean-of-embeddings autoregressive scorer:
//   h = mean_{w in context} E[w],   f(z) = U[z] . h + b[z].
// The encoder ignores token order; all gradients are closed-form.
struct ModelParams {
  int d = 0;
  int vocab = 0;
  std::vector<double> E;  // vocab x d, row-major
  std::vector<double> U;  // vocab x d, row-major
  std::vector<double> b;  // vocab

  ModelParams() = default;
  ModelParams(int d, int vocab);

  std::span<double> E_row(TokenId z) { return {E.data() + static_cast<std::size_t>(z) * d, static_cast<std::size_t>(d)}; }
  std::span<const double> E_row(TokenId z) const { return {E.data() + static_cast<std::size_t>(z) * d, static_cast<std::size_t>(d)}; }
  std::span<double> U_row(TokenId z) { return {U.data() + static_cast<std::size_t>(z) * d, static_cast<std::size_t>(d)}; }
  std::span<const double> U_row(TokenId z) const { return {U.data() + static_cast<std::size_t>(z) * d, static_cast<std::size_t>(d)}; }

  std::size_t size() const { return E.size() + U.size() + b.size(); }
  // Flat view order: E, U, b.
  double& at(std::size_t i);
  double at(std::size_t i) const;

  void set_zero();
  void scale(double s);
  void add_scaled(const ModelParams& other, double scale);
  double squared_norm() const;
  bool all_finite() const;
};

using ParamGradients = ModelParams;

ModelParams init_params(std::uint64_t seed, int d, int vocab_size, double scale);

// Context encoding h, shared by forward/backward.
std::vector<double> encode(const ModelParams& p, std::span<const TokenId> context);

struct LogitsRow {
  std::vector<double> values;
  std::size_t context_len = 0;
};

LogitsRow forward(const ModelParams& p, std::span<const TokenId> context);
// Logits of the listed tokens only, from a precomputed encoding.
void logits_subset(const ModelParams& p, std::span<const double> h, std::span<const TokenId> ids, std::span<double> out);
void logits_full(const ModelParams& p, std::span<const double> h, std::span<double> out);

// Accumulates dL/dtheta for dL/dlogits into grads (grads must be shaped like p).
void backward(const ModelParams& p, std::span<const TokenId> context, std::span<const double> dlogits, ParamGradients& grads);
// Same, with the encoding h already known.
void backward_with_encoding(const ModelParams& p, std::span<const TokenId> context, std::span<const double> h,
                            std::span<const double> dlogits, ParamGradients& grads);

ParamGradients backward(const ModelParams& p, std::span<const TokenId> context, std::span<const double> dlogits);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  ModelParams m;
  ModelParams v;
  std::int64_t step = 0;
};

OptimizerState make_optimizer_state(const ModelParams& p);

void sgd_step(ModelParams& p, const ParamGradients& g, double lr);
void adam_step(ModelParams& p, const ParamGradients& g, OptimizerState& state, double lr, const AdamConfig& cfg = {});

// Binary checkpoint; see README for the layout.
void save_checkpoint(std::ostream& os, const ModelParams& p, const OptimizerState& state);
void load_checkpoint(std::istream& is, ModelParams& p, OptimizerState& state);
void save_checkpoint_file(const std::string& path, const ModelParams& p, const OptimizerState& state);
void load_checkpoint_file(const std::string& path, ModelParams& p, OptimizerState& state);

}  // namespace msl
