#pragma once

#include <span>
#include <vector>

#include "common.hpp"
#include "token_trie.hpp"

namespace msl {

// Token-level softmax losses over one logits row. Masked kernels touch only
// the listed valid ids, never the full row. `valid` must be ascending.

// log sum_{z in ids} exp(f(z)/tau), max-shifted.
double log_sum_exp(std::span<const double> logits, std::span<const TokenId> ids, double tau = 1.0);
double log_sum_exp(std::span<const double> logits, double tau = 1.0);

// Dense probability vector: softmax of f/tau over `valid`, zero elsewhere.
std::vector<double> masked_softmax(std::span<const double> logits, std::span<const TokenId> valid, double tau = 1.0);

// -log softmax over the full vocabulary at `target`.
double lml_token(std::span<const double> logits, TokenId target);

struct LmlSplit {
  double l1 = 0.0;  // -log(sum_valid e^f / sum_Z e^f)
  double l2 = 0.0;  // -log(e^f(target) / sum_valid e^f)
};
LmlSplit decompose_token(std::span<const double> logits, std::span<const TokenId> valid, TokenId target);

// -tau * log( e^{f_y/tau} / (e^{f_y/tau} + alpha * sum_{z in valid, z != y} e^{f_z/tau}) )
double msl_token(std::span<const double> logits, std::span<const TokenId> valid, TokenId target, double tau = 1.0,
                 double alpha = 1.0);

// 1 - P(target) under softmax(f/tau) restricted to `valid`.
double token_weight(std::span<const double> logits, std::span<const TokenId> valid, TokenId target, double tau = 1.0);
// Same over the full vocabulary.
double token_weight_full(std::span<const double> logits, TokenId target, double tau = 1.0);

// dL/df for msl_token; zero outside `valid`. `out` has one entry per vocabulary token.
void msl_grad(std::span<const double> logits, std::span<const TokenId> valid, TokenId target, double tau, double alpha,
              std::span<double> out);
// dL/df for the full-vocabulary loss at temperature tau (tau=1 is lml_token).
void lml_grad(std::span<const double> logits, TokenId target, double tau, std::span<double> out);
// dL1/df: softmax_Z(f) - 1[z in valid] * softmax_valid(f).
void l1_grad(std::span<const double> logits, std::span<const TokenId> valid, std::span<double> out);

std::vector<double> msl_grad(std::span<const double> logits, std::span<const TokenId> valid, TokenId target,
                             double tau = 1.0, double alpha = 1.0);

// alpha of the "MSL + alpha" ablation: |Z| / |Z_valid|.
double negative_coefficient(std::size_t vocab_size, std::size_t valid_count);

// Sequence-level forms: one logits row per response token.
using LogitsSeq = std::vector<std::vector<double>>;

std::vector<double> lml_loss(const LogitsSeq& logits, std::span<const TokenId> target);
std::vector<LmlSplit> decompose_lml(const LogitsSeq& logits, std::span<const TokenId> target, const ValidMask& mask);
std::vector<double> msl_loss(const LogitsSeq& logits, std::span<const TokenId> target, const ValidMask& mask,
                             double tau = 1.0, bool alpha_variant = false);

struct TokenLoss {
  double lml = 0.0;
  double l1 = 0.0;
  double l2 = 0.0;
  double msl = 0.0;
  double weight_lml = 0.0;
  double weight_msl = 0.0;
  std::size_t valid_count = 0;
  double tau = 1.0;
};

struct LossBreakdown {
  std::vector<TokenLoss> tokens;
  TokenLoss sum{.tau = 0.0};  // valid_count holds the total
  TokenLoss mean;  // valid_count holds the rounded-down mean

  void add(const TokenLoss& t);
  void finalize();
};

// Weights are evaluated at `tau` for both supports.
LossBreakdown loss_breakdown(const LogitsSeq& logits, std::span<const TokenId> target, const ValidMask& mask,
                             double tau = 1.0, bool alpha_variant = false);

}  // namespace msl
