#include "losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace msl {

namespace {

void check_tau(double tau) {
  require(tau > 0.0 && std::isfinite(tau), ErrorCode::InvalidArgument, "temperature must be a positive finite number");
}

void check_token(std::span<const double> logits, TokenId z) {
  require(z >= 0 && static_cast<std::size_t>(z) < logits.size(), ErrorCode::InvalidArgument,
          "token id out of range: " + std::to_string(z));
}

bool contains(std::span<const TokenId> valid, TokenId z) { return std::binary_search(valid.begin(), valid.end(), z); }

void check_support(std::span<const double> logits, std::span<const TokenId> valid) {
  require(!valid.empty(), ErrorCode::InvalidArgument, "empty valid-token set");
  for (TokenId z : valid) check_token(logits, z);
}

void check_target(std::span<const TokenId> valid, TokenId target) {
  require(contains(valid, target), ErrorCode::InvalidArgument,
          "target token " + std::to_string(target) + " is not in the valid set");
}

}  // namespace

double log_sum_exp(std::span<const double> logits, std::span<const TokenId> ids, double tau) {
  check_tau(tau);
  check_support(logits, ids);
  double mx = -std::numeric_limits<double>::infinity();
  for (TokenId z : ids) mx = std::max(mx, logits[static_cast<std::size_t>(z)] / tau);
  double acc = 0.0;
  for (TokenId z : ids) acc += std::exp(logits[static_cast<std::size_t>(z)] / tau - mx);
  return mx + std::log(acc);
}

double log_sum_exp(std::span<const double> logits, double tau) {
  check_tau(tau);
  require(!logits.empty(), ErrorCode::InvalidArgument, "empty logits row");
  double mx = -std::numeric_limits<double>::infinity();
  for (double f : logits) mx = std::max(mx, f / tau);
  double acc = 0.0;
  for (double f : logits) acc += std::exp(f / tau - mx);
  return mx + std::log(acc);
}

std::vector<double> masked_softmax(std::span<const double> logits, std::span<const TokenId> valid, double tau) {
  const double lse = log_sum_exp(logits, valid, tau);
  std::vector<double> p(logits.size(), 0.0);
  for (TokenId z : valid) p[static_cast<std::size_t>(z)] = std::exp(logits[static_cast<std::size_t>(z)] / tau - lse);
  return p;
}

double lml_token(std::span<const double> logits, TokenId target) {
  check_token(logits, target);
  return log_sum_exp(logits) - logits[static_cast<std::size_t>(target)];
}

LmlSplit decompose_token(std::span<const double> logits, std::span<const TokenId> valid, TokenId target) {
  check_token(logits, target);
  check_target(valid, target);
  const double lse_all = log_sum_exp(logits);
  const double lse_valid = log_sum_exp(logits, valid);
  return {lse_all - lse_valid, lse_valid - logits[static_cast<std::size_t>(target)]};
}

namespace {

// Log-denominator of the alpha-weighted masked softmax at temperature tau.
double weighted_lse(std::span<const double> logits, std::span<const TokenId> valid, TokenId target, double tau, double alpha) {
  const double log_alpha = std::log(alpha);
  double mx = -std::numeric_limits<double>::infinity();
  auto term = [&](TokenId z) {
    double a = logits[static_cast<std::size_t>(z)] / tau;
    return z == target ? a : a + log_alpha;
  };
  for (TokenId z : valid) mx = std::max(mx, term(z));
  double acc = 0.0;
  for (TokenId z : valid) acc += std::exp(term(z) - mx);
  return mx + std::log(acc);
}

void check_msl_args(std::span<const double> logits, std::span<const TokenId> valid, TokenId target, double tau, double alpha) {
  check_tau(tau);
  require(alpha > 0.0 && std::isfinite(alpha), ErrorCode::InvalidArgument, "alpha must be a positive finite number");
  check_support(logits, valid);
  check_token(logits, target);
  check_target(valid, target);
}

}  // namespace

double msl_token(std::span<const double> logits, std::span<const TokenId> valid, TokenId target, double tau, double alpha) {
  check_msl_args(logits, valid, target, tau, alpha);
  if (valid.size() == 1) return 0.0;
  const double lse = weighted_lse(logits, valid, target, tau, alpha);
  return -tau * (logits[static_cast<std::size_t>(target)] / tau - lse);
}

double token_weight(std::span<const double> logits, std::span<const TokenId> valid, TokenId target, double tau) {
  check_token(logits, target);
  check_target(valid, target);
  const double lse = log_sum_exp(logits, valid, tau);
  // 1 - p computed as -expm1(log p) keeps precision when p is close to 1.
  return -std::expm1(logits[static_cast<std::size_t>(target)] / tau - lse);
}

double token_weight_full(std::span<const double> logits, TokenId target, double tau) {
  check_token(logits, target);
  const double lse = log_sum_exp(logits, tau);
  return -std::expm1(logits[static_cast<std::size_t>(target)] / tau - lse);
}

void msl_grad(std::span<const double> logits, std::span<const TokenId> valid, TokenId target, double tau, double alpha,
              std::span<double> out) {
  check_msl_args(logits, valid, target, tau, alpha);
  require(out.size() == logits.size(), ErrorCode::InvalidArgument, "gradient buffer length mismatch");
  std::fill(out.begin(), out.end(), 0.0);
  const double lse = weighted_lse(logits, valid, target, tau, alpha);
  const double log_alpha = std::log(alpha);
  for (TokenId z : valid) {
    const double a = logits[static_cast<std::size_t>(z)] / tau;
    if (z == target)
      out[static_cast<std::size_t>(z)] = -(-std::expm1(a - lse));
    else
      out[static_cast<std::size_t>(z)] = std::exp(a + log_alpha - lse);
  }
}

std::vector<double> msl_grad(std::span<const double> logits, std::span<const TokenId> valid, TokenId target, double tau,
                             double alpha) {
  std::vector<double> g(logits.size());
  msl_grad(logits, valid, target, tau, alpha, g);
  return g;
}

void lml_grad(std::span<const double> logits, TokenId target, double tau, std::span<double> out) {
  check_token(logits, target);
  require(out.size() == logits.size(), ErrorCode::InvalidArgument, "gradient buffer length mismatch");
  const double lse = log_sum_exp(logits, tau);
  for (std::size_t z = 0; z < logits.size(); ++z) out[z] = std::exp(logits[z] / tau - lse);
  out[static_cast<std::size_t>(target)] = std::expm1(logits[static_cast<std::size_t>(target)] / tau - lse);
}

void l1_grad(std::span<const double> logits, std::span<const TokenId> valid, std::span<double> out) {
  require(out.size() == logits.size(), ErrorCode::InvalidArgument, "gradient buffer length mismatch");
  const double lse_all = log_sum_exp(logits);
  const double lse_valid = log_sum_exp(logits, valid);
  for (std::size_t z = 0; z < logits.size(); ++z) out[z] = std::exp(logits[z] - lse_all);
  for (TokenId z : valid) {
    auto i = static_cast<std::size_t>(z);
    out[i] -= std::exp(logits[i] - lse_valid);
  }
}

double negative_coefficient(std::size_t vocab_size, std::size_t valid_count) {
  require(valid_count >= 1, ErrorCode::InvalidArgument, "empty valid-token set");
  return static_cast<double>(vocab_size) / static_cast<double>(valid_count);
}

namespace {

void check_seq(const LogitsSeq& logits, std::span<const TokenId> target) {
  require(logits.size() == target.size(), ErrorCode::InvalidArgument, "one logits row per response token is required");
}

void check_mask(const ValidMask& mask, std::span<const TokenId> target) {
  require(mask.positions() == target.size(), ErrorCode::InvalidArgument, "mask is not aligned with the target");
}

}  // namespace

std::vector<double> lml_loss(const LogitsSeq& logits, std::span<const TokenId> target) {
  check_seq(logits, target);
  std::vector<double> out;
  for (std::size_t t = 0; t < target.size(); ++t) out.push_back(lml_token(logits[t], target[t]));
  return out;
}

std::vector<LmlSplit> decompose_lml(const LogitsSeq& logits, std::span<const TokenId> target, const ValidMask& mask) {
  check_seq(logits, target);
  check_mask(mask, target);
  std::vector<LmlSplit> out;
  for (std::size_t t = 0; t < target.size(); ++t) out.push_back(decompose_token(logits[t], mask.valid[t], target[t]));
  return out;
}

std::vector<double> msl_loss(const LogitsSeq& logits, std::span<const TokenId> target, const ValidMask& mask, double tau,
                             bool alpha_variant) {
  check_seq(logits, target);
  check_mask(mask, target);
  std::vector<double> out;
  for (std::size_t t = 0; t < target.size(); ++t) {
    double alpha = alpha_variant ? negative_coefficient(logits[t].size(), mask.valid[t].size()) : 1.0;
    out.push_back(msl_token(logits[t], mask.valid[t], target[t], tau, alpha));
  }
  return out;
}

void LossBreakdown::add(const TokenLoss& t) {
  tokens.push_back(t);
  sum.lml += t.lml;
  sum.l1 += t.l1;
  sum.l2 += t.l2;
  sum.msl += t.msl;
  sum.weight_lml += t.weight_lml;
  sum.weight_msl += t.weight_msl;
  sum.valid_count += t.valid_count;
  sum.tau += t.tau;
}

void LossBreakdown::finalize() {
  if (tokens.empty()) return;
  const double n = static_cast<double>(tokens.size());
  mean.lml = sum.lml / n;
  mean.l1 = sum.l1 / n;
  mean.l2 = sum.l2 / n;
  mean.msl = sum.msl / n;
  mean.weight_lml = sum.weight_lml / n;
  mean.weight_msl = sum.weight_msl / n;
  mean.valid_count = sum.valid_count / tokens.size();
  mean.tau = sum.tau / n;
}

LossBreakdown loss_breakdown(const LogitsSeq& logits, std::span<const TokenId> target, const ValidMask& mask, double tau,
                             bool alpha_variant) {
  check_seq(logits, target);
  check_mask(mask, target);
  LossBreakdown out;
  for (std::size_t t = 0; t < target.size(); ++t) {
    const auto& row = logits[t];
    const auto& valid = mask.valid[t];
    TokenLoss tl;
    auto split = decompose_token(row, valid, target[t]);
    tl.l1 = split.l1;
    tl.l2 = split.l2;
    tl.lml = lml_token(row, target[t]);
    double alpha = alpha_variant ? negative_coefficient(row.size(), valid.size()) : 1.0;
    tl.msl = msl_token(row, valid, target[t], tau, alpha);
    tl.weight_lml = token_weight_full(row, target[t], tau);
    tl.weight_msl = token_weight(row, valid, target[t], tau);
    tl.valid_count = valid.size();
    tl.tau = tau;
    out.add(tl);
  }
  out.finalize();
  return out;
}

}  // namespace msl
