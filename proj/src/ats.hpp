#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "common.hpp"

namespace msl {

// One training token instance as seen by the temperature estimator.
struct TokenInstance {
  std::span<const double> logits;
  std::span<const TokenId> valid;
  TokenId target = 0;
};

struct AtsStats {
  double mu = 0.0;      // mean of every valid-token logit
  double sigma2 = 0.0;  // population variance of the same
  double m = 1.0;       // mean valid-token count per instance
  double f_pos = 0.0;   // mean target-token logit
  std::size_t sample_count = 0;  // number of valid-token logits seen
};

AtsStats estimate_stats(std::span<const TokenInstance> batch);

enum class RootBranch { Minus, Plus };
const char* branch_name(RootBranch b);
RootBranch parse_branch(const std::string& s);

struct TauBounds {
  double min = 0.05;
  double max = 20.0;
};

struct TemperatureEstimate {
  double tau = 1.0;
  RootBranch branch = RootBranch::Minus;
  bool fallback_applied = false;
  bool clamped = false;
  double quadratic_residual = 0.0;  // at the returned tau
  double discriminant = 0.0;
  // Both roots of log(m eta) tau^2 - (f_pos - mu) tau + sigma2/2 = 0; NaN when complex.
  double root_minus = 0.0;
  double root_plus = 0.0;
};

// Temperature at which the Gaussian-logit model puts masked probability eta on
// the positive token. `fallback_tau` is used when no usable root exists.
TemperatureEstimate solve_tau(double f_pos, double mu, double sigma2, double m, double eta,
                              RootBranch branch = RootBranch::Minus, TauBounds bounds = {}, double fallback_tau = 1.0);

// exp((f_pos - mu)/tau - sigma2/(2 tau^2)) / m
double validate_tau_lognormal(double tau, double f_pos, double mu, double sigma2, double m);

struct MonteCarloEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  std::size_t trials = 0;
};

// Mean masked probability of f_pos against m_int - 1 negatives drawn from N(mu, sigma2).
MonteCarloEstimate validate_tau_montecarlo(double tau, double mu, double sigma2, int m_int, double f_pos,
                                           std::size_t n_samples, std::uint64_t seed);

struct GaussianFit {
  double mu = 0.0;
  double sigma2 = 0.0;
  double skewness = 0.0;
  double excess_kurtosis = 0.0;
  double lo = 0.0;
  double bin_width = 0.0;
  std::vector<std::size_t> counts;
  std::vector<double> centers;
  std::vector<double> density;    // empirical, normalized to integrate to 1
  std::vector<double> gaussian;   // N(mu, sigma2) pdf at the centers
};

GaussianFit gaussian_fit_report(std::span<const double> sample, int bins = 50);

struct AtsConfig {
  double eta = 0.25;
  double smoothing = 0.1;  // EMA factor; 1 keeps only the current batch
  TauBounds bounds;
  RootBranch branch = RootBranch::Minus;
};

// Per-step global temperature: EMA-smoothed batch moments, fixed corpus AVT.
class AtsSchedule {
 public:
  AtsSchedule(AtsConfig cfg, double corpus_avt);

  TemperatureEstimate step(const AtsStats& batch);

  double current_tau() const { return tau_; }
  std::size_t fallbacks() const { return fallbacks_; }
  const AtsConfig& config() const { return cfg_; }

 private:
  AtsConfig cfg_;
  double m_;
  bool primed_ = false;
  double mu_ = 0.0, sigma2_ = 0.0, f_pos_ = 0.0;
  double tau_ = 1.0;
  std::size_t fallbacks_ = 0;
};

}  // namespace msl
