#include "ats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "losses.hpp"

namespace msl {

AtsStats estimate_stats(std::span<const TokenInstance> batch) {
  require(!batch.empty(), ErrorCode::InvalidArgument, "empty batch");
  // Welford accumulation over all valid-token logits.
  double mean = 0.0, m2 = 0.0;
  std::size_t n = 0, count_sum = 0;
  double pos_sum = 0.0;
  for (const auto& inst : batch) {
    for (TokenId z : inst.valid) {
      require(z >= 0 && static_cast<std::size_t>(z) < inst.logits.size(), ErrorCode::InvalidArgument, "valid id out of range");
      const double x = inst.logits[static_cast<std::size_t>(z)];
      ++n;
      const double delta = x - mean;
      mean += delta / static_cast<double>(n);
      m2 += delta * (x - mean);
    }
    count_sum += inst.valid.size();
    require(inst.target >= 0 && static_cast<std::size_t>(inst.target) < inst.logits.size(), ErrorCode::InvalidArgument,
            "target id out of range");
    pos_sum += inst.logits[static_cast<std::size_t>(inst.target)];
  }
  require(n > 0, ErrorCode::InvalidArgument, "batch has no valid tokens");
  AtsStats s;
  s.mu = mean;
  s.sigma2 = std::max(0.0, m2 / static_cast<double>(n));
  s.m = static_cast<double>(count_sum) / static_cast<double>(batch.size());
  s.f_pos = pos_sum / static_cast<double>(batch.size());
  s.sample_count = n;
  return s;
}

const char* branch_name(RootBranch b) { return b == RootBranch::Minus ? "minus" : "plus"; }

RootBranch parse_branch(const std::string& s) {
  if (s == "minus") return RootBranch::Minus;
  if (s == "plus") return RootBranch::Plus;
  fail(ErrorCode::InvalidArgument, "unknown root branch '" + s + "'");
}

TemperatureEstimate solve_tau(double f_pos, double mu, double sigma2, double m, double eta, RootBranch branch,
                              TauBounds bounds, double fallback_tau) {
  require(eta > 0.0 && eta < 1.0, ErrorCode::InvalidArgument, "eta must lie in (0,1)");
  require(m >= 1.0, ErrorCode::InvalidArgument, "valid-token count must be >= 1");
  require(sigma2 >= 0.0, ErrorCode::InvalidArgument, "variance must be >= 0");
  require(bounds.min > 0.0 && bounds.max > bounds.min, ErrorCode::InvalidArgument, "invalid temperature bounds");

  const double a = std::log(m * eta);  // quadratic coefficient
  const double gap = f_pos - mu;
  const double c = 0.5 * sigma2;
  auto residual = [&](double t) { return a * t * t - gap * t + c; };

  TemperatureEstimate est;
  est.branch = branch;
  est.discriminant = gap * gap - 2.0 * sigma2 * a;
  est.root_minus = est.root_plus = std::numeric_limits<double>::quiet_NaN();

  auto fallback = [&](double t) {
    est.fallback_applied = true;
    est.tau = std::clamp(t, bounds.min, bounds.max);
    est.clamped = est.tau != t;
    est.quadratic_residual = residual(est.tau);
    return est;
  };

  if (est.discriminant < 0.0 || std::abs(a) < 1e-12) return fallback(fallback_tau);

  // (gap -/+ sqrt(D)) / 2a, each evaluated in the form free of cancellation.
  const double sq = std::sqrt(est.discriminant);
  if (gap >= 0.0) {
    const double s = gap + sq;
    est.root_plus = s / (2.0 * a);
    est.root_minus = s > 0.0 ? sigma2 / s : 0.0;
  } else {
    const double s = gap - sq;
    est.root_minus = s / (2.0 * a);
    est.root_plus = sigma2 / s;
  }

  const double root = branch == RootBranch::Minus ? est.root_minus : est.root_plus;
  if (!std::isfinite(root)) return fallback(fallback_tau);
  if (root <= 0.0) return fallback(bounds.min);
  est.tau = std::clamp(root, bounds.min, bounds.max);
  est.clamped = est.tau != root;
  est.quadratic_residual = residual(est.tau);
  return est;
}

double validate_tau_lognormal(double tau, double f_pos, double mu, double sigma2, double m) {
  require(tau > 0.0, ErrorCode::InvalidArgument, "temperature must be > 0");
  return std::exp((f_pos - mu) / tau - sigma2 / (2.0 * tau * tau)) / m;
}

MonteCarloEstimate validate_tau_montecarlo(double tau, double mu, double sigma2, int m_int, double f_pos,
                                           std::size_t n_samples, std::uint64_t seed) {
  require(tau > 0.0, ErrorCode::InvalidArgument, "temperature must be > 0");
  require(m_int >= 2, ErrorCode::InvalidArgument, "need at least one negative token");
  require(n_samples >= 1, ErrorCode::InvalidArgument, "need at least one trial");
  Rng rng(seed);
  std::normal_distribution<double> normal(mu, std::sqrt(sigma2));
  std::vector<double> logits(static_cast<std::size_t>(m_int));
  std::vector<TokenId> all(static_cast<std::size_t>(m_int));
  for (int i = 0; i < m_int; ++i) all[static_cast<std::size_t>(i)] = i;
  double mean = 0.0, m2 = 0.0;
  for (std::size_t trial = 1; trial <= n_samples; ++trial) {
    logits[0] = f_pos;
    for (int i = 1; i < m_int; ++i) logits[static_cast<std::size_t>(i)] = sigma2 > 0.0 ? normal(rng) : mu;
    const double p = 1.0 - token_weight(logits, all, 0, tau);
    const double delta = p - mean;
    mean += delta / static_cast<double>(trial);
    m2 += delta * (p - mean);
  }
  MonteCarloEstimate out;
  out.mean = mean;
  out.trials = n_samples;
  out.std_error = n_samples > 1 ? std::sqrt(m2 / static_cast<double>(n_samples - 1) / static_cast<double>(n_samples)) : 0.0;
  return out;
}

GaussianFit gaussian_fit_report(std::span<const double> sample, int bins) {
  require(sample.size() >= 100, ErrorCode::InvalidArgument, "gaussian fit needs at least 100 values");
  require(bins >= 1, ErrorCode::InvalidArgument, "bins must be >= 1");
  GaussianFit fit;
  const double n = static_cast<double>(sample.size());
  double sum = 0.0;
  for (double x : sample) sum += x;
  fit.mu = sum / n;
  double c2 = 0.0, c3 = 0.0, c4 = 0.0;
  for (double x : sample) {
    const double d = x - fit.mu;
    c2 += d * d;
    c3 += d * d * d;
    c4 += d * d * d * d;
  }
  c2 /= n;
  c3 /= n;
  c4 /= n;
  fit.sigma2 = c2;
  if (c2 > 0.0) {
    fit.skewness = c3 / std::pow(c2, 1.5);
    fit.excess_kurtosis = c4 / (c2 * c2) - 3.0;
  }

  const auto [lo_it, hi_it] = std::minmax_element(sample.begin(), sample.end());
  const double lo = *lo_it, hi = *hi_it;
  if (hi == lo) bins = 1;
  fit.lo = lo;
  fit.bin_width = hi == lo ? 0.0 : (hi - lo) / bins;
  fit.counts.assign(static_cast<std::size_t>(bins), 0);
  for (double x : sample) {
    std::size_t k = 0;
    if (fit.bin_width > 0.0)
      k = std::min(static_cast<std::size_t>((x - lo) / fit.bin_width), static_cast<std::size_t>(bins - 1));
    ++fit.counts[k];
  }
  const double sd = std::sqrt(fit.sigma2);
  for (int k = 0; k < bins; ++k) {
    const double center = lo + (k + 0.5) * fit.bin_width;
    fit.centers.push_back(center);
    const double cnt = static_cast<double>(fit.counts[static_cast<std::size_t>(k)]);
    fit.density.push_back(fit.bin_width > 0.0 ? cnt / (n * fit.bin_width) : 0.0);
    double g = 0.0;
    if (sd > 0.0) {
      const double z = (center - fit.mu) / sd;
      g = std::exp(-0.5 * z * z) / (sd * std::sqrt(2.0 * std::numbers::pi));
    }
    fit.gaussian.push_back(g);
  }
  return fit;
}

AtsSchedule::AtsSchedule(AtsConfig cfg, double corpus_avt) : cfg_(cfg), m_(corpus_avt) {
  require(cfg_.smoothing > 0.0 && cfg_.smoothing <= 1.0, ErrorCode::InvalidArgument, "smoothing must lie in (0,1]");
  require(cfg_.eta > 0.0 && cfg_.eta < 1.0, ErrorCode::InvalidArgument, "eta must lie in (0,1)");
  require(corpus_avt >= 1.0, ErrorCode::InvalidArgument, "corpus AVT must be >= 1");
}

TemperatureEstimate AtsSchedule::step(const AtsStats& batch) {
  const double s = primed_ ? cfg_.smoothing : 1.0;
  mu_ = s * batch.mu + (1.0 - s) * mu_;
  sigma2_ = s * batch.sigma2 + (1.0 - s) * sigma2_;
  f_pos_ = s * batch.f_pos + (1.0 - s) * f_pos_;
  primed_ = true;
  auto est = solve_tau(f_pos_, mu_, sigma2_, m_, cfg_.eta, cfg_.branch, cfg_.bounds, tau_);
  if (est.fallback_applied) ++fallbacks_;
  tau_ = est.tau;
  return est;
}

}  // namespace msl
