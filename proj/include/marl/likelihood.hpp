#pragma once

// Gaussian transition likelihoods of the reverse diffusion chain, the
// trajectory importance ratio, and the Taylor surrogate of the KL penalty.

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "marl/errors.hpp"
#include "marl/schedule.hpp"
#include "marl/tensor.hpp"

namespace marl {

/// Mean and variance of p(x_{t-1} | x_t, x0_hat).
struct StepPosterior {
  std::vector<double> mu;
  double sigma2 = 0.0;
  std::size_t t = 0;
};

/// Log-density of an isotropic D-dimensional Gaussian:
/// -1/2 (|x - mu|^2 / sigma2 + D log(2 pi sigma2)).
inline double step_logprob(std::span<const double> x_prev, const StepPosterior& post) {
  if (!(post.sigma2 > 0.0)) {
    throw DomainError("step_logprob: variance must be positive (t=" + std::to_string(post.t) + ")");
  }
  if (x_prev.size() != post.mu.size()) throw DimensionError("step_logprob: dimension mismatch");
  double sq = 0.0;
  for (std::size_t i = 0; i < x_prev.size(); ++i) sq += (x_prev[i] - post.mu[i]) * (x_prev[i] - post.mu[i]);
  const double D = static_cast<double>(x_prev.size());
  return -0.5 * (sq / post.sigma2 + D * std::log(2.0 * std::numbers::pi * post.sigma2));
}

/// x0_hat = (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t), clamped to
/// [-clamp, clamp], followed by the DDPM posterior mean and variance.
inline StepPosterior posterior_from_eps(std::span<const double> x_t, std::span<const double> eps_hat, std::size_t t,
                                        const NoiseSchedule& sched, double clamp_bound = 4.0) {
  sched.check_step(t);
  if (x_t.size() != eps_hat.size()) throw DimensionError("posterior_from_eps: dimension mismatch");
  const double sa = std::sqrt(sched.alpha_bar[t]);
  const double sn = std::sqrt(1.0 - sched.alpha_bar[t]);
  StepPosterior p;
  p.t = t;
  p.sigma2 = sched.posterior_variance[t];
  p.mu.resize(x_t.size());
  for (std::size_t i = 0; i < x_t.size(); ++i) {
    const double x0 = std::clamp((x_t[i] - sn * eps_hat[i]) / sa, -clamp_bound, clamp_bound);
    p.mu[i] = sched.coef_x0[t] * x0 + sched.coef_xt[t] * x_t[i];
  }
  return p;
}

/// Row-wise posterior mean for a batch: x_t and eps_hat are m x D, `ts`
/// gives the timestep of each row. Differentiable in eps_hat.
inline Tensor posterior_mean(const NoiseSchedule& sched, const Tensor& x_t, const Tensor& eps_hat,
                             const std::vector<std::size_t>& ts, double clamp_bound) {
  const std::size_t m = x_t.rows();
  if (ts.size() != m || eps_hat.rows() != m) throw DimensionError("posterior_mean: row mismatch");
  std::vector<double> sn(m), inv_sa(m), c0(m), ct(m);
  for (std::size_t r = 0; r < m; ++r) {
    sched.check_step(ts[r]);
    sn[r] = std::sqrt(1.0 - sched.alpha_bar[ts[r]]);
    inv_sa[r] = 1.0 / std::sqrt(sched.alpha_bar[ts[r]]);
    c0[r] = sched.coef_x0[ts[r]];
    ct[r] = sched.coef_xt[ts[r]];
  }
  const Tensor sn_t({m, 1}, sn), inv_sa_t({m, 1}, inv_sa), c0_t({m, 1}, c0), ct_t({m, 1}, ct);
  const Tensor x0 = clamp((x_t - eps_hat * sn_t) * inv_sa_t, -clamp_bound, clamp_bound);
  return x0 * c0_t + x_t * ct_t;
}

/// Per-row Gaussian log-density of x_prev under N(mu, sigma2 I); returns a
/// vector of m values. Rows must have sigma2 > 0.
inline Tensor step_logprob_rows(const Tensor& x_prev, const Tensor& mu, const std::vector<double>& sigma2) {
  const std::size_t m = x_prev.rows();
  if (sigma2.size() != m || mu.rows() != m || mu.cols() != x_prev.cols()) {
    throw DimensionError("step_logprob_rows: shape mismatch");
  }
  const double D = static_cast<double>(x_prev.cols());
  std::vector<double> inv(m), norm(m);
  for (std::size_t r = 0; r < m; ++r) {
    if (!(sigma2[r] > 0.0)) throw DomainError("step_logprob: variance must be positive");
    inv[r] = 1.0 / sigma2[r];
    norm[r] = D * std::log(2.0 * std::numbers::pi * sigma2[r]);
  }
  const Tensor sq = sum(square(x_prev - mu), 1);
  return (sq * Tensor({m}, inv) + Tensor({m}, norm)) * -0.5;
}

inline constexpr double kRatioExponentLimit = 20.0;

struct RatioResult {
  double ratio = 1.0;
  bool clamped = false;  // exponent hit +/- kRatioExponentLimit
};

/// r = exp(sum_t (logp_new_t - logp_old_t)) over one index set.
inline RatioResult importance_ratio(std::span<const double> logp_new, std::span<const double> logp_old) {
  if (logp_new.size() != logp_old.size()) {
    throw DimensionError("importance_ratio: index sets differ (" + std::to_string(logp_new.size()) + " vs " +
                         std::to_string(logp_old.size()) + ")");
  }
  double e = 0.0;
  for (std::size_t i = 0; i < logp_new.size(); ++i) e += logp_new[i] - logp_old[i];
  RatioResult r;
  if (e > kRatioExponentLimit || e < -kRatioExponentLimit) {
    r.clamped = true;
    e = std::clamp(e, -kRatioExponentLimit, kRatioExponentLimit);
  }
  r.ratio = std::exp(e);
  return r;
}

/// Taylor KL surrogate over T' selected steps: mu tables are T' x D (row
/// major). Each step contributes the mean over dimensions of
/// exp(d) - d - 1 with d = mu_ref - mu_theta.
inline double kl_surrogate(std::span<const double> mu_theta, std::span<const double> mu_ref, std::size_t steps) {
  if (mu_theta.size() != mu_ref.size()) throw DimensionError("kl_surrogate: table size mismatch");
  if (steps == 0 || mu_theta.size() % steps != 0) throw DimensionError("kl_surrogate: tables not divisible into steps");
  const std::size_t D = mu_theta.size() / steps;
  double total = 0.0;
  for (std::size_t t = 0; t < steps; ++t) {
    double s = 0.0;
    for (std::size_t i = 0; i < D; ++i) {
      const double d = mu_ref[t * D + i] - mu_theta[t * D + i];
      s += std::exp(d) - d - 1.0;
    }
    total += s / static_cast<double>(D);
  }
  return total / static_cast<double>(steps);
}

/// Differentiable surrogate averaged over every entry of the tables.
inline Tensor kl_surrogate(const Tensor& mu_theta, const Tensor& mu_ref) {
  if (mu_theta.shape() != mu_ref.shape()) {
    throw DimensionError("kl_surrogate: shapes " + shape_str(mu_theta.shape()) + " and " +
                         shape_str(mu_ref.shape()) + " differ");
  }
  const Tensor d = mu_ref - mu_theta;
  return mean(exp(d) - d - 1.0);
}

}  // namespace marl
