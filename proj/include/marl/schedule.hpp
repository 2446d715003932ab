#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "marl/errors.hpp"
#include "marl/rng.hpp"

namespace marl {

/// DDPM constants for t = 1..T. Index 0 holds the t = 0 boundary values
/// (alpha_bar = 1), so every table is indexed directly by timestep.
struct NoiseSchedule {
  std::size_t steps = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
  std::vector<double> posterior_variance;  // zero at t = 1
  std::vector<double> coef_x0;             // posterior mean = coef_x0 * x0_hat + coef_xt * x_t
  std::vector<double> coef_xt;

  /// Linear beta from 1e-4*s to 0.02*s with s = min(1000/T, 30). The cap
  /// keeps every beta below 0.6 for short chains; for T >= 34 it is the
  /// plain 1000/T rescaling.
  static NoiseSchedule linear(std::size_t T) {
    if (T == 0) throw ConfigError("noise schedule needs at least one diffusion step");
    NoiseSchedule s;
    s.steps = T;
    const double scale = std::min(1000.0 / static_cast<double>(T), 30.0);
    const double lo = 1e-4 * scale, hi = 0.02 * scale;
    s.beta.assign(T + 1, 0.0);
    s.alpha.assign(T + 1, 1.0);
    s.alpha_bar.assign(T + 1, 1.0);
    s.posterior_variance.assign(T + 1, 0.0);
    s.coef_x0.assign(T + 1, 1.0);
    s.coef_xt.assign(T + 1, 0.0);
    for (std::size_t t = 1; t <= T; ++t) {
      const double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(T - 1);
      s.beta[t] = lo + (hi - lo) * frac;
      s.alpha[t] = 1.0 - s.beta[t];
      s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
      const double denom = 1.0 - s.alpha_bar[t];
      s.posterior_variance[t] = s.beta[t] * (1.0 - s.alpha_bar[t - 1]) / denom;
      s.coef_x0[t] = s.beta[t] * std::sqrt(s.alpha_bar[t - 1]) / denom;
      s.coef_xt[t] = (1.0 - s.alpha_bar[t - 1]) * std::sqrt(s.alpha[t]) / denom;
    }
    return s;
  }

  void check_step(std::size_t t) const {
    if (t < 1 || t > steps) {
      throw DomainError("diffusion step " + std::to_string(t) + " outside [1, " + std::to_string(steps) + "]");
    }
  }
};

/// Ordered partition of token indices into K generation steps.
struct MaskSchedule {
  std::vector<std::vector<std::size_t>> steps;  // each sorted ascending
  std::uint64_t seed = 0;

  std::size_t num_steps() const { return steps.size(); }

  std::size_t num_tokens() const {
    std::size_t n = 0;
    for (const auto& s : steps) n += s.size();
    return n;
  }

  /// Tokens still unknown after step k (k = 0..K) under the cosine schedule;
  /// every step receives at least one token.
  static std::vector<std::size_t> remaining_counts(std::size_t n, std::size_t K) {
    if (K == 0 || K > n) {
      throw ConfigError("mask steps must be in [1, n]; got K=" + std::to_string(K) + ", n=" + std::to_string(n));
    }
    std::vector<std::size_t> rem(K + 1, 0);
    rem[0] = n;
    for (std::size_t k = 1; k < K; ++k) {
      const double ratio = std::cos(std::numbers::pi / 2.0 * static_cast<double>(k) / static_cast<double>(K));
      const auto target = static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratio));
      rem[k] = std::min(rem[k - 1] - 1, std::max(K - k, target));
    }
    rem[K] = 0;
    return rem;
  }

  /// Random permutation split by the cosine token-count schedule.
  static MaskSchedule cosine(std::size_t n, std::size_t K, const CounterRng& gen, std::uint64_t stream) {
    const auto rem = remaining_counts(n, K);
    RngStream rng(gen, stream);
    const auto order = rng.permutation(n);
    MaskSchedule ms;
    ms.seed = stream;
    std::size_t pos = 0;
    for (std::size_t k = 1; k <= K; ++k) {
      const std::size_t count = rem[k - 1] - rem[k];
      std::vector<std::size_t> step(order.begin() + static_cast<std::ptrdiff_t>(pos),
                                    order.begin() + static_cast<std::ptrdiff_t>(pos + count));
      std::sort(step.begin(), step.end());
      ms.steps.push_back(std::move(step));
      pos += count;
    }
    return ms;
  }

  /// Throws unless the steps are disjoint and cover 0..n-1.
  void validate(std::size_t n) const {
    std::vector<int> seen(n, 0);
    for (const auto& s : steps)
      for (std::size_t j : s) {
        if (j >= n) throw ConfigError("mask schedule index out of range");
        if (seen[j]++) throw ConfigError("mask schedule steps overlap at token " + std::to_string(j));
      }
    for (std::size_t j = 0; j < n; ++j)
      if (!seen[j]) throw ConfigError("mask schedule leaves token " + std::to_string(j) + " uncovered");
  }

  /// known[j] is true when token j belongs to steps 1..k-1.
  std::vector<bool> known_before(std::size_t k, std::size_t n) const {
    if (k < 1 || k > steps.size() + 1) throw SequencingError("mask step " + std::to_string(k) + " out of range");
    std::vector<bool> known(n, false);
    for (std::size_t s = 0; s + 1 < k; ++s)
      for (std::size_t j : steps[s]) known[j] = true;
    return known;
  }
};

}  // namespace marl
