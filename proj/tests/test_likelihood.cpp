#include <cmath>
#include <numbers>
#include <vector>

#include "test_util.hpp"

namespace marl {
namespace {

// Sum of per-coordinate log densities, each taken as log of the density.
double density_oracle(const std::vector<double>& x, const std::vector<double>& mu, double s2) {
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dens = std::exp(-(x[i] - mu[i]) * (x[i] - mu[i]) / (2.0 * s2)) / std::sqrt(2.0 * std::numbers::pi * s2);
    total += std::log(dens);
  }
  return total;
}

TEST(StepLogprob, MatchesDensityOracle) {
  RngStream rng(CounterRng(21), 1);
  for (int c = 0; c < 1000; ++c) {
    const std::size_t D = 1 + rng.below(16);
    const double s2 = 1e-3 + 2.0 * rng.uniform();
    StepPosterior post;
    post.sigma2 = s2;
    post.t = 2;
    std::vector<double> x(D);
    for (std::size_t i = 0; i < D; ++i) {
      post.mu.push_back(3.0 * rng.normal());
      x[i] = post.mu[i] + std::sqrt(s2) * 2.0 * rng.normal();
    }
    const double got = step_logprob(x, post), want = density_oracle(x, post.mu, s2);
    ASSERT_LE(std::abs(got - want), 1e-12 * std::max(1.0, std::abs(want))) << "case " << c;
  }
}

TEST(StepLogprob, OneDimensionalDensityIntegratesToOne) {
  for (const double s2 : {1e-3, 0.05, 1.0}) {
    StepPosterior post{{0.7}, s2, 3};
    const double sd = std::sqrt(s2), lo = 0.7 - 12 * sd, hi = 0.7 + 12 * sd;
    const int N = 20000;
    const double h = (hi - lo) / N;
    double area = 0.0;
    for (int i = 0; i <= N; ++i) {
      const double x = lo + h * i;
      const double w = (i == 0 || i == N) ? 0.5 : 1.0;
      area += w * std::exp(step_logprob(std::vector<double>{x}, post));
    }
    EXPECT_NEAR(area * h, 1.0, 1e-4) << "sigma2 " << s2;
  }
}

TEST(StepLogprob, ZeroVarianceIsDomainError) {
  const auto sched = NoiseSchedule::linear(10);
  StepPosterior post{{0.0, 0.0}, sched.posterior_variance[1], 1};
  EXPECT_THROW(step_logprob(std::vector<double>{0.0, 0.0}, post), DomainError);
  EXPECT_THROW(step_logprob_rows(Tensor({1, 2}), Tensor({1, 2}), {0.0}), DomainError);
}

TEST(StepLogprob, RowsAgreeWithScalarForm) {
  RngStream rng(CounterRng(22), 1);
  const std::size_t m = 5, D = 4;
  std::vector<double> x(m * D), mu(m * D), s2(m);
  for (auto& v : x) v = rng.normal();
  for (auto& v : mu) v = rng.normal();
  for (auto& v : s2) v = 0.1 + rng.uniform();
  const Tensor lp = step_logprob_rows(Tensor({m, D}, x), Tensor({m, D}, mu), s2);
  for (std::size_t r = 0; r < m; ++r) {
    StepPosterior post{std::vector<double>(mu.begin() + r * D, mu.begin() + (r + 1) * D), s2[r], 2};
    EXPECT_NEAR(lp[r], step_logprob(std::span(x).subspan(r * D, D), post), 1e-12);
  }
}

TEST(Posterior, ExactNoiseRecoversCleanSample) {
  const auto sched = NoiseSchedule::linear(10);
  const std::vector<double> x0{0.3, -1.2, 2.0}, eps{0.5, 1.1, -0.4};
  for (std::size_t t = 2; t <= 10; ++t) {
    std::vector<double> xt(3), want(3);
    for (int i = 0; i < 3; ++i) {
      xt[i] = std::sqrt(sched.alpha_bar[t]) * x0[i] + std::sqrt(1 - sched.alpha_bar[t]) * eps[i];
      want[i] = sched.coef_x0[t] * x0[i] + sched.coef_xt[t] * xt[i];
    }
    const auto p = posterior_from_eps(xt, eps, t, sched);
    EXPECT_EQ(p.sigma2, sched.posterior_variance[t]);
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(p.mu[i], want[i], 1e-12);
    const Tensor mu = posterior_mean(sched, Tensor({1, 3}, xt), Tensor({1, 3}, eps), {t}, 4.0);
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(mu[i], p.mu[i], 1e-14);
  }
}

TEST(Posterior, StepOutsideChainIsDomainError) {
  const auto sched = NoiseSchedule::linear(5);
  const std::vector<double> v{0.0};
  EXPECT_THROW(posterior_from_eps(v, v, 0, sched), DomainError);
  EXPECT_THROW(posterior_from_eps(v, v, 6, sched), DomainError);
}

TEST(ImportanceRatio, IdenticalPoliciesGiveOne) {
  const std::vector<double> lp{-3.2, 1.5, 0.25};
  const auto r = importance_ratio(lp, lp);
  EXPECT_EQ(r.ratio, 1.0);
  EXPECT_FALSE(r.clamped);
}

TEST(ImportanceRatio, ExponentOfSummedGapsAndClamp) {
  const std::vector<double> a{0.1, -0.3, 0.7}, b{0.2, 0.1, -0.1};
  EXPECT_NEAR(importance_ratio(a, b).ratio, std::exp(-0.1 - 0.4 + 0.8), 1e-15);
  const auto big = importance_ratio(std::vector<double>{50.0}, std::vector<double>{0.0});
  EXPECT_TRUE(big.clamped);
  EXPECT_EQ(big.ratio, std::exp(kRatioExponentLimit));
  EXPECT_THROW(importance_ratio(a, std::vector<double>{0.0}), DimensionError);
}

TEST(KlSurrogate, ZeroAtReferenceAndPositiveElsewhere) {
  RngStream rng(CounterRng(23), 1);
  std::vector<double> mu(12);
  for (auto& v : mu) v = rng.normal();
  EXPECT_EQ(kl_surrogate(mu, mu, 3), 0.0);
  EXPECT_EQ(kl_surrogate(Tensor({3, 4}, mu), Tensor({3, 4}, mu)).item(), 0.0);
  for (int c = 0; c < 200; ++c) {
    std::vector<double> ref(12);
    for (auto& v : ref) v = rng.normal();
    const double kl = kl_surrogate(mu, ref, 3);
    EXPECT_GT(kl, 0.0);
    double oracle = 0.0;
    for (std::size_t i = 0; i < 12; ++i) {
      const double d = ref[i] - mu[i];
      oracle += (std::exp(d) - d - 1.0) / 12.0;
    }
    EXPECT_NEAR(kl, oracle, 1e-13);
    EXPECT_NEAR(kl_surrogate(Tensor({3, 4}, mu), Tensor({3, 4}, ref)).item(), oracle, 1e-13);
  }
}

TEST(NoiseSchedule, FinalStepIsDeterministic) {
  for (std::size_t T : {1u, 3u, 10u, 50u, 1000u}) {
    const auto s = NoiseSchedule::linear(T);
    EXPECT_EQ(s.posterior_variance[1], 0.0);
    for (std::size_t t = 2; t <= T; ++t) EXPECT_GT(s.posterior_variance[t], 0.0);
  }
}

TEST(NoiseSchedule, TablesMatchClosedForms) {
  const std::size_t T = 10;
  const auto s = NoiseSchedule::linear(T);
  double ab = 1.0;
  for (std::size_t t = 1; t <= T; ++t) {
    const double beta = 3e-3 + (0.6 - 3e-3) * static_cast<double>(t - 1) / 9.0;
    EXPECT_NEAR(s.beta[t], beta, 1e-15);
    const double prev = ab;
    ab *= 1.0 - beta;
    EXPECT_NEAR(s.alpha_bar[t], ab, 1e-15);
    EXPECT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]);
    EXPECT_NEAR(s.posterior_variance[t], beta * (1 - prev) / (1 - ab), 1e-15);
  }
  const auto long_chain = NoiseSchedule::linear(100);
  EXPECT_NEAR(long_chain.beta[1], 1e-3, 1e-15);
  EXPECT_NEAR(long_chain.beta[100], 0.2, 1e-15);
  EXPECT_THROW(NoiseSchedule::linear(0), ConfigError);
}

TEST(MaskSchedule, CountsStrictlyDecrease) {
  for (std::size_t n : {4u, 16u, 64u})
    for (std::size_t K = 1; K <= n; K += (K < 8 ? 1 : 7)) {
      const auto rem = MaskSchedule::remaining_counts(n, K);
      ASSERT_EQ(rem.size(), K + 1);
      EXPECT_EQ(rem.front(), n);
      EXPECT_EQ(rem.back(), 0u);
      for (std::size_t k = 1; k <= K; ++k) EXPECT_LT(rem[k], rem[k - 1]);
    }
  EXPECT_THROW(MaskSchedule::remaining_counts(4, 5), ConfigError);
  EXPECT_THROW(MaskSchedule::remaining_counts(4, 0), ConfigError);
}

TEST(MaskSchedule, CosinePartitionCoversGrid) {
  const CounterRng gen(8);
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto ms = MaskSchedule::cosine(64, 8, gen, s);
    EXPECT_NO_THROW(ms.validate(64));
    ASSERT_EQ(ms.num_steps(), 8u);
    for (const auto& st : ms.steps) {
      EXPECT_FALSE(st.empty());
      EXPECT_TRUE(std::is_sorted(st.begin(), st.end()));
    }
    const auto none = ms.known_before(1, 64), all = ms.known_before(9, 64);
    EXPECT_EQ(std::count(none.begin(), none.end(), true), 0);
    EXPECT_EQ(std::count(all.begin(), all.end(), true), 64);
  }
  auto bad = MaskSchedule::cosine(4, 2, gen, 1);
  bad.steps[1] = bad.steps[0];
  EXPECT_THROW(bad.validate(4), ConfigError);
}

}  // namespace
}  // namespace marl
