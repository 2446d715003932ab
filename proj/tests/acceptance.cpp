// Acceptance run: one PASS/FAIL line per criterion, tolerances fixed below.
//
//   marl_acceptance [--work-dir DIR] [--only 1,2,...] [--strict] [--report FILE]
//
// Exit status: 0 when every selected criterion was evaluated, whatever the
// outcome; 1 under --strict if any failed; 2 if a criterion could not run.

#include <fcntl.h>
#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdarg>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <numbers>
#include <set>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "marl.hpp"

extern char** environ;

namespace {

using namespace marl;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

// Tolerances and budgets.
constexpr double kLikelihoodTol = 1e-12;      // |a - b| <= tol * max(1, |b|)
constexpr double kIntegralTol = 1e-4;
constexpr double kLikelihoodBudget = 10.0;    // seconds
constexpr double kGradTol = 1e-5;
constexpr double kGradBudget = 60.0;
constexpr double kReductionTol = 1e-12;
constexpr double kIdentityTol = 1e-12;
constexpr double kVarianceTarget = 0.20;      // reported, not gated
constexpr double kVarianceBudget = 600.0;
constexpr double kStabilityBudget = 1800.0;
constexpr double kLearningBudget = 1800.0;
constexpr double kStdMultiple = 3.0;
constexpr std::size_t kLikelihoodCases = 1000;
constexpr std::size_t kMaskCases = 500;
constexpr std::size_t kVarianceRepeats = 20;
constexpr std::size_t kEvalSeedsForStd = 8;
const std::vector<std::uint64_t> kSeeds{1, 2, 3};

struct Outcome {
  bool pass = false;
  std::string summary;
};

// Optional copy of the detail and verdict lines (--report).
std::FILE* g_report = nullptr;

void report_line(const char* fmt, ...) __attribute__((format(printf, 1, 2)));
void report_line(const char* fmt, ...) {
  va_list ap, copy;
  va_start(ap, fmt);
  va_copy(copy, ap);
  std::vprintf(fmt, ap);
  std::printf("\n");
  std::fflush(stdout);
  if (g_report) {
    std::vfprintf(g_report, fmt, copy);
    std::fprintf(g_report, "\n");
    std::fflush(g_report);
  }
  va_end(copy);
  va_end(ap);
}

void detail_line(const char* fmt, ...) __attribute__((format(printf, 1, 2)));
void detail_line(const char* fmt, ...) {
  char buf[1024];
  va_list ap;
  va_start(ap, fmt);
  std::vsnprintf(buf, sizeof buf, fmt, ap);
  va_end(ap);
  report_line("    %s", buf);
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double a) {
  char buf[96];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

struct Env {
  fs::path work;
  fs::path source = MARL_SOURCE_DIR;
  fs::path cli = MARL_CLI_PATH;

  TrainConfig config(const std::string& run) const {
    TrainConfig c;
    c.base_checkpoint = (source / "data" / "pretrained.ckpt").string();
    c.templates = (source / "data" / "templates.bin").string();
    c.output_dir = (work / run).string();
    return c;
  }

  MarModel base() const { return load_checkpoint(config("").base_checkpoint).model; }
};

// 1 ------------------------------------------------------------------------

double gaussian_log_density_oracle(const std::vector<double>& x, const std::vector<double>& mu, double s2) {
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dens = std::exp(-(x[i] - mu[i]) * (x[i] - mu[i]) / (2.0 * s2)) / std::sqrt(2.0 * std::numbers::pi * s2);
    total += std::log(dens);
  }
  return total;
}

Outcome likelihood(const Env&) {
  const auto t0 = Clock::now();
  RngStream rng(CounterRng(0xACC1), 1);
  double worst = 0.0;
  const auto sched = NoiseSchedule::linear(10);
  for (std::size_t c = 0; c < kLikelihoodCases; ++c) {
    const std::size_t D = 1 + rng.below(16);
    const std::size_t t = 2 + rng.below(9);
    // Alternate schedule variances with arbitrary ones.
    const double s2 = c % 2 ? sched.posterior_variance[t] : 1e-3 + 2.0 * rng.uniform();
    StepPosterior post;
    post.sigma2 = s2;
    post.t = t;
    std::vector<double> x(D);
    for (std::size_t i = 0; i < D; ++i) {
      post.mu.push_back(3.0 * rng.normal());
      x[i] = post.mu[i] + std::sqrt(s2) * 2.0 * rng.normal();
    }
    const double want = gaussian_log_density_oracle(x, post.mu, s2);
    worst = std::max(worst, std::abs(step_logprob(x, post) - want) / std::max(1.0, std::abs(want)));
  }
  double worst_integral = 0.0;
  for (const double s2 : {sched.posterior_variance[2], sched.posterior_variance[10], 1.0}) {
    const StepPosterior post{{0.3}, s2, 2};
    const double sd = std::sqrt(s2), lo = 0.3 - 12 * sd, hi = 0.3 + 12 * sd;
    const int N = 20000;
    const double h = (hi - lo) / N;
    double area = 0.0;
    for (int i = 0; i <= N; ++i) {
      const double w = (i == 0 || i == N) ? 0.5 : 1.0;
      area += w * std::exp(step_logprob(std::vector<double>{lo + h * i}, post));
    }
    worst_integral = std::max(worst_integral, std::abs(area * h - 1.0));
  }
  const double secs = seconds_since(t0);
  detail_line("max scaled error %.3e over %zu cases (tol %.0e); max |integral - 1| %.3e (tol %.0e); %.2f s", worst,
              kLikelihoodCases, kLikelihoodTol, worst_integral, kIntegralTol, secs);
  return {worst <= kLikelihoodTol && worst_integral <= kIntegralTol && secs < kLikelihoodBudget,
          fmt("oracle err %.2e", worst) + fmt(", integral err %.2e", worst_integral) + fmt(", %.2f s", secs)};
}

// 2 ------------------------------------------------------------------------

Outcome gradients(const Env&) {
  const auto t0 = Clock::now();
  const auto cfg = micro_model_config();
  const auto mi = micro_instance(2);
  const auto rep = run_gradcheck();
  const double secs = seconds_since(t0);
  std::size_t entries = 0;
  for (const auto& r : rep.results) {
    entries += r.entries;
    if (!r.pass) detail_line("failed: %s rel err %.3e at %s", r.name.c_str(), r.max_rel_error, r.worst.c_str());
  }
  detail_line("micro instance: n=%zu tokens, K=%zu, T=%zu, S=%zu; %zu cases, %zu entries", cfg.num_tokens(),
              cfg.mask_steps, cfg.diffusion_steps, mi.records[0].num_trajectories(), rep.results.size(), entries);
  detail_line("max relative error %.3e (tol %.0e); %.2f s", rep.max_rel_error(), kGradTol, secs);
  return {rep.pass() && rep.max_rel_error() < kGradTol && secs < kGradBudget,
          fmt("max rel err %.2e", rep.max_rel_error()) + fmt(", %.2f s", secs)};
}

// Shared: a group of recorded rollouts from the committed checkpoint.
std::vector<RolloutRecord> recorded_group(const Env& env, const MarModel& policy, std::size_t S, std::uint64_t stream) {
  const auto cfg = env.config("");
  const auto data = load_templates(cfg);
  const auto reward = RewardModel::from_data(data, RewardKind::pattern);
  GenerateOptions go;
  go.trajectories = S;
  return rollout_group(policy, 3, 4, go, CounterRng(0xACC3), stream, data, reward);
}

std::vector<std::size_t> all_diffusion_steps(std::size_t T) {
  std::vector<std::size_t> v;
  for (std::size_t t = 2; t <= T; ++t) v.push_back(t);
  return v;
}

// 3 ------------------------------------------------------------------------

Outcome reduction(const Env& env) {
  const MarModel old_policy = env.base();
  const MarModel policy = old_policy.clone();
  jitter_params(policy, 0x3A, 0.02);
  const std::size_t K = policy.config().mask_steps, T = policy.config().diffusion_steps;
  double worst = 0.0, spread = 0.0;
  std::size_t samples = 0;
  for (const std::size_t S_recorded : {1u, 3u}) {
    const auto recs = recorded_group(env, old_policy, S_recorded, 0x3300 + S_recorded);
    TermOptions to;
    to.trajectories = 1;
    to.k_percent = 0.0;
    to.consistency = false;  // kappa identically 1
    const ObjectiveOptions oo{1e-4, 0.01};
    for (const auto& rec : recs) {
      std::vector<StepTerms> terms;
      for (std::size_t m = 1; m <= K; ++m)
        terms.push_back(build_step_terms(policy, &old_policy, rec, m, all_diffusion_steps(T), to));
      const double mte = assemble_objective(terms, oo).item();
      const double base = baseline_objective(terms, oo).item();
      worst = std::max(worst, std::abs(mte - base));
      spread = std::max(spread, std::abs(base));
      ++samples;
    }
  }
  detail_line("%zu recorded samples, all K mask steps and diffusion steps 2..T; max |J_mte - J_base| %.3e "
              "(tol %.0e); max |J_base| %.3e",
              samples, worst, kReductionTol, spread);
  return {worst <= kReductionTol && spread > 0.0, fmt("max diff %.2e", worst)};
}

// 4 ------------------------------------------------------------------------

Outcome identity(const Env& env) {
  const MarModel policy = env.base();
  const std::size_t K = policy.config().mask_steps, T = policy.config().diffusion_steps;
  const auto recs = recorded_group(env, policy, 3, 0x4400);
  TermOptions to;
  to.trajectories = 3;
  to.k_percent = 30.0;
  to.consistency = false;
  double worst_ratio = 0.0, worst_adv = 0.0, kl_at_ref = 0.0;
  std::size_t ratios = 0;
  for (const auto& rec : recs) {
    std::vector<StepTerms> terms;
    for (std::size_t m = 1; m <= K; ++m) terms.push_back(build_step_terms(policy, &policy, rec, m, all_diffusion_steps(T), to));
    for (const auto& st : terms) {
      for (std::size_t i = 0; i < st.logp_new.numel(); ++i, ++ratios) {
        const std::vector<double> a{st.logp_new[i]}, b{st.logp_old[i]};
        worst_ratio = std::max(worst_ratio, std::abs(importance_ratio(a, b).ratio - 1.0));
      }
      kl_at_ref = std::max(kl_at_ref, std::abs(kl_surrogate(st.mu_theta, st.mu_ref).item()));
    }
    const double J = assemble_objective(terms, ObjectiveOptions{1e-4, 0.0}).item();
    worst_adv = std::max(worst_adv, std::abs(J - rec.advantage));
  }

  const MarModel ref = policy.clone();
  jitter_params(ref, 0x4A, 0.05);
  double min_kl = INFINITY;
  for (const auto& rec : recs)
    for (std::size_t m = 1; m <= K; ++m) {
      const auto st = build_step_terms(policy, &ref, rec, m, all_diffusion_steps(T), to);
      min_kl = std::min(min_kl, kl_surrogate(st.mu_theta, st.mu_ref).item());
    }
  RngStream rng(CounterRng(0xACC4), 1);
  for (int c = 0; c < 10000; ++c) {
    std::vector<double> a(8), b(8);
    for (auto& v : a) v = 3.0 * rng.normal();
    for (auto& v : b) v = 3.0 * rng.normal();
    min_kl = std::min(min_kl, kl_surrogate(a, b, 2));
  }
  detail_line("%zu ratios at theta = theta_old: max |r - 1| %.3e (tol %.0e)", ratios, worst_ratio, kIdentityTol);
  detail_line("beta = 0 per-sample objective vs advantage: max diff %.3e (tol %.0e)", worst_adv, kIdentityTol);
  detail_line("KL surrogate at mu_ref = mu_theta: max %.3e (must be 0); min elsewhere %.3e (must be >= 0)", kl_at_ref,
              min_kl);
  const bool ok = worst_ratio <= kIdentityTol && worst_adv <= kIdentityTol && kl_at_ref == 0.0 && min_kl >= 0.0;
  return {ok, fmt("|r-1| %.2e", worst_ratio) + fmt(", |J-A| %.2e", worst_adv) + fmt(", KL(ref) %.1e", kl_at_ref)};
}

// 5 ------------------------------------------------------------------------

std::vector<bool> topk_oracle(const std::vector<Tensor>& x0, double k_percent) {
  const std::size_t n = x0[0].rows(), d = x0[0].cols(), S = x0.size();
  std::vector<double> u(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    double acc = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      double m = 0.0;
      for (std::size_t s = 0; s < S; ++s) m += x0[s].at(j, c);
      m *= 1.0 / static_cast<double>(S);
      double q = 0.0;
      for (std::size_t s = 0; s < S; ++s) q += (x0[s].at(j, c) - m) * (x0[s].at(j, c) - m);
      acc += std::sqrt(q * (1.0 / static_cast<double>(S)));
    }
    u[j] = acc / static_cast<double>(d);
  }
  const auto count = static_cast<std::size_t>(std::ceil(k_percent * static_cast<double>(n) / 100.0));
  // Full sort by (u descending, index ascending), then take the head.
  std::vector<std::pair<double, std::size_t>> order;
  for (std::size_t j = 0; j < n; ++j) order.emplace_back(-u[j], j);
  std::sort(order.begin(), order.end());
  std::vector<bool> mask(n, false);
  if (S > 1)
    for (std::size_t i = 0; i < count; ++i) mask[order[i].second] = true;
  return mask;
}

Outcome masks(const Env&) {
  RngStream rng(CounterRng(0xACC5), 1);
  std::size_t umap_bad = 0, kappa_bad = 0, ties = 0, zero_norm = 0;
  for (std::size_t c = 0; c < kMaskCases; ++c) {
    const std::size_t S = 2 + rng.below(4), n = 1 + rng.below(24), d = 1 + rng.below(8);
    const int kind = static_cast<int>(c % 4);  // 0 generic, 1 all tied, 2 partial ties, 3 duplicated spreads
    std::vector<double> shared(n * d);
    for (auto& v : shared) v = rng.normal();
    std::vector<Tensor> x0;
    for (std::size_t s = 0; s < S; ++s) {
      std::vector<double> v = shared;
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t ch = 0; ch < d; ++ch) {
          if (kind == 1 || (kind == 2 && j % 2 == 0)) continue;
          if (kind == 3) v[j * d + ch] += s % 2 ? 1.0 : -1.0;
          else v[j * d + ch] += rng.normal();
        }
      x0.emplace_back(Shape{n, d}, std::move(v));
    }
    if (kind != 0) ++ties;
    const double k = c % 5 == 0 ? 100.0 : 100.0 * rng.uniform();
    if (uncertainty_map(x0, k).mask != topk_oracle(x0, k)) ++umap_bad;

    const std::size_t K = 1 + rng.below(8);
    std::vector<double> fin(n * d);
    for (auto& v : fin) v = rng.normal();
    if (c % 3 == 0) std::fill(fin.begin(), fin.begin() + d, 0.0);
    std::vector<Tensor> preds;
    for (std::size_t m = 0; m < K; ++m) {
      std::vector<double> p(n * d);
      for (std::size_t j = 0; j < n; ++j) {
        const auto mode = rng.below(4);
        for (std::size_t ch = 0; ch < d; ++ch)
          p[j * d + ch] = mode == 0 ? 0.0 : mode == 1 ? fin[j * d + ch] : mode == 2 && m > 0 ? preds.back().at(j, ch) : rng.normal();
      }
      preds.emplace_back(Shape{n, d}, std::move(p));
    }
    const double tau = c % 3 == 0 ? 0.0 : c % 3 == 1 ? -std::numeric_limits<double>::infinity() : 0.2 * rng.normal();
    const auto cm = consistency_mask(preds, Tensor({n, d}, fin), tau);
    std::vector<double> prev(n, 0.0);
    bool bad = false;
    for (std::size_t m = 0; m < K; ++m)
      for (std::size_t j = 0; j < n; ++j) {
        double ab = 0, aa = 0, bb = 0;
        for (std::size_t ch = 0; ch < d; ++ch) {
          const double a = preds[m].at(j, ch), b = fin[j * d + ch];
          ab += a * b;
          aa += a * a;
          bb += b * b;
        }
        const bool zero = aa == 0.0 || bb == 0.0;
        zero_norm += zero;
        const double sim = zero ? 0.0 : ab / (std::sqrt(aa) * std::sqrt(bb));
        bad |= cm.sim[m][j] != sim || cm.kappa[m][j] != (sim - prev[j] > tau);
        prev[j] = sim;
      }
    kappa_bad += bad;
  }
  detail_line("uncertainty mask: %zu/%zu instances differ from the sort oracle (%zu with ties)", umap_bad, kMaskCases,
              ties);
  detail_line("consistency mask: %zu/%zu instances differ from the cosine oracle (%zu zero-norm token checks)",
              kappa_bad, kMaskCases, zero_norm);
  return {umap_bad == 0 && kappa_bad == 0 && zero_norm > 0 && ties > 0,
          std::to_string(kMaskCases - umap_bad) + "/" + std::to_string(kMaskCases) + " top-k, " +
              std::to_string(kMaskCases - kappa_bad) + "/" + std::to_string(kMaskCases) + " kappa exact"};
}

// 6 ------------------------------------------------------------------------

Outcome variance(const Env& env) {
  const auto t0 = Clock::now();
  const TrainConfig base_cfg = env.config("variance");
  const MarModel policy = env.base();
  apply_freeze(policy, base_cfg);
  const MarModel ref = policy.clone();
  const auto data = load_templates(base_cfg);
  const auto reward = RewardModel::from_data(data, parse_reward_kind(base_cfg.reward));
  std::size_t holds = 0;
  double worst_reduction = INFINITY;
  for (const std::uint64_t seed : kSeeds) {
    TrainConfig c = base_cfg;
    c.seed = seed;
    const auto classes = iteration_classes(c, 1);
    double var[2];
    for (int which = 0; which < 2; ++which) {
      c.trajectories = which == 0 ? 1 : 4;
      std::vector<std::vector<double>> est;
      for (std::size_t e = 0; e < kVarianceRepeats; ++e)
        est.push_back(ar_gradient_estimate(policy, &ref, c, data, reward, classes, stream_id({seed, 0xACC6, e})));
      var[which] = grad_stats(est).variance;
    }
    const double red = 1.0 - var[1] / var[0];
    holds += var[1] < var[0];
    worst_reduction = std::min(worst_reduction, red);
    detail_line("seed %llu: var(S=1) %.4e  var(S=4) %.4e  reduction %.1f%%", static_cast<unsigned long long>(seed),
                var[0], var[1], 100.0 * red);
  }
  const double secs = seconds_since(t0);
  detail_line("strict inequality on %zu/%zu seeds; 20%% target %s; %.1f s", holds, kSeeds.size(),
              worst_reduction >= kVarianceTarget ? "met on every seed" : "not met on every seed", secs);
  return {holds == kSeeds.size() && secs < kVarianceBudget,
          fmt("min reduction %.1f%%", 100.0 * worst_reduction) + fmt(", %.0f s", secs)};
}

// 7 and 8 share training runs -----------------------------------------------

struct Run {
  TrainResult result;
  double seconds = 0.0;
};

class Runs {
 public:
  explicit Runs(const Env& env) : env_(env), base_(env.base()) {}

  const Run& get(const std::string& name, const std::function<void(TrainConfig&)>& edit) {
    if (auto it = runs_.find(name); it != runs_.end()) return it->second;
    TrainConfig cfg = env_.config(name);
    edit(cfg);
    const auto t0 = Clock::now();
    Trainer t(cfg, base_.clone());
    TrainHooks hooks;
    hooks.on_iteration = [&](const MetricsRecord& m) {
      if (m.heldout_reward && m.iteration % 50 == 0) detail_line("  %s it %zu held-out %.4f", name.c_str(), m.iteration, *m.heldout_reward);
    };
    Run r{t.run(false, hooks), 0.0};
    r.seconds = seconds_since(t0);
    detail_line("  %s: held-out %.4f -> %.4f in %.0f s", name.c_str(), r.result.pre_rl.reward_mean,
                r.result.final_eval.reward_mean, r.seconds);
    return runs_.emplace(name, std::move(r)).first->second;
  }

  const MarModel& base() const { return base_; }

 private:
  const Env& env_;
  MarModel base_;
  std::map<std::string, Run> runs_;
};

std::vector<double> grad_norms(const TrainResult& r) {
  std::vector<double> v;
  for (const auto& m : r.metrics) v.push_back(m.grad_norm);
  return v;
}

Outcome stability(const Env&, Runs& runs) {
  const auto set = [](const char* mode) {
    return [mode](TrainConfig& c) {
      const auto dir = c.output_dir;
      c = ablation_setting(c, "head-mode", mode);
      c.output_dir = dir;
    };
  };
  const Run& frozen = runs.get("mte_seed1", set("frozen-head"));
  const Run& e2e = runs.get("end2end_seed1", set("end2end"));
  const Run& head = runs.get("head_only_seed1", set("head-only"));
  const double secs = frozen.seconds + e2e.seconds + head.seconds;
  const double v_frozen = sample_variance(grad_norms(frozen.result)), v_e2e = sample_variance(grad_norms(e2e.result));
  const double h_frozen = frozen.result.final_eval.reward_mean, h_head = head.result.final_eval.reward_mean;
  detail_line("grad-norm variance: frozen-head %.4e, end-to-end %.4e", v_frozen, v_e2e);
  detail_line("held-out at iteration %zu: frozen-head %.4f, head-only %.4f, end-to-end %.4f",
              frozen.result.metrics.size(), h_frozen, h_head, e2e.result.final_eval.reward_mean);
  detail_line("%.0f s for three runs", secs);
  return {v_frozen < v_e2e && h_head <= h_frozen && secs < kStabilityBudget,
          fmt("gnorm var %.2e", v_frozen) + fmt(" < %.2e", v_e2e) + fmt(", head-only %.4f", h_head) +
              fmt(" <= frozen %.4f", h_frozen) + fmt(", %.0f s", secs)};
}

Outcome learning(const Env& env, Runs& runs) {
  // Measurement noise of the pre-RL held-out mean: its spread across
  // evaluation seeds at the configured sample count.
  const TrainConfig cfg = env.config("");
  const auto data = load_templates(cfg);
  const auto reward = RewardModel::from_data(data, parse_reward_kind(cfg.reward));
  std::vector<double> means;
  double per_sample_std = 0.0;
  const auto te = Clock::now();
  for (std::size_t k = 0; k < kEvalSeedsForStd; ++k) {
    const auto rep = evaluate(runs.base(), data, reward, cfg.eval_samples, cfg.eval_seed + k, cfg.cfg_scale);
    means.push_back(rep.reward_mean);
    if (k == 0) per_sample_std = rep.reward_std;
  }
  const double eval_secs = seconds_since(te);
  const double seed_std = std::sqrt(sample_variance(means));

  double secs = eval_secs;
  std::size_t wins = 0;
  bool margin_ok = false;
  double gain = 0.0;
  for (const std::uint64_t seed : kSeeds) {
    const auto s = std::to_string(seed);
    const Run& mte = runs.get("mte_seed" + s, [seed](TrainConfig& c) { c.seed = seed; });
    const Run& base = runs.get("baseline_seed" + s, [seed](TrainConfig& c) {
      c.seed = seed;
      c.objective = "baseline";
    });
    secs += mte.seconds + base.seconds;
    const double pre = mte.result.pre_rl.reward_mean, m = mte.result.final_eval.reward_mean,
                 b = base.result.final_eval.reward_mean;
    wins += m >= b;
    detail_line("seed %s: pre-RL %.4f, MTE %.4f (%+.4f), baseline %.4f (%+.4f)", s.c_str(), pre, m, m - pre, b, b - pre);
    if (seed == TrainConfig{}.seed) {
      gain = m - pre;
      margin_ok = gain > kStdMultiple * seed_std;
    }
  }
  detail_line("pre-RL held-out std across %zu eval seeds %.4f; gain %.4f vs 3x = %.4f", kEvalSeedsForStd, seed_std,
              gain, kStdMultiple * seed_std);
  detail_line("per-sample std %.4f (3x = %.4f): gain %s that reading", per_sample_std, kStdMultiple * per_sample_std,
              gain > kStdMultiple * per_sample_std ? "also exceeds" : "does not exceed");
  detail_line("MTE >= baseline on %zu/%zu seeds; %.0f s", wins, kSeeds.size(), secs);
  return {margin_ok && wins >= 2 && secs < kLearningBudget,
          fmt("gain %.4f", gain) + fmt(" > %.4f", kStdMultiple * seed_std) + ", MTE >= baseline on " +
              std::to_string(wins) + "/3" + fmt(", %.0f s", secs)};
}

// 9 ------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

std::size_t line_count(const fs::path& p) {
  const auto s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

pid_t spawn_train(const Env& env, const TrainConfig& cfg, bool fresh) {
  std::vector<std::string> args{env.cli.string(), "train",
                                "--base_checkpoint", cfg.base_checkpoint,
                                "--templates", cfg.templates,
                                "--output_dir", cfg.output_dir,
                                "--iterations", std::to_string(cfg.iterations),
                                "--checkpoint_every", std::to_string(cfg.checkpoint_every),
                                "--eval_every", std::to_string(cfg.eval_every)};
  if (fresh) args.push_back("--fresh");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  argv.push_back(nullptr);
  posix_spawn_file_actions_t fa;
  posix_spawn_file_actions_init(&fa);
  posix_spawn_file_actions_addopen(&fa, 1, "/dev/null", O_WRONLY, 0);
  pid_t pid = 0;
  const int rc = posix_spawn(&pid, argv[0], &fa, nullptr, argv.data(), environ);
  posix_spawn_file_actions_destroy(&fa);
  if (rc != 0) throw IoError("cannot start " + env.cli.string());
  return pid;
}

int wait_exit(pid_t pid) {
  int status = 0;
  waitpid(pid, &status, 0);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome determinism(const Env& env) {
  const auto edit = [&](const std::string& name) {
    TrainConfig c = env.config(name);
    c.iterations = 8;
    c.checkpoint_every = 3;
    c.eval_every = 4;
    return c;
  };
  const TrainConfig a = edit("det_a"), b = edit("det_b"), k = edit("det_kill");
  const MarModel base = env.base();
  Trainer(a, base.clone()).run(false);
  Trainer(b, base.clone()).run(false);
  const std::string ma = slurp(fs::path(a.output_dir) / "metrics.jsonl");
  const bool identical = !ma.empty() && ma == slurp(fs::path(b.output_dir) / "metrics.jsonl");
  detail_line("two identical-seed runs: metrics streams %s (%zu bytes)", identical ? "byte-identical" : "DIFFER",
              ma.size());

  // Kill the CLI with SIGKILL once it is past the first checkpoint and
  // mid-way through a later iteration.
  fs::remove_all(k.output_dir);
  const pid_t pid = spawn_train(env, k, true);
  const fs::path metrics = fs::path(k.output_dir) / "metrics.jsonl";
  const auto deadline = Clock::now() + std::chrono::minutes(5);
  while (Clock::now() < deadline) {
    if (fs::exists(metrics) && line_count(metrics) >= 4) break;
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }
  std::this_thread::sleep_for(std::chrono::milliseconds(300));
  kill(pid, SIGKILL);
  const int killed_status = wait_exit(pid);
  const std::size_t lines_at_kill = fs::exists(metrics) ? line_count(metrics) : 0;

  bool loadable = false;
  std::size_t ck_iter = 0;
  try {
    const auto ck = load_checkpoint(fs::path(k.output_dir) / "checkpoint.ckpt");
    loadable = ck.model.params().size() == base.params().size();
    ck_iter = ck.info.iteration;
  } catch (const std::exception& e) {
    detail_line("checkpoint failed to load: %s", e.what());
  }
  detail_line("SIGKILL after %zu metrics lines (exit %d); last checkpoint at iteration %zu %s", lines_at_kill,
              killed_status, ck_iter, loadable ? "loads" : "DOES NOT LOAD");

  const int rc = wait_exit(spawn_train(env, k, false));
  const bool resumed_same = rc == 0 && slurp(metrics) == ma;
  detail_line("resumed run exit %d; metrics %s the uninterrupted run", rc, resumed_same ? "byte-identical to" : "DIFFER from");
  return {identical && loadable && ck_iter >= 3 && resumed_same,
          std::string(identical ? "identical streams" : "streams differ") + ", checkpoint " +
              (loadable ? "loadable" : "corrupt") + " after SIGKILL, resume " + (resumed_same ? "exact" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  Env env;
  std::string work = (fs::temp_directory_path() / "marl_acceptance").string();
  std::vector<int> only;
  app.add_option("--work-dir", work, "scratch directory for training runs");
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',');
  bool strict = false;
  app.add_flag("--strict", strict, "exit 1 when any criterion fails");
  std::string report_path;
  app.add_option("--report", report_path, "also write the verdict lines to this file");
  CLI11_PARSE(app, argc, argv);
  env.work = work;
  fs::create_directories(env.work);
  if (!report_path.empty()) g_report = std::fopen(report_path.c_str(), "w");
  std::set<int> selected(only.begin(), only.end());
  if (selected.empty()) selected = {1, 2, 3, 4, 5, 6, 7, 8, 9};

  std::unique_ptr<Runs> runs;
  const auto shared_runs = [&]() -> Runs& {
    if (!runs) runs = std::make_unique<Runs>(env);
    return *runs;
  };
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"likelihood correctness", [&] { return likelihood(env); }},
      {"gradient fidelity", [&] { return gradients(env); }},
      {"degenerate-reduction identity", [&] { return reduction(env); }},
      {"identity-policy invariants", [&] { return identity(env); }},
      {"mask oracles", [&] { return masks(env); }},
      {"variance reduction", [&] { return variance(env); }},
      {"stability ordering", [&] { return stability(env, shared_runs()); }},
      {"learning signal", [&] { return learning(env, shared_runs()); }},
      {"determinism and crash safety", [&] { return determinism(env); }},
  };

  nlohmann::json report = nlohmann::json::object();
  int failures = 0, errors = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!selected.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
      ++errors;
    }
    report_line("%s %d %s: %s", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(), o.summary.c_str());
    report[std::to_string(id)] = {{"name", criteria[i].first}, {"pass", o.pass}, {"summary", o.summary}};
    failures += !o.pass;
  }
  std::ofstream(env.work / "acceptance.json") << report.dump(2) << "\n";
  report_line("%d of %zu criteria passed", static_cast<int>(selected.size()) - failures, selected.size());
  if (g_report) std::fclose(g_report);
  // A FAIL is a measured outcome; only a criterion that could not run is an error.
  if (errors) return 2;
  return strict && failures ? 1 : 0;
}
