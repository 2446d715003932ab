#pragma once

// Training objective: clipped per-step surrogate, multi-trajectory
// averaging on the most uncertain tokens, consistency-based token
// selection, and the KL penalty against the reference policy.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "marl/likelihood.hpp"
#include "marl/rollout.hpp"
#include "marl/sampler.hpp"

namespace marl {

/// min(r A, clip(r, 1 - eps, 1 + eps) A).
inline double step_loss(double r, double adv, double eps_clip) {
  return std::min(r * adv, std::clamp(r, 1.0 - eps_clip, 1.0 + eps_clip) * adv);
}

/// Number of tokens selected by a top-k% rule over n tokens.
inline std::size_t mask_count(double k_percent, std::size_t n) {
  if (!(k_percent >= 0.0 && k_percent <= 100.0)) throw ConfigError("k_percent must lie in [0, 100]");
  return static_cast<std::size_t>(std::ceil(k_percent * static_cast<double>(n) / 100.0));
}

enum class ChannelReduction { mean, l2 };

struct UncertaintyMap {
  std::vector<double> u;
  std::vector<bool> mask;
  std::string warning;

  std::size_t selected() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true)); }
};

/// Per-token spread of x_0 across trajectories (population std per
/// channel, reduced over channels) and the top-k% mask, ties broken by
/// ascending token index.
inline UncertaintyMap uncertainty_map(const std::vector<Tensor>& x0, double k_percent,
                                      ChannelReduction reduction = ChannelReduction::mean) {
  if (x0.empty()) throw DimensionError("uncertainty_map: no trajectories");
  const Shape& shape = x0[0].shape();
  for (const auto& x : x0)
    if (x.shape() != shape) {
      throw DimensionError("uncertainty_map: trajectory shapes " + shape_str(shape) + " and " + shape_str(x.shape()) +
                           " differ");
    }
  const std::size_t n = x0[0].rows(), d = x0[0].cols(), S = x0.size();
  UncertaintyMap out;
  out.u.assign(n, 0.0);
  out.mask.assign(n, false);
  if (S == 1) {
    out.warning = "single trajectory: uncertainty is identically zero, mask left empty";
    return out;
  }
  const double inv_s = 1.0 / static_cast<double>(S);
  for (std::size_t j = 0; j < n; ++j) {
    double acc = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      double m = 0.0;
      for (const auto& x : x0) m += x.vec()[j * d + c];
      m *= inv_s;
      double q = 0.0;
      for (const auto& x : x0) q += (x.vec()[j * d + c] - m) * (x.vec()[j * d + c] - m);
      const double sd = std::sqrt(q * inv_s);
      acc += reduction == ChannelReduction::mean ? sd : sd * sd;
    }
    out.u[j] = reduction == ChannelReduction::mean ? acc / static_cast<double>(d) : std::sqrt(acc);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return out.u[a] > out.u[b]; });
  const std::size_t count = mask_count(k_percent, n);
  for (std::size_t i = 0; i < count; ++i) out.mask[order[i]] = true;
  return out;
}

/// Cosine similarity; 0 when either vector has zero norm.
inline double cosine_similarity(std::span<const double> a, std::span<const double> b, bool* zero_norm = nullptr) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) {
    if (zero_norm) *zero_norm = true;
    return 0.0;
  }
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

struct ConsistencyMask {
  std::vector<std::vector<double>> sim;  // sim[m-1][j]
  std::vector<std::vector<bool>> kappa;  // kappa[m-1][j] = sim(m) - sim(m-1) > tau
  std::size_t zero_norm_tokens = 0;
};

/// `preds[m-1]` is the n x D prediction after AR step m, `final_latent`
/// the decode from the complete context. sim(0) is taken as 0.
inline ConsistencyMask consistency_mask(const std::vector<Tensor>& preds, const Tensor& final_latent, double tau) {
  ConsistencyMask cm;
  const std::size_t n = final_latent.rows(), d = final_latent.cols();
  for (const auto& p : preds) {
    if (p.shape() != final_latent.shape()) {
      throw DimensionError("consistency_mask: prediction shape " + shape_str(p.shape()) + " vs final " +
                           shape_str(final_latent.shape()));
    }
    std::vector<double> sim(n);
    for (std::size_t j = 0; j < n; ++j) {
      bool zero = false;
      sim[j] = cosine_similarity(std::span(p.vec()).subspan(j * d, d), std::span(final_latent.vec()).subspan(j * d, d),
                                 &zero);
      if (zero) ++cm.zero_norm_tokens;
    }
    cm.sim.push_back(std::move(sim));
  }
  for (std::size_t m = 0; m < cm.sim.size(); ++m) {
    std::vector<bool> k(n);
    for (std::size_t j = 0; j < n; ++j) {
      const double prev = m == 0 ? 0.0 : cm.sim[m - 1][j];
      k[j] = cm.sim[m][j] - prev > tau;
    }
    cm.kappa.push_back(std::move(k));
  }
  return cm;
}

/// Per-step prediction grids of one generation: after step m the tokens of
/// X^m hold their canonical x_0 and those of X^{m+1} the preview decoded
/// from Z^m; all other rows are zero.
inline std::vector<Tensor> step_predictions(const Generation& g, std::size_t D) {
  const std::size_t n = g.grid.rows(), K = g.steps.size();
  std::vector<Tensor> preds;
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<double> v(n * D, 0.0);
    const auto put = [&](const std::vector<std::size_t>& pos, const Tensor& rows) {
      for (std::size_t r = 0; r < pos.size(); ++r)
        for (std::size_t c = 0; c < D; ++c) v[pos[r] * D + c] = rows.vec()[r * D + c];
    };
    put(g.steps[k].positions, g.steps[k].trajectories.at(0).x0());
    if (k + 1 < K) {
      if (!g.steps[k + 1].preview.defined()) throw SequencingError("generation has no previews recorded");
      put(g.steps[k + 1].positions, g.steps[k + 1].preview);
    }
    preds.push_back(Tensor({n, D}, std::move(v)));
  }
  return preds;
}

inline ConsistencyMask generation_consistency(const Generation& g, std::size_t D, double tau) {
  if (!g.final_decode.defined()) throw SequencingError("generation has no full-context decode recorded");
  return consistency_mask(step_predictions(g, D), g.final_decode, tau);
}

/// Inputs of one (sample, mask step) term. Rows of the log-prob vectors
/// are ordered (trajectory, diffusion step, token).
struct StepTerms {
  Tensor logp_new;                // S * T' * n_m, differentiable
  Tensor logp_old;                // same layout, constant
  Tensor mu_theta;                // T' * n_m x D on the canonical trajectory
  Tensor mu_ref;                  // same, constant
  std::vector<double> mte_mask;   // n_m entries in {0, 1}
  std::vector<double> kappa;      // n_m entries in {0, 1}
  double advantage = 0.0;
  std::size_t trajectories = 1, diffusion_steps = 0, tokens = 0;
};

struct ObjectiveOptions {
  double clip_eps = 1e-4;
  double beta = 0.01;
};

struct TermDiagnostics {
  double objective = 0.0;
  double kl = 0.0;
  std::size_t ratio_entries = 0;
  std::size_t clip_hits = 0;
  std::size_t exp_clamp_hits = 0;
  std::size_t tokens = 0;
  std::size_t kappa_on = 0;
  std::size_t mask_on = 0;
  std::size_t empty_kappa_terms = 0;

  void merge(const TermDiagnostics& o) {
    objective += o.objective;
    kl += o.kl;
    ratio_entries += o.ratio_entries;
    tokens += o.tokens;
    clip_hits += o.clip_hits;
    exp_clamp_hits += o.exp_clamp_hits;
    kappa_on += o.kappa_on;
    mask_on += o.mask_on;
    empty_kappa_terms += o.empty_kappa_terms;
  }
};

namespace detail {

inline void check_terms(const StepTerms& st) {
  const std::size_t rows = st.trajectories * st.diffusion_steps * st.tokens;
  if (st.trajectories == 0 || st.diffusion_steps == 0 || st.tokens == 0) throw DimensionError("step terms are empty");
  if (st.logp_new.numel() != rows || st.logp_old.numel() != rows) {
    throw DimensionError("step terms: log-prob tables do not cover the same index set");
  }
  if (st.mte_mask.size() != st.tokens || st.kappa.size() != st.tokens) throw DimensionError("step terms: mask length");
}

/// Per-entry clipped surrogate for every (s, t, j) row.
inline Tensor clipped_surrogate(const StepTerms& st, const ObjectiveOptions& opt, TermDiagnostics* diag) {
  if (!(opt.clip_eps > 0.0)) throw ConfigError("clip epsilon must be positive");
  const Tensor gap = st.logp_new - st.logp_old;
  const Tensor r = exp(clamp(gap, -kRatioExponentLimit, kRatioExponentLimit));
  const Tensor loss = minimum(r * st.advantage, clamp(r, 1.0 - opt.clip_eps, 1.0 + opt.clip_eps) * st.advantage);
  if (diag) {
    diag->ratio_entries += r.numel();
    for (std::size_t i = 0; i < r.numel(); ++i) {
      if (std::abs(gap[i]) > kRatioExponentLimit) ++diag->exp_clamp_hits;
      if (r[i] < 1.0 - opt.clip_eps || r[i] > 1.0 + opt.clip_eps) ++diag->clip_hits;
    }
  }
  return reshape(loss, {st.trajectories, st.diffusion_steps * st.tokens});
}

inline Tensor kl_term(const StepTerms& st, const ObjectiveOptions& opt, TermDiagnostics* diag) {
  const Tensor kl = kl_surrogate(st.mu_theta, st.mu_ref);
  if (diag) diag->kl += kl.item();
  return kl * opt.beta;
}

}  // namespace detail

/// kappa * [M * mean_s l^(s) + (1 - M) * l^(1)] averaged over (t, j),
/// minus beta * KL.
inline Tensor term_objective(const StepTerms& st, const ObjectiveOptions& opt, TermDiagnostics* diag = nullptr) {
  detail::check_terms(st);
  const std::size_t Tp = st.diffusion_steps, n = st.tokens;
  const Tensor loss = detail::clipped_surrogate(st, opt, diag);
  const Tensor first = reshape(gather_rows(loss, {0}), {Tp, n});
  const Tensor avg = reshape(mean(loss, 0), {Tp, n});
  std::vector<double> keep(n);
  for (std::size_t j = 0; j < n; ++j) keep[j] = 1.0 - st.mte_mask[j];
  const Tensor combined = avg * Tensor({n}, st.mte_mask) + first * Tensor({n}, keep);
  const Tensor weighted = combined * Tensor({n}, st.kappa);
  const Tensor J = mean(weighted) - detail::kl_term(st, opt, diag);
  if (diag) {
    diag->objective += J.item();
    diag->tokens += n;
    for (std::size_t j = 0; j < n; ++j) {
      diag->kappa_on += st.kappa[j] != 0.0;
      diag->mask_on += st.mte_mask[j] != 0.0;
    }
    if (std::all_of(st.kappa.begin(), st.kappa.end(), [](double k) { return k == 0.0; })) ++diag->empty_kappa_terms;
  }
  return J;
}

/// Single-trajectory objective over the selected steps: mean_(t, j) l^(1)
/// minus beta * KL. Masks are ignored, so every token counts as kept.
inline Tensor baseline_term(const StepTerms& st, const ObjectiveOptions& opt, TermDiagnostics* diag = nullptr) {
  detail::check_terms(st);
  const Tensor loss = detail::clipped_surrogate(st, opt, diag);
  const Tensor first = reshape(gather_rows(loss, {0}), {st.diffusion_steps, st.tokens});
  const Tensor J = mean(first) - detail::kl_term(st, opt, diag);
  if (diag) {
    diag->objective += J.item();
    diag->tokens += st.tokens;
    diag->kappa_on += st.tokens;
  }
  return J;
}

namespace detail {

template <class TermFn>
Tensor average_terms(std::span<const StepTerms> terms, TermFn fn) {
  if (terms.empty()) throw DimensionError("objective over an empty set of terms");
  Tensor total = fn(terms[0]);
  for (std::size_t i = 1; i < terms.size(); ++i) total = total + fn(terms[i]);
  return total / static_cast<double>(terms.size());
}

}  // namespace detail

inline Tensor assemble_objective(std::span<const StepTerms> terms, const ObjectiveOptions& opt,
                                 TermDiagnostics* diag = nullptr) {
  return detail::average_terms(terms, [&](const StepTerms& st) { return term_objective(st, opt, diag); });
}

inline Tensor baseline_objective(std::span<const StepTerms> terms, const ObjectiveOptions& opt,
                                 TermDiagnostics* diag = nullptr) {
  return detail::average_terms(terms, [&](const StepTerms& st) { return baseline_term(st, opt, diag); });
}

struct TermOptions {
  std::size_t trajectories = 3;  // S used in the loss, at most the recorded count
  double k_percent = 30.0;
  ChannelReduction reduction = ChannelReduction::mean;
  bool consistency = true;
  double tau = 0.0;
  double cfg_scale = 1.0;
  bool ratio_dim_normalize = true;
};

/// Recomputes the selected transitions of mask step m (1-based) under
/// `policy` and gathers the matching rollout-time and reference values.
/// `ref` may be null, in which case mu_ref is a detached copy of mu_theta.
inline StepTerms build_step_terms(const MarModel& policy, const MarModel* ref, const RolloutRecord& rec, std::size_t m,
                                  const std::vector<std::size_t>& tsel, const TermOptions& opt,
                                  const ConsistencyMask* cm = nullptr) {
  const auto& cfg = policy.config();
  const auto& sched = policy.schedule();
  const std::size_t D = cfg.token_dim;
  if (m == 0 || m > rec.gen.steps.size()) throw SequencingError("build_step_terms: mask step out of range");
  const StepRecord& step = rec.gen.steps[m - 1];
  const std::size_t S = opt.trajectories, n = step.positions.size(), Tp = tsel.size();
  if (S == 0 || S > step.trajectories.size()) {
    throw ConfigError("build_step_terms: " + std::to_string(S) + " trajectories requested, " +
                      std::to_string(step.trajectories.size()) + " recorded");
  }
  if (Tp == 0) throw ConfigError("build_step_terms: no diffusion steps selected");
  const bool guided = opt.cfg_scale != 1.0;

  std::vector<double> xt, xprev, lp_old;
  std::vector<std::size_t> ts, zrow;
  xt.reserve(S * Tp * n * D);
  xprev.reserve(S * Tp * n * D);
  for (std::size_t s = 0; s < S; ++s) {
    const Trajectory& tr = step.trajectories[s];
    for (std::size_t t : tsel) {
      if (t < 2 || t >= tr.states.size() || !tr.logp[t].defined()) {
        throw SequencingError("build_step_terms: no stored transition for diffusion step " + std::to_string(t));
      }
      const auto& a = tr.states[t].vec();
      const auto& b = tr.states[t - 1].vec();
      xt.insert(xt.end(), a.begin(), a.end());
      xprev.insert(xprev.end(), b.begin(), b.end());
      for (std::size_t j = 0; j < n; ++j) {
        const double lp = tr.logp[t].vec()[j];
        lp_old.push_back(opt.ratio_dim_normalize ? lp / static_cast<double>(D) : lp);
        ts.push_back(t);
        zrow.push_back(j);
      }
    }
  }
  const std::size_t rows = ts.size();
  const Tensor xt_t({rows, D}, std::move(xt));
  const Tensor xprev_t({rows, D}, std::move(xprev));

  const auto means = [&](const MarModel& model, std::size_t count) {
    const Tensor z = recompute_conditioning(model, rec, m);
    const Tensor zu = guided ? recompute_conditioning(model, rec, m, cfg.null_class()) : Tensor();
    const std::vector<std::size_t> idx(zrow.begin(), zrow.begin() + static_cast<std::ptrdiff_t>(count));
    const std::vector<std::size_t> tt(ts.begin(), ts.begin() + static_cast<std::ptrdiff_t>(count));
    std::vector<std::size_t> first(count);
    std::iota(first.begin(), first.end(), std::size_t{0});
    const Tensor x = count == rows ? xt_t : gather_rows(xt_t, first);
    const Tensor eps = guided_eps(model, x, tt, gather_rows(z, idx), guided ? gather_rows(zu, idx) : Tensor(),
                                  opt.cfg_scale);
    return posterior_mean(sched, x, eps, tt, cfg.x0_clamp);
  };

  StepTerms st;
  st.trajectories = S;
  st.diffusion_steps = Tp;
  st.tokens = n;
  st.advantage = rec.advantage;

  const Tensor mu = means(policy, rows);
  std::vector<double> var(rows);
  for (std::size_t r = 0; r < rows; ++r) var[r] = sched.posterior_variance[ts[r]];
  const Tensor lp = step_logprob_rows(xprev_t, mu, var);
  st.logp_new = opt.ratio_dim_normalize ? lp / static_cast<double>(D) : lp;
  st.logp_old = Tensor({rows}, std::move(lp_old));

  std::vector<std::size_t> canon(Tp * n);
  std::iota(canon.begin(), canon.end(), std::size_t{0});
  st.mu_theta = gather_rows(mu, canon);
  if (ref) {
    NoGradScope no_grad;
    st.mu_ref = means(*ref, Tp * n).detach();
  } else {
    st.mu_ref = st.mu_theta.detach();
  }

  std::vector<Tensor> x0s;
  for (std::size_t s = 0; s < S; ++s) x0s.push_back(step.trajectories[s].x0());
  const auto um = uncertainty_map(x0s, opt.k_percent, opt.reduction);
  st.mte_mask.resize(n);
  for (std::size_t j = 0; j < n; ++j) st.mte_mask[j] = um.mask[j] ? 1.0 : 0.0;

  st.kappa.assign(n, 1.0);
  if (opt.consistency) {
    if (!cm) throw SequencingError("build_step_terms: consistency requested without a consistency mask");
    for (std::size_t r = 0; r < n; ++r) st.kappa[r] = cm->kappa.at(m - 1).at(step.positions[r]) ? 1.0 : 0.0;
  }
  return st;
}

// Gradient diagnostics.

inline std::vector<double> flatten_grads(const ParamList& params) {
  std::vector<double> g;
  for (const auto& [name, t] : params) {
    const auto v = t.grad();
    g.insert(g.end(), v.begin(), v.end());
  }
  return g;
}

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

struct GradStats {
  double norm = 0.0;      // mean L2 norm over the estimates
  double variance = 0.0;  // per-coordinate population variance across estimates, averaged
};

inline GradStats grad_stats(const std::vector<std::vector<double>>& estimates) {
  if (estimates.size() < 2) throw ConfigError("grad_stats: need at least two gradient estimates");
  const std::size_t P = estimates[0].size();
  for (const auto& e : estimates)
    if (e.size() != P) throw DimensionError("grad_stats: estimates differ in length");
  GradStats g;
  const double k = static_cast<double>(estimates.size());
  for (const auto& e : estimates) g.norm += l2_norm(e);
  g.norm /= k;
  if (P == 0) return g;
  double total = 0.0;
  for (std::size_t p = 0; p < P; ++p) {
    double m = 0.0;
    for (const auto& e : estimates) m += e[p];
    m /= k;
    double q = 0.0;
    for (const auto& e : estimates) q += (e[p] - m) * (e[p] - m);
    total += q / k;
  }
  g.variance = total / static_cast<double>(P);
  return g;
}

}  // namespace marl
