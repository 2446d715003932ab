#pragma once

// Ancestral sampling of the diffusion head and the interleaved AR/diffusion
// generation loop.
//
// Noise is keyed per token: trajectory s of token j in a sample draws from
// stream (sample_stream, s, j), block 0 for x_T and block t for the step
// t -> t-1. The same token therefore sees the same noise whichever AR step
// decodes it and in whatever order trajectories are produced.

#include <cmath>
#include <cstdint>
#include <vector>

#include "marl/likelihood.hpp"
#include "marl/model.hpp"
#include "marl/rng.hpp"
#include "marl/schedule.hpp"
#include "marl/tensor.hpp"

namespace marl {

/// eps_uncond + cfg * (eps_cond - eps_uncond); the plain conditional
/// prediction when cfg == 1 or no unconditional vectors are given.
inline Tensor guided_eps(const MarModel& model, const Tensor& x_t, const std::vector<std::size_t>& ts,
                         const Tensor& z, const Tensor& z_uncond, double cfg_scale) {
  Tensor cond = model.head().forward(x_t, ts, z);
  if (cfg_scale == 1.0 || !z_uncond.defined()) return cond;
  Tensor uncond = model.head().forward(x_t, ts, z_uncond);
  return uncond + (cond - uncond) * cfg_scale;
}

inline std::uint64_t token_stream(std::uint64_t sample_stream, std::size_t trajectory, std::size_t token) {
  return stream_id({sample_stream, 0x70C3, trajectory, token});
}

/// Rows x dim matrix of standard normals, row r from `streams[r]`, block `block`.
inline Tensor keyed_noise(const CounterRng& gen, const std::vector<std::uint64_t>& streams, std::size_t block,
                          std::size_t dim) {
  std::vector<double> v(streams.size() * dim);
  for (std::size_t r = 0; r < streams.size(); ++r)
    for (std::size_t c = 0; c < dim; ++c) v[r * dim + c] = gen.normal(streams[r], block * dim + c);
  return Tensor({streams.size(), dim}, std::move(v));
}

struct Trajectory {
  std::vector<Tensor> states;  // states[t] = x_t, m x D, for t = 0..T
  std::vector<Tensor> logp;    // logp[t] = log p(x_{t-1} | x_t) per row, defined for t >= 2

  const Tensor& x0() const { return states.front(); }
};

/// Samples x_T ~ N(0, I) and runs x_{t-1} ~ N(mu_theta, Sigma_t) down to
/// t = 1, where the posterior mean is taken without added noise.
inline Trajectory diffuse_sample(const MarModel& model, const Tensor& z, const Tensor& z_uncond,
                                 const CounterRng& gen, const std::vector<std::uint64_t>& row_streams,
                                 double cfg_scale = 1.0, bool with_logp = true) {
  const auto& sched = model.schedule();
  const std::size_t T = sched.steps;
  if (T == 0) throw ConfigError("diffuse_sample: T must be positive");
  const std::size_t m = z.rows(), D = model.config().token_dim;
  if (row_streams.size() != m) throw DimensionError("diffuse_sample: one rng stream per row required");
  Trajectory traj;
  traj.states.resize(T + 1);
  traj.logp.resize(T + 1);
  traj.states[T] = keyed_noise(gen, row_streams, 0, D);
  for (std::size_t t = T; t >= 1; --t) {
    const std::vector<std::size_t> ts(m, t);
    const Tensor& xt = traj.states[t];
    const Tensor eps = guided_eps(model, xt, ts, z, z_uncond, cfg_scale);
    const Tensor mu = posterior_mean(sched, xt, eps, ts, model.config().x0_clamp);
    if (t > 1) {
      const double sd = std::sqrt(sched.posterior_variance[t]);
      Tensor next = mu + keyed_noise(gen, row_streams, t, D) * sd;
      if (with_logp) traj.logp[t] = step_logprob_rows(next, mu, std::vector<double>(m, sched.posterior_variance[t]));
      traj.states[t - 1] = std::move(next);
    } else {
      traj.states[0] = mu.detach();
    }
  }
  return traj;
}

struct GenerateOptions {
  std::size_t trajectories = 1;  // S
  double cfg_scale = 1.0;
  bool consistency = true;         // record previews and the full-context decode
  bool resample_post_hoc = true;   // draw trajectories 2..S after the AR chain completes
};

/// Everything retained for one AR mask step of one sample.
struct StepRecord {
  std::vector<std::size_t> positions;     // X^k, ascending
  Tensor z;                               // |X^k| x cond_dim under the rollout policy
  Tensor z_uncond;                        // defined only when cfg_scale != 1
  std::vector<Trajectory> trajectories;   // S entries; index 0 is canonical
  Tensor preview;                         // X^k decoded from step k-1 conditioning; undefined for k = 1
};

struct Generation {
  std::size_t class_id = 0;
  MaskSchedule schedule;
  std::vector<StepRecord> steps;
  Tensor grid;          // canonical output, n x D
  Tensor final_decode;  // every token decoded from the complete-context conditioning
};

inline std::vector<std::uint64_t> position_streams(std::uint64_t sample_stream, std::size_t trajectory,
                                                   const std::vector<std::size_t>& positions) {
  std::vector<std::uint64_t> s(positions.size());
  for (std::size_t r = 0; r < positions.size(); ++r) s[r] = token_stream(sample_stream, trajectory, positions[r]);
  return s;
}

/// Interleaved MAR sampling: for k = 1..K the backbone produces Z^k from
/// the tokens known so far, the head decodes X^k, and the canonical
/// trajectory's x_0 is written back into the grid.
inline Generation generate(const MarModel& model, std::size_t class_id, const MaskSchedule& schedule,
                           const CounterRng& gen, std::uint64_t sample_stream, const GenerateOptions& opt) {
  const auto& cfg = model.config();
  const std::size_t n = cfg.num_tokens(), D = cfg.token_dim;
  if (opt.trajectories == 0) throw ConfigError("generate: need at least one trajectory");
  if (schedule.num_tokens() != n) throw ConfigError("generate: mask schedule does not cover the grid");
  const bool guided = opt.cfg_scale != 1.0;

  Generation g;
  g.class_id = class_id;
  g.schedule = schedule;
  std::vector<double> grid(n * D, 0.0);
  std::vector<bool> known(n, false);
  Tensor prev_z_all, prev_zu_all;

  const auto sample_extra = [&](StepRecord& rec) {
    for (std::size_t s = 1; s < opt.trajectories; ++s) {
      rec.trajectories.push_back(diffuse_sample(model, rec.z, rec.z_uncond, gen,
                                                position_streams(sample_stream, s, rec.positions), opt.cfg_scale));
    }
  };

  for (std::size_t k = 0; k < schedule.num_steps(); ++k) {
    StepRecord rec;
    rec.positions = schedule.steps[k];
    const Tensor tokens({n, D}, grid);
    const Tensor z_all = model.ar().forward(tokens, known, class_id);
    Tensor zu_all;
    if (guided) zu_all = model.ar().forward(tokens, known, cfg.null_class());
    rec.z = gather_rows(z_all, rec.positions);
    if (guided) rec.z_uncond = gather_rows(zu_all, rec.positions);

    const auto canon_streams = position_streams(sample_stream, 0, rec.positions);
    if (opt.consistency && k > 0) {
      const Tensor zp = gather_rows(prev_z_all, rec.positions);
      const Tensor zpu = guided ? gather_rows(prev_zu_all, rec.positions) : Tensor();
      rec.preview = diffuse_sample(model, zp, zpu, gen, canon_streams, opt.cfg_scale, false).x0();
    }
    rec.trajectories.push_back(diffuse_sample(model, rec.z, rec.z_uncond, gen, canon_streams, opt.cfg_scale));
    if (!opt.resample_post_hoc) sample_extra(rec);

    const Tensor& x0 = rec.trajectories[0].x0();
    for (std::size_t r = 0; r < rec.positions.size(); ++r) {
      const std::size_t j = rec.positions[r];
      known[j] = true;
      for (std::size_t c = 0; c < D; ++c) grid[j * D + c] = x0.vec()[r * D + c];
    }
    prev_z_all = z_all;
    prev_zu_all = zu_all;
    g.steps.push_back(std::move(rec));
  }
  if (opt.resample_post_hoc)
    for (auto& rec : g.steps) sample_extra(rec);

  g.grid = Tensor({n, D}, grid);
  if (opt.consistency) {
    const std::vector<bool> all(n, true);
    const Tensor z_full = model.ar().forward(g.grid, all, class_id);
    const Tensor zu_full = guided ? model.ar().forward(g.grid, all, cfg.null_class()) : Tensor();
    std::vector<std::size_t> every(n);
    for (std::size_t j = 0; j < n; ++j) every[j] = j;
    g.final_decode =
        diffuse_sample(model, z_full, zu_full, gen, position_streams(sample_stream, 0, every), opt.cfg_scale, false)
            .x0();
  }
  return g;
}

}  // namespace marl
