#pragma once

// Group rollouts with retained sampling states, group-normalized
// advantages, step subsampling, and the rollout dump format.

#include <algorithm>
#include <cmath>
#include <exception>
#include <filesystem>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "marl/archive.hpp"
#include "marl/data.hpp"
#include "marl/reward.hpp"
#include "marl/sampler.hpp"

namespace marl {

inline constexpr double kAdvantageEps = 1e-8;

struct RolloutRecord {
  std::size_t sample_id = 0;
  std::size_t class_id = 0;
  std::uint64_t stream = 0;  // noise and mask streams derive from this id
  Generation gen;
  double reward = 0.0;
  double advantage = 0.0;

  std::size_t num_trajectories() const { return gen.steps.empty() ? 0 : gen.steps[0].trajectories.size(); }
};

/// (R - mean) / (population std + eps).
inline std::vector<double> group_advantages(std::span<const double> rewards, double eps = kAdvantageEps) {
  if (rewards.empty()) return {};
  double m = 0.0;
  for (double r : rewards) m += r;
  m /= static_cast<double>(rewards.size());
  double q = 0.0;
  for (double r : rewards) q += (r - m) * (r - m);
  const double sd = std::sqrt(q / static_cast<double>(rewards.size()));
  std::vector<double> a(rewards.size());
  for (std::size_t i = 0; i < rewards.size(); ++i) a[i] = (rewards[i] - m) / (sd + eps);
  return a;
}

struct StepSelection {
  std::vector<std::size_t> mask_steps;       // 1-based, ascending, subset of {1..K}
  std::vector<std::size_t> diffusion_steps;  // ascending, subset of {2..T}
  std::uint64_t stream = 0;
};

/// Uniform selection without replacement of |M| mask steps and |T_sel|
/// diffusion steps.
inline StepSelection select_steps(std::size_t K, std::size_t T, std::size_t n_mask, std::size_t n_diff,
                                  const CounterRng& gen, std::uint64_t stream) {
  if (n_mask > K) throw ConfigError("select_steps: |M|=" + std::to_string(n_mask) + " exceeds K=" + std::to_string(K));
  if (T < 1 || n_diff > T - 1) {
    throw ConfigError("select_steps: |T_sel|=" + std::to_string(n_diff) + " exceeds T-1=" + std::to_string(T ? T - 1 : 0));
  }
  StepSelection sel;
  sel.stream = stream;
  RngStream rng(gen, stream);
  auto pm = rng.permutation(K);
  for (std::size_t i = 0; i < n_mask; ++i) sel.mask_steps.push_back(pm[i] + 1);
  auto pt = rng.permutation(T - 1);
  for (std::size_t i = 0; i < n_diff; ++i) sel.diffusion_steps.push_back(pt[i] + 2);
  std::sort(sel.mask_steps.begin(), sel.mask_steps.end());
  std::sort(sel.diffusion_steps.begin(), sel.diffusion_steps.end());
  return sel;
}

inline std::uint64_t member_stream(std::uint64_t group_stream, std::size_t i) { return stream_id({group_stream, 0x6E3B, i}); }

inline MaskSchedule member_mask_schedule(const ModelConfig& cfg, const CounterRng& gen, std::uint64_t stream) {
  return MaskSchedule::cosine(cfg.num_tokens(), cfg.mask_steps, gen, stream_id({stream, 0x3A5C}));
}

/// Runs `items` calls of fn(i) across up to `workers` threads; the first
/// exception is rethrown after all threads join.
template <class Fn>
void parallel_for(std::size_t items, std::size_t workers, Fn fn) {
  workers = std::max<std::size_t>(1, std::min(workers, items));
  if (workers == 1) {
    for (std::size_t i = 0; i < items; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < items; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// G rollouts of class c from the frozen snapshot `policy`, each with its
/// own mask permutation, followed by reward and advantage computation.
inline std::vector<RolloutRecord> rollout_group(const MarModel& policy, std::size_t class_id, std::size_t G,
                                                const GenerateOptions& opt, const CounterRng& gen,
                                                std::uint64_t group_stream, const SyntheticData& data,
                                                const RewardModel& reward, std::size_t workers = 1) {
  if (G < 2) throw ConfigError("rollout_group: group size must be at least 2, got " + std::to_string(G));
  if (class_id >= policy.config().num_classes) throw ConfigError("unknown class id " + std::to_string(class_id));
  std::vector<RolloutRecord> recs(G);
  NoGradScope no_grad;
  parallel_for(G, workers, [&](std::size_t i) {
    auto& r = recs[i];
    r.sample_id = i;
    r.class_id = class_id;
    r.stream = member_stream(group_stream, i);
    r.gen = generate(policy, class_id, member_mask_schedule(policy.config(), gen, r.stream), gen, r.stream, opt);
    r.reward = compute_reward(r.gen.grid, class_id, reward, data);
  });
  std::vector<double> rewards;
  for (const auto& r : recs) rewards.push_back(r.reward);
  const auto adv = group_advantages(rewards);
  for (std::size_t i = 0; i < G; ++i) recs[i].advantage = adv[i];
  return recs;
}

/// Z^m (1-based m) for the positions of X^m under the model's current
/// parameters, from the tokens stored in the record. Differentiable.
inline Tensor recompute_conditioning(const MarModel& model, const RolloutRecord& rec, std::size_t m,
                                     std::size_t class_id) {
  const auto& g = rec.gen;
  if (m == 0 || m > g.steps.size() || !g.grid.defined()) {
    throw SequencingError("recompute_conditioning: record has no stored states for mask step " + std::to_string(m));
  }
  const std::size_t n = model.config().num_tokens();
  const Tensor z = model.ar().forward(g.grid, g.schedule.known_before(m, n), class_id);
  return gather_rows(z, g.steps[m - 1].positions);
}

inline Tensor recompute_conditioning(const MarModel& model, const RolloutRecord& rec, std::size_t m) {
  return recompute_conditioning(model, rec, m, rec.class_id);
}

// Rollout dump: one archive per group. Meta holds the group layout, the
// rewards and advantages; tensors are named
//   i<i>.grid, i<i>.final, i<i>.k<k>.pos, i<i>.k<k>.z, i<i>.k<k>.zu,
//   i<i>.k<k>.preview, i<i>.k<k>.s<s>.x<t>, i<i>.k<k>.s<s>.lp<t>
// with k 1-based and missing optional entries omitted.
inline constexpr int kRolloutDumpVersion = 1;

inline void save_rollout_dump(const std::filesystem::path& path, const std::vector<RolloutRecord>& recs,
                              std::size_t T) {
  Archive a;
  a.meta["kind"] = "rollout_dump";
  a.meta["dump_version"] = kRolloutDumpVersion;
  a.meta["T"] = T;
  a.meta["records"] = nlohmann::json::array();
  for (const auto& r : recs) {
    const std::string p = "i" + std::to_string(r.sample_id);
    a.meta["records"].push_back({{"sample_id", r.sample_id},
                                 {"class_id", r.class_id},
                                 {"stream", r.stream},
                                 {"reward", r.reward},
                                 {"advantage", r.advantage},
                                 {"steps", r.gen.steps.size()},
                                 {"trajectories", r.num_trajectories()}});
    a.put(p + ".grid", r.gen.grid);
    if (r.gen.final_decode.defined()) a.put(p + ".final", r.gen.final_decode);
    for (std::size_t k = 0; k < r.gen.steps.size(); ++k) {
      const auto& st = r.gen.steps[k];
      const std::string q = p + ".k" + std::to_string(k + 1);
      a.put(q + ".pos", {st.positions.size()}, std::vector<double>(st.positions.begin(), st.positions.end()));
      a.put(q + ".z", st.z);
      if (st.z_uncond.defined()) a.put(q + ".zu", st.z_uncond);
      if (st.preview.defined()) a.put(q + ".preview", st.preview);
      for (std::size_t s = 0; s < st.trajectories.size(); ++s) {
        const auto& tr = st.trajectories[s];
        const std::string u = q + ".s" + std::to_string(s);
        for (std::size_t t = 0; t < tr.states.size(); ++t) a.put(u + ".x" + std::to_string(t), tr.states[t]);
        for (std::size_t t = 0; t < tr.logp.size(); ++t)
          if (tr.logp[t].defined()) a.put(u + ".lp" + std::to_string(t), tr.logp[t]);
      }
    }
  }
  a.save(path);
}

inline std::vector<RolloutRecord> load_rollout_dump(const std::filesystem::path& path) {
  const Archive a = Archive::load(path);
  if (a.meta.value("kind", "") != "rollout_dump") throw IoError("'" + path.string() + "' is not a rollout dump");
  if (a.meta.value("dump_version", 0) != kRolloutDumpVersion) throw IoError("unsupported rollout dump version");
  const std::size_t T = a.meta.at("T");
  std::vector<RolloutRecord> recs;
  for (const auto& m : a.meta.at("records")) {
    RolloutRecord r;
    r.sample_id = m.at("sample_id");
    r.class_id = m.at("class_id");
    r.stream = m.at("stream");
    r.reward = m.at("reward");
    r.advantage = m.at("advantage");
    r.gen.class_id = r.class_id;
    const std::string p = "i" + std::to_string(r.sample_id);
    r.gen.grid = a.tensor(p + ".grid");
    if (a.contains(p + ".final")) r.gen.final_decode = a.tensor(p + ".final");
    const std::size_t K = m.at("steps"), S = m.at("trajectories");
    for (std::size_t k = 0; k < K; ++k) {
      const std::string q = p + ".k" + std::to_string(k + 1);
      StepRecord st;
      for (double v : a.get(q + ".pos").data) st.positions.push_back(static_cast<std::size_t>(v));
      st.z = a.tensor(q + ".z");
      if (a.contains(q + ".zu")) st.z_uncond = a.tensor(q + ".zu");
      if (a.contains(q + ".preview")) st.preview = a.tensor(q + ".preview");
      for (std::size_t s = 0; s < S; ++s) {
        const std::string u = q + ".s" + std::to_string(s);
        Trajectory tr;
        tr.states.resize(T + 1);
        tr.logp.resize(T + 1);
        for (std::size_t t = 0; t <= T; ++t) tr.states[t] = a.tensor(u + ".x" + std::to_string(t));
        for (std::size_t t = 0; t <= T; ++t)
          if (a.contains(u + ".lp" + std::to_string(t))) tr.logp[t] = a.tensor(u + ".lp" + std::to_string(t));
        st.trajectories.push_back(std::move(tr));
      }
      r.gen.schedule.steps.push_back(st.positions);
      r.gen.steps.push_back(std::move(st));
    }
    recs.push_back(std::move(r));
  }
  return recs;
}

}  // namespace marl
