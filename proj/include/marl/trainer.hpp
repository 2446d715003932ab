#pragma once

// RL post-training loop: rollout groups from the current policy, assemble
// the objective over subsampled steps, one optimizer step per iteration.
//
// Run directory layout:
//   config.txt       serialized config, fingerprint in the first line
//   metrics.jsonl    one record per iteration
//   timing.jsonl     wall-clock seconds per iteration
//   checkpoint.ckpt  last checkpoint (policy + optimizer state)
//   summary.json     pre-RL and final held-out evaluations
//   diagnostic.json  written when a numeric failure aborts the run

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "marl/checkpoint.hpp"
#include "marl/config.hpp"
#include "marl/evaluate.hpp"
#include "marl/grpo.hpp"
#include "marl/metrics.hpp"
#include "marl/optim.hpp"
#include "marl/rollout.hpp"

namespace marl {

inline SyntheticData load_templates(const TrainConfig& cfg) {
  DataConfig dc;
  dc.grid_h = cfg.model.grid_h;
  dc.grid_w = cfg.model.grid_w;
  dc.token_dim = cfg.model.token_dim;
  dc.num_classes = cfg.model.num_classes;
  if (!cfg.templates.empty() && std::filesystem::exists(cfg.templates)) {
    auto d = SyntheticData::load(cfg.templates);
    const auto& c = d.config();
    if (c.grid_h == dc.grid_h && c.grid_w == dc.grid_w && c.token_dim == dc.token_dim &&
        c.num_classes == dc.num_classes) {
      return d;
    }
  }
  return SyntheticData::generate(dc);
}

inline GenerateOptions generate_options(const TrainConfig& cfg) {
  GenerateOptions g;
  const bool mte = cfg.objective_kind() == ObjectiveKind::mte;
  g.trajectories = mte ? cfg.trajectories : 1;
  g.consistency = mte && cfg.consistency;
  g.cfg_scale = cfg.cfg_scale;
  g.resample_post_hoc = cfg.mte_resample_post_hoc;
  return g;
}

inline TermOptions term_options(const TrainConfig& cfg) {
  TermOptions t;
  const bool mte = cfg.objective_kind() == ObjectiveKind::mte;
  t.trajectories = mte ? cfg.trajectories : 1;
  t.k_percent = mte ? cfg.k_percent : 0.0;
  t.reduction = cfg.reduction();
  t.consistency = mte && cfg.consistency;
  t.tau = cfg.tau;
  t.cfg_scale = cfg.cfg_scale;
  t.ratio_dim_normalize = cfg.ratio_dim_normalize;
  return t;
}

inline void apply_freeze(const MarModel& model, const TrainConfig& cfg) {
  model.set_trainable(!cfg.freeze_ar, !cfg.freeze_head);
}

inline ParamList trainable_params(const MarModel& model) {
  ParamList out;
  for (auto& p : model.params())
    if (p.second.requires_grad()) out.push_back(p);
  return out;
}

/// Classes of the prompts drawn at iteration `it`.
inline std::vector<std::size_t> iteration_classes(const TrainConfig& cfg, std::size_t it) {
  RngStream rng(CounterRng(cfg.seed), stream_id({0xC1A5, it}));
  std::vector<std::size_t> cls;
  for (std::size_t p = 0; p < cfg.prompts_per_step; ++p) cls.push_back(rng.below(cfg.model.num_classes));
  return cls;
}

inline std::uint64_t group_stream(const TrainConfig& cfg, std::size_t it, std::size_t prompt) {
  return stream_id({cfg.seed, 0x6A0B, it, prompt});
}

struct PolicyGradient {
  double objective = 0.0;
  TermDiagnostics diag;
  std::size_t terms = 0;
};

/// Accumulates d(-J)/d(theta) into the parameter gradients, J being the
/// objective averaged over all records and their selected steps. The
/// step-selection stream of record r is keyed by (selection_stream, r).
inline PolicyGradient accumulate_policy_gradient(const MarModel& policy, const MarModel* ref,
                                                 const std::vector<RolloutRecord>& recs, const TrainConfig& cfg,
                                                 std::uint64_t selection_stream) {
  const auto topt = term_options(cfg);
  const ObjectiveOptions oopt{cfg.clip_eps, cfg.beta};
  const bool baseline = cfg.objective_kind() == ObjectiveKind::baseline;
  const CounterRng gen(cfg.seed);
  PolicyGradient out;
  const double weight = 1.0 / static_cast<double>(recs.size());
  for (std::size_t r = 0; r < recs.size(); ++r) {
    const auto& rec = recs[r];
    const auto sel = select_steps(cfg.model.mask_steps, cfg.model.diffusion_steps, cfg.mask_select,
                                  cfg.diffusion_select, gen, stream_id({selection_stream, r}));
    std::optional<ConsistencyMask> cm;
    if (topt.consistency) cm = generation_consistency(rec.gen, cfg.model.token_dim, topt.tau);
    Tape tape;
    TapeScope scope(tape);
    std::vector<StepTerms> terms;
    for (std::size_t m : sel.mask_steps)
      terms.push_back(build_step_terms(policy, cfg.beta > 0.0 ? ref : nullptr, rec, m, sel.diffusion_steps, topt,
                                       cm ? &*cm : nullptr));
    const Tensor J = baseline ? baseline_objective(terms, oopt, &out.diag) : assemble_objective(terms, oopt, &out.diag);
    out.objective += J.item() * weight;
    out.terms += terms.size();
    if (!tape.empty()) tape.backward(J * -weight);
  }
  return out;
}

/// Flattened AR-parameter gradient of one batch of rollouts drawn from
/// `stream`, for variance probes. Leaves all gradients zeroed.
inline std::vector<double> ar_gradient_estimate(const MarModel& policy, const MarModel* ref, const TrainConfig& cfg,
                                                const SyntheticData& data, const RewardModel& reward,
                                                const std::vector<std::size_t>& classes, std::uint64_t stream) {
  const CounterRng gen(cfg.seed);
  std::vector<RolloutRecord> recs;
  for (std::size_t p = 0; p < classes.size(); ++p) {
    auto g = rollout_group(policy, classes[p], cfg.group_size, generate_options(cfg), gen, stream_id({stream, p}), data,
                           reward, cfg.workers);
    for (auto& r : g) recs.push_back(std::move(r));
  }
  policy.zero_grad();
  accumulate_policy_gradient(policy, ref, recs, cfg, stream_id({stream, 0x5E1}));
  auto g = flatten_grads(policy.ar_params());
  policy.zero_grad();
  return g;
}

struct TrainHooks {
  std::function<void(const MetricsRecord&)> on_iteration;
  std::optional<std::size_t> stop_after;  // return early after this iteration (simulated interruption)
};

struct TrainResult {
  std::size_t iterations_run = 0;
  std::size_t resumed_from = 0;
  EvalReport pre_rl;
  EvalReport final_eval;
  std::vector<MetricsRecord> metrics;
};

class Trainer {
 public:
  Trainer(TrainConfig cfg, MarModel base) : cfg_(std::move(cfg)), base_(std::move(base)) {
    cfg_.validate();
    if (base_.config().num_tokens() != cfg_.model.num_tokens() || base_.config().token_dim != cfg_.model.token_dim) {
      throw ConfigError("base checkpoint does not match the configured grid");
    }
    cfg_.model = base_.config();
    data_ = load_templates(cfg_);
    reward_ = RewardModel::from_data(data_, parse_reward_kind(cfg_.reward));
    fingerprint_ = config_fingerprint(cfg_);
  }

  const TrainConfig& config() const { return cfg_; }
  const std::string& fingerprint() const { return fingerprint_; }
  const SyntheticData& data() const { return data_; }
  const RewardModel& reward() const { return reward_; }

  std::filesystem::path dir() const { return cfg_.output_dir; }
  std::filesystem::path checkpoint_path() const { return dir() / "checkpoint.ckpt"; }
  std::filesystem::path metrics_path() const { return dir() / "metrics.jsonl"; }

  EvalReport heldout(const MarModel& m) const {
    return evaluate(m, data_, reward_, cfg_.eval_samples, cfg_.eval_seed, cfg_.cfg_scale, cfg_.workers);
  }

  /// Runs (or resumes) the configured number of iterations.
  TrainResult run(bool resume = true, const TrainHooks& hooks = {}) {
    std::filesystem::create_directories(dir());
    write_config_file();

    MarModel ref = base_.clone();
    ref.set_trainable(false, false);
    MarModel policy = base_.clone();
    apply_freeze(policy, cfg_);
    Adam opt(AdamConfig{.lr = cfg_.lr, .clip_norm = cfg_.grad_clip});

    TrainResult res;
    std::size_t start = 0;
    if (resume && std::filesystem::exists(checkpoint_path())) {
      auto ck = load_checkpoint(checkpoint_path());
      if (ck.info.fingerprint != fingerprint_) {
        throw ConfigError("checkpoint in '" + dir().string() + "' was written by a different config");
      }
      policy = std::move(ck.model);
      apply_freeze(policy, cfg_);
      opt.load_state(ck.archive, policy.params());
      start = ck.info.iteration;
      res.resumed_from = start;
      truncate_metrics(metrics_path(), start ? std::optional<std::size_t>(start) : std::nullopt);
    } else {
      truncate_metrics(metrics_path(), std::nullopt);
      std::filesystem::remove(dir() / "timing.jsonl");
    }

    res.pre_rl = heldout(ref);
    MetricsWriter writer(metrics_path(), fingerprint_);
    if (start) writer.set_last_iteration(start);
    std::ofstream timing(dir() / "timing.jsonl", std::ios::app);

    const auto params = trainable_params(policy);
    for (std::size_t it = start + 1; it <= cfg_.iterations; ++it) {
      const auto t0 = std::chrono::steady_clock::now();
      MetricsRecord rec;
      try {
        rec = iteration(policy, ref, params, opt, it);
      } catch (const NumericError& e) {
        write_diagnostic(it, e.what());
        throw;
      }
      writer.write(rec);
      res.metrics.push_back(rec);
      ++res.iterations_run;
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      timing << nlohmann::json{{"iteration", it}, {"seconds", secs}}.dump() << "\n" << std::flush;
      if (hooks.on_iteration) hooks.on_iteration(rec);
      if (it % cfg_.checkpoint_every == 0 || it == cfg_.iterations) {
        save_checkpoint(checkpoint_path(), policy, CheckpointInfo{fingerprint_, it, {}}, &opt);
      }
      if (hooks.stop_after && it >= *hooks.stop_after) return res;
    }
    res.final_eval = heldout(policy);
    nlohmann::json summary;
    summary["config"] = fingerprint_;
    summary["pre_rl"] = res.pre_rl.to_json();
    summary["final"] = res.final_eval.to_json();
    std::ofstream(dir() / "summary.json") << summary.dump(2) << "\n";
    return res;
  }

 private:
  MetricsRecord iteration(const MarModel& policy, const MarModel& ref, const ParamList& params, Adam& opt,
                          std::size_t it) {
    const CounterRng gen(cfg_.seed);
    const auto classes = iteration_classes(cfg_, it);
    std::vector<RolloutRecord> recs;
    std::vector<double> rewards;
    for (std::size_t p = 0; p < classes.size(); ++p) {
      auto g = rollout_group(policy, classes[p], cfg_.group_size, generate_options(cfg_), gen,
                             group_stream(cfg_, it, p), data_, reward_, cfg_.workers);
      if (cfg_.dump_rollouts) {
        save_rollout_dump(dir() / "rollouts" / ("it" + std::to_string(it) + "_p" + std::to_string(p) + ".rollout"), g,
                          cfg_.model.diffusion_steps);
      }
      for (auto& r : g) {
        rewards.push_back(r.reward);
        recs.push_back(std::move(r));
      }
    }

    MetricsRecord m;
    m.iteration = it;
    for (double r : rewards) {
      m.reward_mean += r / static_cast<double>(rewards.size());
      m.reward_max = std::max(m.reward_max, r);
    }

    if (cfg_.grad_var_every && it % cfg_.grad_var_every == 0 && !cfg_.freeze_ar) {
      std::vector<std::vector<double>> est;
      for (std::size_t e = 0; e < cfg_.grad_var_estimates; ++e) {
        est.push_back(ar_gradient_estimate(policy, &ref, cfg_, data_, reward_, classes, stream_id({cfg_.seed, 0x7A2, it, e})));
      }
      m.grad_variance = grad_stats(est).variance;
    }

    policy.zero_grad();
    if (!params.empty()) {
      const auto pg = accumulate_policy_gradient(policy, &ref, recs, cfg_, stream_id({cfg_.seed, 0x5E1, it}));
      m.objective = pg.objective;
      m.kl = pg.terms ? pg.diag.kl / static_cast<double>(pg.terms) : 0.0;
      m.clip_fraction = pg.diag.ratio_entries
                            ? static_cast<double>(pg.diag.clip_hits) / static_cast<double>(pg.diag.ratio_entries)
                            : 0.0;
      m.exp_clamp_hits = pg.diag.exp_clamp_hits;
      const double slots = static_cast<double>(pg.diag.tokens);
      m.kappa_fraction = slots > 0 ? static_cast<double>(pg.diag.kappa_on) / slots : 0.0;
      m.mask_fraction = slots > 0 ? static_cast<double>(pg.diag.mask_on) / slots : 0.0;
      m.empty_kappa_terms = pg.diag.empty_kappa_terms;
      m.grad_norm = opt.step(params);
    }
    policy.zero_grad();

    if ((cfg_.eval_every && it % cfg_.eval_every == 0) || it == cfg_.iterations) {
      m.heldout_reward = heldout(policy).reward_mean;
    }
    return m;
  }

  void write_config_file() const {
    std::ofstream os(dir() / "config.txt");
    os << "# fingerprint " << fingerprint_ << "\n" << serialize_config(cfg_);
    if (!os) throw IoError("cannot write config into '" + dir().string() + "'");
  }

  void write_diagnostic(std::size_t it, const std::string& what) const {
    nlohmann::json j{{"iteration", it}, {"error", what}, {"config", fingerprint_},
                     {"last_checkpoint", std::filesystem::exists(checkpoint_path()) ? checkpoint_path().string() : ""}};
    std::ofstream(dir() / "diagnostic.json") << j.dump(2) << "\n";
  }

  TrainConfig cfg_;
  MarModel base_;
  SyntheticData data_;
  RewardModel reward_;
  std::string fingerprint_;
};

}  // namespace marl
