#pragma once

// Run configuration: every knob, its key=value text form, and a stable
// fingerprint of the serialized text.
//
// Config file format: one `key = value` per line; blank lines and lines
// starting with '#' are ignored. Booleans are true/false; -inf and inf
// are accepted for numbers. Unknown keys are an error.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "marl/errors.hpp"
#include "marl/grpo.hpp"
#include "marl/model.hpp"
#include "marl/reward.hpp"

namespace marl {

enum class FreezeMode { end2end, frozen_head, head_only, frozen_all };

inline FreezeMode freeze_mode(bool freeze_head, bool freeze_ar) {
  if (freeze_head && freeze_ar) return FreezeMode::frozen_all;
  if (freeze_head) return FreezeMode::frozen_head;
  if (freeze_ar) return FreezeMode::head_only;
  return FreezeMode::end2end;
}

enum class ObjectiveKind { mte, baseline };

struct TrainConfig {
  ModelConfig model;

  // pretraining
  std::size_t pretrain_steps = 500;
  std::size_t pretrain_batch = 8;
  double pretrain_lr = 1e-3;
  bool warmup_head_only = false;
  double cond_dropout = 0.1;
  std::size_t heldout_size = 64;

  // rollout and objective
  std::size_t group_size = 4;
  std::size_t prompts_per_step = 3;
  std::size_t mask_select = 8;       // |M|
  std::size_t diffusion_select = 9;  // |T_sel|
  std::size_t trajectories = 3;      // S
  double k_percent = 30.0;
  std::string channel_reduction = "mean";
  bool consistency = true;
  double tau = 0.0;
  double clip_eps = 1e-4;
  double beta = 0.01;
  double cfg_scale = 1.0;
  bool ratio_dim_normalize = true;
  bool mte_resample_post_hoc = true;
  std::string objective = "mte";
  std::string reward = "pattern";

  // optimization
  double lr = 1e-4;
  double grad_clip = 1.0;
  bool freeze_head = true;
  bool freeze_ar = false;

  // run control
  std::uint64_t seed = 1;
  std::uint64_t eval_seed = 0xE7A1;
  std::size_t iterations = 200;
  std::size_t checkpoint_every = 50;
  std::size_t eval_every = 25;
  std::size_t eval_samples = 2;  // per class
  std::size_t grad_var_every = 0;
  std::size_t grad_var_estimates = 4;
  std::size_t workers = 1;
  bool dump_rollouts = false;
  std::string base_checkpoint = "data/pretrained.ckpt";
  std::string templates = "data/templates.bin";
  std::string output_dir = "runs/default";

  FreezeMode mode() const { return freeze_mode(freeze_head, freeze_ar); }
  ObjectiveKind objective_kind() const {
    if (objective == "mte") return ObjectiveKind::mte;
    if (objective == "baseline") return ObjectiveKind::baseline;
    throw ConfigError("unknown objective '" + objective + "' (expected mte or baseline)");
  }
  ChannelReduction reduction() const {
    if (channel_reduction == "mean") return ChannelReduction::mean;
    if (channel_reduction == "l2") return ChannelReduction::l2;
    throw ConfigError("unknown channel reduction '" + channel_reduction + "' (expected mean or l2)");
  }

  void validate() const {
    model.validate();
    if (group_size < 2) throw ConfigError("group_size must be at least 2");
    if (prompts_per_step == 0) throw ConfigError("prompts_per_step must be positive");
    if (trajectories == 0) throw ConfigError("trajectories must be positive");
    if (mask_select == 0 || mask_select > model.mask_steps) throw ConfigError("mask_select must lie in [1, K]");
    if (diffusion_select == 0 || diffusion_select + 1 > model.diffusion_steps) {
      throw ConfigError("diffusion_select must lie in [1, T-1]");
    }
    if (!(k_percent >= 0.0 && k_percent <= 100.0)) throw ConfigError("k_percent must lie in [0, 100]");
    if (!(clip_eps > 0.0)) throw ConfigError("clip_eps must be positive");
    if (!(beta >= 0.0)) throw ConfigError("beta must be nonnegative");
    if (!(lr >= 0.0)) throw ConfigError("lr must be nonnegative");
    if (checkpoint_every == 0) throw ConfigError("checkpoint_every must be positive");
    if (!(cond_dropout >= 0.0 && cond_dropout <= 1.0)) throw ConfigError("cond_dropout must lie in [0, 1]");
    objective_kind();
    reduction();
    parse_reward_kind(reward);
  }
};

namespace detail {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& key, const std::string& s) {
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  std::size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != s.size()) throw ConfigError("'" + key + "' expects a number, got '" + s + "'");
  return v;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& s) {
  std::size_t pos = 0;
  std::uint64_t v = 0;
  try {
    if (!s.empty() && s[0] != '-') v = std::stoull(s, &pos, 0);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != s.size()) throw ConfigError("'" + key + "' expects a nonnegative integer, got '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1" || s == "on") return true;
  if (s == "false" || s == "0" || s == "off") return false;
  throw ConfigError("'" + key + "' expects true or false, got '" + s + "'");
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

/// One configurable key with accessors bound to a TrainConfig.
struct ConfigField {
  std::string key;
  std::string help;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = [] {
    std::vector<ConfigField> f;
    const auto num = [&f](const std::string& key, const std::string& help, auto member) {
      f.push_back({key, help, [member](const TrainConfig& c) { return detail::format_double(member(c)); },
                   [member, key](TrainConfig& c, const std::string& v) { member(c) = detail::parse_double(key, v); }});
    };
    const auto uint = [&f](const std::string& key, const std::string& help, auto member) {
      f.push_back({key, help, [member](const TrainConfig& c) { return std::to_string(member(c)); },
                   [member, key](TrainConfig& c, const std::string& v) {
                     member(c) = static_cast<std::remove_reference_t<decltype(member(c))>>(detail::parse_uint(key, v));
                   }});
    };
    const auto flag = [&f](const std::string& key, const std::string& help, auto member) {
      f.push_back({key, help, [member](const TrainConfig& c) { return member(c) ? "true" : "false"; },
                   [member, key](TrainConfig& c, const std::string& v) { member(c) = detail::parse_bool(key, v); }});
    };
    const auto text = [&f](const std::string& key, const std::string& help, auto member) {
      f.push_back({key, help, [member](const TrainConfig& c) { return member(c); },
                   [member](TrainConfig& c, const std::string& v) { member(c) = v; }});
    };
#define MARL_M(expr) [](auto& c) -> auto& { return c.expr; }
    uint("grid_h", "grid height", MARL_M(model.grid_h));
    uint("grid_w", "grid width", MARL_M(model.grid_w));
    uint("token_dim", "channels per token", MARL_M(model.token_dim));
    uint("num_classes", "number of classes", MARL_M(model.num_classes));
    uint("ar_width", "AR backbone width", MARL_M(model.ar_width));
    uint("ar_heads", "AR attention heads", MARL_M(model.ar_heads));
    uint("ar_blocks", "AR transformer blocks", MARL_M(model.ar_blocks));
    uint("ar_mlp_ratio", "AR MLP expansion", MARL_M(model.ar_mlp_ratio));
    uint("cond_dim", "conditioning vector width", MARL_M(model.cond_dim));
    uint("head_width", "diffusion head width", MARL_M(model.head_width));
    uint("head_layers", "diffusion head layers", MARL_M(model.head_layers));
    uint("time_embed_dim", "timestep embedding width", MARL_M(model.time_embed_dim));
    uint("diffusion_steps", "T, diffusion steps", MARL_M(model.diffusion_steps));
    uint("mask_steps", "K, AR mask steps", MARL_M(model.mask_steps));
    num("x0_clamp", "clamp bound on predicted x0", MARL_M(model.x0_clamp));
    uint("pretrain_steps", "pretraining optimizer steps", MARL_M(pretrain_steps));
    uint("pretrain_batch", "samples per pretraining step", MARL_M(pretrain_batch));
    num("pretrain_lr", "pretraining learning rate", MARL_M(pretrain_lr));
    flag("warmup_head_only", "pretrain the diffusion head only", MARL_M(warmup_head_only));
    num("cond_dropout", "class dropout rate during pretraining", MARL_M(cond_dropout));
    uint("heldout_size", "held-out denoising examples", MARL_M(heldout_size));
    uint("group_size", "G, rollouts per prompt", MARL_M(group_size));
    uint("prompts_per_step", "prompts per iteration", MARL_M(prompts_per_step));
    uint("mask_select", "|M|, mask steps per sample", MARL_M(mask_select));
    uint("diffusion_select", "|T_sel|, diffusion steps per mask step", MARL_M(diffusion_select));
    uint("trajectories", "S, diffusion trajectories per AR latent", MARL_M(trajectories));
    num("k_percent", "share of most uncertain tokens given the multi-trajectory loss", MARL_M(k_percent));
    text("channel_reduction", "mean or l2", MARL_M(channel_reduction));
    flag("consistency", "consistency-aware token selection", MARL_M(consistency));
    num("tau", "similarity-gain threshold", MARL_M(tau));
    num("clip_eps", "ratio clip range", MARL_M(clip_eps));
    num("beta", "KL weight", MARL_M(beta));
    num("cfg_scale", "classifier-free guidance scale", MARL_M(cfg_scale));
    flag("ratio_dim_normalize", "divide log-probs by token dimension", MARL_M(ratio_dim_normalize));
    flag("mte_resample_post_hoc", "draw extra trajectories after the AR chain", MARL_M(mte_resample_post_hoc));
    text("objective", "mte or baseline", MARL_M(objective));
    text("reward", "pattern, count or composite", MARL_M(reward));
    num("lr", "RL learning rate", MARL_M(lr));
    num("grad_clip", "gradient-norm clip (0 disables)", MARL_M(grad_clip));
    flag("freeze_head", "freeze the diffusion head", MARL_M(freeze_head));
    flag("freeze_ar", "freeze the AR backbone", MARL_M(freeze_ar));
    uint("seed", "run seed", MARL_M(seed));
    uint("eval_seed", "held-out evaluation seed", MARL_M(eval_seed));
    uint("iterations", "RL iterations", MARL_M(iterations));
    uint("checkpoint_every", "checkpoint period in iterations", MARL_M(checkpoint_every));
    uint("eval_every", "held-out evaluation period (0 = final only)", MARL_M(eval_every));
    uint("eval_samples", "held-out samples per class", MARL_M(eval_samples));
    uint("grad_var_every", "gradient-variance probe period (0 = off)", MARL_M(grad_var_every));
    uint("grad_var_estimates", "gradient estimates per variance probe", MARL_M(grad_var_estimates));
    uint("workers", "rollout threads", MARL_M(workers));
    flag("dump_rollouts", "write rollout dumps", MARL_M(dump_rollouts));
    text("base_checkpoint", "pretrained checkpoint", MARL_M(base_checkpoint));
    text("templates", "stored class templates", MARL_M(templates));
    text("output_dir", "run output directory", MARL_M(output_dir));
#undef MARL_M
    return f;
  }();
  return fields;
}

inline const ConfigField& config_field(const std::string& key) {
  for (const auto& f : config_fields())
    if (f.key == key) return f;
  throw ConfigError("unknown config key '" + key + "'");
}

inline void set_config_value(TrainConfig& c, const std::string& key, const std::string& value) {
  config_field(key).set(c, value);
}

/// key = value lines in registry order.
inline std::string serialize_config(const TrainConfig& c) {
  std::ostringstream os;
  for (const auto& f : config_fields()) os << f.key << " = " << f.get(c) << "\n";
  return os.str();
}

inline void apply_config_text(TrainConfig& c, const std::string& text) {
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    set_config_value(c, detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
  }
}

inline TrainConfig parse_config(const std::string& text) {
  TrainConfig c;
  apply_config_text(c, text);
  return c;
}

inline TrainConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config file '" + path.string() + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

/// Keys that cannot change a run's numbers.
inline bool affects_results(const std::string& key) {
  return key != "output_dir" && key != "workers" && key != "dump_rollouts";
}

/// FNV-1a 64 of the serialized result-affecting keys, as 16 hex digits.
inline std::string config_fingerprint(const TrainConfig& c) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const auto& f : config_fields()) {
    if (!affects_results(f.key)) continue;
    for (unsigned char ch : f.key + " = " + f.get(c) + "\n") {
      h ^= ch;
      h *= 0x100000001B3ULL;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace marl
