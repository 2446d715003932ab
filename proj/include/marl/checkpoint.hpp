#pragma once

// Model checkpoints on top of the archive container. Parameters are stored
// as "param.<name>"; the manifest meta carries the model config, the noise
// schedule constants and the fingerprint of the producing run config.

#include <filesystem>
#include <string>

#include "marl/archive.hpp"
#include "marl/model.hpp"
#include "marl/optim.hpp"

namespace marl {

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json model_config_json(const ModelConfig& c) {
  return {{"grid_h", c.grid_h},
          {"grid_w", c.grid_w},
          {"token_dim", c.token_dim},
          {"num_classes", c.num_classes},
          {"ar_width", c.ar_width},
          {"ar_heads", c.ar_heads},
          {"ar_blocks", c.ar_blocks},
          {"ar_mlp_ratio", c.ar_mlp_ratio},
          {"cond_dim", c.cond_dim},
          {"head_width", c.head_width},
          {"head_layers", c.head_layers},
          {"time_embed_dim", c.time_embed_dim},
          {"diffusion_steps", c.diffusion_steps},
          {"mask_steps", c.mask_steps},
          {"x0_clamp", c.x0_clamp}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.grid_h = j.at("grid_h");
  c.grid_w = j.at("grid_w");
  c.token_dim = j.at("token_dim");
  c.num_classes = j.at("num_classes");
  c.ar_width = j.at("ar_width");
  c.ar_heads = j.at("ar_heads");
  c.ar_blocks = j.at("ar_blocks");
  c.ar_mlp_ratio = j.at("ar_mlp_ratio");
  c.cond_dim = j.at("cond_dim");
  c.head_width = j.at("head_width");
  c.head_layers = j.at("head_layers");
  c.time_embed_dim = j.at("time_embed_dim");
  c.diffusion_steps = j.at("diffusion_steps");
  c.mask_steps = j.at("mask_steps");
  c.x0_clamp = j.at("x0_clamp");
  return c;
}

struct CheckpointInfo {
  std::string fingerprint;
  std::size_t iteration = 0;
  nlohmann::json extra = nlohmann::json::object();
};

inline void save_checkpoint(const std::filesystem::path& path, const MarModel& model, const CheckpointInfo& info,
                            const Adam* opt = nullptr) {
  Archive a;
  a.meta["kind"] = "marl_checkpoint";
  a.meta["checkpoint_version"] = kCheckpointVersion;
  a.meta["model"] = model_config_json(model.config());
  a.meta["config_fingerprint"] = info.fingerprint;
  a.meta["iteration"] = info.iteration;
  a.meta["extra"] = info.extra;
  const auto& s = model.schedule();
  a.meta["schedule"] = {{"beta", s.beta}, {"alpha_bar", s.alpha_bar}, {"posterior_variance", s.posterior_variance}};
  for (const auto& [name, t] : model.params()) a.put("param." + name, t);
  if (opt) opt->save_state(a);
  a.save(path);
}

struct LoadedCheckpoint {
  MarModel model;
  CheckpointInfo info;
  Archive archive;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  LoadedCheckpoint out;
  out.archive = Archive::load(path);
  const auto& m = out.archive.meta;
  if (m.value("kind", "") != "marl_checkpoint") throw IoError("'" + path.string() + "' is not a model checkpoint");
  if (m.value("checkpoint_version", 0) != kCheckpointVersion) throw IoError("unsupported checkpoint version");
  out.model = MarModel(model_config_from_json(m.at("model")), 0);
  for (auto& [name, t] : out.model.params()) {
    const auto& e = out.archive.get("param." + name);
    if (e.shape != t.shape()) {
      throw IoError("checkpoint parameter '" + name + "' has shape " + shape_str(e.shape) + ", expected " +
                    shape_str(t.shape()));
    }
    auto dst = t.mutable_values();
    std::copy(e.data.begin(), e.data.end(), dst.begin());
  }
  out.info.fingerprint = m.value("config_fingerprint", "");
  out.info.iteration = m.value("iteration", std::size_t{0});
  out.info.extra = m.value("extra", nlohmann::json::object());
  return out;
}

}  // namespace marl
