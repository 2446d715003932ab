#include "commands.hpp"

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <sstream>

namespace marl::cli {

namespace {

std::filesystem::path under_output_root(const std::string& p) {
  const char* root = std::getenv("MARL_OUTPUT_ROOT");
  std::filesystem::path path(p);
  if (root && *root && path.is_relative()) return std::filesystem::path(root) / path;
  return path;
}

MarModel load_base(const TrainConfig& cfg) {
  if (!std::filesystem::exists(cfg.base_checkpoint)) {
    throw IoError("base checkpoint '" + cfg.base_checkpoint + "' not found (run `marl pretrain` first)");
  }
  return load_checkpoint(cfg.base_checkpoint).model;
}

void print_metrics(const MetricsRecord& m) {
  std::printf("it %4zu reward %.4f max %.4f kl %.3e gnorm %.3e clip %.3f", m.iteration, m.reward_mean, m.reward_max,
              m.kl, m.grad_norm, m.clip_fraction);
  if (m.heldout_reward) std::printf(" heldout %.4f", *m.heldout_reward);
  std::printf("\n");
  std::fflush(stdout);
}

}  // namespace

TrainConfig resolve_config(const std::string& file, const std::map<std::string, std::string>& flags) {
  TrainConfig cfg = file.empty() ? TrainConfig{} : load_config_file(file);
  for (const auto& f : config_fields()) {
    const auto it = flags.find(f.key);
    if (it != flags.end() && !it->second.empty()) f.set(cfg, it->second);
  }
  cfg.output_dir = under_output_root(cfg.output_dir).string();
  cfg.validate();
  return cfg;
}

int cmd_pretrain(const TrainConfig& cfg, const std::string& out) {
  const auto data = load_templates(cfg);
  if (!cfg.templates.empty() && !std::filesystem::exists(cfg.templates)) {
    if (std::filesystem::path(cfg.templates).has_parent_path())
      std::filesystem::create_directories(std::filesystem::path(cfg.templates).parent_path());
    data.save(cfg.templates);
    std::cout << "wrote templates " << cfg.templates << "\n";
  }
  const auto res = pretrain(cfg, data, [&](std::size_t step, double loss) {
    if ((step + 1) % 50 == 0) std::printf("step %zu loss %.6f\n", step + 1, loss);
  });
  const std::filesystem::path path = out.empty() ? std::filesystem::path(cfg.base_checkpoint) : under_output_root(out);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  CheckpointInfo info{config_fingerprint(cfg), 0, {}};
  info.extra["heldout_initial"] = res.heldout_initial;
  info.extra["heldout_final"] = res.heldout_final;
  save_checkpoint(path, res.model, info);
  std::printf("held-out denoising loss %.6f -> %.6f (%.1f%% lower)\n", res.heldout_initial, res.heldout_final,
              100.0 * (1.0 - res.heldout_final / res.heldout_initial));
  std::cout << "wrote " << path.string() << "\n";
  return 0;
}

int cmd_train(const TrainConfig& cfg, bool fresh) {
  Trainer t(cfg, load_base(cfg));
  std::cout << "config " << t.fingerprint() << " -> " << cfg.output_dir << "\n";
  const auto res = t.run(!fresh, TrainHooks{print_metrics, std::nullopt});
  if (res.resumed_from) std::cout << "resumed from iteration " << res.resumed_from << "\n";
  std::printf("held-out reward %.4f (std %.4f) -> %.4f (std %.4f)\n", res.pre_rl.reward_mean, res.pre_rl.reward_std,
              res.final_eval.reward_mean, res.final_eval.reward_std);
  return 0;
}

int cmd_ablate(const TrainConfig& cfg, const std::string& axis, const std::string& values) {
  std::vector<std::string> vals;
  std::stringstream ss(values);
  for (std::string v; std::getline(ss, v, ',');)
    if (!v.empty()) vals.push_back(v);
  const auto rows = run_ablation(cfg, load_base(cfg), axis, vals);
  std::cout << ablation_csv(rows);
  return 0;
}

int cmd_eval(const TrainConfig& cfg, const std::string& checkpoint, std::size_t samples) {
  const std::string path = checkpoint.empty() ? cfg.base_checkpoint : checkpoint;
  const auto ck = load_checkpoint(path);
  const auto data = load_templates(cfg);
  const auto reward = RewardModel::from_data(data, parse_reward_kind(cfg.reward));
  const auto rep = evaluate(ck.model, data, reward, samples, cfg.eval_seed, cfg.cfg_scale, cfg.workers);
  auto j = rep.to_json();
  j["checkpoint"] = path;
  j["config"] = ck.info.fingerprint;
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_gradcheck(bool negative_control) {
  GradCheckOptions opt;
  opt.negative_control = negative_control;
  const auto rep = run_gradcheck(opt);
  for (const auto& r : rep.results) {
    std::printf("%-4s %-36s entries %6zu  max rel err %.3e  %s\n", r.pass ? "ok" : "FAIL", r.name.c_str(), r.entries,
                r.max_rel_error, r.worst.c_str());
  }
  std::printf("max relative error %.3e (tolerance %.0e)\n", rep.max_rel_error(), opt.tolerance);
  if (rep.pass()) return 0;
  std::printf("failed:");
  for (const auto& f : rep.failures()) std::printf(" %s;", f.c_str());
  std::printf("\n");
  return kExitNumeric;
}

int cmd_plot(const std::string& metrics, const std::string& out) {
  const std::filesystem::path dir = out.empty() ? std::filesystem::path(metrics).parent_path() / "plots" : std::filesystem::path(out);
  const auto res = plot_metrics(metrics, dir);
  if (res.skipped) std::fprintf(stderr, "warning: skipped %zu malformed line(s)\n", res.skipped);
  std::printf("%zu records, %zu skipped\n", res.records, res.skipped);
  for (const auto& f : res.files) std::cout << "wrote " << f.string() << "\n";
  return 0;
}

}  // namespace marl::cli
