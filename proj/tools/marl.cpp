// marl: pretrain, post-train, ablate, evaluate, gradient-check and plot.
//
// Every config key is also a flag (--group_size 4, --freeze_head false);
// flags override --config. MARL_OUTPUT_ROOT prefixes relative output dirs.
// Exit codes: 0 ok, 1 usage, 2 numeric failure, 3 IO.

#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "commands.hpp"

using namespace marl;
using namespace marl::cli;

int main(int argc, char** argv) {
  CLI::App app{"Masked autoregressive generator with stabilized group-relative post-training"};
  app.require_subcommand(1);
  std::string config_file;
  app.add_option("--config", config_file, "key = value config file")->check(CLI::ExistingFile);
  std::map<std::string, std::string> flags;
  for (const auto& f : config_fields()) app.add_option("--" + f.key, flags[f.key], f.help);

  auto* pretrain_cmd = app.add_subcommand("pretrain", "denoising pretraining; writes the base checkpoint");
  std::string pretrain_out;
  pretrain_cmd->add_option("--out", pretrain_out, "checkpoint path (default: base_checkpoint)");

  auto* train_cmd = app.add_subcommand("train", "post-train from the base checkpoint");
  bool fresh = false;
  train_cmd->add_flag("--fresh", fresh, "ignore an existing checkpoint in output_dir");

  auto* ablate_cmd = app.add_subcommand("ablate", "matched-seed sweep over one axis");
  std::string axis, values;
  ablate_cmd->add_option("--axis", axis, "head-mode, S, k_percent or tau")->required();
  ablate_cmd->add_option("--values", values, "comma-separated settings (default per axis)");

  auto* eval_cmd = app.add_subcommand("eval", "held-out evaluation of a checkpoint");
  std::string eval_ckpt;
  std::size_t eval_samples = 8;
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint (default: base_checkpoint)");
  eval_cmd->add_option("--samples", eval_samples, "samples per class");

  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  bool negative = false;
  grad_cmd->add_flag("--negative-control", negative, "include a deliberately wrong backward rule");

  auto* plot_cmd = app.add_subcommand("plot", "CSV and SVG curves from a metrics file");
  std::string metrics_path, plot_out;
  plot_cmd->add_option("metrics", metrics_path, "metrics.jsonl")->required();
  plot_cmd->add_option("--out", plot_out, "output directory (default: <metrics dir>/plots)");

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (*grad_cmd) return cmd_gradcheck(negative);
    if (*plot_cmd) return cmd_plot(metrics_path, plot_out);
    const TrainConfig cfg = resolve_config(config_file, flags);
    if (*pretrain_cmd) return cmd_pretrain(cfg, pretrain_out);
    if (*train_cmd) return cmd_train(cfg, fresh);
    if (*ablate_cmd) return cmd_ablate(cfg, axis, values);
    if (*eval_cmd) return cmd_eval(cfg, eval_ckpt, eval_samples);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
  return kExitUsage;
}
