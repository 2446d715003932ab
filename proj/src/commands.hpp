#pragma once

// Subcommand bodies for the marl tool. Each returns the process exit code.

#include <filesystem>
#include <map>
#include <string>

#include "marl.hpp"

namespace marl::cli {

inline constexpr int kExitUsage = 1;
inline constexpr int kExitNumeric = 2;
inline constexpr int kExitIo = 3;

/// Config file, then flags; relative output_dir goes under MARL_OUTPUT_ROOT.
TrainConfig resolve_config(const std::string& file, const std::map<std::string, std::string>& flags);

int cmd_pretrain(const TrainConfig& cfg, const std::string& out);
int cmd_train(const TrainConfig& cfg, bool fresh);
int cmd_ablate(const TrainConfig& cfg, const std::string& axis, const std::string& values);
int cmd_eval(const TrainConfig& cfg, const std::string& checkpoint, std::size_t samples);
int cmd_gradcheck(bool negative_control);
int cmd_plot(const std::string& metrics, const std::string& out);

}  // namespace marl::cli
