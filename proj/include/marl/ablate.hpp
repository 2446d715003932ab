#pragma once

// Matched-seed sweeps over one config axis, summarized as a CSV table.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "marl/trainer.hpp"

namespace marl {

inline const std::vector<std::string>& ablation_axes() {
  static const std::vector<std::string> axes{"head-mode", "S", "k_percent", "tau"};
  return axes;
}

inline std::vector<std::string> default_axis_values(const std::string& axis) {
  if (axis == "head-mode") return {"end2end", "frozen-head", "head-only"};
  if (axis == "S") return {"1", "2", "4"};
  if (axis == "k_percent") return {"0", "30", "100"};
  if (axis == "tau") return {"-inf", "0", "0.05"};
  throw ConfigError("unknown ablation axis '" + axis + "' (expected head-mode, S, k_percent or tau)");
}

/// Config for one setting of the sweep. Seeds are left untouched so every
/// setting sees the same prompt and rollout streams.
inline TrainConfig ablation_setting(TrainConfig cfg, const std::string& axis, const std::string& value) {
  if (axis == "head-mode") {
    if (value == "end2end") {
      cfg.freeze_head = false;
      cfg.freeze_ar = false;
    } else if (value == "frozen-head") {
      cfg.freeze_head = true;
      cfg.freeze_ar = false;
    } else if (value == "head-only") {
      cfg.freeze_head = false;
      cfg.freeze_ar = true;
    } else {
      throw ConfigError("unknown head mode '" + value + "' (expected end2end, frozen-head or head-only)");
    }
  } else if (axis == "S") {
    set_config_value(cfg, "trajectories", value);
  } else if (axis == "k_percent") {
    set_config_value(cfg, "k_percent", value);
  } else if (axis == "tau") {
    set_config_value(cfg, "tau", value);
  } else {
    throw ConfigError("unknown ablation axis '" + axis + "'");
  }
  cfg.output_dir = (std::filesystem::path(cfg.output_dir) / (axis + "_" + value)).string();
  return cfg;
}

struct AblationRow {
  std::string axis, value, fingerprint;
  double pre_rl_heldout = 0.0;
  double final_heldout = 0.0;
  double peak_heldout = 0.0;
  std::size_t peak_iteration = 0;
  double grad_norm_mean = 0.0;
  double grad_norm_variance = 0.0;
  double final_kl = 0.0;
  double mask_fraction = 0.0;
  double kappa_fraction = 0.0;
  double diversity = 0.0;
};

inline double sample_variance(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double q = 0.0;
  for (double x : v) q += (x - m) * (x - m);
  return q / static_cast<double>(v.size() - 1);
}

inline AblationRow summarize_run(const std::string& axis, const std::string& value, const std::string& fingerprint,
                                 const TrainResult& res) {
  AblationRow row{axis, value, fingerprint};
  row.pre_rl_heldout = row.peak_heldout = res.pre_rl.reward_mean;
  row.final_heldout = res.final_eval.reward_mean;
  row.diversity = res.final_eval.diversity;
  std::vector<double> norms;
  for (const auto& m : res.metrics) {
    norms.push_back(m.grad_norm);
    if (m.heldout_reward && *m.heldout_reward > row.peak_heldout) {
      row.peak_heldout = *m.heldout_reward;
      row.peak_iteration = m.iteration;
    }
    row.mask_fraction += m.mask_fraction / static_cast<double>(res.metrics.size());
    row.kappa_fraction += m.kappa_fraction / static_cast<double>(res.metrics.size());
  }
  for (double x : norms) row.grad_norm_mean += x / static_cast<double>(norms.size());
  row.grad_norm_variance = sample_variance(norms);
  if (!res.metrics.empty()) row.final_kl = res.metrics.back().kl;
  return row;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "axis,value,config,pre_rl_heldout,final_heldout,peak_heldout,peak_iteration,grad_norm_mean,"
        "grad_norm_variance,final_kl,mask_fraction,kappa_fraction,diversity\n";
  os.precision(10);
  for (const auto& r : rows) {
    os << r.axis << ',' << r.value << ',' << r.fingerprint << ',' << r.pre_rl_heldout << ',' << r.final_heldout << ','
       << r.peak_heldout << ',' << r.peak_iteration << ',' << r.grad_norm_mean << ',' << r.grad_norm_variance << ','
       << r.final_kl << ',' << r.mask_fraction << ',' << r.kappa_fraction << ',' << r.diversity << '\n';
  }
  return os.str();
}

/// Trains every setting from `base` and writes <output_dir>/ablation_<axis>.csv.
inline std::vector<AblationRow> run_ablation(const TrainConfig& cfg, const MarModel& base, const std::string& axis,
                                             std::vector<std::string> values = {}) {
  const auto defaults = default_axis_values(axis);
  if (values.empty()) values = defaults;
  std::vector<AblationRow> rows;
  for (const auto& v : values) {
    const TrainConfig c = ablation_setting(cfg, axis, v);
    Trainer t(c, base.clone());
    rows.push_back(summarize_run(axis, v, t.fingerprint(), t.run(false)));
  }
  std::filesystem::create_directories(cfg.output_dir);
  const auto path = std::filesystem::path(cfg.output_dir) / ("ablation_" + axis + ".csv");
  std::ofstream os(path);
  os << ablation_csv(rows);
  if (!os) throw IoError("cannot write '" + path.string() + "'");
  return rows;
}

}  // namespace marl
