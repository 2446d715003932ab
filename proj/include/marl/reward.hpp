#pragma once

// Verifiable rewards on generated grids. All kinds are deterministic in
// (grid, class) and bounded to [0, 1].

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "marl/data.hpp"
#include "marl/errors.hpp"
#include "marl/tensor.hpp"

namespace marl {

enum class RewardKind { pattern, count, composite };

inline RewardKind parse_reward_kind(const std::string& s) {
  if (s == "pattern") return RewardKind::pattern;
  if (s == "count") return RewardKind::count;
  if (s == "composite") return RewardKind::composite;
  throw ConfigError("unknown reward kind '" + s + "' (expected pattern, count or composite)");
}

inline std::string to_string(RewardKind k) {
  switch (k) {
    case RewardKind::pattern: return "pattern";
    case RewardKind::count: return "count";
    case RewardKind::composite: return "composite";
  }
  return "?";
}

struct RewardModel {
  RewardKind kind = RewardKind::pattern;
  double sigma2 = 4.0;             // pattern: exp(-|o - template|^2 / (n * sigma2))
  double threshold = 0.5;          // count: a cell is active when channel 0 exceeds this
  double pattern_weight = 0.5;     // composite: weight of the pattern term
  std::vector<std::size_t> target_counts;  // count: active cells wanted per class

  /// Count targets taken from the templates themselves.
  static RewardModel from_data(const SyntheticData& data, RewardKind kind) {
    RewardModel m;
    m.kind = kind;
    for (std::size_t c = 0; c < data.num_classes(); ++c) m.target_counts.push_back(m.active_cells(data.template_for(c)));
    return m;
  }

  std::size_t active_cells(const Tensor& grid) const {
    const std::size_t d = grid.cols();
    std::size_t active = 0;
    for (std::size_t j = 0; j < grid.rows(); ++j)
      if (grid.vec()[j * d] > threshold) ++active;
    return active;
  }
};

inline double pattern_reward(const Tensor& grid, const Tensor& tmpl, double sigma2) {
  if (grid.shape() != tmpl.shape()) throw DimensionError("reward: grid shape " + shape_str(grid.shape()) + " does not match template");
  double sq = 0.0;
  for (std::size_t i = 0; i < grid.numel(); ++i) sq += (grid[i] - tmpl[i]) * (grid[i] - tmpl[i]);
  return std::exp(-sq / (static_cast<double>(grid.rows()) * sigma2));
}

/// 1 when the number of active cells equals the class target, decreasing
/// linearly to 0 at the farthest possible count.
inline double count_reward(std::size_t active, std::size_t target, std::size_t n) {
  const double span = static_cast<double>(std::max(target, n - target));
  if (span == 0.0) return 1.0;
  const double diff = std::abs(static_cast<double>(active) - static_cast<double>(target));
  return std::clamp(1.0 - diff / span, 0.0, 1.0);
}

inline double compute_reward(const Tensor& grid, std::size_t class_id, const RewardModel& model,
                             const SyntheticData& data) {
  if (class_id >= data.num_classes()) throw ConfigError("unknown class id " + std::to_string(class_id));
  const auto pattern = [&] { return pattern_reward(grid, data.template_for(class_id), model.sigma2); };
  const auto count = [&] {
    if (class_id >= model.target_counts.size()) throw ConfigError("count reward has no target for class " + std::to_string(class_id));
    return count_reward(model.active_cells(grid), model.target_counts[class_id], grid.rows());
  };
  switch (model.kind) {
    case RewardKind::pattern: return pattern();
    case RewardKind::count: return count();
    case RewardKind::composite: return model.pattern_weight * pattern() + (1.0 - model.pattern_weight) * count();
  }
  return 0.0;
}

}  // namespace marl
