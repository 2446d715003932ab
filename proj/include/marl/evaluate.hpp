#pragma once

// Held-out evaluation: rewards on fresh sampling streams and a per-class
// diversity proxy.

#include <cmath>
#include <vector>

#include "json.hpp"
#include "marl/rollout.hpp"

namespace marl {

struct ClassReport {
  std::size_t class_id = 0;
  double reward_mean = 0.0;
  double reward_std = 0.0;
  double diversity = 0.0;  // mean pairwise L2 distance between samples
};

struct EvalReport {
  std::vector<ClassReport> classes;
  double reward_mean = 0.0;
  double reward_std = 0.0;
  double diversity = 0.0;
  std::size_t samples = 0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["reward_mean"] = reward_mean;
    j["reward_std"] = reward_std;
    j["diversity"] = diversity;
    j["samples"] = samples;
    j["classes"] = nlohmann::json::array();
    for (const auto& c : classes) {
      j["classes"].push_back({{"class", c.class_id},
                              {"reward_mean", c.reward_mean},
                              {"reward_std", c.reward_std},
                              {"diversity", c.diversity}});
    }
    return j;
  }
};

inline double grid_distance(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

/// Generates `per_class` canonical samples for every class from streams
/// keyed by `seed` and scores them.
inline EvalReport evaluate(const MarModel& model, const SyntheticData& data, const RewardModel& reward,
                           std::size_t per_class, std::uint64_t seed, double cfg_scale = 1.0,
                           std::size_t workers = 1) {
  NoGradScope no_grad;
  const auto& cfg = model.config();
  const CounterRng gen(seed);
  GenerateOptions opt;
  opt.trajectories = 1;
  opt.consistency = false;
  opt.cfg_scale = cfg_scale;
  const std::size_t C = cfg.num_classes, total = C * per_class;
  std::vector<Tensor> grids(total);
  std::vector<double> rewards(total);
  parallel_for(total, workers, [&](std::size_t idx) {
    const std::size_t c = idx / per_class, i = idx % per_class;
    const std::uint64_t stream = stream_id({seed, 0xE7, c, i});
    grids[idx] = generate(model, c, member_mask_schedule(cfg, gen, stream), gen, stream, opt).grid;
    rewards[idx] = compute_reward(grids[idx], c, reward, data);
  });
  EvalReport rep;
  rep.samples = total;
  double sum = 0.0;
  for (double r : rewards) sum += r;
  rep.reward_mean = total ? sum / static_cast<double>(total) : 0.0;
  double q = 0.0;
  for (double r : rewards) q += (r - rep.reward_mean) * (r - rep.reward_mean);
  rep.reward_std = total ? std::sqrt(q / static_cast<double>(total)) : 0.0;
  for (std::size_t c = 0; c < C; ++c) {
    ClassReport cr;
    cr.class_id = c;
    double s = 0.0;
    for (std::size_t i = 0; i < per_class; ++i) s += rewards[c * per_class + i];
    cr.reward_mean = s / static_cast<double>(per_class);
    double v = 0.0;
    for (std::size_t i = 0; i < per_class; ++i) v += std::pow(rewards[c * per_class + i] - cr.reward_mean, 2);
    cr.reward_std = std::sqrt(v / static_cast<double>(per_class));
    double d = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < per_class; ++i)
      for (std::size_t k = i + 1; k < per_class; ++k, ++pairs) d += grid_distance(grids[c * per_class + i], grids[c * per_class + k]);
    cr.diversity = pairs ? d / static_cast<double>(pairs) : 0.0;
    rep.diversity += cr.diversity / static_cast<double>(C);
    rep.classes.push_back(cr);
  }
  return rep;
}

}  // namespace marl
