#pragma once

// Adam with global gradient-norm clipping.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "marl/archive.hpp"
#include "marl/nn.hpp"

namespace marl {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  std::uint64_t steps() const { return step_; }

  /// Global L2 norm of the gradients of trainable parameters.
  static double grad_norm(const ParamList& params) {
    double s = 0.0;
    for (const auto& [name, t] : params) {
      if (!t.requires_grad() || !t.has_grad()) continue;
      for (double g : t.grad()) s += g * g;
    }
    return std::sqrt(s);
  }

  /// Applies one update to every trainable parameter and returns the
  /// pre-clipping gradient norm. Gradients are left in place.
  double step(const ParamList& params) {
    const double norm = grad_norm(params);
    if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
    const double scale = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (const auto& [name, t] : params) {
      if (!t.requires_grad()) continue;
      Tensor p = t;
      const auto g = p.grad();
      auto& m = m_[name];
      auto& v = v_[name];
      if (m.empty()) {
        m.assign(g.size(), 0.0);
        v.assign(g.size(), 0.0);
      }
      auto w = p.mutable_values();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double gi = g[i] * scale;
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        w[i] -= cfg_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
      }
    }
    return norm;
  }

  void save_state(Archive& a, const std::string& prefix = "adam.") const {
    a.meta["adam_step"] = step_;
    for (const auto& [name, m] : m_) {
      a.put(prefix + "m." + name, {m.size()}, m);
      a.put(prefix + "v." + name, {m.size()}, v_.at(name));
    }
  }

  void load_state(const Archive& a, const ParamList& params, const std::string& prefix = "adam.") {
    step_ = a.meta.value("adam_step", std::uint64_t{0});
    m_.clear();
    v_.clear();
    for (const auto& [name, t] : params) {
      if (!a.contains(prefix + "m." + name)) continue;
      m_[name] = a.get(prefix + "m." + name).data;
      v_[name] = a.get(prefix + "v." + name).data;
      if (m_[name].size() != t.numel()) throw IoError("optimizer state for '" + name + "' has the wrong size");
    }
  }

 private:
  AdamConfig cfg_;
  std::uint64_t step_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

}  // namespace marl
