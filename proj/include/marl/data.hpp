#pragma once

// Synthetic latent "images": each class has a fixed smooth template grid;
// samples add a random smooth global perturbation (a combination of shared
// low-frequency basis fields) and small independent per-token noise.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <vector>

#include "marl/archive.hpp"
#include "marl/rng.hpp"
#include "marl/tensor.hpp"

namespace marl {

inline constexpr std::uint64_t kTemplateSeed = 0x7E3A1A7E5EED0001ULL;

struct DataConfig {
  std::size_t grid_h = 8;
  std::size_t grid_w = 8;
  std::size_t token_dim = 8;
  std::size_t num_classes = 16;
  std::size_t basis_count = 4;
  double basis_scale = 0.3;
  double noise_std = 0.2;
};

class SyntheticData {
 public:
  SyntheticData() = default;

  /// Builds templates and basis fields from `seed`.
  static SyntheticData generate(const DataConfig& cfg, std::uint64_t seed = kTemplateSeed) {
    SyntheticData s;
    s.cfg_ = cfg;
    const CounterRng gen(seed);
    for (std::size_t c = 0; c < cfg.num_classes; ++c) {
      RngStream rng(gen, stream_id({0xC1A55, c}));
      s.templates_.push_back(smooth_field(cfg, rng, 3));
    }
    for (std::size_t b = 0; b < cfg.basis_count; ++b) {
      RngStream rng(gen, stream_id({0xBA515, b}));
      s.basis_.push_back(smooth_field(cfg, rng, 2));
    }
    return s;
  }

  static SyntheticData load(const std::filesystem::path& path) {
    const Archive a = Archive::load(path);
    SyntheticData s;
    const auto& m = a.meta;
    s.cfg_.grid_h = m.at("grid_h");
    s.cfg_.grid_w = m.at("grid_w");
    s.cfg_.token_dim = m.at("token_dim");
    s.cfg_.num_classes = m.at("num_classes");
    s.cfg_.basis_count = m.at("basis_count");
    s.cfg_.basis_scale = m.at("basis_scale");
    s.cfg_.noise_std = m.at("noise_std");
    for (std::size_t c = 0; c < s.cfg_.num_classes; ++c) s.templates_.push_back(a.tensor("template." + std::to_string(c)));
    for (std::size_t b = 0; b < s.cfg_.basis_count; ++b) s.basis_.push_back(a.tensor("basis." + std::to_string(b)));
    return s;
  }

  void save(const std::filesystem::path& path) const {
    Archive a;
    a.meta = {{"kind", "synthetic_templates"},  {"grid_h", cfg_.grid_h},       {"grid_w", cfg_.grid_w},
              {"token_dim", cfg_.token_dim},    {"num_classes", cfg_.num_classes}, {"basis_count", cfg_.basis_count},
              {"basis_scale", cfg_.basis_scale}, {"noise_std", cfg_.noise_std}};
    for (std::size_t c = 0; c < templates_.size(); ++c) a.put("template." + std::to_string(c), templates_[c]);
    for (std::size_t b = 0; b < basis_.size(); ++b) a.put("basis." + std::to_string(b), basis_[b]);
    a.save(path);
  }

  const DataConfig& config() const { return cfg_; }
  std::size_t num_classes() const { return templates_.size(); }

  const Tensor& template_for(std::size_t c) const {
    if (c >= templates_.size()) throw ConfigError("unknown class id " + std::to_string(c));
    return templates_[c];
  }

  /// One n x d sample of class `c`.
  Tensor sample(std::size_t c, RngStream& rng) const {
    const auto& tmpl = template_for(c).vec();
    std::vector<double> v = tmpl;
    for (const auto& b : basis_) {
      const double coef = cfg_.basis_scale * rng.normal();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] += coef * b.vec()[i];
    }
    for (auto& x : v) x += cfg_.noise_std * rng.normal();
    return Tensor({cfg_.grid_h * cfg_.grid_w, cfg_.token_dim}, std::move(v));
  }

 private:
  // Sum of a few random low-frequency cosine waves per channel, scaled to
  // zero mean and unit variance over the whole grid.
  static Tensor smooth_field(const DataConfig& cfg, RngStream& rng, int max_freq) {
    const std::size_t n = cfg.grid_h * cfg.grid_w, d = cfg.token_dim;
    std::vector<double> v(n * d, 0.0);
    for (std::size_t ch = 0; ch < d; ++ch) {
      for (int wave = 0; wave < 3; ++wave) {
        const double fy = static_cast<double>(rng.below(static_cast<std::uint64_t>(max_freq) + 1));
        const double fx = static_cast<double>(rng.below(static_cast<std::uint64_t>(max_freq) + 1));
        const double phase = 2.0 * std::numbers::pi * rng.uniform();
        const double amp = rng.normal();
        for (std::size_t y = 0; y < cfg.grid_h; ++y)
          for (std::size_t x = 0; x < cfg.grid_w; ++x) {
            const double arg = std::numbers::pi * (fy * static_cast<double>(y) / static_cast<double>(cfg.grid_h) +
                                                   fx * static_cast<double>(x) / static_cast<double>(cfg.grid_w)) +
                               phase;
            v[(y * cfg.grid_w + x) * d + ch] += amp * std::cos(arg);
          }
      }
    }
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double q = 0.0;
    for (double x : v) q += (x - m) * (x - m);
    const double s = std::sqrt(q / static_cast<double>(v.size()));
    for (auto& x : v) x = (x - m) / s;
    return Tensor({n, d}, std::move(v));
  }

  DataConfig cfg_;
  std::vector<Tensor> templates_;
  std::vector<Tensor> basis_;
};

}  // namespace marl
