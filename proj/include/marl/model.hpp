#pragma once

// The toy masked-autoregressive generator: a transformer backbone that maps
// the partially generated grid to per-token conditioning vectors, and a small
// MLP that predicts diffusion noise from (x_t, t, z).

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "marl/nn.hpp"
#include "marl/schedule.hpp"
#include "marl/tensor.hpp"

namespace marl {

struct ModelConfig {
  std::size_t grid_h = 8;
  std::size_t grid_w = 8;
  std::size_t token_dim = 8;
  std::size_t num_classes = 16;
  std::size_t ar_width = 64;
  std::size_t ar_heads = 4;
  std::size_t ar_blocks = 2;
  std::size_t ar_mlp_ratio = 4;
  std::size_t cond_dim = 64;
  std::size_t head_width = 128;
  std::size_t head_layers = 3;
  std::size_t time_embed_dim = 32;
  std::size_t diffusion_steps = 10;
  std::size_t mask_steps = 8;
  double x0_clamp = 4.0;

  std::size_t num_tokens() const { return grid_h * grid_w; }
  /// Class id reserved for the unconditional (dropped) condition.
  std::size_t null_class() const { return num_classes; }

  void validate() const {
    if (num_tokens() == 0 || token_dim == 0) throw ConfigError("grid and token_dim must be positive");
    if (ar_heads == 0 || ar_width % ar_heads != 0) throw ConfigError("ar_width must be divisible by ar_heads");
    if (head_layers < 2) throw ConfigError("head_layers must be at least 2");
    if (time_embed_dim % 2 != 0) throw ConfigError("time_embed_dim must be even");
    if (mask_steps == 0 || mask_steps > num_tokens()) throw ConfigError("mask_steps must be in [1, grid tokens]");
    if (diffusion_steps == 0) throw ConfigError("diffusion_steps must be positive");
    if (!(x0_clamp > 0.0)) throw ConfigError("x0_clamp must be positive");
  }
};

// Value hidden from attention; exp() of it underflows to exactly zero.
inline constexpr double kMaskedScore = -1e30;

struct TransformerBlock {
  LayerNorm ln1, ln2;
  AttentionWeights attn;
  Linear fc1, fc2;

  void collect(const std::string& prefix, ParamList& out) const {
    ln1.collect(prefix + ".ln1", out);
    attn.collect(prefix + ".attn", out);
    ln2.collect(prefix + ".ln2", out);
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
  }
};

/// Transformer over [class token, grid tokens]. Unknown tokens enter only
/// through a learned mask embedding and are hidden as attention keys, so the
/// output never depends on their values.
class ARBackbone {
 public:
  ARBackbone() = default;

  ARBackbone(const ModelConfig& cfg, RngStream& rng) : cfg_(cfg) {
    const std::size_t w = cfg.ar_width, n = cfg.num_tokens();
    token_in_ = Linear(cfg.token_dim, w, rng);
    mask_embed_ = init_normal({1, w}, 0.02, rng);
    class_embed_ = init_normal({cfg.num_classes + 1, w}, 0.02, rng);
    pos_embed_ = init_normal({n + 1, w}, 0.02, rng);
    for (std::size_t b = 0; b < cfg.ar_blocks; ++b) {
      TransformerBlock blk;
      blk.ln1 = LayerNorm(w);
      blk.ln2 = LayerNorm(w);
      blk.attn.query = Linear(w, w, rng);
      blk.attn.key = Linear(w, w, rng);
      blk.attn.value = Linear(w, w, rng);
      blk.attn.output = Linear(w, w, rng, 0.5);
      blk.fc1 = Linear(w, w * cfg.ar_mlp_ratio, rng);
      blk.fc2 = Linear(w * cfg.ar_mlp_ratio, w, rng, 0.5);
      blocks_.push_back(std::move(blk));
    }
    ln_out_ = LayerNorm(w);
    out_ = Linear(w, cfg.cond_dim, rng);
  }

  /// Conditioning vectors for all n grid positions (n x cond_dim).
  /// `tokens` is n x token_dim; rows with known[j] == false are ignored.
  Tensor forward(const Tensor& tokens, const std::vector<bool>& known, std::size_t class_id) const {
    const std::size_t n = cfg_.num_tokens(), d = cfg_.token_dim;
    if (tokens.dim() != 2 || tokens.rows() != n || tokens.cols() != d) {
      throw DimensionError("ar_forward: expected tokens " + shape_str({n, d}) + ", got " + shape_str(tokens.shape()));
    }
    if (known.size() != n) throw DimensionError("ar_forward: known mask has wrong length");
    if (class_id > cfg_.num_classes) throw ConfigError("unknown class id " + std::to_string(class_id));

    std::vector<double> masked(n * d, 0.0), ind(n), inv(n);
    for (std::size_t j = 0; j < n; ++j) {
      ind[j] = known[j] ? 1.0 : 0.0;
      inv[j] = 1.0 - ind[j];
      if (known[j])
        for (std::size_t c = 0; c < d; ++c) masked[j * d + c] = tokens.vec()[j * d + c];
    }
    const Tensor ind_t({n, 1}, ind), inv_t({n, 1}, inv);
    const Tensor bias_row = reshape(token_in_.bias, {1, cfg_.ar_width});
    Tensor h_tok = matmul(Tensor({n, d}, std::move(masked)), token_in_.weight) + matmul(ind_t, bias_row) +
                   matmul(inv_t, mask_embed_);
    Tensor h = concat_rows({gather_rows(class_embed_, {class_id}), h_tok}) + pos_embed_;

    std::vector<double> kb(n + 1, 0.0);
    for (std::size_t j = 0; j < n; ++j) kb[j + 1] = known[j] ? 0.0 : kMaskedScore;
    const Tensor key_bias({n + 1}, std::move(kb));

    for (const auto& blk : blocks_) {
      h = h + attention(blk.ln1(h), blk.attn, cfg_.ar_heads, key_bias);
      h = h + blk.fc2(gelu(blk.fc1(blk.ln2(h))));
    }
    Tensor z = out_(ln_out_(h));
    std::vector<std::size_t> grid_rows(n);
    for (std::size_t j = 0; j < n; ++j) grid_rows[j] = j + 1;
    return gather_rows(z, grid_rows);
  }

  void collect(const std::string& prefix, ParamList& out) const {
    token_in_.collect(prefix + ".token_in", out);
    out.emplace_back(prefix + ".mask_embed", mask_embed_);
    out.emplace_back(prefix + ".class_embed", class_embed_);
    out.emplace_back(prefix + ".pos_embed", pos_embed_);
    for (std::size_t b = 0; b < blocks_.size(); ++b) blocks_[b].collect(prefix + ".block" + std::to_string(b), out);
    ln_out_.collect(prefix + ".ln_out", out);
    out_.collect(prefix + ".out", out);
  }

 private:
  ModelConfig cfg_;
  Linear token_in_;
  Tensor mask_embed_, class_embed_, pos_embed_;
  std::vector<TransformerBlock> blocks_;
  LayerNorm ln_out_;
  Linear out_;
};

/// Sinusoidal embedding of integer timesteps, one row per entry.
inline Tensor timestep_embedding(const std::vector<std::size_t>& ts, std::size_t dim, std::size_t T) {
  const std::size_t half = dim / 2;
  std::vector<double> v(ts.size() * dim);
  const double scale = 1000.0 / static_cast<double>(T);
  for (std::size_t r = 0; r < ts.size(); ++r)
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double arg = static_cast<double>(ts[r]) * scale * freq;
      v[r * dim + i] = std::sin(arg);
      v[r * dim + half + i] = std::cos(arg);
    }
  return Tensor({ts.size(), dim}, std::move(v));
}

/// MLP noise predictor eps_theta(x_t | t, z).
class DiffusionHead {
 public:
  DiffusionHead() = default;

  DiffusionHead(const ModelConfig& cfg, RngStream& rng) : cfg_(cfg) {
    std::size_t in = cfg.token_dim + cfg.time_embed_dim + cfg.cond_dim;
    for (std::size_t l = 0; l + 1 < cfg.head_layers; ++l) {
      layers_.emplace_back(in, cfg.head_width, rng);
      in = cfg.head_width;
    }
    layers_.emplace_back(in, cfg.token_dim, rng, 0.1);
    std::vector<std::size_t> all(cfg.diffusion_steps + 1);
    for (std::size_t t = 0; t < all.size(); ++t) all[t] = t;
    time_table_ = timestep_embedding(all, cfg.time_embed_dim, cfg.diffusion_steps);
  }

  /// x_t: m x token_dim, t: one timestep per row, z: m x cond_dim.
  Tensor forward(const Tensor& x_t, const std::vector<std::size_t>& t, const Tensor& z) const {
    if (x_t.rows() != t.size() || z.rows() != t.size()) {
      throw DimensionError("diffusion head: row mismatch between x_t " + shape_str(x_t.shape()) + " and z " +
                           shape_str(z.shape()));
    }
    for (std::size_t v : t)
      if (v > cfg_.diffusion_steps) throw DomainError("diffusion head: timestep " + std::to_string(v) + " out of range");
    Tensor h = concat_cols({x_t, gather_rows(time_table_, t), z});
    for (std::size_t l = 0; l + 1 < layers_.size(); ++l) h = gelu(layers_[l](h));
    return layers_.back()(h);
  }

  void collect(const std::string& prefix, ParamList& out) const {
    for (std::size_t l = 0; l < layers_.size(); ++l) layers_[l].collect(prefix + ".fc" + std::to_string(l), out);
  }

 private:
  ModelConfig cfg_;
  std::vector<Linear> layers_;
  Tensor time_table_;
};

class MarModel {
 public:
  MarModel() = default;

  MarModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), schedule_(NoiseSchedule::linear(cfg.diffusion_steps)) {
    cfg.validate();
    const CounterRng gen(seed);
    RngStream ar_rng(gen, stream_id({0xA5, 1}));
    RngStream head_rng(gen, stream_id({0xA5, 2}));
    ar_ = ARBackbone(cfg, ar_rng);
    head_ = DiffusionHead(cfg, head_rng);
  }

  const ModelConfig& config() const { return cfg_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  const ARBackbone& ar() const { return ar_; }
  const DiffusionHead& head() const { return head_; }

  ParamList ar_params() const {
    ParamList p;
    ar_.collect("ar", p);
    return p;
  }
  ParamList head_params() const {
    ParamList p;
    head_.collect("head", p);
    return p;
  }
  ParamList params() const {
    ParamList p = ar_params();
    head_.collect("head", p);
    return p;
  }

  std::size_t num_params(const ParamList& p) const {
    std::size_t n = 0;
    for (const auto& [name, t] : p) n += t.numel();
    return n;
  }

  /// Deep copy with independent storage and no gradients.
  MarModel clone() const {
    MarModel m(cfg_, 0);
    auto src = params();
    auto dst = m.params();
    for (std::size_t i = 0; i < src.size(); ++i) {
      auto out = dst[i].second.mutable_values();
      std::copy(src[i].second.values().begin(), src[i].second.values().end(), out.begin());
      dst[i].second.set_requires_grad(src[i].second.requires_grad());
    }
    return m;
  }

  void set_trainable(bool ar, bool head) const {
    for (auto& [name, t] : ar_params()) t.set_requires_grad(ar);
    for (auto& [name, t] : head_params()) t.set_requires_grad(head);
  }

  void zero_grad() const {
    for (auto& [name, t] : params()) t.zero_grad();
  }

 private:
  ModelConfig cfg_;
  NoiseSchedule schedule_;
  ARBackbone ar_;
  DiffusionHead head_;
};

}  // namespace marl
