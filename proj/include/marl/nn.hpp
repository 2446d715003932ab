#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "marl/rng.hpp"
#include "marl/tensor.hpp"

namespace marl {

/// Named handles to parameter tensors. Handles share storage with the
/// owning module.
using ParamList = std::vector<std::pair<std::string, Tensor>>;

inline Tensor init_normal(Shape shape, double stddev, RngStream& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = stddev * rng.normal();
  return Tensor::param(std::move(shape), std::move(v));
}

inline Tensor init_constant(Shape shape, double value) {
  return Tensor::param(shape, std::vector<double>(shape_numel(shape), value));
}

struct Linear {
  Tensor weight;  // (in, out)
  Tensor bias;    // (out)

  Linear() = default;
  Linear(std::size_t in, std::size_t out, RngStream& rng, double scale = 1.0)
      : weight(init_normal({in, out}, scale / std::sqrt(static_cast<double>(in)), rng)),
        bias(init_constant({out}, 0.0)) {}

  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }

  void collect(const std::string& prefix, ParamList& out) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

/// Learned elementwise affine applied after layer_norm.
struct LayerNorm {
  Tensor gain;
  Tensor bias;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t width) : gain(init_constant({width}, 1.0)), bias(init_constant({width}, 0.0)) {}

  Tensor operator()(const Tensor& x) const { return layer_norm(x) * gain + bias; }

  void collect(const std::string& prefix, ParamList& out) const {
    out.emplace_back(prefix + ".gain", gain);
    out.emplace_back(prefix + ".bias", bias);
  }
};

struct AttentionWeights {
  Linear query, key, value, output;

  void collect(const std::string& prefix, ParamList& out) const {
    query.collect(prefix + ".q", out);
    key.collect(prefix + ".k", out);
    value.collect(prefix + ".v", out);
    output.collect(prefix + ".o", out);
  }
};

/// Multi-head self-attention over the rows of `x` (tokens x width).
/// `key_bias`, when defined, has one entry per token and is added to every
/// row of the score matrix; large negative entries hide keys.
inline Tensor attention(const Tensor& x, const AttentionWeights& w, std::size_t heads, const Tensor& key_bias = {}) {
  const std::size_t width = w.query.weight.shape()[1];
  if (heads == 0 || width % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(width) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  const std::size_t hd = width / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const Tensor q = w.query(x);
  const Tensor k = w.key(x);
  const Tensor v = w.value(x);
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = slice_cols(q, h * hd, hd);
    const Tensor kh = slice_cols(k, h * hd, hd);
    const Tensor vh = slice_cols(v, h * hd, hd);
    Tensor scores = matmul(qh, transpose(kh)) * scale;
    if (key_bias.defined()) scores = scores + key_bias;
    outs.push_back(matmul(softmax(scores), vh));
  }
  return w.output(heads == 1 ? outs[0] : concat_cols(outs));
}

}  // namespace marl
