#pragma once

// Denoising pretraining of the AR backbone and diffusion head.

#include <cmath>
#include <functional>
#include <vector>

#include "marl/config.hpp"
#include "marl/data.hpp"
#include "marl/model.hpp"
#include "marl/optim.hpp"
#include "marl/schedule.hpp"

namespace marl {

/// One training example: a data sample, the tokens visible to the
/// backbone, and noised versions of the remaining tokens.
struct DenoiseItem {
  Tensor x0;                         // n x D
  std::size_t class_id = 0;          // may be the null class
  std::vector<bool> known;
  std::vector<std::size_t> targets;  // unknown positions
  std::vector<std::size_t> ts;       // one timestep per target
  Tensor eps;                        // targets x D
};

inline DenoiseItem make_denoise_item(const SyntheticData& data, const ModelConfig& cfg, const CounterRng& gen,
                                     std::uint64_t stream, double cond_dropout) {
  RngStream rng(gen, stream);
  DenoiseItem it;
  const std::size_t n = cfg.num_tokens(), D = cfg.token_dim;
  const std::size_t c = rng.below(cfg.num_classes);
  it.x0 = data.sample(c, rng);
  it.class_id = rng.uniform() < cond_dropout ? cfg.null_class() : c;
  const auto ms = MaskSchedule::cosine(n, cfg.mask_steps, gen, stream_id({stream, 1}));
  const std::size_t k = 1 + rng.below(cfg.mask_steps);
  it.known = ms.known_before(k, n);
  for (std::size_t j = 0; j < n; ++j)
    if (!it.known[j]) it.targets.push_back(j);
  std::vector<double> e(it.targets.size() * D);
  for (std::size_t r = 0; r < it.targets.size(); ++r) {
    it.ts.push_back(1 + rng.below(cfg.diffusion_steps));
    for (std::size_t ch = 0; ch < D; ++ch) e[r * D + ch] = rng.normal();
  }
  it.eps = Tensor({it.targets.size(), D}, std::move(e));
  return it;
}

/// Mean squared error of the noise prediction over the item's targets.
inline Tensor denoising_loss(const MarModel& model, const DenoiseItem& it) {
  const auto& s = model.schedule();
  const std::size_t m = it.targets.size();
  const Tensor z = gather_rows(model.ar().forward(it.x0, it.known, it.class_id), it.targets);
  const Tensor x0 = gather_rows(it.x0, it.targets);
  std::vector<double> sa(m), sn(m);
  for (std::size_t r = 0; r < m; ++r) {
    sa[r] = std::sqrt(s.alpha_bar[it.ts[r]]);
    sn[r] = std::sqrt(1.0 - s.alpha_bar[it.ts[r]]);
  }
  const Tensor xt = x0 * Tensor({m, 1}, sa) + it.eps * Tensor({m, 1}, sn);
  return mean(square(model.head().forward(xt, it.ts, z) - it.eps));
}

inline std::vector<DenoiseItem> heldout_items(const SyntheticData& data, const ModelConfig& cfg, std::size_t count) {
  const CounterRng gen(0x4E1D07);
  std::vector<DenoiseItem> items;
  for (std::size_t i = 0; i < count; ++i) items.push_back(make_denoise_item(data, cfg, gen, stream_id({0x4E1D, i}), 0.0));
  return items;
}

inline double heldout_denoising_loss(const MarModel& model, const std::vector<DenoiseItem>& items) {
  NoGradScope no_grad;
  double total = 0.0;
  for (const auto& it : items) total += denoising_loss(model, it).item();
  return items.empty() ? 0.0 : total / static_cast<double>(items.size());
}

struct PretrainResult {
  MarModel model;
  std::vector<double> train_loss;
  double heldout_initial = 0.0;
  double heldout_final = 0.0;
};

/// Adam on the denoising loss from the seed's initialization. With
/// warmup_head_only the backbone stays at its initial values.
inline PretrainResult pretrain(const TrainConfig& cfg, const SyntheticData& data,
                               const std::function<void(std::size_t, double)>& on_step = {}) {
  PretrainResult res;
  res.model = MarModel(cfg.model, cfg.seed);
  const MarModel& model = res.model;
  model.set_trainable(!cfg.warmup_head_only, true);
  const auto held = heldout_items(data, cfg.model, cfg.heldout_size);
  res.heldout_initial = heldout_denoising_loss(model, held);
  Adam opt(AdamConfig{.lr = cfg.pretrain_lr, .clip_norm = cfg.grad_clip});
  const CounterRng gen(cfg.seed);
  const auto params = model.params();
  for (std::size_t step = 0; step < cfg.pretrain_steps; ++step) {
    model.zero_grad();
    double total = 0.0;
    for (std::size_t b = 0; b < cfg.pretrain_batch; ++b) {
      const auto item = make_denoise_item(data, cfg.model, gen, stream_id({0x9E7, step, b}), cfg.cond_dropout);
      Tape tape;
      TapeScope scope(tape);
      const Tensor loss = denoising_loss(model, item) / static_cast<double>(cfg.pretrain_batch);
      tape.backward(loss);
      total += loss.item();
    }
    opt.step(params);
    res.train_loss.push_back(total);
    if (on_step) on_step(step, total);
  }
  res.heldout_final = heldout_denoising_loss(model, held);
  return res;
}

}  // namespace marl
