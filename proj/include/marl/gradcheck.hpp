#pragma once

// Finite-difference checks of reverse-mode gradients: every tensor
// primitive, every model block, and the full policy objective on a micro
// instance.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "marl/grpo.hpp"
#include "marl/pretrain.hpp"
#include "marl/reward.hpp"
#include "marl/rollout.hpp"

namespace marl {

struct GradCheckOptions {
  double step = 1e-5;          // central-difference step
  double tolerance = 1e-5;     // on the relative error below
  double scale_floor = 1e-4;   // denominators never drop below this
  bool negative_control = false;
};

struct GradCheckResult {
  std::string name;
  std::size_t entries = 0;
  double max_rel_error = 0.0;
  std::string worst;  // parameter and index of the worst entry
  bool pass = true;
};

/// Compares d loss / d p from the tape against central differences for
/// every entry of every tensor in `params`. No parameters is a vacuous pass.
inline GradCheckResult check_gradient(const std::string& name, const ParamList& params,
                                      const std::function<Tensor()>& loss, const GradCheckOptions& opt = {}) {
  GradCheckResult res;
  res.name = name;
  if (params.empty()) return res;
  for (const auto& [pn, p] : params) Tensor(p).zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor L = loss();
    if (!tape.empty()) tape.backward(L);
  }
  NoGradScope no_grad;
  for (const auto& [pn, pc] : params) {
    Tensor p = pc;
    const std::vector<double> analytic(p.grad().begin(), p.grad().end());
    auto v = p.mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double keep = v[i];
      v[i] = keep + opt.step;
      const double up = loss().item();
      v[i] = keep - opt.step;
      const double down = loss().item();
      v[i] = keep;
      const double numeric = (up - down) / (2.0 * opt.step);
      const double err = std::abs(analytic[i] - numeric) /
                         std::max({std::abs(analytic[i]), std::abs(numeric), opt.scale_floor});
      ++res.entries;
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst = pn + "[" + std::to_string(i) + "]";
      }
    }
    p.zero_grad();
  }
  res.pass = res.max_rel_error < opt.tolerance;
  return res;
}

struct GradCheckReport {
  std::vector<GradCheckResult> results;

  bool pass() const {
    return std::all_of(results.begin(), results.end(), [](const auto& r) { return r.pass; });
  }
  double max_rel_error() const {
    double m = 0.0;
    for (const auto& r : results) m = std::max(m, r.max_rel_error);
    return m;
  }
  std::vector<std::string> failures() const {
    std::vector<std::string> out;
    for (const auto& r : results)
      if (!r.pass) out.push_back(r.name);
    return out;
  }
};

namespace detail {

inline Tensor random_param(Shape shape, RngStream& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = lo + (hi - lo) * rng.uniform();
  return Tensor::param(std::move(shape), std::move(v));
}

// Fixed random weights turn any tensor into a scalar with a generic gradient.
inline Tensor project(const Tensor& y, std::uint64_t key) {
  RngStream rng(CounterRng(0x6C), key);
  std::vector<double> w(y.numel());
  for (auto& x : w) x = rng.normal();
  return sum(y * Tensor(y.shape(), std::move(w)));
}

// Square with a backward rule that is off by one percent.
inline Tensor miswired_square(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * a[i];
  return make_op("miswired_square", a.shape(), std::move(out), {a}, [](Node& self) {
    Node& na = *self.inputs[0];
    auto& g = na.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * 2.02 * na.value[i];
  });
}

}  // namespace detail

/// Model configuration of the micro instance: 2x2 grid, K=2, T=3.
inline ModelConfig micro_model_config() {
  ModelConfig c;
  c.grid_h = 2;
  c.grid_w = 2;
  c.token_dim = 2;
  c.num_classes = 2;
  c.ar_width = 8;
  c.ar_heads = 2;
  c.ar_blocks = 1;
  c.ar_mlp_ratio = 2;
  c.cond_dim = 6;
  c.head_width = 8;
  c.head_layers = 2;
  c.time_embed_dim = 4;
  c.diffusion_steps = 3;
  c.mask_steps = 2;
  return c;
}

/// Jitters every parameter so the micro model is not at its initialization
/// (zero biases and unit gains would hide some gradient paths).
inline void jitter_params(const MarModel& m, std::uint64_t seed, double scale) {
  RngStream rng(CounterRng(seed), 0x717);
  for (auto& [name, t] : m.params()) {
    Tensor p = t;
    for (auto& x : p.mutable_values()) x += scale * rng.normal();
  }
}

struct MicroInstance {
  MarModel policy, old_policy, ref;
  std::vector<RolloutRecord> records;
};

/// Rollouts drawn from a perturbed copy of the policy, so importance
/// ratios sit away from 1 and some clip.
inline MicroInstance micro_instance(std::size_t trajectories = 2) {
  MicroInstance mi;
  const auto cfg = micro_model_config();
  mi.policy = MarModel(cfg, 5);
  jitter_params(mi.policy, 1, 0.1);
  mi.ref = mi.policy.clone();
  jitter_params(mi.ref, 2, 0.05);
  mi.old_policy = mi.policy.clone();
  jitter_params(mi.old_policy, 3, 0.05);
  DataConfig dc;
  dc.grid_h = cfg.grid_h;
  dc.grid_w = cfg.grid_w;
  dc.token_dim = cfg.token_dim;
  dc.num_classes = cfg.num_classes;
  const auto data = SyntheticData::generate(dc);
  const auto reward = RewardModel::from_data(data, RewardKind::pattern);
  GenerateOptions go;
  go.trajectories = trajectories;
  mi.records = rollout_group(mi.old_policy, 1, 2, go, CounterRng(9), 0x31, data, reward);
  return mi;
}

/// The full objective on the micro instance: all mask steps, diffusion
/// steps {2, 3}, S trajectories, top-50% mask, consistency at tau = 0.
inline Tensor micro_objective(const MicroInstance& mi, bool baseline = false) {
  TermOptions to;
  to.trajectories = baseline ? 1 : mi.records[0].num_trajectories();
  to.k_percent = baseline ? 0.0 : 50.0;
  to.consistency = !baseline;
  const ObjectiveOptions oo{0.2, 0.1};
  const std::size_t D = mi.policy.config().token_dim;
  Tensor total = Tensor::scalar(0.0);
  for (const auto& rec : mi.records) {
    const auto cm = generation_consistency(rec.gen, D, 0.0);
    std::vector<StepTerms> terms;
    for (std::size_t m = 1; m <= mi.policy.config().mask_steps; ++m)
      terms.push_back(build_step_terms(mi.policy, &mi.ref, rec, m, {2, 3}, to, &cm));
    total = total + (baseline ? baseline_objective(terms, oo) : assemble_objective(terms, oo));
  }
  return total;
}

/// Runs every case and returns one result per case.
inline GradCheckReport run_gradcheck(const GradCheckOptions& opt = {}) {
  GradCheckReport rep;
  RngStream rng(CounterRng(0x6C4), 1);
  const auto P = [&](Shape s, double lo = -1.0, double hi = 1.0) { return detail::random_param(std::move(s), rng, lo, hi); };
  const auto add_case = [&](const std::string& name, const std::vector<Tensor>& inputs,
                            const std::function<Tensor()>& f) {
    ParamList pl;
    for (std::size_t i = 0; i < inputs.size(); ++i) pl.emplace_back("in" + std::to_string(i), inputs[i]);
    const std::uint64_t key = rep.results.size();
    rep.results.push_back(check_gradient(name, pl, [&f, key] { return detail::project(f(), key); }, opt));
  };

  // elementwise, with broadcasting
  {
    const Tensor a = P({3, 4}), b = P({3, 4}), row = P({4}), col = P({3, 1}), s = P({});
    add_case("add", {a, row}, [&] { return a + row; });
    add_case("sub", {a, col}, [&] { return a - col; });
    add_case("mul", {a, b}, [&] { return a * b; });
    add_case("mul_scalar", {a, s}, [&] { return a * s; });
    const Tensor pos = P({3, 4}, 0.5, 2.0);
    add_case("div", {a, pos}, [&] { return a / pos; });
    const Tensor c = P({3, 4});
    add_case("minimum", {a, c}, [&] { return minimum(a, c + 0.0); });
    add_case("neg", {a}, [&] { return -a; });
    add_case("exp", {a}, [&] { return exp(a); });
    add_case("log", {pos}, [&] { return log(pos); });
    add_case("sqrt", {pos}, [&] { return sqrt(pos); });
    add_case("square", {a}, [&] { return square(a); });
    add_case("tanh", {a}, [&] { return tanh(a); });
    add_case("gelu", {a}, [&] { return gelu(a * 2.0); });
    add_case("clamp", {a}, [&] { return clamp(a, -0.95, 0.95); });
  }
  // reductions
  {
    const Tensor a = P({3, 5});
    add_case("sum", {a}, [&] { return sum(a); });
    add_case("mean", {a}, [&] { return mean(a); });
    add_case("sum_axis0", {a}, [&] { return sum(a, 0); });
    add_case("sum_axis1", {a}, [&] { return sum(a, 1); });
    add_case("mean_axis0", {a}, [&] { return mean(a, 0); });
    add_case("std_axis1", {a}, [&] { return std_dev(a, 1); });
    add_case("max_axis1", {a}, [&] { return max(a, 1).values; });
  }
  // layout and linear algebra
  {
    const Tensor a = P({4, 3}), b = P({3, 5}), c = P({2, 3}), d = P({4, 2});
    add_case("matmul", {a, b}, [&] { return matmul(a, b); });
    add_case("transpose", {a}, [&] { return transpose(a); });
    add_case("reshape", {a}, [&] { return reshape(a, {2, 6}); });
    add_case("slice_cols", {a}, [&] { return slice_cols(a, 1, 2); });
    add_case("concat_cols", {a, d}, [&] { return concat_cols({a, d}); });
    add_case("concat_rows", {a, c}, [&] { return concat_rows({a, c}); });
    add_case("gather_rows", {a}, [&] { return gather_rows(a, {3, 0, 3, 1}); });
    add_case("softmax", {a}, [&] { return softmax(a * 2.0); });
    add_case("layer_norm", {a}, [&] { return layer_norm(a); });
  }
  if (opt.negative_control) {
    const Tensor a = P({3, 3});
    add_case("miswired_square (negative control)", {a}, [&] { return detail::miswired_square(a); });
  }

  // model blocks
  {
    RngStream init(CounterRng(0xB10C), 1);
    const Linear lin(3, 4, init);
    const Tensor x = P({5, 3});
    ParamList pl;
    lin.collect("linear", pl);
    pl.emplace_back("x", x);
    rep.results.push_back(check_gradient("linear", pl, [&] { return detail::project(lin(x), 101); }, opt));

    LayerNorm ln(4);
    for (auto* t : {&ln.gain, &ln.bias})
      for (auto& v : t->mutable_values()) v += 0.3 * init.normal();
    const Tensor y = P({3, 4});
    pl.clear();
    ln.collect("ln", pl);
    pl.emplace_back("x", y);
    rep.results.push_back(check_gradient("layer_norm_affine", pl, [&] { return detail::project(ln(y), 102); }, opt));

    AttentionWeights w{Linear(4, 4, init), Linear(4, 4, init), Linear(4, 4, init), Linear(4, 4, init)};
    const Tensor xa = P({3, 4});
    const Tensor bias({3}, std::vector<double>{0.0, kMaskedScore, 0.3});
    pl.clear();
    w.collect("attn", pl);
    pl.emplace_back("x", xa);
    rep.results.push_back(
        check_gradient("attention", pl, [&] { return detail::project(attention(xa, w, 2, bias), 103); }, opt));
  }
  {
    const MarModel model(micro_model_config(), 11);
    jitter_params(model, 4, 0.1);
    const auto& cfg = model.config();
    const std::size_t n = cfg.num_tokens(), D = cfg.token_dim;
    RngStream r2(CounterRng(0xB10D), 1);
    std::vector<double> tok(n * D);
    for (auto& v : tok) v = r2.normal();
    const Tensor tokens({n, D}, tok);
    const std::vector<bool> known{true, false, true, false};
    rep.results.push_back(check_gradient(
        "ar_backbone", model.ar_params(), [&] { return detail::project(model.ar().forward(tokens, known, 1), 104); },
        opt));

    const Tensor z = P({3, cfg.cond_dim});
    const Tensor xt = P({3, D});
    ParamList hp = model.head_params();
    hp.emplace_back("z", z);
    hp.emplace_back("x_t", xt);
    rep.results.push_back(check_gradient(
        "diffusion_head", hp, [&] { return detail::project(model.head().forward(xt, {1, 2, 3}, z), 105); }, opt));

    const Tensor eps = P({3, D}, -0.5, 0.5);
    const Tensor xprev = P({3, D});
    rep.results.push_back(check_gradient(
        "posterior_mean+step_logprob", {{"eps", eps}},
        [&] {
          const Tensor mu = posterior_mean(model.schedule(), xt.detach(), eps, {2, 3, 2}, cfg.x0_clamp);
          return sum(step_logprob_rows(xprev.detach(), mu, {0.3, 0.2, 0.3}));
        },
        opt));

    const Tensor mu_t = P({4, D}, -0.3, 0.3), mu_r = P({4, D}, -0.3, 0.3);
    rep.results.push_back(
        check_gradient("kl_surrogate", {{"mu_theta", mu_t}}, [&] { return kl_surrogate(mu_t, mu_r.detach()); }, opt));

    DataConfig dc;
    dc.grid_h = cfg.grid_h;
    dc.grid_w = cfg.grid_w;
    dc.token_dim = D;
    dc.num_classes = cfg.num_classes;
    const auto item = make_denoise_item(SyntheticData::generate(dc), cfg, CounterRng(3), 7, 0.0);
    rep.results.push_back(
        check_gradient("denoising_loss", model.params(), [&] { return denoising_loss(model, item); }, opt));
  }

  // full objective
  {
    const auto mi = micro_instance(2);
    rep.results.push_back(check_gradient("mte_objective", mi.policy.params(), [&] { return micro_objective(mi); }, opt));
    rep.results.push_back(
        check_gradient("baseline_objective", mi.policy.params(), [&] { return micro_objective(mi, true); }, opt));
  }
  return rep;
}

}  // namespace marl
