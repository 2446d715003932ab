#pragma once

// Dense fp64 tensors with tape-based reverse-mode differentiation.
//
// Storage is row-major and owned by each tensor; there are no aliasing
// views. An operation records itself on the thread's active Tape only when a
// tape is active and at least one input requires a gradient, so code running
// without a TapeScope (rollouts, evaluation) builds no graph at all.

#include <algorithm>
#include <bit>
#include <cmath>
#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#endif
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "marl/errors.hpp"

namespace marl {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

class Tensor;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until something is accumulated
  bool requires_grad = false;
  bool leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Ordered record of differentiable operations. Backward replays it in
/// reverse; clear() (or destruction) releases the graph between steps.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }
  void clear() { nodes_.clear(); }

  void record(std::shared_ptr<detail::Node> node) { nodes_.push_back(std::move(node)); }

  /// Populates grad buffers of every requires-grad leaf reachable from
  /// `loss`. Leaf gradients accumulate across calls until zero_grad().
  void backward(const Tensor& loss);

  static Tape*& active() {
    thread_local Tape* tape = nullptr;
    return tape;
  }

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

/// Makes `tape` the recording target for the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : prev_(Tape::active()) { Tape::active() = &tape; }
  ~TapeScope() { Tape::active() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

/// Suspends recording for the current thread.
class NoGradScope {
 public:
  NoGradScope() : prev_(Tape::active()) { Tape::active() = nullptr; }
  ~NoGradScope() { Tape::active() = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* prev_;
};

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : node_(std::make_shared<detail::Node>()) {
    node_->value.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<double> values) : node_(std::make_shared<detail::Node>()) {
    if (values.size() != shape_numel(shape)) {
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  /// A leaf that requires a gradient.
  static Tensor param(Shape shape, std::vector<double> values) {
    Tensor t(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t size(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rows() const { return require_2d(), node_->shape[0]; }
  std::size_t cols() const { return require_2d(), node_->shape[1]; }

  std::span<const double> values() const { return node_->value; }
  const std::vector<double>& vec() const { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  double item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  /// Writable storage; only leaves may be mutated in place.
  std::span<double> mutable_values() {
    if (!node_->leaf) throw SequencingError(std::string("cannot mutate result of ") + node_->op);
    return node_->value;
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    if (!node_->leaf) throw SequencingError("requires_grad can only be toggled on leaves");
    node_->requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return node_->leaf; }
  const char* op_name() const { return node_->op; }

  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient buffer; zeros when nothing has been accumulated.
  std::span<const double> grad() const { return node_->grad_buffer(); }
  std::span<double> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  /// Constant copy of the values, detached from any graph.
  Tensor detach() const { return Tensor(shape(), node_->value); }

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  void require_2d() const {
    if (node_->shape.size() != 2) throw DimensionError("expected a 2-D tensor, got " + shape_str(shape()));
  }

  std::shared_ptr<detail::Node> node_;
};

inline void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) throw DimensionError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  if (nodes_.empty()) throw SequencingError("backward called on an empty tape");
  for (auto& n : nodes_) n->grad.clear();
  auto& root = *loss.node();
  if (!root.requires_grad) return;  // loss does not depend on any parameter
  root.grad_buffer()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    detail::Node& n = **it;
    if (!n.grad.empty() && n.backward) n.backward(n);
  }
}

// ---------------------------------------------------------------------------
// Op construction

namespace detail {

// Exponent bits all set means inf or nan.
inline bool all_finite(const std::vector<double>& v) {
  std::uint64_t bad = 0;
  for (double x : v) {
    const auto bits = std::bit_cast<std::uint64_t>(x);
    bad |= static_cast<std::uint64_t>((bits & 0x7FF0000000000000ULL) == 0x7FF0000000000000ULL);
  }
  return bad == 0;
}

}  // namespace detail

/// Builds the result of an operation. When recording, `backward` is stored
/// and receives the result node; it must accumulate into `inputs[k]` only for
/// inputs with requires_grad set.
inline Tensor make_op(const char* op, Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                      std::function<void(detail::Node&)> backward) {
  if (!detail::all_finite(value)) throw NumericError(std::string(op) + " produced a non-finite value");
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  Tape* tape = Tape::active();
  const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (tape && any) {
    node->requires_grad = true;
    node->leaf = false;
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(backward);
    tape->record(node);
  }
  return Tensor(std::move(node));
}

namespace detail {

inline void accumulate(Node& n, std::span<const double> g) {
  if (!n.requires_grad) return;
  auto& buf = n.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

inline double fmadd(double a, double b, double c) {
#ifdef __FMA__
  return std::fma(a, b, c);
#else
  return a * b + c;
#endif
}

// Tile of R rows by W columns of c, accumulated over all of k. With a bias,
// c is overwritten by (a*b) + bias instead of accumulated into.
template <std::size_t R, std::size_t W>
inline void gemm_tile(const double* a, const double* b, double* c, std::size_t k, std::size_t n, std::size_t j0,
                      const double* bias) {
  double acc[R][W];
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t jj = 0; jj < W; ++jj) acc[r][jj] = bias ? 0.0 : c[r * n + j0 + jj];
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = b + p * n + j0;
    for (std::size_t r = 0; r < R; ++r) {
      const double av = a[r * k + p];
      for (std::size_t jj = 0; jj < W; ++jj) acc[r][jj] = fmadd(av, brow[jj], acc[r][jj]);
    }
  }
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t jj = 0; jj < W; ++jj) c[r * n + j0 + jj] = bias ? acc[r][jj] + bias[j0 + jj] : acc[r][jj];
}

#if defined(__AVX2__) && defined(__FMA__)
// Same arithmetic as gemm_tile<R, 8>: one fused multiply-add per term.
template <std::size_t R>
inline void gemm_tile_avx(const double* a, const double* b, double* c, std::size_t k, std::size_t n, std::size_t j0,
                          const double* bias) {
  __m256d acc[R][2];
  for (std::size_t r = 0; r < R; ++r) {
    acc[r][0] = bias ? _mm256_setzero_pd() : _mm256_loadu_pd(c + r * n + j0);
    acc[r][1] = bias ? _mm256_setzero_pd() : _mm256_loadu_pd(c + r * n + j0 + 4);
  }
  for (std::size_t p = 0; p < k; ++p) {
    const __m256d b0 = _mm256_loadu_pd(b + p * n + j0);
    const __m256d b1 = _mm256_loadu_pd(b + p * n + j0 + 4);
    for (std::size_t r = 0; r < R; ++r) {
      const __m256d av = _mm256_set1_pd(a[r * k + p]);
      acc[r][0] = _mm256_fmadd_pd(av, b0, acc[r][0]);
      acc[r][1] = _mm256_fmadd_pd(av, b1, acc[r][1]);
    }
  }
  if (bias) {
    const __m256d b0 = _mm256_loadu_pd(bias + j0), b1 = _mm256_loadu_pd(bias + j0 + 4);
    for (std::size_t r = 0; r < R; ++r) {
      acc[r][0] = _mm256_add_pd(acc[r][0], b0);
      acc[r][1] = _mm256_add_pd(acc[r][1], b1);
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    _mm256_storeu_pd(c + r * n + j0, acc[r][0]);
    _mm256_storeu_pd(c + r * n + j0 + 4, acc[r][1]);
  }
}
#endif

template <std::size_t R>
inline void gemm_rows(const double* a, const double* b, double* c, std::size_t k, std::size_t n, const double* bias) {
  std::size_t j0 = 0;
#if defined(__AVX2__) && defined(__FMA__)
  for (; j0 + 8 <= n; j0 += 8) gemm_tile_avx<R>(a, b, c, k, n, j0, bias);
#endif
  for (; j0 + 4 <= n; j0 += 4) gemm_tile<R, 4>(a, b, c, k, n, j0, bias);
  for (; j0 < n; ++j0) gemm_tile<R, 1>(a, b, c, k, n, j0, bias);
}

// c[m,n] += a[m,k] * b[k,n]; per element the accumulation runs over k in
// ascending order, so a row's result does not depend on how many rows are
// batched together. A non-null bias[n] switches to c = a*b + bias, rounded
// exactly as a matmul followed by a broadcast add.
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
                    const double* bias = nullptr) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) gemm_rows<4>(a + i * k, b, c + i * n, k, n, bias);
  for (; i < m; ++i) gemm_rows<1>(a + i * k, b, c + i * n, k, n, bias);
}

inline std::vector<double> transpose_data(const std::vector<double>& v, std::size_t r, std::size_t c);

// c[k,n] += a[m,k]^T * g[m,n]
inline void gemm_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t k, std::size_t n) {
  const auto at = transpose_data(std::vector<double>(a, a + m * k), m, k);
  gemm_nn(at.data(), g, c, k, m, n);
}

inline std::vector<double> transpose_data(const std::vector<double>& v, std::size_t r, std::size_t c) {
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = v[i * c + j];
  return out;
}

// Numpy-style broadcasting plan for a binary op. An operand maps onto the
// output either one-to-one, as a scalar, as a contiguous block repeated
// around (index (i / div) % mod), or through an explicit index table.
struct OperandMap {
  enum Kind { identity, scalar, divmod, table } kind = identity;
  std::size_t div = 1, mod = 1;
  std::vector<std::size_t> index;
  std::size_t operator()(std::size_t i) const {
    switch (kind) {
      case identity: return i;
      case scalar: return 0;
      case divmod: return (i / div) % mod;
      case table: return index[i];
    }
    return i;
  }
};

struct BroadcastPlan {
  Shape out;
  OperandMap a, b;
  std::size_t ia(std::size_t i) const { return a(i); }
  std::size_t ib(std::size_t i) const { return b(i); }
};

inline std::vector<std::size_t> broadcast_map(const Shape& in, const Shape& out) {
  const std::size_t total = shape_numel(out);
  std::vector<std::size_t> strides(out.size(), 0);
  const std::size_t offset = out.size() - in.size();
  std::size_t stride = 1;
  for (std::size_t d = in.size(); d-- > 0;) {
    strides[d + offset] = in[d] == 1 ? 0 : stride;
    stride *= in[d];
  }
  std::vector<std::size_t> map(total);
  std::vector<std::size_t> idx(out.size(), 0);
  for (std::size_t i = 0; i < total; ++i) {
    std::size_t src = 0;
    for (std::size_t d = 0; d < out.size(); ++d) src += idx[d] * strides[d];
    map[i] = src;
    for (std::size_t d = out.size(); d-- > 0;) {
      if (++idx[d] < out[d]) break;
      idx[d] = 0;
    }
  }
  return map;
}

inline OperandMap operand_map(const Shape& in, const Shape& out) {
  OperandMap m;
  const std::size_t n = shape_numel(in), total = shape_numel(out);
  if (n == total) return m;
  if (n == 1) {
    m.kind = OperandMap::scalar;
    return m;
  }
  // Aligned dims of `in` must be 1 outside one contiguous run that matches `out`.
  const std::size_t offset = out.size() - in.size();
  std::size_t first = out.size(), last = 0;
  for (std::size_t d = 0; d < in.size(); ++d)
    if (in[d] != 1) {
      first = std::min(first, d + offset);
      last = d + offset;
    }
  bool block = true;
  for (std::size_t d = first; d <= last; ++d)
    if (in[d - offset] != out[d]) block = false;
  if (block) {
    m.kind = OperandMap::divmod;
    m.mod = n;
    for (std::size_t d = last + 1; d < out.size(); ++d) m.div *= out[d];
    return m;
  }
  m.kind = OperandMap::table;
  m.index = broadcast_map(in, out);
  return m;
}

inline BroadcastPlan plan_broadcast(const char* op, const Shape& a, const Shape& b) {
  BroadcastPlan p;
  if (a == b) {
    p.out = a;
    return p;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  p.out.assign(rank, 1);
  for (std::size_t d = 0; d < rank; ++d) {
    const std::size_t da = d + a.size() >= rank ? a[d + a.size() - rank] : 1;
    const std::size_t db = d + b.size() >= rank ? b[d + b.size() - rank] : 1;
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                           " are not broadcast-compatible");
    }
    p.out[d] = da == 1 ? db : da;
  }
  p.a = operand_map(a, p.out);
  p.b = operand_map(b, p.out);
  return p;
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const char* op, const Shape& s, std::size_t axis) {
  if (axis >= s.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(s));
  }
  AxisSplit a;
  for (std::size_t d = 0; d < axis; ++d) a.outer *= s[d];
  a.len = s[axis];
  for (std::size_t d = axis + 1; d < s.size(); ++d) a.inner *= s[d];
  if (a.len == 0) throw DimensionError(std::string(op) + ": reduction over an empty axis");
  return a;
}

inline Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t d = 0; d < s.size(); ++d)
    if (d != axis) out.push_back(s[d]);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

// Calls fn(i, ia, ib) for every output index, with specialized loops for
// the broadcast patterns the models produce.
template <class Fn>
inline void for_each_pair(const BroadcastPlan& plan, std::size_t total, Fn&& fn) {
  const auto ka = plan.a.kind, kb = plan.b.kind;
  if (ka == OperandMap::identity && kb == OperandMap::identity) {
    for (std::size_t i = 0; i < total; ++i) fn(i, i, i);
  } else if (ka == OperandMap::identity && kb == OperandMap::scalar) {
    for (std::size_t i = 0; i < total; ++i) fn(i, i, 0);
  } else if (ka == OperandMap::identity && kb == OperandMap::divmod && plan.b.div == 1) {
    const std::size_t mod = plan.b.mod;
    for (std::size_t i = 0; i < total; i += mod)
      for (std::size_t q = 0; q < mod; ++q) fn(i + q, i + q, q);
  } else if (ka == OperandMap::identity && kb == OperandMap::divmod) {
    const std::size_t div = plan.b.div, mod = plan.b.mod;
    for (std::size_t i = 0; i < total;) {
      for (std::size_t q = 0; q < mod && i < total; ++q)
        for (std::size_t d = 0; d < div; ++d, ++i) fn(i, i, q);
    }
  } else if (ka == OperandMap::divmod && kb == OperandMap::identity) {
    const std::size_t div = plan.a.div, mod = plan.a.mod;
    for (std::size_t i = 0; i < total;) {
      for (std::size_t q = 0; q < mod && i < total; ++q)
        for (std::size_t d = 0; d < div; ++d, ++i) fn(i, q, i);
    }
  } else {
    for (std::size_t i = 0; i < total; ++i) fn(i, plan.ia(i), plan.ib(i));
  }
}

// dfa/dfb: partial derivatives of f with respect to each operand.
template <class F, class DA, class DB>
Tensor binary_op(const char* op, const Tensor& a, const Tensor& b, F f, DA dfa, DB dfb) {
  auto plan = std::make_shared<const BroadcastPlan>(plan_broadcast(op, a.shape(), b.shape()));
  const std::size_t total = shape_numel(plan->out);
  std::vector<double> out(total);
  const auto& av = a.vec();
  const auto& bv = b.vec();
  for_each_pair(*plan, total, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = f(av[ia], bv[ib]); });
  return make_op(op, plan->out, std::move(out), {a, b}, [plan, dfa, dfb](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    const std::size_t total = self.value.size();
    const auto& x = na.value;
    const auto& y = nb.value;
    const auto& g = self.grad;
    const auto& z = self.value;
    if (na.requires_grad) {
      auto& ga = na.grad_buffer();
      for_each_pair(*plan, total,
                    [&](std::size_t i, std::size_t ia, std::size_t ib) { ga[ia] += g[i] * dfa(x[ia], y[ib], z[i]); });
    }
    if (nb.requires_grad) {
      auto& gb = nb.grad_buffer();
      for_each_pair(*plan, total,
                    [&](std::size_t i, std::size_t ia, std::size_t ib) { gb[ib] += g[i] * dfb(x[ia], y[ib], z[i]); });
    }
  });
}

// df(x, y): derivative given input x and output y.
template <class F, class DF>
Tensor unary_op(const char* op, const Tensor& a, F f, DF df) {
  const auto& av = a.vec();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return make_op(op, a.shape(), std::move(out), {a}, [df](Node& self) {
    Node& na = *self.inputs[0];
    auto& g = na.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(na.value[i], self.value[i]);
  });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  for (double v : b.values())
    if (v == 0.0) throw DomainError("div: division by zero");
  return detail::binary_op(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

/// Elementwise minimum; at ties the gradient goes to the first operand.
inline Tensor minimum(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "minimum", a, b, [](double x, double y) { return x <= y ? x : y; },
      [](double x, double y, double) { return x <= y ? 1.0 : 0.0; },
      [](double x, double y, double) { return x <= y ? 0.0 : 1.0; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add(a, Tensor::scalar(s)); }
inline Tensor operator-(const Tensor& a, double s) { return sub(a, Tensor::scalar(s)); }
inline Tensor operator*(const Tensor& a, double s) { return mul(a, Tensor::scalar(s)); }
inline Tensor operator/(const Tensor& a, double s) { return div(a, Tensor::scalar(s)); }
inline Tensor operator+(double s, const Tensor& a) { return add(Tensor::scalar(s), a); }
inline Tensor operator-(double s, const Tensor& a) { return sub(Tensor::scalar(s), a); }
inline Tensor operator*(double s, const Tensor& a) { return mul(Tensor::scalar(s), a); }

inline Tensor neg(const Tensor& a) {
  return detail::unary_op(
      "neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}
inline Tensor operator-(const Tensor& a) { return neg(a); }

inline Tensor exp(const Tensor& a) {
  return detail::unary_op(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  for (double v : a.values())
    if (!(v > 0.0)) throw DomainError("log: argument must be positive, got " + std::to_string(v));
  return detail::unary_op(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor sqrt(const Tensor& a) {
  for (double v : a.values())
    if (v < 0.0) throw DomainError("sqrt: argument must be non-negative, got " + std::to_string(v));
  // The derivative at 0 is unbounded; it is reported as 0 there.
  return detail::unary_op(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

inline Tensor square(const Tensor& a) {
  return detail::unary_op(
      "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary_op(
      "tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

/// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  const auto& av = a.vec();
  std::vector<double> cdf(av.size()), out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    cdf[i] = 0.5 * (1.0 + std::erf(av[i] * inv_sqrt2));
    out[i] = av[i] * cdf[i];
  }
  const bool record = Tape::active() && a.requires_grad();
  return make_op("gelu", a.shape(), std::move(out), {a},
                 [cdf = record ? std::move(cdf) : std::vector<double>{}](detail::Node& self) {
                   detail::Node& na = *self.inputs[0];
                   auto& g = na.grad_buffer();
                   for (std::size_t i = 0; i < g.size(); ++i) {
                     const double x = na.value[i];
                     g[i] += self.grad[i] * (cdf[i] + x * inv_sqrt2pi * std::exp(-0.5 * x * x));
                   }
                 });
}

/// Clamp to [lo, hi]; zero gradient outside the open interval.
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  if (lo > hi) throw DomainError("clamp: lower bound exceeds upper bound");
  return detail::unary_op(
      "clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return make_op("sum", Shape{}, {s}, {a}, [](detail::Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (auto& x : g) x += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw DimensionError("mean of an empty tensor");
  double s = 0.0;
  for (double v : a.values()) s += v;
  const double n = static_cast<double>(a.numel());
  return make_op("mean", Shape{}, {s / n}, {a}, [n](detail::Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (auto& x : g) x += self.grad[0] / n;
  });
}

inline Tensor sum(const Tensor& a, std::size_t axis) {
  const auto sp = detail::split_axis("sum", a.shape(), axis);
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  const auto& v = a.vec();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < sp.len; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += v[(o * sp.len + l) * sp.inner + i];
  return make_op("sum_axis", detail::drop_axis(a.shape(), axis), std::move(out), {a}, [sp](detail::Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t l = 0; l < sp.len; ++l)
        for (std::size_t i = 0; i < sp.inner; ++i) g[(o * sp.len + l) * sp.inner + i] += self.grad[o * sp.inner + i];
  });
}

inline Tensor mean(const Tensor& a, std::size_t axis) {
  const auto sp = detail::split_axis("mean", a.shape(), axis);
  return sum(a, axis) * (1.0 / static_cast<double>(sp.len));
}

/// Population standard deviation (divides by the count). At zero spread the
/// gradient is taken as zero.
inline Tensor std_dev(const Tensor& a, std::size_t axis) {
  const auto sp = detail::split_axis("std", a.shape(), axis);
  const auto& v = a.vec();
  const double n = static_cast<double>(sp.len);
  std::vector<double> mu(sp.outer * sp.inner, 0.0), out(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      double s = 0.0;
      for (std::size_t l = 0; l < sp.len; ++l) s += v[(o * sp.len + l) * sp.inner + i];
      const double m = s / n;
      double q = 0.0;
      for (std::size_t l = 0; l < sp.len; ++l) {
        const double d = v[(o * sp.len + l) * sp.inner + i] - m;
        q += d * d;
      }
      mu[o * sp.inner + i] = m;
      out[o * sp.inner + i] = std::sqrt(q / n);
    }
  return make_op("std", detail::drop_axis(a.shape(), axis), std::move(out), {a}, [sp, mu, n](detail::Node& self) {
    auto& na = *self.inputs[0];
    auto& g = na.grad_buffer();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const double y = self.value[o * sp.inner + i];
        if (y == 0.0) continue;
        const double gy = self.grad[o * sp.inner + i];
        for (std::size_t l = 0; l < sp.len; ++l) {
          const std::size_t k = (o * sp.len + l) * sp.inner + i;
          g[k] += gy * (na.value[k] - mu[o * sp.inner + i]) / (n * y);
        }
      }
  });
}

struct MaxResult {
  Tensor values;
  std::vector<std::size_t> argmax;  // index along the reduced axis; first on ties
};

inline MaxResult max(const Tensor& a, std::size_t axis) {
  const auto sp = detail::split_axis("max", a.shape(), axis);
  const auto& v = a.vec();
  std::vector<double> out(sp.outer * sp.inner);
  std::vector<std::size_t> arg(sp.outer * sp.inner, 0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = 0;
      for (std::size_t l = 1; l < sp.len; ++l)
        if (v[(o * sp.len + l) * sp.inner + i] > v[(o * sp.len + best) * sp.inner + i]) best = l;
      arg[o * sp.inner + i] = best;
      out[o * sp.inner + i] = v[(o * sp.len + best) * sp.inner + i];
    }
  Tensor values = make_op("max", detail::drop_axis(a.shape(), axis), std::move(out), {a},
                          [sp, arg](detail::Node& self) {
                            auto& g = self.inputs[0]->grad_buffer();
                            for (std::size_t o = 0; o < sp.outer; ++o)
                              for (std::size_t i = 0; i < sp.inner; ++i)
                                g[(o * sp.len + arg[o * sp.inner + i]) * sp.inner + i] += self.grad[o * sp.inner + i];
                          });
  return {std::move(values), std::move(arg)};
}

// ---------------------------------------------------------------------------
// Linear algebra and layout

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(a.vec().data(), b.vec().data(), out.data(), m, k, n);
  return make_op("matmul", Shape{m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    if (na.requires_grad) {
      // dA = dC * B^T
      const auto bt = detail::transpose_data(nb.value, k, n);
      detail::gemm_nn(self.grad.data(), bt.data(), na.grad_buffer().data(), m, n, k);
    }
    if (nb.requires_grad) {
      // dB = A^T * dC
      detail::gemm_tn(na.value.data(), self.grad.data(), nb.grad_buffer().data(), m, k, n);
    }
  });
}

/// x * w + b with b broadcast over rows; one node instead of two.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.dim() != 2 || w.dim() != 2 || x.shape()[1] != w.shape()[0] || b.dim() != 1 || b.shape()[0] != w.shape()[1]) {
    throw DimensionError("linear: cannot apply " + shape_str(w.shape()) + " weight and " + shape_str(b.shape()) +
                         " bias to " + shape_str(x.shape()));
  }
  const std::size_t m = x.shape()[0], k = x.shape()[1], n = w.shape()[1];
  std::vector<double> out(m * n);
  detail::gemm_nn(x.vec().data(), w.vec().data(), out.data(), m, k, n, b.vec().data());
  return make_op("linear", Shape{m, n}, std::move(out), {x, w, b}, [m, k, n](detail::Node& self) {
    auto& nx = *self.inputs[0];
    auto& nw = *self.inputs[1];
    auto& nb = *self.inputs[2];
    if (nx.requires_grad) {
      const auto wt = detail::transpose_data(nw.value, k, n);
      detail::gemm_nn(self.grad.data(), wt.data(), nx.grad_buffer().data(), m, n, k);
    }
    if (nw.requires_grad) detail::gemm_tn(nx.value.data(), self.grad.data(), nw.grad_buffer().data(), m, k, n);
    if (nb.requires_grad) {
      auto& gb = nb.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += self.grad[i * n + j];
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  if (a.dim() != 2) throw DimensionError("transpose expects a 2-D tensor, got " + shape_str(a.shape()));
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  return make_op("transpose", Shape{c, r}, detail::transpose_data(a.vec(), r, c), {a}, [r, c](detail::Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  return make_op("reshape", std::move(shape), a.vec(), {a}, [](detail::Node& self) {
    detail::accumulate(*self.inputs[0], self.grad);
  });
}

inline Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t len) {
  if (a.dim() != 2 || start + len > a.shape()[1]) {
    throw DimensionError("slice_cols: columns [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of range for " + shape_str(a.shape()));
  }
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  std::vector<double> out(r * len);
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(a.vec().begin() + static_cast<std::ptrdiff_t>(i * c + start), len, out.begin() + static_cast<std::ptrdiff_t>(i * len));
  return make_op("slice_cols", Shape{r, len}, std::move(out), {a}, [r, c, start, len](detail::Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < len; ++j) g[i * c + start + j] += self.grad[i * len + j];
  });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t r = parts[0].rows();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    if (p.dim() != 2 || p.rows() != r) {
      throw DimensionError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    }
    widths.push_back(p.cols());
    total += p.cols();
  }
  std::vector<double> out(r * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& v = parts[k].vec();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out[i * total + off + j] = v[i * widths[k] + j];
    off += widths[k];
  }
  return make_op("concat_cols", Shape{r, total}, std::move(out), parts, [r, total, widths](detail::Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      auto& in = *self.inputs[k];
      if (in.requires_grad) {
        auto& g = in.grad_buffer();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) g[i * widths[k] + j] += self.grad[i * total + off + j];
      }
      off += widths[k];
    }
  });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t c = parts[0].cols();
  std::size_t rows = 0;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    if (p.dim() != 2 || p.cols() != c) {
      throw DimensionError("concat_rows: column mismatch " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    }
    sizes.push_back(p.numel());
    rows += p.rows();
  }
  std::vector<double> out;
  out.reserve(rows * c);
  for (const auto& p : parts) out.insert(out.end(), p.vec().begin(), p.vec().end());
  return make_op("concat_rows", Shape{rows, c}, std::move(out), parts, [sizes](detail::Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      detail::accumulate(*self.inputs[k], std::span<const double>(self.grad).subspan(off, sizes[k]));
      off += sizes[k];
    }
  });
}

/// Selects rows by index (repeats allowed); backward scatter-adds.
inline Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& index) {
  if (a.dim() != 2) throw DimensionError("gather_rows expects a 2-D tensor, got " + shape_str(a.shape()));
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  std::vector<double> out(index.size() * c);
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] >= r) throw DimensionError("gather_rows: row " + std::to_string(index[k]) + " out of range");
    std::copy_n(a.vec().begin() + static_cast<std::ptrdiff_t>(index[k] * c), c, out.begin() + static_cast<std::ptrdiff_t>(k * c));
  }
  return make_op("gather_rows", Shape{index.size(), c}, std::move(out), {a}, [index, c](detail::Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t k = 0; k < index.size(); ++k)
      for (std::size_t j = 0; j < c; ++j) g[index[k] * c + j] += self.grad[k * c + j];
  });
}

// ---------------------------------------------------------------------------
// Normalization

/// Softmax over the last axis.
inline Tensor softmax(const Tensor& a) {
  if (a.dim() == 0) throw DimensionError("softmax needs at least one axis");
  const std::size_t c = a.shape().back();
  const std::size_t r = c ? a.numel() / c : 0;
  std::vector<double> out(a.numel());
  const auto& v = a.vec();
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = v.data() + i * c;
    const double m = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += (out[i * c + j] = std::exp(row[j] - m));
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= s;
  }
  return make_op("softmax", a.shape(), std::move(out), {a}, [r, c](detail::Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += self.grad[i * c + j] * self.value[i * c + j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.value[i * c + j] * (self.grad[i * c + j] - dot);
    }
  });
}

/// Normalizes the last axis to zero mean and unit (population) variance.
inline Tensor layer_norm(const Tensor& a, double eps = 1e-5) {
  if (a.dim() == 0) throw DimensionError("layer_norm needs at least one axis");
  const std::size_t c = a.shape().back();
  if (c == 0) throw DimensionError("layer_norm over an empty axis");
  const std::size_t r = a.numel() / c;
  std::vector<double> out(a.numel()), inv_std(r);
  const auto& v = a.vec();
  for (std::size_t i = 0; i < r; ++i) {
    double m = 0.0;
    for (std::size_t j = 0; j < c; ++j) m += v[i * c + j];
    m /= static_cast<double>(c);
    double q = 0.0;
    for (std::size_t j = 0; j < c; ++j) q += (v[i * c + j] - m) * (v[i * c + j] - m);
    const double is = 1.0 / std::sqrt(q / static_cast<double>(c) + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = (v[i * c + j] - m) * is;
  }
  return make_op("layer_norm", a.shape(), std::move(out), {a}, [r, c, inv_std](detail::Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const double n = static_cast<double>(c);
    for (std::size_t i = 0; i < r; ++i) {
      double mg = 0.0, mgy = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        mg += self.grad[i * c + j];
        mgy += self.grad[i * c + j] * self.value[i * c + j];
      }
      mg /= n;
      mgy /= n;
      for (std::size_t j = 0; j < c; ++j)
        g[i * c + j] += inv_std[i] * (self.grad[i * c + j] - mg - self.value[i * c + j] * mgy);
    }
  });
}

}  // namespace marl
