#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sfqn/tensor.hpp"

namespace sfqn {

/// Instrumented operation counts. Forward passes of the counted ops bump these;
/// backward passes never do (the cost model concerns inference).
struct OpCounters {
  std::uint64_t multiplications = 0;
  std::uint64_t additions = 0;
};

inline OpCounters& op_counters() {
  thread_local OpCounters counters;
  return counters;
}

namespace ad {

struct Node {
  DenseArray value;
  DenseArray grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  bool requires_grad = false;
  bool is_leaf = true;

  DenseArray& grad_buffer() {
    if (grad.empty()) grad = DenseArray(value.shape());
    return grad;
  }
};

/// Handle to a node in the computation graph. Cheap to copy; copies alias.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  const DenseArray& value() const { return node_->value; }
  DenseArray& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  /// Gradient accumulated by backward(); zeros if nothing reached this node.
  DenseArray& grad() { return node_->grad_buffer(); }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.fill(0.0);
  }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
inline bool grad_enabled() { return grad_enabled_flag(); }

/// Disables graph recording in scope (target-network and evaluation passes).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_enabled_flag()) { grad_enabled_flag() = false; }
  ~NoGradGuard() { grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Forward behaviour of spike nodes. `smooth` replaces the Heaviside step by
/// the surrogate primitive itself, so the backward rule becomes the exact
/// derivative of the forward and can be finite-difference checked.
enum class SpikeMode { heaviside, smooth };

inline SpikeMode& spike_mode_ref() {
  thread_local SpikeMode mode = SpikeMode::heaviside;
  return mode;
}

class SpikeModeGuard {
 public:
  explicit SpikeModeGuard(SpikeMode m) : prev_(spike_mode_ref()) { spike_mode_ref() = m; }
  ~SpikeModeGuard() { spike_mode_ref() = prev_; }
  SpikeModeGuard(const SpikeModeGuard&) = delete;
  SpikeModeGuard& operator=(const SpikeModeGuard&) = delete;

 private:
  SpikeMode prev_;
};

inline Var constant(DenseArray v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  return Var(std::move(n));
}

inline Var parameter(DenseArray v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = true;
  return Var(std::move(n));
}

namespace detail {

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline Var make_result(DenseArray value, std::vector<Var> inputs,
                       std::function<void(Node&)> backward, const char* op) {
  require_finite(value, op);
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->is_leaf = false;
  if (grad_enabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      n->requires_grad = true;
      n->parents.reserve(inputs.size());
      for (auto& in : inputs) n->parents.push_back(in.ptr());
      n->backward = std::move(backward);
    }
  }
  return Var(std::move(n));
}

// Returns the parent's gradient buffer, or nullptr when it needs none.
inline Real* parent_grad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  return p.requires_grad ? p.grad_buffer().data() : nullptr;
}

inline const DenseArray& parent_value(Node& self, std::size_t i) { return self.parents[i]->value; }

}  // namespace detail

/// Reverse-mode sweep from a scalar. Each reachable node is visited once, in
/// reverse topological order; gradients from shared subexpressions sum.
inline void backward(const Var& loss) {
  if (loss.size() != 1) throw DimensionError("backward: loss must be a single value");
  if (!loss.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
    if (!n->is_leaf) n->grad = DenseArray();  // consumers are done with it
  }
}

// ---- elementwise -----------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  DenseArray out(a.shape());
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = a.value()[i] + b.value()[i];
  op_counters().additions += n;
  return detail::make_result(std::move(out), {a, b}, [n](Node& self) {
    const Real* g = self.grad.data();
    for (std::size_t k = 0; k < 2; ++k)
      if (Real* pg = detail::parent_grad(self, k))
        for (std::size_t i = 0; i < n; ++i) pg[i] += g[i];
  }, "add");
}

inline Var sub(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "sub");
  DenseArray out(a.shape());
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = a.value()[i] - b.value()[i];
  op_counters().additions += n;
  return detail::make_result(std::move(out), {a, b}, [n](Node& self) {
    const Real* g = self.grad.data();
    if (Real* pa = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < n; ++i) pa[i] += g[i];
    if (Real* pb = detail::parent_grad(self, 1))
      for (std::size_t i = 0; i < n; ++i) pb[i] -= g[i];
  }, "sub");
}

inline Var mul(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  DenseArray out(a.shape());
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = a.value()[i] * b.value()[i];
  op_counters().multiplications += n;
  return detail::make_result(std::move(out), {a, b}, [n](Node& self) {
    const Real* g = self.grad.data();
    const auto& av = detail::parent_value(self, 0);
    const auto& bv = detail::parent_value(self, 1);
    if (Real* pa = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < n; ++i) pa[i] += g[i] * bv[i];
    if (Real* pb = detail::parent_grad(self, 1))
      for (std::size_t i = 0; i < n; ++i) pb[i] += g[i] * av[i];
  }, "mul");
}

inline Var scale(const Var& a, Real s) {
  DenseArray out(a.shape());
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = s * a.value()[i];
  op_counters().multiplications += n;
  return detail::make_result(std::move(out), {a}, [n, s](Node& self) {
    const Real* g = self.grad.data();
    if (Real* pa = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < n; ++i) pa[i] += s * g[i];
  }, "scale");
}

/// alpha*a + beta*b
inline Var axpby(Real alpha, const Var& a, Real beta, const Var& b) {
  require_same_shape(a.value(), b.value(), "axpby");
  DenseArray out(a.shape());
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = alpha * a.value()[i] + beta * b.value()[i];
  op_counters().multiplications += 2 * n;
  op_counters().additions += n;
  return detail::make_result(std::move(out), {a, b}, [n, alpha, beta](Node& self) {
    const Real* g = self.grad.data();
    if (Real* pa = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < n; ++i) pa[i] += alpha * g[i];
    if (Real* pb = detail::parent_grad(self, 1))
      for (std::size_t i = 0; i < n; ++i) pb[i] += beta * g[i];
  }, "axpby");
}

inline Var relu(const Var& a) {
  DenseArray out(a.shape());
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = a.value()[i] > 0 ? a.value()[i] : 0.0;
  return detail::make_result(std::move(out), {a}, [n](Node& self) {
    const Real* g = self.grad.data();
    const auto& av = detail::parent_value(self, 0);
    if (Real* pa = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < n; ++i)
        if (av[i] > 0) pa[i] += g[i];
  }, "relu");
}

/// Primitive whose derivative serves as the spike surrogate:
/// S(x) = atan(pi*alpha*x/2)/pi + 1/2.
inline Real atan_surrogate(Real x, Real alpha) {
  return std::atan(std::numbers::pi * alpha * x / 2.0) / std::numbers::pi + 0.5;
}

inline Real atan_surrogate_grad(Real x, Real alpha) {
  const Real z = std::numbers::pi * alpha * x / 2.0;
  return (alpha / 2.0) / (1.0 + z * z);
}

/// Heaviside(sign*(u - threshold)) with the arctangent surrogate gradient.
/// A potential exactly at threshold fires. sign=-1 gives a fire-below unit.
inline Var spike(const Var& u, Real threshold, Real alpha, Real sign = 1.0) {
  if (!(alpha > 0)) throw ConfigError("spike: surrogate alpha must be positive");
  DenseArray out(u.shape());
  const std::size_t n = out.size();
  const bool smooth = spike_mode_ref() == SpikeMode::smooth;
  for (std::size_t i = 0; i < n; ++i) {
    const Real x = sign * (u.value()[i] - threshold);
    out[i] = smooth ? atan_surrogate(x, alpha) : (x >= 0 ? 1.0 : 0.0);
  }
  return detail::make_result(std::move(out), {u}, [n, threshold, alpha, sign](Node& self) {
    const Real* g = self.grad.data();
    const auto& uv = detail::parent_value(self, 0);
    if (Real* pu = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < n; ++i)
        pu[i] += g[i] * sign * atan_surrogate_grad(sign * (uv[i] - threshold), alpha);
  }, "spike");
}

// ---- reductions, reshapes ---------------------------------------------------

inline Var reshape(const Var& a, Shape s) {
  DenseArray out = a.value().reshaped(std::move(s));
  const std::size_t n = out.size();
  return detail::make_result(std::move(out), {a}, [n](Node& self) {
    const Real* g = self.grad.data();
    if (Real* pa = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < n; ++i) pa[i] += g[i];
  }, "reshape");
}

inline Var sum(const Var& a) {
  const std::size_t n = a.size();
  return detail::make_result(DenseArray::scalar(a.value().sum()), {a}, [n](Node& self) {
    const Real g = self.grad[0];
    if (Real* pa = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < n; ++i) pa[i] += g;
  }, "sum");
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<Real>(a.size())); }

/// Mean squared error against a constant target of the same shape.
inline Var mse(const Var& pred, const DenseArray& target) {
  require_same_shape(pred.value(), target, "mse");
  const std::size_t n = target.size();
  Real acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Real d = pred.value()[i] - target[i];
    acc += d * d;
  }
  return detail::make_result(DenseArray::scalar(acc / static_cast<Real>(n)), {pred},
                             [n, target](Node& self) {
    const Real g = self.grad[0] * 2.0 / static_cast<Real>(n);
    const auto& pv = detail::parent_value(self, 0);
    if (Real* pp = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < n; ++i) pp[i] += g * (pv[i] - target[i]);
  }, "mse");
}

/// Picks q[b, index[b]] from a [B x A] matrix.
inline Var gather_rows(const Var& q, const std::vector<int>& index) {
  if (q.value().rank() != 2 || q.shape()[0] != index.size())
    throw DimensionError("gather_rows: expected [B x A] with B indices");
  const std::size_t rows = q.shape()[0], cols = q.shape()[1];
  DenseArray out({rows});
  for (std::size_t b = 0; b < rows; ++b) {
    if (index[b] < 0 || static_cast<std::size_t>(index[b]) >= cols)
      throw DimensionError("gather_rows: index out of range");
    out[b] = q.value()(b, static_cast<std::size_t>(index[b]));
  }
  return detail::make_result(std::move(out), {q}, [index, cols](Node& self) {
    if (Real* pq = detail::parent_grad(self, 0))
      for (std::size_t b = 0; b < index.size(); ++b)
        pq[b * cols + static_cast<std::size_t>(index[b])] += self.grad[b];
  }, "gather_rows");
}

// ---- linear algebra ----------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
    throw DimensionError("matmul: cannot multiply " + shape_str(av.shape()) + " by " +
                         shape_str(bv.shape()));
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  DenseArray out({m, n});
  detail::MatMap(out.data(), m, n).noalias() =
      detail::ConstMatMap(av.data(), m, k) * detail::ConstMatMap(bv.data(), k, n);
  op_counters().multiplications += m * k * n;
  return detail::make_result(std::move(out), {a, b}, [m, k, n](Node& self) {
    detail::ConstMatMap g(self.grad.data(), m, n);
    if (Real* pa = detail::parent_grad(self, 0))
      detail::MatMap(pa, m, k).noalias() +=
          g * detail::ConstMatMap(detail::parent_value(self, 1).data(), k, n).transpose();
    if (Real* pb = detail::parent_grad(self, 1))
      detail::MatMap(pb, k, n).noalias() +=
          detail::ConstMatMap(detail::parent_value(self, 0).data(), m, k).transpose() * g;
  }, "matmul");
}

/// x[..., n] + bias[n]; the only broadcasting the library supports.
inline Var add_bias(const Var& x, const Var& bias) {
  const auto& xv = x.value();
  if (bias.value().rank() != 1 || xv.shape().back() != bias.size())
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " vs input " +
                         shape_str(xv.shape()));
  const std::size_t n = bias.size(), rows = xv.size() / n;
  DenseArray out = xv;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] += bias.value()[j];
  return detail::make_result(std::move(out), {x, bias}, [n, rows](Node& self) {
    const Real* g = self.grad.data();
    if (Real* px = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < n * rows; ++i) px[i] += g[i];
    if (Real* pb = detail::parent_grad(self, 1))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) pb[j] += g[r * n + j];
  }, "add_bias");
}

/// x[B, C, H, W] (or [C, H, W]) + bias[C].
inline Var add_channel_bias(const Var& x, const Var& bias) {
  const auto& xv = x.value();
  if (xv.rank() < 3) throw DimensionError("add_channel_bias: rank 3 or 4 input required");
  const std::size_t off = xv.rank() - 3;
  const std::size_t batch = off ? xv.dim(0) : 1;
  const std::size_t c = xv.dim(off), plane = xv.dim(off + 1) * xv.dim(off + 2);
  if (bias.value().rank() != 1 || bias.size() != c)
    throw DimensionError("add_channel_bias: bias length must equal channel count");
  DenseArray out = xv;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      Real* o = out.data() + (b * c + ch) * plane;
      const Real v = bias.value()[ch];
      for (std::size_t i = 0; i < plane; ++i) o[i] += v;
    }
  return detail::make_result(std::move(out), {x, bias}, [batch, c, plane](Node& self) {
    const Real* g = self.grad.data();
    if (Real* px = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < batch * c * plane; ++i) px[i] += g[i];
    if (Real* pb = detail::parent_grad(self, 1))
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const Real* gg = g + (b * c + ch) * plane;
          Real s = 0;
          for (std::size_t i = 0; i < plane; ++i) s += gg[i];
          pb[ch] += s;
        }
  }, "add_channel_bias");
}

/// x[B*L, c] + pos[L, c], repeating the table for every batch element.
inline Var add_positional(const Var& x, const Var& pos) {
  const auto& xv = x.value();
  const auto& pv = pos.value();
  if (xv.rank() != 2 || pv.rank() != 2 || xv.dim(1) != pv.dim(1) || xv.dim(0) % pv.dim(0) != 0)
    throw DimensionError("add_positional: " + shape_str(xv.shape()) + " vs " +
                         shape_str(pv.shape()));
  const std::size_t table = pv.size(), reps = xv.size() / table;
  DenseArray out = xv;
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t i = 0; i < table; ++i) out[r * table + i] += pv[i];
  return detail::make_result(std::move(out), {x, pos}, [table, reps](Node& self) {
    const Real* g = self.grad.data();
    if (Real* px = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < table * reps; ++i) px[i] += g[i];
    if (Real* pp = detail::parent_grad(self, 1))
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t i = 0; i < table; ++i) pp[i] += g[r * table + i];
  }, "add_positional");
}

/// Row-wise layer normalization of x[m, n] with affine gain and shift.
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, Real eps = 1e-5) {
  const auto& xv = x.value();
  if (xv.rank() != 2) throw DimensionError("layer_norm: rank-2 input required");
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  if (gamma.size() != n || beta.size() != n)
    throw DimensionError("layer_norm: affine parameters must match row width");
  DenseArray out({m, n});
  auto xhat = std::make_shared<std::vector<Real>>(m * n);
  auto inv_std = std::make_shared<std::vector<Real>>(m);
  for (std::size_t r = 0; r < m; ++r) {
    const Real* row = xv.data() + r * n;
    Real mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<Real>(n);
    Real var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<Real>(n);
    const Real is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const Real h = (row[j] - mu) * is;
      (*xhat)[r * n + j] = h;
      out[r * n + j] = h * gamma.value()[j] + beta.value()[j];
    }
  }
  op_counters().multiplications += 3 * m * n;
  return detail::make_result(std::move(out), {x, gamma, beta}, [m, n, xhat, inv_std](Node& self) {
    const Real* g = self.grad.data();
    const auto& gm = detail::parent_value(self, 1);
    Real* px = detail::parent_grad(self, 0);
    Real* pg = detail::parent_grad(self, 1);
    Real* pb = detail::parent_grad(self, 2);
    for (std::size_t r = 0; r < m; ++r) {
      const Real* gr = g + r * n;
      const Real* hr = xhat->data() + r * n;
      if (pg || pb)
        for (std::size_t j = 0; j < n; ++j) {
          if (pg) pg[j] += gr[j] * hr[j];
          if (pb) pb[j] += gr[j];
        }
      if (px) {
        Real s1 = 0, s2 = 0;
        for (std::size_t j = 0; j < n; ++j) {
          const Real dh = gr[j] * gm[j];
          s1 += dh;
          s2 += dh * hr[j];
        }
        const Real is = (*inv_std)[r] / static_cast<Real>(n);
        for (std::size_t j = 0; j < n; ++j) {
          const Real dh = gr[j] * gm[j];
          px[r * n + j] += is * (static_cast<Real>(n) * dh - s1 - hr[j] * s2);
        }
      }
    }
  }, "layer_norm");
}

// ---- convolution -------------------------------------------------------------

struct ConvGeometry {
  std::size_t batch, in_ch, h, w, out_ch, kernel, stride, padding, h_out, w_out;

  /// floor((h + 2p - l)/s) + 1
  static std::size_t extent(std::size_t in, std::size_t kernel, std::size_t stride,
                            std::size_t padding) {
    if (stride == 0) throw DimensionError("conv2d: stride must be positive");
    if (in + 2 * padding < kernel)
      throw DimensionError("conv2d: kernel larger than padded input");
    return (in + 2 * padding - kernel) / stride + 1;
  }
};

namespace detail {

inline void im2col(const Real* x, const ConvGeometry& g, Real* cols) {
  const std::size_t spatial = g.h_out * g.w_out;
  const std::size_t ncols = g.batch * spatial;
  for (std::size_t c = 0; c < g.in_ch; ++c)
    for (std::size_t ki = 0; ki < g.kernel; ++ki)
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        Real* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * ncols;
        for (std::size_t b = 0; b < g.batch; ++b) {
          const Real* plane = x + (b * g.in_ch + c) * g.h * g.w;
          for (std::size_t oi = 0; oi < g.h_out; ++oi) {
            const long ii = static_cast<long>(oi * g.stride + ki) - static_cast<long>(g.padding);
            Real* dst = row + b * spatial + oi * g.w_out;
            if (ii < 0 || ii >= static_cast<long>(g.h)) {
              for (std::size_t oj = 0; oj < g.w_out; ++oj) dst[oj] = 0.0;
              continue;
            }
            for (std::size_t oj = 0; oj < g.w_out; ++oj) {
              const long jj = static_cast<long>(oj * g.stride + kj) - static_cast<long>(g.padding);
              dst[oj] = (jj < 0 || jj >= static_cast<long>(g.w))
                            ? 0.0
                            : plane[static_cast<std::size_t>(ii) * g.w + static_cast<std::size_t>(jj)];
            }
          }
        }
      }
}

inline void col2im_add(const Real* cols, const ConvGeometry& g, Real* dx) {
  const std::size_t spatial = g.h_out * g.w_out;
  const std::size_t ncols = g.batch * spatial;
  for (std::size_t c = 0; c < g.in_ch; ++c)
    for (std::size_t ki = 0; ki < g.kernel; ++ki)
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        const Real* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * ncols;
        for (std::size_t b = 0; b < g.batch; ++b) {
          Real* plane = dx + (b * g.in_ch + c) * g.h * g.w;
          for (std::size_t oi = 0; oi < g.h_out; ++oi) {
            const long ii = static_cast<long>(oi * g.stride + ki) - static_cast<long>(g.padding);
            if (ii < 0 || ii >= static_cast<long>(g.h)) continue;
            const Real* src = row + b * spatial + oi * g.w_out;
            for (std::size_t oj = 0; oj < g.w_out; ++oj) {
              const long jj = static_cast<long>(oj * g.stride + kj) - static_cast<long>(g.padding);
              if (jj >= 0 && jj < static_cast<long>(g.w))
                plane[static_cast<std::size_t>(ii) * g.w + static_cast<std::size_t>(jj)] += src[oj];
            }
          }
        }
      }
}

}  // namespace detail

/// 2-D cross-correlation with zero padding. Input [C,H,W] or [B,C,H,W];
/// kernels [C_out, C, l, l].
inline Var conv2d(const Var& x, const Var& kernels, std::size_t stride, std::size_t padding) {
  const auto& xv = x.value();
  const auto& kv = kernels.value();
  if (xv.rank() != 3 && xv.rank() != 4)
    throw DimensionError("conv2d: input must be [C,H,W] or [B,C,H,W]");
  if (kv.rank() != 4 || kv.dim(2) != kv.dim(3))
    throw DimensionError("conv2d: kernels must be [C_out, C, l, l]");
  const bool batched = xv.rank() == 4;
  const std::size_t off = batched ? 1 : 0;
  ConvGeometry g{};
  g.batch = batched ? xv.dim(0) : 1;
  g.in_ch = xv.dim(off);
  g.h = xv.dim(off + 1);
  g.w = xv.dim(off + 2);
  g.out_ch = kv.dim(0);
  g.kernel = kv.dim(2);
  g.stride = stride;
  g.padding = padding;
  if (kv.dim(1) != g.in_ch)
    throw DimensionError("conv2d: kernel channels " + std::to_string(kv.dim(1)) +
                         " vs input channels " + std::to_string(g.in_ch));
  g.h_out = ConvGeometry::extent(g.h, g.kernel, stride, padding);
  g.w_out = ConvGeometry::extent(g.w, g.kernel, stride, padding);

  const std::size_t patch = g.in_ch * g.kernel * g.kernel;
  const std::size_t spatial = g.h_out * g.w_out;
  const std::size_t ncols = g.batch * spatial;
  auto cols = std::make_shared<std::vector<Real>>(patch * ncols);
  detail::im2col(xv.data(), g, cols->data());

  detail::RowMat prod = detail::ConstMatMap(kv.data(), g.out_ch, patch) *
                        detail::ConstMatMap(cols->data(), patch, ncols);
  op_counters().multiplications += g.out_ch * patch * ncols;

  Shape out_shape = batched ? Shape{g.batch, g.out_ch, g.h_out, g.w_out}
                            : Shape{g.out_ch, g.h_out, g.w_out};
  DenseArray out(out_shape);
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t co = 0; co < g.out_ch; ++co)
      std::copy_n(prod.data() + co * ncols + b * spatial, spatial,
                  out.data() + (b * g.out_ch + co) * spatial);

  return detail::make_result(std::move(out), {x, kernels}, [g, cols, patch, spatial, ncols](Node& self) {
    detail::RowMat gm(g.out_ch, ncols);
    for (std::size_t b = 0; b < g.batch; ++b)
      for (std::size_t co = 0; co < g.out_ch; ++co)
        std::copy_n(self.grad.data() + (b * g.out_ch + co) * spatial, spatial,
                    gm.data() + co * ncols + b * spatial);
    if (Real* pk = detail::parent_grad(self, 1))
      detail::MatMap(pk, g.out_ch, patch).noalias() +=
          gm * detail::ConstMatMap(cols->data(), patch, ncols).transpose();
    if (Real* px = detail::parent_grad(self, 0)) {
      detail::RowMat dcols =
          detail::ConstMatMap(detail::parent_value(self, 1).data(), g.out_ch, patch).transpose() * gm;
      detail::col2im_add(dcols.data(), g, px);
    }
  }, "conv2d");
}

/// [B, C, h, w] feature map -> [B*h*w, C] token matrix (channel-last).
inline Var to_tokens(const Var& x) {
  const auto& xv = x.value();
  if (xv.rank() != 4) throw DimensionError("to_tokens: [B,C,h,w] input required");
  const std::size_t batch = xv.dim(0), c = xv.dim(1), len = xv.dim(2) * xv.dim(3);
  DenseArray out({batch * len, c});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t l = 0; l < len; ++l) out[(b * len + l) * c + ch] = xv[(b * c + ch) * len + l];
  return detail::make_result(std::move(out), {x}, [batch, c, len](Node& self) {
    if (Real* px = detail::parent_grad(self, 0))
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t l = 0; l < len; ++l)
            px[(b * c + ch) * len + l] += self.grad[(b * len + l) * c + ch];
  }, "to_tokens");
}

// ---- attention -------------------------------------------------------------

struct AttentionShape {
  std::size_t batch, tokens, width, heads;
  std::size_t head_dim() const { return width / heads; }
};

inline AttentionShape attention_shape(const DenseArray& q, const DenseArray& k, std::size_t batch,
                                      std::size_t heads) {
  if (q.rank() != 2 || k.rank() != 2 || batch == 0 || heads == 0)
    throw DimensionError("attention: token matrices must be rank 2");
  if (q.shape() != k.shape())
    throw DimensionError("attention: token-count mismatch " + shape_str(q.shape()) + " vs " +
                         shape_str(k.shape()));
  if (q.dim(0) % batch != 0 || q.dim(1) % heads != 0)
    throw DimensionError("attention: width not divisible by heads or rows by batch");
  return {batch, q.dim(0) / batch, q.dim(1), heads};
}

/// Per-head Q K^T for ternary operands in {-1,0,+1}: each product is an
/// add, a subtract or a skip, so the forward pass performs no multiplications.
/// Output [B, heads, L, L] of raw integer-valued scores.
inline Var ternary_scores(const Var& q, const Var& k, std::size_t batch, std::size_t heads) {
  const auto s = attention_shape(q.value(), k.value(), batch, heads);
  const std::size_t L = s.tokens, c = s.width, dh = s.head_dim();
  for (const Var* v : {&q, &k})
    for (Real x : v->value().values())
      if (x != 0.0 && x != 1.0 && x != -1.0)
        throw DimensionError("ternary_scores: operand outside {-1,0,+1}");
  DenseArray out({batch, heads, L, L});
  const auto& qv = q.value();
  const auto& kv = k.value();
  std::uint64_t adds = 0;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < L; ++i) {
        const Real* qi = qv.data() + (b * L + i) * c + h * dh;
        for (std::size_t j = 0; j < L; ++j) {
          const Real* kj = kv.data() + (b * L + j) * c + h * dh;
          Real acc = 0;
          for (std::size_t d = 0; d < dh; ++d) {
            if (qi[d] == 0.0 || kj[d] == 0.0) continue;
            acc += (qi[d] == kj[d]) ? 1.0 : -1.0;
            ++adds;
          }
          out(b, h, i, j) = acc;
        }
      }
  op_counters().additions += adds;
  return detail::make_result(std::move(out), {q, k}, [s](Node& self) {
    const std::size_t L = s.tokens, c = s.width, dh = s.head_dim();
    const auto& qv = detail::parent_value(self, 0);
    const auto& kv = detail::parent_value(self, 1);
    Real* pq = detail::parent_grad(self, 0);
    Real* pk = detail::parent_grad(self, 1);
    for (std::size_t b = 0; b < s.batch; ++b)
      for (std::size_t h = 0; h < s.heads; ++h)
        for (std::size_t i = 0; i < L; ++i)
          for (std::size_t j = 0; j < L; ++j) {
            const Real g = self.grad(b, h, i, j);
            if (g == 0.0) continue;
            const std::size_t qo = (b * L + i) * c + h * dh, ko = (b * L + j) * c + h * dh;
            for (std::size_t d = 0; d < dh; ++d) {
              if (pq) pq[qo + d] += g * kv[ko + d];
              if (pk) pk[ko + d] += g * qv[qo + d];
            }
          }
  }, "ternary_scores");
}

/// Real-valued per-head Q K^T (the non-spiking counterpart of ternary_scores).
inline Var dense_scores(const Var& q, const Var& k, std::size_t batch, std::size_t heads) {
  const auto s = attention_shape(q.value(), k.value(), batch, heads);
  const std::size_t L = s.tokens, c = s.width, dh = s.head_dim();
  DenseArray out({batch, heads, L, L});
  const auto& qv = q.value();
  const auto& kv = k.value();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < L; ++j) {
          Real acc = 0;
          for (std::size_t d = 0; d < dh; ++d)
            acc += qv[(b * L + i) * c + h * dh + d] * kv[(b * L + j) * c + h * dh + d];
          out(b, h, i, j) = acc;
        }
  op_counters().multiplications += batch * heads * L * L * dh;
  return detail::make_result(std::move(out), {q, k}, [s](Node& self) {
    const std::size_t L = s.tokens, c = s.width, dh = s.head_dim();
    const auto& qv = detail::parent_value(self, 0);
    const auto& kv = detail::parent_value(self, 1);
    Real* pq = detail::parent_grad(self, 0);
    Real* pk = detail::parent_grad(self, 1);
    for (std::size_t b = 0; b < s.batch; ++b)
      for (std::size_t h = 0; h < s.heads; ++h)
        for (std::size_t i = 0; i < L; ++i)
          for (std::size_t j = 0; j < L; ++j) {
            const Real g = self.grad(b, h, i, j);
            const std::size_t qo = (b * L + i) * c + h * dh, ko = (b * L + j) * c + h * dh;
            for (std::size_t d = 0; d < dh; ++d) {
              if (pq) pq[qo + d] += g * kv[ko + d];
              if (pk) pk[ko + d] += g * qv[qo + d];
            }
          }
  }, "dense_scores");
}

/// out[b, i, h*dh + d] = sum_j scores[b, h, i, j] * v[b, j, h*dh + d]
inline Var attend(const Var& scores, const Var& v, std::size_t heads) {
  const auto& sv = scores.value();
  const auto& vv = v.value();
  if (sv.rank() != 4 || sv.dim(1) != heads || sv.dim(2) != sv.dim(3) || vv.rank() != 2 ||
      vv.dim(0) != sv.dim(0) * sv.dim(2) || vv.dim(1) % heads != 0)
    throw DimensionError("attend: scores " + shape_str(sv.shape()) + " vs values " +
                         shape_str(vv.shape()));
  const AttentionShape s{sv.dim(0), sv.dim(2), vv.dim(1), heads};
  const std::size_t L = s.tokens, c = s.width, dh = s.head_dim();
  DenseArray out({s.batch * L, c});
  for (std::size_t b = 0; b < s.batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < L; ++i) {
        Real* o = out.data() + (b * L + i) * c + h * dh;
        for (std::size_t j = 0; j < L; ++j) {
          const Real w = sv(b, h, i, j);
          if (w == 0.0) continue;
          const Real* vj = vv.data() + (b * L + j) * c + h * dh;
          for (std::size_t d = 0; d < dh; ++d) o[d] += w * vj[d];
        }
      }
  op_counters().multiplications += s.batch * heads * L * L * dh;
  return detail::make_result(std::move(out), {scores, v}, [s](Node& self) {
    const std::size_t L = s.tokens, c = s.width, dh = s.head_dim();
    const auto& sv = detail::parent_value(self, 0);
    const auto& vv = detail::parent_value(self, 1);
    Real* ps = detail::parent_grad(self, 0);
    Real* pv = detail::parent_grad(self, 1);
    for (std::size_t b = 0; b < s.batch; ++b)
      for (std::size_t h = 0; h < s.heads; ++h)
        for (std::size_t i = 0; i < L; ++i) {
          const Real* g = self.grad.data() + (b * L + i) * c + h * dh;
          for (std::size_t j = 0; j < L; ++j) {
            const std::size_t vo = (b * L + j) * c + h * dh;
            if (ps) {
              Real acc = 0;
              for (std::size_t d = 0; d < dh; ++d) acc += g[d] * vv[vo + d];
              ps[((b * s.heads + h) * L + i) * L + j] += acc;
            }
            if (pv) {
              const Real w = sv(b, h, i, j);
              for (std::size_t d = 0; d < dh; ++d) pv[vo + d] += w * g[d];
            }
          }
        }
  }, "attend");
}

}  // namespace ad
}  // namespace sfqn
