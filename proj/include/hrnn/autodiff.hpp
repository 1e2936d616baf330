#pragma once

// Reverse-mode automatic differentiation over dense rank-1/rank-2 tensors.
//
// A Tape is an append-only list of nodes; every node's inputs have smaller
// ids, so a single descending sweep is a valid reverse topological order and
// gradient accumulation happens in a fixed order (bit-identical reruns).

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hrnn/tensor.hpp"

namespace hrnn {

enum class Op : std::uint8_t {
  leaf,
  constant,
  add,
  sub,
  mul,
  matmul,
  concat,
  slice,
  sigmoid,
  tanh,
  relu,
  add_bias,
  barrier,
  sum,
  scale,
  softmax_xent,
  mse,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::constant: return "constant";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::matmul: return "matmul";
    case Op::concat: return "concat";
    case Op::slice: return "slice";
    case Op::sigmoid: return "sigmoid";
    case Op::tanh: return "tanh";
    case Op::relu: return "relu";
    case Op::add_bias: return "add_bias";
    case Op::barrier: return "barrier";
    case Op::sum: return "sum";
    case Op::scale: return "scale";
    case Op::softmax_xent: return "softmax_cross_entropy";
    case Op::mse: return "mse";
  }
  return "?";
}

/// Handle to a node on a Tape.
struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
  bool operator==(const Var&) const = default;
};

/// Upstream gradient injected at an arbitrary node (see Tape::backward).
template <class Real>
struct Seed {
  Var node;
  Tensor<Real> grad;
};

template <class Real>
class Tape {
 public:
  using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MapM = Eigen::Map<Mat>;
  using CMapM = Eigen::Map<const Mat>;
  using Vec = Eigen::Array<Real, Eigen::Dynamic, 1>;
  using MapV = Eigen::Map<Vec>;
  using CMapV = Eigen::Map<const Vec>;

  explicit Tape(bool check_finite = true) : check_finite_(check_finite) {}

  // -- inputs ---------------------------------------------------------------

  /// Differentiable input (parameters, injected states).
  Var leaf(Tensor<Real> value) { return push(Op::leaf, std::move(value), {}, true); }
  /// Input that never receives a gradient (data, carried-over states).
  Var constant(Tensor<Real> value) { return push(Op::constant, std::move(value), {}, false); }

  // -- elementwise ----------------------------------------------------------

  Var add(Var a, Var b) { return binary(Op::add, a, b); }
  Var sub(Var a, Var b) { return binary(Op::sub, a, b); }
  Var mul(Var a, Var b) { return binary(Op::mul, a, b); }

  Var sigmoid(Var a) {
    auto out = value(a);
    for (auto& v : out.values) v = Real(1) / (Real(1) + std::exp(-v));
    return push(Op::sigmoid, std::move(out), {a});
  }
  Var tanh(Var a) {
    auto out = value(a);
    for (auto& v : out.values) v = std::tanh(v);
    return push(Op::tanh, std::move(out), {a});
  }
  Var relu(Var a) {
    auto out = value(a);
    for (auto& v : out.values) v = v > Real(0) ? v : Real(0);
    return push(Op::relu, std::move(out), {a});
  }

  /// Identity in the forward pass; discards the upstream gradient unless
  /// pass-through is enabled.
  Var barrier(Var a) {
    auto out = value(a);
    auto id = push(Op::barrier, std::move(out), {a});
    if (!barrier_passthrough_) nodes_[id.id].requires_grad = false;
    return id;
  }

  /// Makes barriers recorded from now on behave as plain identities.
  void set_barrier_passthrough(bool on) { barrier_passthrough_ = on; }

  Var scale(Var a, Real s) {
    auto out = value(a);
    for (auto& v : out.values) v *= s;
    auto id = push(Op::scale, std::move(out), {a});
    nodes_[id.id].scalar = s;
    return id;
  }

  Var sum(Var a) {
    const auto& x = value(a).values;
    Real s = 0;
    for (auto v : x) s += v;
    return push(Op::sum, Tensor<Real>::scalar(s), {a});
  }

  // -- linear algebra -------------------------------------------------------

  /// a[m,k]·b[k,n], or a[m,k]·bᵀ with b[n,k] when `transpose_b`.
  Var matmul(Var a, Var b, bool transpose_b = false) {
    const auto& A = value(a);
    const auto& B = value(b);
    if (A.shape.rank() != 2 || B.shape.rank() != 2)
      shape_error(Op::matmul, A.shape, B.shape);
    const auto m = A.shape[0], k = A.shape[1];
    const auto bk = transpose_b ? B.shape[1] : B.shape[0];
    const auto n = transpose_b ? B.shape[0] : B.shape[1];
    if (bk != k) shape_error(Op::matmul, A.shape, B.shape);
    Tensor<Real> out = Tensor<Real>::zeros(Shape{m, n});
    MapM o(out.values.data(), m, n);
    CMapM am(A.values.data(), m, k);
    if (transpose_b)
      o.noalias() = am * CMapM(B.values.data(), n, k).transpose();
    else
      o.noalias() = am * CMapM(B.values.data(), k, n);
    auto id = push(Op::matmul, std::move(out), {a, b});
    nodes_[id.id].p0 = transpose_b ? 1 : 0;
    return id;
  }

  /// x[r,c] + bias[c] broadcast over rows.
  Var add_bias(Var x, Var bias) {
    const auto& X = value(x);
    const auto& b = value(bias);
    if (b.numel() != X.cols()) shape_error(Op::add_bias, X.shape, b.shape);
    auto out = X;
    const auto c = X.cols();
    for (std::size_t r = 0; r < X.rows(); ++r)
      for (std::size_t j = 0; j < c; ++j) out.values[r * c + j] += b.values[j];
    return push(Op::add_bias, std::move(out), {x, bias});
  }

  /// Concatenation along the last axis; all parts must have the same rows.
  Var concat(std::span<const Var> parts) {
    if (parts.empty()) throw Error("concat of zero tensors");
    const auto rows = value(parts[0]).rows();
    std::size_t cols = 0;
    bool all_rank1 = true;
    for (auto p : parts) {
      const auto& t = value(p);
      if (t.rows() != rows) shape_error(Op::concat, value(parts[0]).shape, t.shape);
      cols += t.cols();
      all_rank1 = all_rank1 && t.shape.rank() == 1;
    }
    Shape s = all_rank1 ? Shape{cols} : Shape{rows, cols};
    Tensor<Real> out = Tensor<Real>::zeros(s);
    std::size_t off = 0;
    for (auto p : parts) {
      const auto& t = value(p);
      const auto w = t.cols();
      for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(t.values.begin() + r * w, w, out.values.begin() + r * cols + off);
      off += w;
    }
    return push(Op::concat, std::move(out), std::vector<Var>(parts.begin(), parts.end()));
  }
  Var concat(std::initializer_list<Var> parts) {
    return concat(std::span<const Var>(parts.begin(), parts.size()));
  }

  /// Columns [begin, end) of the last axis.
  Var slice(Var a, std::size_t begin, std::size_t end) {
    const auto& X = value(a);
    if (begin >= end || end > X.cols())
      throw Error(std::string("slice [") + std::to_string(begin) + ", " + std::to_string(end) +
                  ") out of range for shape " + X.shape.str());
    const auto rows = X.rows(), w = end - begin, c = X.cols();
    Shape s = X.shape.rank() == 1 ? Shape{w} : Shape{rows, w};
    Tensor<Real> out = Tensor<Real>::zeros(s);
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(X.values.begin() + r * c + begin, w, out.values.begin() + r * w);
    auto id = push(Op::slice, std::move(out), {a});
    nodes_[id.id].p0 = begin;
    nodes_[id.id].p1 = end;
    return id;
  }

  // -- losses ---------------------------------------------------------------

  /// Σ_r w_r · (−log softmax(logits_r)[target_r]) in nats. Empty weights mean
  /// the plain mean over rows; a zero weight masks the row out.
  Var softmax_cross_entropy(Var logits, std::span<const int> targets,
                            std::span<const Real> weights = {}) {
    const auto& L = value(logits);
    const auto rows = L.rows(), c = L.cols();
    if (targets.size() != rows)
      throw Error("softmax_cross_entropy: " + std::to_string(targets.size()) +
                  " targets for logits of shape " + L.shape.str());
    if (!weights.empty() && weights.size() != rows)
      throw Error("softmax_cross_entropy: weight count does not match rows");
    Node n;
    n.saved.resize(L.numel());
    n.targets.assign(targets.begin(), targets.end());
    n.weights = weights.empty() ? std::vector<Real>(rows, Real(1) / Real(rows))
                                : std::vector<Real>(weights.begin(), weights.end());
    Real total = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      const int t = targets[r];
      if (t < 0 || static_cast<std::size_t>(t) >= c)
        throw Error("softmax_cross_entropy: target " + std::to_string(t) + " outside [0, " +
                    std::to_string(c) + ")");
      const Real* row = L.values.data() + r * c;
      Real mx = *std::max_element(row, row + c);
      Real z = 0;
      for (std::size_t j = 0; j < c; ++j) {
        Real e = std::exp(row[j] - mx);
        n.saved[r * c + j] = e;
        z += e;
      }
      for (std::size_t j = 0; j < c; ++j) n.saved[r * c + j] /= z;
      if (n.weights[r] != Real(0)) total += n.weights[r] * (std::log(z) + mx - row[t]);
    }
    return push(Op::softmax_xent, Tensor<Real>::scalar(total), {logits}, std::nullopt,
                std::move(n));
  }

  /// Σ_r w_r · mean_c (pred − target)²; empty weights give the mean over all
  /// elements.
  Var mse(Var pred, Var target, std::span<const Real> row_weights = {}) {
    const auto& P = value(pred);
    const auto& T = value(target);
    if (P.shape != T.shape) shape_error(Op::mse, P.shape, T.shape);
    const auto rows = P.rows(), c = P.cols();
    if (!row_weights.empty() && row_weights.size() != rows)
      throw Error("mse: weight count does not match rows");
    Node n;
    n.weights = row_weights.empty() ? std::vector<Real>(rows, Real(1) / Real(rows))
                                    : std::vector<Real>(row_weights.begin(), row_weights.end());
    Real total = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      if (n.weights[r] == Real(0)) continue;
      Real s = 0;
      for (std::size_t j = 0; j < c; ++j) {
        Real d = P.values[r * c + j] - T.values[r * c + j];
        s += d * d;
      }
      total += n.weights[r] * s / Real(c);
    }
    return push(Op::mse, Tensor<Real>::scalar(total), {pred, target}, std::nullopt, std::move(n));
  }

  // -- access ---------------------------------------------------------------

  const Tensor<Real>& value(Var v) const { return node(v).value; }
  Op op(Var v) const { return node(v).op; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  bool check_finite() const { return check_finite_; }

  bool has_grad(Var v) const {
    return static_cast<std::size_t>(v.id) < grads_.size() && !grads_[v.id].empty();
  }
  /// Gradient accumulated at `v` by the last backward; zeros when unreached.
  Tensor<Real> grad(Var v) const {
    const auto& n = node(v);
    if (!has_grad(v)) return Tensor<Real>::zeros(n.value.shape);
    return Tensor<Real>(n.value.shape, grads_[v.id]);
  }

  // -- backward -------------------------------------------------------------

  void backward(Var loss) {
    if (value(loss).numel() != 1)
      throw Error("backward needs a scalar loss, got shape " + value(loss).shape.str());
    Seed<Real> s{loss, Tensor<Real>::scalar(Real(1))};
    backward(std::span<const Seed<Real>>(&s, 1));
  }

  /// Reverse sweep from several nodes at once; seeds on the same node add up.
  void backward(std::span<const Seed<Real>> seeds) {
    if (backward_done_) throw Error("backward called twice on the same tape without reset()");
    backward_done_ = true;
    grads_.assign(nodes_.size(), {});
    std::int32_t top = -1;
    for (const auto& s : seeds) {
      const auto& n = node(s.node);
      if (s.grad.shape.numel() != n.value.numel())
        throw Error("seed gradient shape " + s.grad.shape.str() + " does not match node " +
                    std::to_string(s.node.id) + " of shape " + n.value.shape.str());
      if (!n.requires_grad) continue;
      accumulate(s.node.id, s.grad.values.data());
      top = std::max(top, s.node.id);
    }
    for (std::int32_t id = top; id >= 0; --id) {
      if (grads_[id].empty()) continue;
      backprop_node(id);
    }
  }

  void reset() {
    nodes_.clear();
    grads_.clear();
    backward_done_ = false;
  }

 private:
  struct Node {
    Op op = Op::leaf;
    bool requires_grad = false;
    Tensor<Real> value;
    std::vector<std::int32_t> inputs;
    std::size_t p0 = 0, p1 = 0;
    Real scalar = 0;
    std::vector<Real> saved;
    std::vector<int> targets;
    std::vector<Real> weights;
  };

  const Node& node(Var v) const {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw Error("invalid tape node id " + std::to_string(v.id));
    return nodes_[v.id];
  }

  [[noreturn]] static void shape_error(Op op, const Shape& a, const Shape& b) {
    throw Error(std::string(op_name(op)) + ": incompatible shapes " + a.str() + " and " + b.str());
  }

  Var binary(Op op, Var a, Var b) {
    const auto& A = value(a);
    const auto& B = value(b);
    if (A.shape != B.shape) shape_error(op, A.shape, B.shape);
    Tensor<Real> out = A;
    CMapV bv(B.values.data(), B.numel());
    MapV ov(out.values.data(), out.numel());
    switch (op) {
      case Op::add: ov += bv; break;
      case Op::sub: ov -= bv; break;
      default: ov *= bv; break;
    }
    return push(op, std::move(out), {a, b});
  }

  Var push(Op op, Tensor<Real> value, std::vector<Var> inputs,
           std::optional<bool> requires_grad = std::nullopt, Node proto = {}) {
    if (backward_done_) throw Error("tape already differentiated; reset() before recording");
    Node n = std::move(proto);
    n.op = op;
    n.value = std::move(value);
    bool rg = false;
    n.inputs.reserve(inputs.size());
    for (auto v : inputs) {
      rg = rg || node(v).requires_grad;
      n.inputs.push_back(v.id);
    }
    n.requires_grad = requires_grad.value_or(rg);
    const auto id = static_cast<std::int32_t>(nodes_.size());
    if (check_finite_ && !n.value.all_finite())
      throw Error(std::string("non-finite value in ") + op_name(op) + " output (node " +
                  std::to_string(id) + ")");
    nodes_.push_back(std::move(n));
    return Var{id};
  }

  Real* grad_buffer(std::int32_t id) {
    auto& g = grads_[id];
    if (g.empty()) g.assign(nodes_[id].value.numel(), Real(0));
    return g.data();
  }

  void accumulate(std::int32_t id, const Real* src) {
    const auto n = nodes_[id].value.numel();
    MapV(grad_buffer(id), n) += CMapV(src, n);
  }

  bool wants(std::int32_t id) const { return nodes_[id].requires_grad; }

  void backprop_node(std::int32_t id) {
    const Node& n = nodes_[id];
    const Real* g = grads_[id].data();
    const auto numel = n.value.numel();
    CMapV gv(g, numel);
    switch (n.op) {
      case Op::leaf:
      case Op::constant:
        break;
      case Op::barrier:
        if (wants(n.inputs[0])) MapV(grad_buffer(n.inputs[0]), numel) += gv;
        break;
      case Op::add:
        for (auto in : n.inputs)
          if (wants(in)) MapV(grad_buffer(in), numel) += gv;
        break;
      case Op::sub:
        if (wants(n.inputs[0])) MapV(grad_buffer(n.inputs[0]), numel) += gv;
        if (wants(n.inputs[1])) MapV(grad_buffer(n.inputs[1]), numel) -= gv;
        break;
      case Op::mul: {
        const auto a = n.inputs[0], b = n.inputs[1];
        if (wants(a)) MapV(grad_buffer(a), numel) += gv * CMapV(nodes_[b].value.values.data(), numel);
        if (wants(b)) MapV(grad_buffer(b), numel) += gv * CMapV(nodes_[a].value.values.data(), numel);
        break;
      }
      case Op::sigmoid: {
        CMapV y(n.value.values.data(), numel);
        if (wants(n.inputs[0])) MapV(grad_buffer(n.inputs[0]), numel) += gv * y * (Real(1) - y);
        break;
      }
      case Op::tanh: {
        CMapV y(n.value.values.data(), numel);
        if (wants(n.inputs[0])) MapV(grad_buffer(n.inputs[0]), numel) += gv * (Real(1) - y * y);
        break;
      }
      case Op::relu: {
        if (!wants(n.inputs[0])) break;
        Real* ga = grad_buffer(n.inputs[0]);
        const auto& y = n.value.values;
        for (std::size_t i = 0; i < numel; ++i)
          if (y[i] > Real(0)) ga[i] += g[i];
        break;
      }
      case Op::scale:
        if (wants(n.inputs[0])) MapV(grad_buffer(n.inputs[0]), numel) += gv * n.scalar;
        break;
      case Op::sum: {
        const auto a = n.inputs[0];
        if (wants(a)) MapV(grad_buffer(a), nodes_[a].value.numel()) += g[0];
        break;
      }
      case Op::matmul: {
        const auto a = n.inputs[0], b = n.inputs[1];
        const auto& A = nodes_[a].value;
        const auto& B = nodes_[b].value;
        const auto m = A.shape[0], k = A.shape[1];
        const bool tb = n.p0 != 0;
        const auto nn = n.value.shape[1];
        CMapM gm(g, m, nn);
        if (wants(a)) {
          MapM ga(grad_buffer(a), m, k);
          if (tb)
            ga.noalias() += gm * CMapM(B.values.data(), nn, k);
          else
            ga.noalias() += gm * CMapM(B.values.data(), k, nn).transpose();
        }
        if (wants(b)) {
          CMapM am(A.values.data(), m, k);
          if (tb)
            MapM(grad_buffer(b), nn, k).noalias() += gm.transpose() * am;
          else
            MapM(grad_buffer(b), k, nn).noalias() += am.transpose() * gm;
        }
        break;
      }
      case Op::add_bias: {
        const auto x = n.inputs[0], b = n.inputs[1];
        if (wants(x)) MapV(grad_buffer(x), numel) += gv;
        if (wants(b)) {
          const auto c = n.value.cols(), rows = n.value.rows();
          Real* gb = grad_buffer(b);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) gb[j] += g[r * c + j];
        }
        break;
      }
      case Op::concat: {
        const auto rows = n.value.rows(), cols = n.value.cols();
        std::size_t off = 0;
        for (auto in : n.inputs) {
          const auto w = nodes_[in].value.cols();
          if (wants(in)) {
            Real* ga = grad_buffer(in);
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t j = 0; j < w; ++j) ga[r * w + j] += g[r * cols + off + j];
          }
          off += w;
        }
        break;
      }
      case Op::slice: {
        const auto a = n.inputs[0];
        if (!wants(a)) break;
        const auto c = nodes_[a].value.cols(), rows = n.value.rows(), w = n.p1 - n.p0;
        Real* ga = grad_buffer(a);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < w; ++j) ga[r * c + n.p0 + j] += g[r * w + j];
        break;
      }
      case Op::softmax_xent: {
        const auto a = n.inputs[0];
        if (!wants(a)) break;
        const auto c = nodes_[a].value.cols(), rows = nodes_[a].value.rows();
        Real* ga = grad_buffer(a);
        for (std::size_t r = 0; r < rows; ++r) {
          const Real w = g[0] * n.weights[r];
          if (w == Real(0)) continue;
          for (std::size_t j = 0; j < c; ++j) {
            Real d = n.saved[r * c + j] - (static_cast<int>(j) == n.targets[r] ? Real(1) : Real(0));
            ga[r * c + j] += w * d;
          }
        }
        break;
      }
      case Op::mse: {
        const auto p = n.inputs[0], t = n.inputs[1];
        const auto& P = nodes_[p].value;
        const auto& T = nodes_[t].value;
        const auto c = P.cols(), rows = P.rows();
        Real* gp = wants(p) ? grad_buffer(p) : nullptr;
        Real* gt = wants(t) ? grad_buffer(t) : nullptr;
        for (std::size_t r = 0; r < rows; ++r) {
          const Real w = g[0] * n.weights[r] * Real(2) / Real(c);
          if (w == Real(0)) continue;
          for (std::size_t j = 0; j < c; ++j) {
            const Real d = w * (P.values[r * c + j] - T.values[r * c + j]);
            if (gp) gp[r * c + j] += d;
            if (gt) gt[r * c + j] -= d;
          }
        }
        break;
      }
    }
  }

  bool check_finite_;
  bool backward_done_ = false;
  bool barrier_passthrough_ = false;
  std::vector<Node> nodes_;
  std::vector<std::vector<Real>> grads_;
};

}  // namespace hrnn
