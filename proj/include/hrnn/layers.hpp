#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hrnn/autodiff.hpp"
#include "hrnn/random.hpp"

namespace hrnn {

/// LSTM weights. Gate rows are ordered (input, forget, cell candidate, output),
/// each block H rows tall. The input weight is stored as column blocks, one
/// per input part (e.g. the level's own input and the injected superior
/// state), which is the same linear map as one matrix over the concatenation.
template <class Real>
struct LstmParams {
  std::vector<Tensor<Real>> w_in;  // each (4H × D_part)
  Tensor<Real> w_h;                // (4H × H)
  Tensor<Real> b;                  // (4H)

  std::size_t hidden() const { return w_h.cols(); }
};

/// Two-layer ReLU decoder fed with [state, one-hot index].
template <class Real>
struct DecoderParams {
  Tensor<Real> w1;  // (hidden × (state + k_max))
  Tensor<Real> b1;
  Tensor<Real> w2;  // (out × hidden)
  Tensor<Real> b2;
  std::size_t k_max = 0;
};

template <class Real>
struct HeadParams {
  Tensor<Real> w;  // (C × H)
  Tensor<Real> b;  // (C)
};

struct ModelDims {
  std::size_t input_dim = 0;
  std::size_t output_dim = 0;
  std::vector<std::size_t> sizes;  // hidden units per level, lowest first
  std::vector<std::size_t> k_max;  // decoder one-hot width per non-top level
  std::size_t decoder_hidden = 256;
  std::size_t aux_out = 0;  // level-0 decoder output width

  std::size_t levels() const { return sizes.size(); }
  std::size_t level_input(std::size_t j) const { return j == 0 ? input_dim : sizes[j - 1]; }
  std::size_t decoder_out(std::size_t j) const { return j == 0 ? aux_out : sizes[j - 1]; }

  void validate() const {
    if (sizes.empty()) throw Error("model needs at least one level");
    for (auto s : sizes)
      if (s == 0) throw Error("level size must be positive");
    if (k_max.size() + 1 != sizes.size())
      throw Error("need one decoder index width per non-top level");
    if (input_dim == 0 || output_dim == 0 || aux_out == 0 || decoder_hidden == 0)
      throw Error("model dimensions must be positive");
  }
};

template <class Real>
struct ModelParams {
  std::vector<LstmParams<Real>> levels;
  std::vector<DecoderParams<Real>> decoders;
  HeadParams<Real> head;

  /// Visits every tensor with a stable name, in a fixed order.
  template <class F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <class F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

  std::vector<Tensor<Real>*> tensors() {
    std::vector<Tensor<Real>*> out;
    for_each([&](const std::string&, Tensor<Real>& t) { out.push_back(&t); });
    return out;
  }
  std::vector<const Tensor<Real>*> tensors() const {
    std::vector<const Tensor<Real>*> out;
    for_each([&](const std::string&, const Tensor<Real>& t) { out.push_back(&t); });
    return out;
  }

  ModelParams zeros_like() const {
    ModelParams z = *this;
    z.for_each([](const std::string&, Tensor<Real>& t) { std::fill(t.values.begin(), t.values.end(), Real(0)); });
    return z;
  }

  ModelParams& operator+=(const ModelParams& o) {
    auto mine = tensors();
    auto theirs = o.tensors();
    for (std::size_t i = 0; i < mine.size(); ++i) *mine[i] += *theirs[i];
    return *this;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor<Real>& t) { n += t.numel(); });
    return n;
  }

 private:
  template <class Self, class F>
  static void visit(Self& self, F& f) {
    for (std::size_t j = 0; j < self.levels.size(); ++j) {
      auto p = "level" + std::to_string(j) + ".";
      for (std::size_t i = 0; i < self.levels[j].w_in.size(); ++i)
        f(p + "w_in" + std::to_string(i), self.levels[j].w_in[i]);
      f(p + "w_h", self.levels[j].w_h);
      f(p + "b", self.levels[j].b);
    }
    for (std::size_t j = 0; j < self.decoders.size(); ++j) {
      auto p = "decoder" + std::to_string(j) + ".";
      f(p + "w1", self.decoders[j].w1);
      f(p + "b1", self.decoders[j].b1);
      f(p + "w2", self.decoders[j].w2);
      f(p + "b2", self.decoders[j].b2);
    }
    f(std::string("head.w"), self.head.w);
    f(std::string("head.b"), self.head.b);
  }
};

/// Allocates all parameters for `dims`. Weights are Glorot-uniform in
/// ±sqrt(6 / (fan_in + fan_out)) with fan_in = columns and fan_out = rows of
/// the stored tensor; biases are zero except the LSTM forget gate (1.0).
template <class Real>
ModelParams<Real> init_params(std::uint64_t seed, const ModelDims& dims) {
  dims.validate();
  Rng rng(seed);
  auto glorot = [&](std::size_t rows, std::size_t cols) {
    Tensor<Real> t = Tensor<Real>::zeros(Shape{rows, cols});
    const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
    for (auto& v : t.values) v = static_cast<Real>(uniform(rng, -a, a));
    return t;
  };
  ModelParams<Real> p;
  const auto L = dims.levels();
  for (std::size_t j = 0; j < L; ++j) {
    const auto h = dims.sizes[j];
    LstmParams<Real> lp;
    lp.w_in.push_back(glorot(4 * h, dims.level_input(j)));
    if (j + 1 < L) lp.w_in.push_back(glorot(4 * h, dims.sizes[j + 1]));
    lp.w_h = glorot(4 * h, h);
    lp.b = Tensor<Real>::zeros(Shape{4 * h});
    for (std::size_t i = h; i < 2 * h; ++i) lp.b[i] = Real(1);
    p.levels.push_back(std::move(lp));
  }
  for (std::size_t j = 0; j + 1 < L; ++j) {
    DecoderParams<Real> d;
    d.k_max = dims.k_max[j];
    d.w1 = glorot(dims.decoder_hidden, dims.sizes[j] + d.k_max);
    d.b1 = Tensor<Real>::zeros(Shape{dims.decoder_hidden});
    d.w2 = glorot(dims.decoder_out(j), dims.decoder_hidden);
    d.b2 = Tensor<Real>::zeros(Shape{dims.decoder_out(j)});
    p.decoders.push_back(std::move(d));
  }
  p.head.w = glorot(dims.output_dim, dims.sizes[0]);
  p.head.b = Tensor<Real>::zeros(Shape{dims.output_dim});
  return p;
}

// -- tape bindings -----------------------------------------------------------

struct LstmVars {
  std::vector<Var> w_in;
  Var w_h, b;
  std::size_t hidden = 0;
};

struct DecoderVars {
  Var w1, b1, w2, b2;
  std::size_t k_max = 0;
};

struct HeadVars {
  Var w, b;
};

/// Records parameter leaves on one tape together with where their gradients
/// should be accumulated once the tape has been differentiated.
template <class Real>
class ParamBinder {
 public:
  explicit ParamBinder(Tape<Real>& tape) : tape_(tape) {}

  Var bind(const Tensor<Real>& value, Tensor<Real>* grad_sink) {
    Var v = tape_.leaf(value);
    if (grad_sink) sinks_.push_back({v, grad_sink});
    return v;
  }

  LstmVars lstm(const LstmParams<Real>& p, LstmParams<Real>* g) {
    LstmVars v;
    for (std::size_t i = 0; i < p.w_in.size(); ++i)
      v.w_in.push_back(bind(p.w_in[i], g ? &g->w_in[i] : nullptr));
    v.w_h = bind(p.w_h, g ? &g->w_h : nullptr);
    v.b = bind(p.b, g ? &g->b : nullptr);
    v.hidden = p.hidden();
    return v;
  }

  DecoderVars decoder(const DecoderParams<Real>& p, DecoderParams<Real>* g) {
    return {bind(p.w1, g ? &g->w1 : nullptr), bind(p.b1, g ? &g->b1 : nullptr),
            bind(p.w2, g ? &g->w2 : nullptr), bind(p.b2, g ? &g->b2 : nullptr), p.k_max};
  }

  HeadVars head(const HeadParams<Real>& p, HeadParams<Real>* g) {
    return {bind(p.w, g ? &g->w : nullptr), bind(p.b, g ? &g->b : nullptr)};
  }

  /// Adds the tape's gradients into the registered sinks, in binding order.
  void harvest() const {
    for (const auto& [var, sink] : sinks_)
      if (tape_.has_grad(var)) *sink += tape_.grad(var);
  }

 private:
  Tape<Real>& tape_;
  std::vector<std::pair<Var, Tensor<Real>*>> sinks_;
};

// -- layers ------------------------------------------------------------------

/// Recurrent state of one LSTM; an empty optional stands for an exact zero.
struct LstmState {
  std::optional<Var> h, c;
};

/// One LSTM update over a batch. `inputs[i]` pairs with `p.w_in[i]`; an empty
/// entry is an all-zero input block and contributes nothing.
template <class Real>
LstmState lstm_step(Tape<Real>& tape, const LstmVars& p, const LstmState& s,
                    std::span<const std::optional<Var>> inputs) {
  if (inputs.size() != p.w_in.size())
    throw Error("lstm_step: " + std::to_string(inputs.size()) + " input parts for " +
                std::to_string(p.w_in.size()) + " weight blocks");
  const auto H = p.hidden;
  std::optional<Var> pre;
  auto acc = [&](Var term) { pre = pre ? tape.add(*pre, term) : term; };
  for (std::size_t i = 0; i < inputs.size(); ++i)
    if (inputs[i]) acc(tape.matmul(*inputs[i], p.w_in[i], true));
  if (s.h) acc(tape.matmul(*s.h, p.w_h, true));
  if (!pre) throw Error("lstm_step: no input and no recurrent state");
  Var gates = tape.add_bias(*pre, p.b);
  Var i = tape.sigmoid(tape.slice(gates, 0, H));
  Var f = tape.sigmoid(tape.slice(gates, H, 2 * H));
  Var g = tape.tanh(tape.slice(gates, 2 * H, 3 * H));
  Var o = tape.sigmoid(tape.slice(gates, 3 * H, 4 * H));
  Var c = tape.mul(i, g);
  if (s.c) c = tape.add(tape.mul(f, *s.c), c);
  Var h = tape.mul(o, tape.tanh(c));
  return {h, c};
}

template <class Real>
LstmState lstm_step(Tape<Real>& tape, const LstmVars& p, const LstmState& s,
                    std::initializer_list<std::optional<Var>> inputs) {
  return lstm_step(tape, p, s, std::span<const std::optional<Var>>(inputs.begin(), inputs.size()));
}

/// One-hot rows of width `width` selecting `index[r]` (0-based).
template <class Real>
Tensor<Real> one_hot(std::span<const std::size_t> index, std::size_t width) {
  Tensor<Real> t = Tensor<Real>::zeros(Shape{index.size(), width});
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= width)
      throw Error("one_hot: index " + std::to_string(index[r]) + " >= width " + std::to_string(width));
    t.at(r, index[r]) = Real(1);
  }
  return t;
}

/// layer2(relu(layer1([h_up, index_onehot]))).
template <class Real>
Var decoder_predict(Tape<Real>& tape, const DecoderVars& p, Var h_up, Var index_onehot) {
  const auto& oh = tape.value(index_onehot);
  if (oh.cols() != p.k_max)
    throw Error("decoder_predict: one-hot width " + std::to_string(oh.cols()) + " != k_max " +
                std::to_string(p.k_max));
  for (std::size_t r = 0; r < oh.rows(); ++r) {
    std::size_t ones = 0;
    for (std::size_t c = 0; c < oh.cols(); ++c) {
      const Real v = oh.at(r, c);
      if (v == Real(1))
        ++ones;
      else if (v != Real(0))
        throw Error("decoder_predict: index row " + std::to_string(r) + " is not one-hot");
    }
    if (ones != 1) throw Error("decoder_predict: index row " + std::to_string(r) + " is not one-hot");
  }
  Var z = tape.add_bias(tape.matmul(tape.concat({h_up, index_onehot}), p.w1, true), p.b1);
  return tape.add_bias(tape.matmul(tape.relu(z), p.w2, true), p.b2);
}

template <class Real>
Var head_logits(Tape<Real>& tape, const HeadVars& p, Var h) {
  return tape.add_bias(tape.matmul(h, p.w, true), p.b);
}

}  // namespace hrnn
