#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "hrnn/layers.hpp"

namespace hrnn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class Real>
struct AdamState {
  AdamConfig cfg;
  std::int64_t t = 0;
  std::vector<Tensor<Real>> m, v;  // one per parameter tensor, same order
};

template <class Real>
AdamState<Real> make_adam(std::span<const Tensor<Real>* const> params, AdamConfig cfg = {}) {
  AdamState<Real> s;
  s.cfg = cfg;
  for (const auto* p : params) {
    s.m.push_back(Tensor<Real>::zeros(p->shape));
    s.v.push_back(Tensor<Real>::zeros(p->shape));
  }
  return s;
}

template <class Real>
AdamState<Real> make_adam(const ModelParams<Real>& params, AdamConfig cfg = {}) {
  auto ts = params.tensors();
  return make_adam<Real>(std::span<const Tensor<Real>* const>(ts), cfg);
}

/// Adam with bias-corrected moments:
///   m ← β1 m + (1−β1) g,  v ← β2 v + (1−β2) g²,
///   p ← p − lr · m̂ / (sqrt(v̂) + eps).
template <class Real>
void adam_step(AdamState<Real>& s, std::span<Tensor<Real>* const> params,
               std::span<const Tensor<Real>* const> grads) {
  if (params.size() != grads.size() || params.size() != s.m.size())
    throw Error("adam_step: parameter, gradient and state counts differ");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i]->shape != grads[i]->shape || params[i]->shape != s.m[i].shape)
      throw Error("adam_step: shape mismatch " + params[i]->shape.str() + " vs " +
                  grads[i]->shape.str());
  ++s.t;
  const auto b1 = s.cfg.beta1, b2 = s.cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(s.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i]->values;
    const auto& g = grads[i]->values;
    auto& m = s.m[i].values;
    auto& v = s.v[i].values;
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = static_cast<Real>(b1 * m[k] + (1 - b1) * g[k]);
      v[k] = static_cast<Real>(b2 * v[k] + (1 - b2) * double(g[k]) * g[k]);
      const double mh = m[k] / c1;
      const double vh = v[k] / c2;
      p[k] = static_cast<Real>(p[k] - s.cfg.lr * mh / (std::sqrt(vh) + s.cfg.eps));
    }
  }
}

template <class Real>
void adam_step(AdamState<Real>& s, ModelParams<Real>& params, const ModelParams<Real>& grads) {
  auto p = params.tensors();
  auto g = grads.tensors();
  adam_step<Real>(s, std::span<Tensor<Real>* const>(p), std::span<const Tensor<Real>* const>(g));
}

}  // namespace hrnn
