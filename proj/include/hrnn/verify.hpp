#pragma once

// Randomized harnesses shared by the gradcheck/memcheck subcommands and the
// acceptance runner: backend equivalence, barrier semantics, ledger peaks and
// finite differences of a whole training step.

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "hrnn/gradcheck.hpp"
#include "hrnn/training.hpp"

namespace hrnn {

/// A small random training problem.
struct CaseSpec {
  std::vector<std::size_t> sizes;
  std::vector<std::size_t> k;
  std::size_t steps = 12;
  std::size_t rows = 3;
  std::size_t input_dim = 3;
  std::size_t classes = 4;
  std::size_t decoder_hidden = 16;
  Mode mode = Mode::ours;
  std::vector<double> beta;
  AuxKind aux_kind = AuxKind::discrete;
  std::uint64_t seed = 0;

  std::size_t levels() const { return sizes.size(); }

  std::string describe() const {
    std::ostringstream os;
    os << "seed=" << seed << " mode=" << to_string(mode) << " levels=" << levels() << " k=";
    for (std::size_t i = 0; i < k.size(); ++i) os << (i ? "," : "") << k[i];
    os << " T=" << steps << " sizes=";
    for (std::size_t i = 0; i < sizes.size(); ++i) os << (i ? "," : "") << sizes[i];
    os << " beta=";
    for (std::size_t i = 0; i < beta.size(); ++i) os << (i ? "," : "") << beta[i];
    os << " aux=" << (aux_kind == AuxKind::discrete ? "discrete" : "continuous");
    return os.str();
  }

  ModelDims dims() const {
    ModelDims d;
    d.input_dim = input_dim;
    d.output_dim = classes;
    d.aux_out = input_dim;
    d.sizes = sizes;
    d.k_max = k;
    d.decoder_hidden = decoder_hidden;
    return d;
  }
};

/// l ∈ {2,3}, k ∈ {2,4,5} per level, T ∈ [12, 60], sizes in [2, 32],
/// barriered mode, some β possibly zero.
inline CaseSpec random_case(std::uint64_t seed) {
  Rng rng(hash_key(seed, 0xca5e));
  CaseSpec c;
  c.seed = seed;
  const std::size_t L = 2 + uniform_index(rng, 2);
  const std::size_t ks[] = {2, 4, 5};
  for (std::size_t j = 0; j < L; ++j) c.sizes.push_back(2 + uniform_index(rng, 31));
  for (std::size_t j = 0; j + 1 < L; ++j) c.k.push_back(ks[uniform_index(rng, 3)]);
  c.steps = 12 + uniform_index(rng, 49);
  c.rows = 1 + uniform_index(rng, 4);
  c.mode = uniform_index(rng, 2) ? Mode::ours : Mode::gr_hrnn;
  for (std::size_t j = 0; j + 1 < L; ++j) {
    const double b = c.mode == Mode::gr_hrnn ? 0.0 : (uniform_index(rng, 4) == 0 ? 0.0 : uniform(rng, 0.1, 2.0));
    c.beta.push_back(b);
  }
  c.aux_kind = uniform_index(rng, 3) == 0 ? AuxKind::continuous : AuxKind::discrete;
  return c;
}

/// Random inputs and targets; about half the positions carry task weight.
template <class Real>
Batch<Real> synthetic_batch(const CaseSpec& c) {
  Rng rng(hash_key(c.seed, 0xba7c));
  Batch<Real> b;
  b.aux_kind = c.aux_kind;
  b.schedule = BatchSchedule(TickSchedule::fixed(c.k), c.rows);
  b.aux_seed = hash_key(c.seed, 0xa0c5);
  for (std::size_t r = 0; r < c.rows; ++r) b.row_ids.push_back(r);
  const Real w = Real(1) / static_cast<Real>(c.rows * c.steps);
  for (std::size_t t = 0; t < c.steps; ++t) {
    Tensor<Real> x = Tensor<Real>::zeros(Shape{c.rows, c.input_dim});
    std::vector<int> sym(c.rows), tg(c.rows);
    std::vector<Real> wt(c.rows);
    for (std::size_t r = 0; r < c.rows; ++r) {
      sym[r] = static_cast<int>(uniform_index(rng, c.input_dim));
      if (c.aux_kind == AuxKind::discrete)
        x.at(r, static_cast<std::size_t>(sym[r])) = Real(1);
      else
        for (std::size_t d = 0; d < c.input_dim; ++d) x.at(r, d) = static_cast<Real>(uniform(rng, -1, 1));
      tg[r] = static_cast<int>(uniform_index(rng, c.classes));
      wt[r] = uniform01(rng) < 0.5 ? w : Real(0);
    }
    b.inputs.push_back(std::move(x));
    b.targets.push_back(std::move(tg));
    b.weights.push_back(std::move(wt));
    if (c.aux_kind == AuxKind::discrete) b.symbols.push_back(std::move(sym));
  }
  return b;
}

inline StepOptions case_options(const CaseSpec& c, Backward backward) {
  StepOptions o;
  o.mode = c.mode;
  o.backward = backward;
  o.beta = c.beta;
  o.unroll = c.steps;
  o.k = c.k;
  return o;
}

/// Largest |a − b| / max(|a|, |b|, floor) over all coordinates.
template <class Real>
double max_rel_err(const ModelParams<Real>& a, const ModelParams<Real>& b, double floor = 1e-12) {
  auto ta = a.tensors();
  auto tb = b.tensors();
  if (ta.size() != tb.size()) throw Error("max_rel_err: parameter sets differ");
  double worst = 0;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (ta[i]->shape != tb[i]->shape) throw Error("max_rel_err: shape mismatch");
    for (std::size_t e = 0; e < ta[i]->numel(); ++e) {
      const double x = (*ta[i])[e], y = (*tb[i])[e];
      worst = std::max(worst, std::abs(x - y) / std::max({std::abs(x), std::abs(y), floor}));
    }
  }
  return worst;
}

template <class Real>
bool bitwise_equal(const ModelParams<Real>& a, const ModelParams<Real>& b) {
  auto ta = a.tensors();
  auto tb = b.tensors();
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i)
    if (ta[i]->shape != tb[i]->shape ||
        std::memcmp(ta[i]->values.data(), tb[i]->values.data(), ta[i]->numel() * sizeof(Real)) != 0)
      return false;
  return true;
}

struct BackendComparison {
  double grad_rel = 0;  // streaming vs oracle, worst coordinate
  double loss_rel = 0;
  std::size_t ledger_peak = 0;
};

template <class Real>
BackendComparison compare_backends(const CaseSpec& c) {
  const auto params = init_params<Real>(hash_key(c.seed, 0x1417), c.dims());
  const auto batch = synthetic_batch<Real>(c);
  const auto oracle = train_step(params, batch, case_options(c, Backward::oracle));
  const auto stream = train_step(params, batch, case_options(c, Backward::streaming));
  BackendComparison r;
  r.grad_rel = max_rel_err(oracle.grads, stream.grads);
  r.loss_rel = std::abs(oracle.loss.combined - stream.loss.combined) /
               std::max({std::abs(oracle.loss.combined), std::abs(stream.loss.combined), 1e-12});
  r.ledger_peak = stream.ledger.peak_units();
  return r;
}

/// Ledger peak of one streaming step on a homogeneous hierarchy (every level
/// ticks k times per superior tick) next to the closed-form bound and the
/// storage of plain TBPTT.
struct MemReport {
  std::size_t levels = 0, k = 0, T = 0;
  std::size_t peak = 0, formula = 0, full = 0;
  bool within() const { return peak <= formula; }
};

inline MemReport memcheck(std::size_t levels, std::size_t k, std::size_t T, std::size_t hidden = 2) {
  if (levels < 2) throw Error("memcheck: need at least two levels");
  CaseSpec c;
  c.sizes.assign(levels, hidden);
  c.k.assign(levels - 1, k);
  c.steps = T;
  c.rows = 1;
  c.input_dim = 2;
  c.classes = 2;
  c.decoder_hidden = 2;
  c.mode = Mode::ours;
  c.beta.assign(levels - 1, 1.0);
  c.seed = hash_key(levels, k, T);
  const auto params = init_params<double>(c.seed, c.dims());
  const auto res = train_step(params, synthetic_batch<double>(c), case_options(c, Backward::streaming));
  return {levels, k, T, res.ledger.peak_units(), memory_formula(levels, k, T), full_tbptt_units(levels, k, T)};
}

/// Fourth-order central differences of the combined loss of a whole training
/// step against its backward pass. Only meaningful where the computed gradient is the true
/// one: mode hrnn, and aux targets that do not depend on parameters (two
/// levels).
template <class Real>
GradCheckResult finite_diff_step(const CaseSpec& c, double step, double floor = 1e-12) {
  if (c.mode != Mode::hrnn) throw Error("finite_diff_step: needs mode hrnn (restricted gradients are not derivatives)");
  auto params = init_params<Real>(hash_key(c.seed, 0x1417), c.dims());
  const auto batch = synthetic_batch<Real>(c);
  const auto opt = case_options(c, Backward::oracle);
  const auto base = train_step(params, batch, opt);
  auto loss_at = [&](const ModelParams<Real>& p) { return train_step(p, batch, opt).loss.combined; };
  GradCheckResult res;
  auto ptrs = params.tensors();
  auto gptrs = base.grads.tensors();
  for (std::size_t p = 0; p < ptrs.size(); ++p) {
    for (std::size_t i = 0; i < ptrs[p]->numel(); ++i) {
      Real& x = (*ptrs[p])[i];
      const Real orig = x;
      auto at = [&](double d) {
        x = orig + static_cast<Real>(d);
        return loss_at(params);
      };
      const double num = (8 * (at(step) - at(-step)) - (at(2 * step) - at(-2 * step))) / (12 * step);
      x = orig;
      const double ana = static_cast<double>((*gptrs[p])[i]);
      const double rel = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), floor});
      if (rel > res.max_rel_err) res = {rel, p, i, ana, num};
    }
  }
  return res;
}

}  // namespace hrnn
