#pragma once

// Hierarchical RNN forward pass on a single tape.
//
// Within a step, levels are processed top-down. A ticking level j ≥ 1 reads
// the state of level j−1 as it was at the end of the previous step (the
// "up-sent" state); when level j+1 ticks at the same step, level j restarts
// from zero and receives the freshly updated state of level j+1 as its second
// input block. Up-sent edges carry a gradient barrier in the restricted-
// gradient modes; the downward injection never does.

#include <optional>
#include <string>
#include <vector>

#include "hrnn/layers.hpp"
#include "hrnn/schedule.hpp"

namespace hrnn {

enum class Mode { hrnn, gr_hrnn, ours, mr_hrnn };

inline bool barriered(Mode m) { return m == Mode::gr_hrnn || m == Mode::ours; }

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::hrnn: return "hrnn";
    case Mode::gr_hrnn: return "gr-hrnn";
    case Mode::ours: return "ours";
    case Mode::mr_hrnn: return "mr-hrnn";
  }
  return "?";
}

inline Mode parse_mode(const std::string& s) {
  if (s == "hrnn") return Mode::hrnn;
  if (s == "gr-hrnn") return Mode::gr_hrnn;
  if (s == "ours") return Mode::ours;
  if (s == "mr-hrnn") return Mode::mr_hrnn;
  throw Error("mode: unknown value '" + s + "' (expected hrnn, gr-hrnn, ours or mr-hrnn)");
}

struct HrnnConfig {
  std::vector<std::size_t> sizes;  // hidden units per level
  std::vector<std::size_t> k;      // fixed tick ratios; empty for boundary-driven schedules
  std::vector<double> beta;        // auxiliary weight per non-top level
  Mode mode = Mode::ours;
  std::size_t unroll = 0;          // T

  std::size_t levels() const { return sizes.size(); }
  bool barrier_upward() const { return barriered(mode); }

  /// Truncation length actually used: mr-HRNN shrinks T to ⌊2T/k⌋ + k so its
  /// stored-state budget matches the restricted-gradient schedule.
  std::size_t effective_unroll() const {
    if (mode != Mode::mr_hrnn) return unroll;
    if (levels() != 2 || k.size() != 1)
      throw Error("mr-hrnn unroll rule is defined for two-level fixed schedules only");
    return 2 * unroll / k[0] + k[0];
  }

  void validate() const {
    if (sizes.empty()) throw Error("levels: need at least one level");
    if (!k.empty() && k.size() + 1 != sizes.size())
      throw Error("k: expected " + std::to_string(sizes.size() - 1) + " values");
    if (beta.size() + 1 != sizes.size())
      throw Error("beta: expected " + std::to_string(sizes.size() - 1) + " values");
    for (auto b : beta)
      if (!(b >= 0)) throw Error("beta: values must be non-negative");
    if (unroll == 0) throw Error("T: must be positive");
    if (mode == Mode::mr_hrnn) (void)effective_unroll();
  }
};

struct ModelVars {
  std::vector<LstmVars> levels;
  std::vector<DecoderVars> decoders;
  HeadVars head;
};

template <class Real>
ModelVars bind_model(ParamBinder<Real>& binder, const ModelParams<Real>& p, ModelParams<Real>* grads) {
  ModelVars v;
  for (std::size_t j = 0; j < p.levels.size(); ++j)
    v.levels.push_back(binder.lstm(p.levels[j], grads ? &grads->levels[j] : nullptr));
  for (std::size_t j = 0; j < p.decoders.size(); ++j)
    v.decoders.push_back(binder.decoder(p.decoders[j], grads ? &grads->decoders[j] : nullptr));
  v.head = binder.head(p.head, grads ? &grads->head : nullptr);
  return v;
}

struct HrnnState {
  std::vector<LstmState> levels;
};

struct StepOutput {
  std::optional<Var> logits;
  /// up_sent[j] (j ≥ 1): the level-(j−1) state consumed by level j at this
  /// step, before any barrier; empty when level j did not tick or the state
  /// was still all zero.
  std::vector<std::optional<Var>> up_sent;
  std::vector<TickMask> ticks;
};

namespace detail {

template <class Real>
Var row_mask(Tape<Real>& tape, const TickMask& m, std::size_t cols, bool invert) {
  const auto rows = m.rows.size();
  Tensor<Real> t = Tensor<Real>::zeros(Shape{rows, cols});
  for (std::size_t r = 0; r < rows; ++r) {
    const bool on = (m.rows[r] != 0) != invert;
    if (on) std::fill_n(t.values.begin() + r * cols, cols, Real(1));
  }
  return tape.constant(std::move(t));
}

/// Keeps the ticking rows of v (keep_ticking) or the other rows; zeroes the rest.
template <class Real>
std::optional<Var> masked(Tape<Real>& tape, std::optional<Var> v, const TickMask& m, bool keep_ticking) {
  if (!v) return std::nullopt;
  return tape.mul(*v, row_mask(tape, m, tape.value(*v).cols(), !keep_ticking));
}

}  // namespace detail

/// One step of the hierarchy. `state` is updated in place; levels that do not
/// tick keep the very same node.
template <class Real>
StepOutput hrnn_step(Tape<Real>& tape, const ModelVars& vars, HrnnState& state, Var x_t,
                     std::size_t t, const BatchSchedule& sched, Mode mode, bool want_logits) {
  const auto L = vars.levels.size();
  if (state.levels.size() != L) throw Error("hrnn_step: state has wrong number of levels");
  if (sched.levels() != L)
    throw Error("hrnn_step: schedule has " + std::to_string(sched.levels()) + " levels, model has " +
                std::to_string(L));
  StepOutput out;
  out.up_sent.resize(L);
  out.ticks.resize(L);
  for (std::size_t j = 0; j < L; ++j) out.ticks[j] = sched.mask(j, t);
  if (out.ticks[0].kind != TickMask::Kind::all) throw Error("hrnn_step: level 0 must tick every step");

  for (std::size_t jj = L; jj-- > 0;) {
    const auto& tick = out.ticks[jj];
    if (!tick.any()) continue;

    std::optional<Var> up;
    if (jj == 0) {
      up = x_t;
    } else if (state.levels[jj - 1].h) {
      out.up_sent[jj] = state.levels[jj - 1].h;
      up = barriered(mode) ? tape.barrier(*state.levels[jj - 1].h) : *state.levels[jj - 1].h;
    }

    LstmState prev = state.levels[jj];
    std::vector<std::optional<Var>> inputs{up};
    if (jj + 1 < L) {
      const auto& sup = out.ticks[jj + 1];
      std::optional<Var> inj;
      switch (sup.kind) {
        case TickMask::Kind::none: break;
        case TickMask::Kind::all:
          prev = {};
          inj = state.levels[jj + 1].h;
          break;
        case TickMask::Kind::partial:
          prev.h = detail::masked(tape, prev.h, sup, false);
          prev.c = detail::masked(tape, prev.c, sup, false);
          inj = detail::masked(tape, state.levels[jj + 1].h, sup, true);
          break;
      }
      inputs.push_back(inj);
    }
    if (!inputs[0] && !prev.h && !(inputs.size() > 1 && inputs[1])) {
      // Nothing nonzero feeds this update (t = 0 of an upper level): the LSTM
      // still sees its bias, so run it on explicit zeros.
      const auto rows = tape.value(x_t).rows();
      inputs[0] = tape.constant(Tensor<Real>::zeros(Shape{rows, jj == 0 ? tape.value(x_t).cols()
                                                                         : vars.levels[jj - 1].hidden}));
    }
    LstmState next = lstm_step(tape, vars.levels[jj], prev, std::span<const std::optional<Var>>(inputs));

    if (tick.kind == TickMask::Kind::all) {
      state.levels[jj] = next;
    } else {
      // Rows that do not tick keep their old value: new·m + old·(1−m).
      const auto& old = state.levels[jj];
      auto commit = [&](Var n, std::optional<Var> o) {
        Var kept = *detail::masked(tape, std::optional<Var>(n), tick, true);
        return o ? tape.add(kept, *detail::masked(tape, o, tick, false)) : kept;
      };
      state.levels[jj] = {commit(*next.h, old.h), commit(*next.c, old.c)};
    }
  }
  if (want_logits) out.logits = head_logits(tape, vars.head, *state.levels[0].h);
  return out;
}

template <class Real>
struct ForwardResult {
  std::vector<Tensor<Real>> logits;                 // per step
  std::vector<std::vector<std::size_t>> tick_log;   // per level: steps where any row ticked
  /// up_sent_log[j][i]: value consumed by level j at its i-th logged tick
  /// (zeros when the lower state was still empty).
  std::vector<std::vector<Tensor<Real>>> up_sent_log;
  std::vector<Tensor<Real>> final_h;                // per level
};

/// Runs the hierarchy over `inputs` (one [rows, D] tensor per step) from an
/// all-zero initial state. Forward only.
template <class Real>
ForwardResult<Real> forward_sequence(const ModelParams<Real>& params, const std::vector<Tensor<Real>>& inputs,
                                     const BatchSchedule& sched, Mode mode, bool check_finite = true) {
  if (inputs.empty()) throw Error("forward_sequence: empty input sequence");
  Tape<Real> tape(check_finite);
  ParamBinder<Real> binder(tape);
  ModelVars vars = bind_model<Real>(binder, params, nullptr);
  const auto L = params.levels.size();
  HrnnState state;
  state.levels.resize(L);
  ForwardResult<Real> res;
  res.tick_log.resize(L);
  res.up_sent_log.resize(L);
  const auto rows = inputs[0].rows();
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    Var x = tape.constant(inputs[t]);
    auto out = hrnn_step(tape, vars, state, x, t, sched, mode, true);
    res.logits.push_back(tape.value(*out.logits));
    for (std::size_t j = 0; j < L; ++j) {
      if (!out.ticks[j].any()) continue;
      res.tick_log[j].push_back(t);
      if (j == 0) continue;
      res.up_sent_log[j].push_back(out.up_sent[j] ? tape.value(*out.up_sent[j])
                                                  : Tensor<Real>::zeros(Shape{rows, params.levels[j - 1].hidden()}));
    }
  }
  for (std::size_t j = 0; j < L; ++j)
    res.final_h.push_back(state.levels[j].h ? tape.value(*state.levels[j].h)
                                            : Tensor<Real>::zeros(Shape{rows, params.levels[j].hidden()}));
  return res;
}

}  // namespace hrnn
