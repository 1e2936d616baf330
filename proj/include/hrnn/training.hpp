#pragma once

// Restricted-gradient TBPTT.
//
// Two interchangeable backends compute the same gradient in gr-hrnn/ours mode:
//   oracle     one tape per truncation window, barriers on upward edges;
//   streaming  one tape per live segment and level; a segment is
//              differentiated and dropped as soon as its superior ticks.
//
// The streaming backend passes the gradient w.r.t. the injected superior
// state (a StoredGrad) up to the superior's tape, where it is added as a
// seed on the matching state node.

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "hrnn/adam.hpp"
#include "hrnn/hierarchy.hpp"
#include "hrnn/random.hpp"

namespace hrnn {

enum class AuxKind { discrete, continuous };
enum class Backward { oracle, streaming };

inline std::string to_string(Backward b) { return b == Backward::oracle ? "oracle" : "streaming"; }

inline Backward parse_backward(const std::string& s) {
  if (s == "oracle") return Backward::oracle;
  if (s == "streaming") return Backward::streaming;
  throw Error("backward: unknown value '" + s + "' (expected oracle or streaming)");
}

/// A batch of equally long sequences. Task losses are Σ_{t,r} weight·CE, so
/// weights normally sum to one over the whole batch.
template <class Real>
struct Batch {
  std::vector<Tensor<Real>> inputs;         // per step, [B, D]
  std::vector<std::vector<int>> targets;    // per step, class per row
  std::vector<std::vector<Real>> weights;   // per step, task weight per row
  AuxKind aux_kind = AuxKind::discrete;
  std::vector<std::vector<int>> symbols;    // per step, input symbol per row (discrete aux targets)
  BatchSchedule schedule;
  std::vector<std::size_t> row_ids;         // stable row identity for index sampling
  std::uint64_t aux_seed = 0;

  std::size_t rows() const { return inputs.empty() ? 0 : inputs[0].rows(); }
  std::size_t length() const { return inputs.size(); }

  void validate() const {
    const auto S = length(), B = rows();
    if (S == 0 || B == 0) throw Error("batch: empty");
    if (targets.size() != S || weights.size() != S)
      throw Error("batch: targets/weights must cover every step");
    if (aux_kind == AuxKind::discrete && symbols.size() != S)
      throw Error("batch: discrete auxiliary targets need one symbol row per step");
    for (std::size_t t = 0; t < S; ++t) {
      if (inputs[t].rows() != B || inputs[t].cols() != inputs[0].cols())
        throw Error("batch: input shape changes at step " + std::to_string(t));
      if (targets[t].size() != B || weights[t].size() != B)
        throw Error("batch: targets/weights at step " + std::to_string(t) + " do not match rows");
      if (aux_kind == AuxKind::discrete && symbols[t].size() != B)
        throw Error("batch: symbols at step " + std::to_string(t) + " do not match rows");
    }
    if (schedule.rows() != B) throw Error("batch: schedule rows do not match");
    if (row_ids.size() != B) throw Error("batch: row ids do not match rows");
  }

  Batch select_rows(const std::vector<std::size_t>& rows_) const {
    Batch out;
    out.aux_kind = aux_kind;
    out.aux_seed = aux_seed;
    out.schedule = schedule.select(rows_);
    for (std::size_t t = 0; t < length(); ++t) {
      out.inputs.push_back(gather_rows(inputs[t], rows_));
      std::vector<int> tg, sy;
      std::vector<Real> w;
      for (auto r : rows_) {
        tg.push_back(targets[t][r]);
        w.push_back(weights[t][r]);
        if (aux_kind == AuxKind::discrete) sy.push_back(symbols[t][r]);
      }
      out.targets.push_back(std::move(tg));
      out.weights.push_back(std::move(w));
      if (aux_kind == AuxKind::discrete) out.symbols.push_back(std::move(sy));
    }
    for (auto r : rows_) out.row_ids.push_back(row_ids[r]);
    return out;
  }
};

// -- auxiliary index plan ------------------------------------------------------

/// One decoder query: at a tick of level j+1, row `row` must reproduce the
/// input level j received at step `source`, which is its `index`-th previous
/// input (1-based) within the finished segment.
struct AuxEvent {
  std::size_t row = 0;
  std::size_t index = 0;
  std::size_t source = 0;
};

struct AuxPlan {
  std::vector<std::vector<std::vector<AuxEvent>>> events;  // [level][step]
  std::vector<std::size_t> count;                          // events per level over the batch

  const std::vector<AuxEvent>& at(std::size_t level, std::size_t t) const { return events.at(level).at(t); }
};

/// Samples one index per (row, superior tick) from a stateless hash, so every
/// backend and every row grouping draws the same indices. No query is made at
/// t = 0 or at a truncation-window start (the queried state then belongs to
/// the previous window). Segments longer than the decoder's one-hot width are
/// sampled from their most recent k_max inputs.
inline AuxPlan make_aux_plan(const BatchSchedule& sched, const std::vector<std::size_t>& row_ids,
                             std::uint64_t seed, std::size_t length, const std::vector<std::size_t>& k_max,
                             const std::vector<std::size_t>& window_starts = {0}) {
  const auto L = sched.levels();
  if (k_max.size() + 1 != L) throw Error("aux plan: need one k_max per non-top level");
  AuxPlan plan;
  plan.events.assign(L - 1, std::vector<std::vector<AuxEvent>>(length));
  plan.count.assign(L - 1, 0);
  std::vector<bool> starts(length, false);
  for (auto w : window_starts)
    if (w < length) starts[w] = true;
  for (std::size_t b = 0; b < sched.rows(); ++b) {
    const auto& s = sched.row(b);
    for (std::size_t j = 0; j + 1 < L; ++j) {
      std::vector<std::size_t> seg;
      for (std::size_t t = 0; t < length; ++t) {
        if (s.ticks(j + 1, t)) {
          if (t > 0 && !starts[t] && !seg.empty()) {
            const auto n = std::min(seg.size(), k_max[j]);
            const auto i = 1 + hash_key(seed, j, t, row_ids.at(b)) % n;
            plan.events[j][t].push_back({b, i, seg[seg.size() - i]});
            ++plan.count[j];
          }
          seg.clear();
        }
        if (s.ticks(j, t)) seg.push_back(t);
      }
    }
  }
  return plan;
}

// -- memory ledger -------------------------------------------------------------

/// Counts retained hidden-state-sized vectors per batch element. A unit is
/// one h-vector of the owning level; the scalar count also includes the cell
/// state c kept alongside every retained h.
class MemoryLedger {
 public:
  enum class Kind { state, stored_grad };

  struct Event {
    std::size_t step;
    std::size_t level;
    Kind kind;
    long delta;
    std::size_t total_units;
  };

  MemoryLedger() = default;
  explicit MemoryLedger(std::vector<std::size_t> sizes)
      : sizes_(std::move(sizes)),
        units_(sizes_.size(), 0),
        peak_units_(sizes_.size(), 0),
        states_(sizes_.size(), 0),
        grads_(sizes_.size(), 0) {}

  void retain(std::size_t step, std::size_t level, Kind kind, std::size_t n = 1) {
    check_level(level);
    (kind == Kind::state ? states_ : grads_)[level] += n;
    units_[level] += n;
    scalars_ += n * scalar_size(level, kind);
    update(step, level, kind, static_cast<long>(n));
  }

  void release(std::size_t step, std::size_t level, Kind kind, std::size_t n) {
    check_level(level);
    auto& held = (kind == Kind::state ? states_ : grads_)[level];
    if (n > held)
      throw Error("memory ledger: releasing " + std::to_string(n) + " vectors at level " +
                  std::to_string(level) + " but only " + std::to_string(held) + " are retained");
    held -= n;
    units_[level] -= n;
    scalars_ -= n * scalar_size(level, kind);
    update(step, level, kind, -static_cast<long>(n));
  }

  std::size_t levels() const { return sizes_.size(); }
  std::size_t total_units() const { return total_; }
  std::size_t peak_units() const { return peak_total_; }
  std::size_t units(std::size_t level) const { return units_.at(level); }
  std::size_t peak_units(std::size_t level) const { return peak_units_.at(level); }
  std::size_t held(std::size_t level, Kind kind) const {
    return (kind == Kind::state ? states_ : grads_).at(level);
  }
  std::size_t scalars() const { return scalars_; }
  std::size_t peak_scalars() const { return peak_scalars_; }
  const std::vector<Event>& events() const { return events_; }

  /// Keeps the larger peaks of two ledgers (independent row groups).
  void merge_peaks(const MemoryLedger& o) {
    if (sizes_.empty()) *this = MemoryLedger(o.sizes_);
    peak_total_ = std::max(peak_total_, o.peak_total_);
    peak_scalars_ = std::max(peak_scalars_, o.peak_scalars_);
    for (std::size_t j = 0; j < sizes_.size(); ++j) peak_units_[j] = std::max(peak_units_[j], o.peak_units_[j]);
  }

 private:
  void check_level(std::size_t level) const {
    if (level >= sizes_.size()) throw Error("memory ledger: no level " + std::to_string(level));
  }
  std::size_t scalar_size(std::size_t level, Kind kind) const {
    return kind == Kind::state ? 2 * sizes_[level] : sizes_[level];
  }
  void update(std::size_t step, std::size_t level, Kind kind, long delta) {
    total_ = 0;
    for (auto u : units_) total_ += u;
    peak_total_ = std::max(peak_total_, total_);
    peak_units_[level] = std::max(peak_units_[level], units_[level]);
    peak_scalars_ = std::max(peak_scalars_, scalars_);
    events_.push_back({step, level, kind, delta, total_});
  }

  std::vector<std::size_t> sizes_, units_, peak_units_, states_, grads_;
  std::size_t total_ = 0, peak_total_ = 0, scalars_ = 0, peak_scalars_ = 0;
  std::vector<Event> events_;
};

/// Predicted peak of the streaming ledger for a uniform tick ratio k:
///   l = 2:  k + 2⌈T/k⌉
///   l > 2:  2(l−1)k + 2⌈T/k^(l−1)⌉
/// Each non-top level holds at most k states plus k StoredGrads from below
/// (the lowest level holds no StoredGrads, hence k for l = 2); the top level
/// holds one state and one StoredGrad per tick. Exact when k^(l−1) divides T.
inline std::size_t memory_formula(std::size_t levels, std::size_t k, std::size_t T) {
  if (levels < 2) throw Error("memory_formula: need at least two levels");
  if (k < 1) throw Error("memory_formula: k must be positive");
  if (T < k) throw Error("memory_formula: T must be at least k");
  std::size_t period = 1;
  for (std::size_t j = 1; j < levels; ++j) period *= k;
  const auto top = 2 * ((T + period - 1) / period);
  if (levels == 2) return k + top;
  return 2 * (levels - 1) * k + top;
}

/// Vectors stored by plain TBPTT over T steps: one state per tick and level.
inline std::size_t full_tbptt_units(std::size_t levels, std::size_t k, std::size_t T) {
  std::size_t n = 0, period = 1;
  for (std::size_t j = 0; j < levels; ++j) {
    n += (T + period - 1) / period;
    period *= k;
  }
  return n;
}

// -- losses --------------------------------------------------------------------

struct LossReport {
  double task = 0;              // nats
  std::vector<double> aux;      // per non-top level
  std::vector<double> beta;
  double combined = 0;

  double task_bits() const { return task / std::numbers::ln2; }

  static LossReport make(double task, std::vector<double> aux, std::vector<double> beta) {
    LossReport r{task, std::move(aux), std::move(beta), 0};
    r.combined = r.task;
    for (std::size_t j = 0; j < r.aux.size(); ++j)
      if (r.beta[j] > 0) r.combined += r.beta[j] * r.aux[j];
    return r;
  }
};

namespace detail {

/// Decoder query for the events of one level at one step, on any tape.
/// `rows` maps the tape's batch rows; `level_inputs(source)` returns the
/// full-batch value received by level j at `source` (j ≥ 1 only).
template <class Real, class Lookup>
Var aux_loss(Tape<Real>& tape, const DecoderVars& dec, Var h_up, const Batch<Real>& batch,
             const std::vector<AuxEvent>& events, std::size_t level, std::size_t count, Lookup&& level_inputs) {
  const auto B = batch.rows();
  std::vector<std::size_t> index(B, 0);
  std::vector<Real> w(B, Real(0));
  const Real wt = Real(1) / static_cast<Real>(count);
  for (const auto& e : events) {
    if (e.index > dec.k_max) throw Error("aux loss: index exceeds decoder width");
    index[e.row] = e.index - 1;
    w[e.row] = wt;
  }
  Var onehot = tape.constant(one_hot<Real>(index, dec.k_max));
  Var pred = decoder_predict(tape, dec, h_up, onehot);
  if (level == 0 && batch.aux_kind == AuxKind::discrete) {
    std::vector<int> tg(B, 0);
    for (const auto& e : events) tg[e.row] = batch.symbols[e.source][e.row];
    return tape.softmax_cross_entropy(pred, tg, w);
  }
  const auto D = tape.value(pred).cols();
  Tensor<Real> target = Tensor<Real>::zeros(Shape{B, D});
  for (const auto& e : events) {
    const Tensor<Real>& src = level == 0 ? batch.inputs[e.source] : level_inputs(e.source);
    if (src.cols() != D)
      throw Error("aux loss: target width " + std::to_string(src.cols()) + " != decoder output " +
                  std::to_string(D));
    std::copy_n(src.values.begin() + e.row * D, D, target.values.begin() + e.row * D);
  }
  return tape.mse(pred, tape.constant(std::move(target)), w);
}

template <class Real>
Real scalar_value(const Tape<Real>& tape, Var v) {
  return tape.value(v).item();
}

}  // namespace detail

/// State handed from one truncation window to the next (forward values only).
template <class Real>
struct Carry {
  std::vector<std::optional<Tensor<Real>>> h, c;
  /// Inputs received by level j ≥ 1, by step; decoder targets.
  std::vector<std::map<std::size_t, Tensor<Real>>> level_inputs;

  static Carry zeros(std::size_t levels) {
    Carry c;
    c.h.resize(levels);
    c.c.resize(levels);
    c.level_inputs.resize(levels);
    return c;
  }
};

/// Loss sums of one window, each already weighted (task by the batch
/// weights, aux_j by 1/N_j).
struct WindowLoss {
  double task = 0;
  std::vector<double> aux;
};

struct WindowOptions {
  Mode mode = Mode::ours;
  std::vector<double> beta;
  bool check_finite = true;
  bool barrier_passthrough = false;  // oracle only: barriers become identities
};

/// Full-graph backward over steps [begin, end). Gradients are added into
/// `grads`.
template <class Real>
WindowLoss train_window_oracle(const ModelParams<Real>& params, const Batch<Real>& batch, const AuxPlan& plan,
                               std::size_t begin, std::size_t end, const WindowOptions& opt, Carry<Real>& carry,
                               ModelParams<Real>& grads) {
  const auto L = params.levels.size();
  if (opt.beta.size() + 1 != L) throw Error("oracle: need one beta per non-top level");
  Tape<Real> tape(opt.check_finite);
  tape.set_barrier_passthrough(opt.barrier_passthrough);
  ParamBinder<Real> binder(tape);
  ModelVars vars = bind_model(binder, params, &grads);
  HrnnState state;
  state.levels.resize(L);
  for (std::size_t j = 0; j < L; ++j) {
    if (carry.h[j]) state.levels[j].h = tape.constant(*carry.h[j]);
    if (carry.c[j]) state.levels[j].c = tape.constant(*carry.c[j]);
  }
  std::optional<Var> task;
  std::vector<std::optional<Var>> aux(L - 1);
  auto accum = [&](std::optional<Var>& acc, Var v) { acc = acc ? tape.add(*acc, v) : v; };
  const auto B = batch.rows();

  for (std::size_t t = begin; t < end; ++t) {
    for (std::size_t j = 0; j + 1 < L; ++j) {
      const auto& ev = plan.at(j, t);
      if (ev.empty()) continue;
      if (!state.levels[j].h) throw Error("oracle: decoder query on an empty state");
      Var l = detail::aux_loss(tape, vars.decoders[j], *state.levels[j].h, batch, ev, j, plan.count[j],
                               [&](std::size_t s) -> const Tensor<Real>& { return carry.level_inputs[j].at(s); });
      accum(aux[j], l);
    }
    Var x = tape.constant(batch.inputs[t]);
    auto out = hrnn_step(tape, vars, state, x, t, batch.schedule, opt.mode, true);
    for (std::size_t j = 1; j + 1 < L; ++j) {
      if (!out.ticks[j].any()) continue;
      carry.level_inputs[j][t] = out.up_sent[j] ? tape.value(*out.up_sent[j])
                                                : Tensor<Real>::zeros(Shape{B, params.levels[j - 1].hidden()});
    }
    const auto& w = batch.weights[t];
    if (std::any_of(w.begin(), w.end(), [](Real v) { return v != Real(0); }))
      accum(task, tape.softmax_cross_entropy(*out.logits, batch.targets[t], w));
  }

  WindowLoss res;
  res.aux.assign(L - 1, 0.0);
  std::optional<Var> combined = task;
  if (task) res.task = detail::scalar_value(tape, *task);
  for (std::size_t j = 0; j + 1 < L; ++j) {
    if (!aux[j]) continue;
    res.aux[j] = detail::scalar_value(tape, *aux[j]);
    if (opt.beta[j] > 0) accum(combined, tape.scale(*aux[j], static_cast<Real>(opt.beta[j])));
  }
  if (combined) {
    tape.backward(*combined);
    binder.harvest();
  }
  for (std::size_t j = 0; j < L; ++j) {
    carry.h[j] = state.levels[j].h ? std::optional<Tensor<Real>>(tape.value(*state.levels[j].h)) : std::nullopt;
    carry.c[j] = state.levels[j].c ? std::optional<Tensor<Real>>(tape.value(*state.levels[j].c)) : std::nullopt;
  }
  return res;
}

namespace detail {

/// Live segment of one level on its own tape.
template <class Real>
struct SegmentRun {
  Tape<Real> tape;
  std::unique_ptr<ParamBinder<Real>> binder;
  LstmVars lstm;
  HeadVars head;
  LstmState state;
  std::optional<Var> injected;          // leaf holding the superior state at segment start
  std::size_t start = 0;                // step of that superior tick
  std::map<std::size_t, Var> h_at;      // h node per tick inside the segment
  std::vector<Var> task_losses;
  std::vector<Seed<Real>> stored;       // StoredGrads deposited from the level below
  std::map<std::size_t, Tensor<Real>> inputs;  // received up-sent values (aux targets, j ≥ 1)

  explicit SegmentRun(bool check_finite) : tape(check_finite) {}
};

}  // namespace detail

/// Streaming restricted-gradient backward over a whole sequence that starts
/// from zero state. Every row of `batch` must share one schedule; see
/// train_step_streaming for mixed schedules.
template <class Real>
WindowLoss train_window_streaming(const ModelParams<Real>& params, const Batch<Real>& batch, const AuxPlan& plan,
                                  const WindowOptions& opt, ModelParams<Real>& grads, MemoryLedger& ledger) {
  if (!barriered(opt.mode))
    throw Error("streaming backward needs mode gr-hrnn or ours, got " + to_string(opt.mode));
  if (!batch.schedule.shared()) throw Error("streaming: rows must share one tick schedule");
  const auto L = params.levels.size();
  if (opt.beta.size() + 1 != L) throw Error("streaming: need one beta per non-top level");
  const auto S = batch.length();
  const auto B = batch.rows();
  const auto& sched = batch.schedule.row(0);
  using K = MemoryLedger::Kind;

  std::vector<std::unique_ptr<detail::SegmentRun<Real>>> run(L);
  std::vector<std::optional<Tensor<Real>>> last_h(L);
  WindowLoss res;
  res.aux.assign(L - 1, 0.0);

  auto open = [&](std::size_t j, std::size_t t) {
    auto r = std::make_unique<detail::SegmentRun<Real>>(opt.check_finite);
    r->binder = std::make_unique<ParamBinder<Real>>(r->tape);
    r->lstm = r->binder->lstm(params.levels[j], &grads.levels[j]);
    if (j == 0) r->head = r->binder->head(params.head, &grads.head);
    r->start = t;
    if (j + 1 < L) {
      const auto& sup = *run[j + 1];
      r->injected = r->tape.leaf(sup.tape.value(*sup.state.h));
    }
    run[j] = std::move(r);
  };

  // Differentiates level j's finished segment and frees it.
  auto complete = [&](std::size_t j, std::size_t t, bool with_aux) {
    auto& r = *run[j];
    std::vector<Seed<Real>> seeds;
    for (auto l : r.task_losses) {
      res.task += detail::scalar_value(r.tape, l);
      seeds.push_back({l, Tensor<Real>::scalar(Real(1))});
    }
    if (with_aux && j + 1 < L && t < S && !plan.at(j, t).empty()) {
      DecoderVars dec = r.binder->decoder(params.decoders[j], &grads.decoders[j]);
      Var l = detail::aux_loss(r.tape, dec, *r.state.h, batch, plan.at(j, t), j, plan.count[j],
                               [&](std::size_t s) -> const Tensor<Real>& {
                                 auto it = r.inputs.find(s);
                                 if (it == r.inputs.end())
                                   throw Error("streaming: decoder target outside the live segment");
                                 return it->second;
                               });
      res.aux[j] += detail::scalar_value(r.tape, l);
      if (opt.beta[j] > 0) seeds.push_back({l, Tensor<Real>::scalar(static_cast<Real>(opt.beta[j]))});
    }
    for (auto& s : r.stored) seeds.push_back(std::move(s));
    r.tape.backward(std::span<const Seed<Real>>(seeds));
    r.binder->harvest();
    if (r.injected) {
      auto& sup = *run[j + 1];
      sup.stored.push_back({sup.h_at.at(r.start), r.tape.grad(*r.injected)});
      ledger.retain(t, j + 1, K::stored_grad);
    }
    ledger.release(t, j, K::state, ledger.held(j, K::state));
    ledger.release(t, j, K::stored_grad, ledger.held(j, K::stored_grad));
    run[j].reset();
  };

  for (std::size_t t = 0; t < S; ++t) {
    std::size_t top = 0;
    while (top + 1 < L && sched.ticks(top + 1, t)) ++top;
    if (t > 0)
      for (std::size_t j = 0; j < top; ++j) complete(j, t, true);

    for (std::size_t jj = top + 1; jj-- > 0;) {
      if (!run[jj]) open(jj, t);
      auto& r = *run[jj];
      auto& tape = r.tape;
      std::optional<Var> up;
      if (jj == 0) {
        up = tape.constant(batch.inputs[t]);
      } else {
        Tensor<Real> v = last_h[jj - 1] ? *last_h[jj - 1]
                                        : Tensor<Real>::zeros(Shape{B, params.levels[jj - 1].hidden()});
        if (jj + 1 < L) r.inputs[t] = v;
        if (last_h[jj - 1]) up = tape.constant(std::move(v));
      }
      std::vector<std::optional<Var>> inputs{up};
      if (jj + 1 < L) inputs.push_back(r.state.h ? std::nullopt : r.injected);
      if (!inputs[0] && !r.state.h && !(inputs.size() > 1 && inputs[1]))
        inputs[0] = tape.constant(Tensor<Real>::zeros(
            Shape{B, jj == 0 ? batch.inputs[t].cols() : params.levels[jj - 1].hidden()}));
      r.state = lstm_step(tape, r.lstm, r.state, std::span<const std::optional<Var>>(inputs));
      r.h_at[t] = *r.state.h;
      last_h[jj] = tape.value(*r.state.h);
      ledger.retain(t, jj, K::state);
      if (jj == 0) {
        const auto& w = batch.weights[t];
        if (std::any_of(w.begin(), w.end(), [](Real v) { return v != Real(0); })) {
          Var logits = head_logits(tape, r.head, *r.state.h);
          r.task_losses.push_back(tape.softmax_cross_entropy(logits, batch.targets[t], w));
        }
      }
    }
  }
  for (std::size_t j = 0; j < L; ++j) complete(j, S, false);
  return res;
}

// -- one optimizer step's gradient -----------------------------------------------

template <class Real>
struct StepResult {
  ModelParams<Real> grads;
  LossReport loss;
  MemoryLedger ledger;  // streaming only: peaks over row groups
};

struct StepOptions {
  Mode mode = Mode::ours;
  Backward backward = Backward::oracle;
  std::vector<double> beta;
  std::size_t unroll = 0;  // T before any mode-specific shortening
  std::vector<std::size_t> k;  // fixed tick ratios (mr-hrnn unroll rule)
  bool check_finite = true;
  bool barrier_passthrough = false;
};

inline std::size_t window_length(const StepOptions& o, std::size_t levels) {
  if (o.mode != Mode::mr_hrnn) return o.unroll;
  HrnnConfig c;
  c.sizes.assign(levels, 1);
  c.k = o.k;
  c.mode = o.mode;
  c.unroll = o.unroll;
  return c.effective_unroll();
}

inline std::vector<std::size_t> window_starts(std::size_t length, std::size_t window) {
  if (window == 0) throw Error("truncation length must be positive");
  std::vector<std::size_t> s;
  for (std::size_t w = 0; w < length; w += window) s.push_back(w);
  return s;
}

/// Gradient of the combined loss for one batch, summed over truncation
/// windows (sequences longer than the unroll are split; state is carried
/// forward as constants).
template <class Real>
StepResult<Real> train_step(const ModelParams<Real>& params, const Batch<Real>& batch, const StepOptions& o) {
  batch.validate();
  const auto L = params.levels.size();
  if (L < 2) throw Error("training needs at least two levels");
  if (o.beta.size() + 1 != L) throw Error("beta: expected " + std::to_string(L - 1) + " values");
  const auto S = batch.length();
  const auto T = window_length(o, L);
  const auto starts = window_starts(S, T);
  std::vector<std::size_t> kmax;
  for (const auto& d : params.decoders) kmax.push_back(d.k_max);
  AuxPlan plan = make_aux_plan(batch.schedule, batch.row_ids, batch.aux_seed, S, kmax, starts);

  StepResult<Real> out{params.zeros_like(), {}, {}};
  WindowOptions wo{o.mode, o.beta, o.check_finite, o.barrier_passthrough};
  WindowLoss total;
  total.aux.assign(L - 1, 0.0);
  auto add = [&](const WindowLoss& w) {
    total.task += w.task;
    for (std::size_t j = 0; j + 1 < L; ++j) total.aux[j] += w.aux[j];
  };

  if (o.backward == Backward::oracle) {
    Carry<Real> carry = Carry<Real>::zeros(L);
    for (auto w : starts) add(train_window_oracle(params, batch, plan, w, std::min(S, w + T), wo, carry, out.grads));
  } else {
    if (o.barrier_passthrough) throw Error("streaming backward has no barrier pass-through");
    if (starts.size() != 1)
      throw Error("streaming backward handles sequences up to the unroll length (" + std::to_string(S) + " > " +
                  std::to_string(T) + ")");
    std::vector<std::size_t> sizes;
    for (const auto& l : params.levels) sizes.push_back(l.hidden());
    out.ledger = MemoryLedger(sizes);
    for (const auto& group : batch.schedule.identical_groups()) {
      Batch<Real> sub = group.size() == batch.rows() ? batch : batch.select_rows(group);
      AuxPlan sp = make_aux_plan(sub.schedule, sub.row_ids, sub.aux_seed, S, kmax, starts);
      sp.count = plan.count;
      MemoryLedger ledger(sizes);
      add(train_window_streaming(params, sub, sp, wo, out.grads, ledger));
      out.ledger.merge_peaks(ledger);
    }
  }
  out.loss = LossReport::make(total.task, total.aux, o.beta);
  return out;
}

// -- training loop -----------------------------------------------------------------

struct TrainOptions {
  StepOptions step;
  AdamConfig adam;
  std::size_t steps = 0;
  std::size_t eval_every = 0;  // 0: never
  /// Stop after this many consecutive evaluations report "done" (0: never).
  std::size_t stop_after = 0;
};

/// One metrics record per optimizer step. `eval` fields are present on
/// evaluation steps.
struct StepRecord {
  std::size_t step = 0;
  LossReport loss;
  std::size_t ledger_peak = 0;
  double wall_time = 0;
  std::vector<std::pair<std::string, double>> eval;
};

template <class Real>
struct EvalResult {
  std::vector<std::pair<std::string, double>> metrics;
  bool done = false;
};

/// Sample → gradient → one Adam update, `opt.steps` times. The sampler must be
/// a pure function of the step index for the run to be reproducible.
template <class Real>
void run_training(ModelParams<Real>& params, AdamState<Real>& adam, const TrainOptions& opt,
                  const std::function<Batch<Real>(std::size_t)>& sample,
                  const std::function<EvalResult<Real>(std::size_t, const ModelParams<Real>&)>& evaluate,
                  const std::function<void(const StepRecord&)>& on_record) {
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t done_streak = 0;
  for (std::size_t step = static_cast<std::size_t>(adam.t); step < opt.steps; ++step) {
    Batch<Real> batch = sample(step);
    auto res = train_step(params, batch, opt.step);
    if (!std::isfinite(res.loss.combined))
      throw Error("training diverged at step " + std::to_string(step) + ": combined loss is not finite");
    adam_step(adam, params, res.grads);
    StepRecord rec;
    rec.step = step;
    rec.loss = res.loss;
    rec.ledger_peak = res.ledger.peak_units();
    const bool last = step + 1 == opt.steps;
    bool stop = false;
    if (evaluate && opt.eval_every && ((step + 1) % opt.eval_every == 0 || last)) {
      auto ev = evaluate(step, params);
      rec.eval = std::move(ev.metrics);
      done_streak = ev.done ? done_streak + 1 : 0;
      stop = opt.stop_after && done_streak >= opt.stop_after;
    }
    rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (on_record) on_record(rec);
    if (stop) break;
  }
}

}  // namespace hrnn
