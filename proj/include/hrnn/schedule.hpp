#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "hrnn/tensor.hpp"

namespace hrnn {

/// For each level, the steps at which it updates. Level 0 ticks every step.
///
/// Fixed mode: level j ticks when t is a multiple of k_0·…·k_{j−1}.
/// Boundary mode: explicit tick lists for a sequence of known length.
/// Either way, tick sets are nested and every level ticks at t = 0.
class TickSchedule {
 public:
  enum class Kind { fixed, boundary };

  TickSchedule() = default;

  static TickSchedule fixed(std::vector<std::size_t> k) {
    TickSchedule s;
    s.kind_ = Kind::fixed;
    for (auto kj : k) {
      if (kj == 0) throw Error("tick period k must be positive");
      s.periods_.push_back(s.periods_.back() * kj);
    }
    s.k_ = std::move(k);
    s.k_max_ = s.k_;
    return s;
  }

  /// `upper[j]` lists the tick steps of level j+1, sorted ascending.
  static TickSchedule from_ticks(std::size_t length, std::vector<std::vector<std::size_t>> upper) {
    if (length == 0) throw Error("tick schedule over an empty sequence");
    TickSchedule s;
    s.kind_ = Kind::boundary;
    s.length_ = length;
    const auto levels = upper.size() + 1;
    s.flags_.assign(levels, std::vector<std::uint8_t>(length, 0));
    std::fill(s.flags_[0].begin(), s.flags_[0].end(), 1);
    for (std::size_t j = 1; j < levels; ++j) {
      const auto& ticks = upper[j - 1];
      if (ticks.empty() || ticks.front() != 0) throw Error("every level must tick at t = 0");
      for (std::size_t i = 0; i < ticks.size(); ++i) {
        if (ticks[i] >= length) throw Error("tick step beyond sequence length");
        if (i && ticks[i] <= ticks[i - 1]) throw Error("tick steps must be strictly increasing");
        if (!s.flags_[j - 1][ticks[i]])
          throw Error("tick of level " + std::to_string(j) + " at t=" + std::to_string(ticks[i]) +
                      " is not a tick of level " + std::to_string(j - 1));
        s.flags_[j][ticks[i]] = 1;
      }
    }
    for (std::size_t j = 0; j + 1 < levels; ++j) {
      std::size_t best = 0, run = 0;
      for (std::size_t t = 0; t < length; ++t) {
        if (s.flags_[j + 1][t]) run = 0;
        if (s.flags_[j][t]) best = std::max(best, ++run);
      }
      s.k_max_.push_back(best);
    }
    return s;
  }

  Kind kind() const { return kind_; }
  std::size_t levels() const { return kind_ == Kind::fixed ? periods_.size() : flags_.size(); }
  const std::vector<std::size_t>& k() const { return k_; }
  std::optional<std::size_t> length() const {
    return kind_ == Kind::boundary ? std::optional<std::size_t>(length_) : std::nullopt;
  }

  bool ticks(std::size_t level, std::size_t t) const {
    if (level >= levels()) throw Error("tick query for level " + std::to_string(level));
    if (kind_ == Kind::fixed) return t % periods_[level] == 0;
    if (t >= length_)
      throw Error("step " + std::to_string(t) + " outside boundary schedule of length " +
                  std::to_string(length_));
    return flags_[level][t] != 0;
  }

  /// Longest run of level-j ticks between consecutive level-(j+1) ticks.
  std::size_t k_max(std::size_t level) const { return k_max_.at(level); }

  std::vector<std::size_t> tick_steps(std::size_t level, std::size_t begin, std::size_t end) const {
    std::vector<std::size_t> out;
    for (std::size_t t = begin; t < end; ++t)
      if (ticks(level, t)) out.push_back(t);
    return out;
  }

  bool operator==(const TickSchedule& o) const {
    return kind_ == o.kind_ && periods_ == o.periods_ && length_ == o.length_ && flags_ == o.flags_;
  }

 private:
  Kind kind_ = Kind::fixed;
  std::vector<std::size_t> k_, periods_{1}, k_max_;
  std::size_t length_ = 0;
  std::vector<std::vector<std::uint8_t>> flags_;
};

/// Two-level schedule from per-step "segment ends here" flags: the upper level
/// ticks at t = 0 and on the step after every flagged step.
inline TickSchedule make_boundary_schedule(const std::vector<bool>& segment_end, std::size_t levels = 2) {
  if (segment_end.empty()) throw Error("boundary schedule from an empty sequence");
  if (levels != 2) throw Error("boundary schedules are two-level");
  std::vector<std::size_t> ticks{0};
  for (std::size_t p = 0; p + 1 < segment_end.size(); ++p)
    if (segment_end[p]) ticks.push_back(p + 1);
  return TickSchedule::from_ticks(segment_end.size(), {ticks});
}

/// Tick state of one level at one step across a batch.
struct TickMask {
  enum class Kind { none, all, partial } kind = Kind::none;
  std::vector<std::uint8_t> rows;  // only for partial

  bool any() const { return kind != Kind::none; }
  bool row(std::size_t b) const { return kind == Kind::all || (kind == Kind::partial && rows[b]); }
};

/// Schedules for a batch: one shared schedule, or one per row.
class BatchSchedule {
 public:
  BatchSchedule() = default;
  BatchSchedule(TickSchedule shared, std::size_t rows) : rows_(rows), schedules_{std::move(shared)} {}
  explicit BatchSchedule(std::vector<TickSchedule> per_row)
      : rows_(per_row.size()), schedules_(std::move(per_row)) {
    if (schedules_.empty()) throw Error("batch schedule without rows");
    for (const auto& s : schedules_)
      if (s.levels() != schedules_[0].levels()) throw Error("batch schedules disagree on levels");
  }

  std::size_t rows() const { return rows_; }
  std::size_t levels() const { return schedules_.at(0).levels(); }
  bool shared() const { return schedules_.size() == 1; }
  const TickSchedule& row(std::size_t b) const { return shared() ? schedules_[0] : schedules_.at(b); }

  TickMask mask(std::size_t level, std::size_t t) const {
    TickMask m;
    if (shared()) {
      m.kind = schedules_[0].ticks(level, t) ? TickMask::Kind::all : TickMask::Kind::none;
      return m;
    }
    m.rows.resize(rows_);
    std::size_t n = 0;
    for (std::size_t b = 0; b < rows_; ++b) n += (m.rows[b] = schedules_[b].ticks(level, t) ? 1 : 0);
    m.kind = n == 0 ? TickMask::Kind::none : n == rows_ ? TickMask::Kind::all : TickMask::Kind::partial;
    if (m.kind != TickMask::Kind::partial) m.rows.clear();
    return m;
  }

  /// One-hot width for level-j decoders: max over rows.
  std::size_t k_max(std::size_t level) const {
    std::size_t k = 0;
    for (const auto& s : schedules_) k = std::max(k, s.k_max(level));
    return k;
  }

  BatchSchedule select(const std::vector<std::size_t>& rows) const {
    if (shared()) return BatchSchedule(schedules_[0], rows.size());
    std::vector<TickSchedule> out;
    for (auto r : rows) out.push_back(schedules_.at(r));
    if (std::all_of(out.begin(), out.end(), [&](const TickSchedule& s) { return s == out[0]; }))
      return BatchSchedule(out[0], rows.size());
    return BatchSchedule(std::move(out));
  }

  /// Groups of rows that share an identical schedule, in first-row order.
  std::vector<std::vector<std::size_t>> identical_groups() const {
    std::vector<std::vector<std::size_t>> groups;
    if (shared()) {
      groups.emplace_back(rows_);
      for (std::size_t b = 0; b < rows_; ++b) groups[0][b] = b;
      return groups;
    }
    std::vector<std::size_t> reps;
    for (std::size_t b = 0; b < rows_; ++b) {
      auto it = std::find_if(reps.begin(), reps.end(),
                             [&](std::size_t r) { return schedules_[r] == schedules_[b]; });
      if (it == reps.end()) {
        reps.push_back(b);
        groups.push_back({b});
      } else {
        groups[static_cast<std::size_t>(it - reps.begin())].push_back(b);
      }
    }
    return groups;
  }

 private:
  std::size_t rows_ = 0;
  std::vector<TickSchedule> schedules_;
};

}  // namespace hrnn
