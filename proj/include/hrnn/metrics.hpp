#pragma once

// Metrics log: one JSON object per line, plus CSV export.

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hrnn/training.hpp"

namespace hrnn {

using ojson = nlohmann::ordered_json;

/// Columns every record carries, in this order.
inline const std::vector<std::string>& base_metric_columns() {
  static const std::vector<std::string> cols = {"step", "task_nats", "task_bits", "combined", "ledger_peak",
                                                "wall_time"};
  return cols;
}

inline ojson to_json(const StepRecord& r) {
  ojson j;
  j["step"] = r.step;
  j["task_nats"] = r.loss.task;
  j["task_bits"] = r.loss.task_bits();
  j["combined"] = r.loss.combined;
  j["ledger_peak"] = r.ledger_peak;
  j["wall_time"] = r.wall_time;
  for (std::size_t i = 0; i < r.loss.aux.size(); ++i) j["aux" + std::to_string(i)] = r.loss.aux[i];
  for (std::size_t i = 0; i < r.loss.beta.size(); ++i) j["beta" + std::to_string(i)] = r.loss.beta[i];
  for (const auto& [k, v] : r.eval) j["eval_" + k] = v;
  return j;
}

class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path) : out_(path, std::ios::trunc) {
    if (!out_) throw Error("cannot write metrics log " + path);
  }
  void write(const ojson& rec) {
    out_ << rec.dump() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

inline std::vector<ojson> read_metrics(std::istream& in) {
  std::vector<ojson> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ojson j;
    try {
      j = ojson::parse(line);
    } catch (const std::exception& e) {
      throw Error("metrics line " + std::to_string(lineno) + ": malformed record (" + e.what() + ")");
    }
    if (!j.is_object()) throw Error("metrics line " + std::to_string(lineno) + ": record is not an object");
    out.push_back(std::move(j));
  }
  return out;
}

inline std::vector<ojson> read_metrics_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open metrics log " + path);
  return read_metrics(in);
}

/// CSV with the base columns first and every other key in first-seen order.
/// Missing values are empty cells.
inline std::string metrics_to_csv(const std::vector<ojson>& records) {
  std::vector<std::string> cols = base_metric_columns();
  for (const auto& r : records)
    for (auto it = r.begin(); it != r.end(); ++it)
      if (std::find(cols.begin(), cols.end(), it.key()) == cols.end()) cols.push_back(it.key());
  std::ostringstream out;
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << '\n';
  for (const auto& r : records) {
    for (std::size_t i = 0; i < cols.size(); ++i) {
      if (i) out << ',';
      auto it = r.find(cols[i]);
      if (it == r.end() || it->is_null()) continue;
      if (it->is_string())
        out << it->get<std::string>();
      else
        out << it->dump();
    }
    out << '\n';
  }
  return out.str();
}

/// Records equal after dropping `ignore` keys (used for determinism checks:
/// wall_time is the only field expected to differ between reruns).
inline bool same_metrics(const std::vector<ojson>& a, const std::vector<ojson>& b,
                         const std::vector<std::string>& ignore = {"wall_time"}) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ojson x = a[i], y = b[i];
    for (const auto& k : ignore) {
      x.erase(k);
      y.erase(k);
    }
    if (x != y) return false;
  }
  return true;
}

}  // namespace hrnn
