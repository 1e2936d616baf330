#pragma once

// Experiment configuration as a flat key=value file.
//
// Lines are `key = value`; `#` starts a comment. Lists are comma-separated.
// Unknown keys and malformed values are errors. Serialization writes every
// key in the order of `config_keys()`.

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "hrnn/hierarchy.hpp"
#include "hrnn/training.hpp"

namespace hrnn {

enum class TaskKind { copy, mnist, mnist_permuted, ptb_char };

inline std::string to_string(TaskKind t) {
  switch (t) {
    case TaskKind::copy: return "copy";
    case TaskKind::mnist: return "mnist";
    case TaskKind::mnist_permuted: return "mnist-permuted";
    case TaskKind::ptb_char: return "ptb-char";
  }
  return "?";
}

inline TaskKind parse_task(const std::string& s) {
  if (s == "copy") return TaskKind::copy;
  if (s == "mnist") return TaskKind::mnist;
  if (s == "mnist-permuted") return TaskKind::mnist_permuted;
  if (s == "ptb-char") return TaskKind::ptb_char;
  throw Error("task: unknown value '" + s + "' (expected copy, mnist, mnist-permuted or ptb-char)");
}

struct ExperimentConfig {
  TaskKind task = TaskKind::copy;
  Mode mode = Mode::ours;
  Backward backward = Backward::streaming;
  std::size_t levels = 2;
  std::vector<std::size_t> sizes{64, 128};
  std::vector<std::size_t> k{6};  // ignored by ptb-char (word boundaries)
  std::size_t T = 60;
  std::vector<double> beta{1.0};
  std::size_t decoder_hidden = 256;

  double lr = 1e-3, adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
  std::size_t batch = 50;
  std::size_t steps = 20000;
  std::uint64_t seed_init = 1, seed_data = 2, seed_eval = 3;
  std::string precision = "fp32";
  bool check_finite = true;

  std::size_t eval_every = 500;
  std::size_t eval_batch = 100;
  std::size_t stop_after = 0;

  std::size_t copy_len = 24;
  std::size_t copy_min_len = 1;
  double lmax_threshold = 0.15;
  std::size_t lmax_cap = 100;

  std::size_t mnist_side = 28;
  std::size_t mnist_train = 0;  // 0: all
  std::size_t mnist_test = 0;
  std::uint64_t mnist_perm_seed = 7;

  std::size_t ptb_train_bytes = 1000000;
  std::size_t ptb_eval_chars = 100000;
  std::size_t ptb_eval_T = 100;

  std::string out_dir = "runs/default";

  void validate() const {
    if (levels < 2) throw Error("levels: need at least 2");
    if (sizes.size() != levels) throw Error("sizes: expected " + std::to_string(levels) + " values");
    if (task != TaskKind::ptb_char && k.size() + 1 != levels)
      throw Error("k: expected " + std::to_string(levels - 1) + " values");
    for (auto v : k)
      if (v == 0) throw Error("k: values must be positive");
    for (auto v : sizes)
      if (v == 0) throw Error("sizes: values must be positive");
    if (beta.size() + 1 != levels) throw Error("beta: expected " + std::to_string(levels - 1) + " values");
    for (auto b : beta)
      if (!(b >= 0)) throw Error("beta: values must be non-negative");
    if (T == 0) throw Error("T: must be positive");
    if (batch == 0) throw Error("batch: must be positive");
    if (precision != "fp32" && precision != "fp64") throw Error("precision: expected fp32 or fp64");
    if (backward == Backward::streaming && !barriered(mode))
      throw Error("backward: streaming requires mode gr-hrnn or ours (got " + to_string(mode) + ")");
    if (mode == Mode::mr_hrnn && (levels != 2 || task == TaskKind::ptb_char))
      throw Error("mode: mr-hrnn needs a two-level fixed-k hierarchy");
    if (task == TaskKind::ptb_char && levels != 2) throw Error("levels: ptb-char uses two levels");
    if (task == TaskKind::copy) {
      if (copy_min_len == 0 || copy_min_len > copy_len) throw Error("copy_min_len: must be in [1, copy_len]");
    }
    if (task == TaskKind::mnist || task == TaskKind::mnist_permuted) {
      if (mnist_side == 0 || mnist_side > 28) throw Error("mnist_side: must be in [1, 28]");
    }
    if (decoder_hidden == 0) throw Error("decoder_hidden: must be positive");
  }

  /// Unroll actually used, after the mr-hrnn shortening rule.
  std::size_t effective_T() const {
    if (mode != Mode::mr_hrnn) return T;
    HrnnConfig c{sizes, k, beta, mode, T};
    return c.effective_unroll();
  }
};

namespace detail {

template <class T>
T parse_number(const std::string& key, const std::string& s) {
  if constexpr (std::is_floating_point_v<T>) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size()) throw Error(key + ": '" + s + "' is not a number");
    return static_cast<T>(v);
  } else {
    T v{};
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size())
      throw Error(key + ": '" + s + "' is not a non-negative integer");
    return v;
  }
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::stringstream ss(s);
  while (std::getline(ss, cur, ',')) out.push_back(trim(cur));
  return out;
}

inline std::string fmt_double(double v) {
  char buf[40];
  for (int p = 1; p <= 17; ++p) {
    std::snprintf(buf, sizeof buf, "%.*g", p, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    if constexpr (std::is_floating_point_v<T>)
      s += fmt_double(v[i]);
    else
      s += std::to_string(v[i]);
  }
  return s;
}

struct KeySpec {
  std::string name;
  std::string doc;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

template <class T>
KeySpec number_key(std::string name, std::string doc, T ExperimentConfig::*field) {
  return {name, std::move(doc),
          [field](const ExperimentConfig& c) {
            if constexpr (std::is_floating_point_v<T>)
              return fmt_double(c.*field);
            else
              return std::to_string(c.*field);
          },
          [field, name](ExperimentConfig& c, const std::string& s) { c.*field = parse_number<T>(name, s); }};
}

template <class T>
KeySpec list_key(std::string name, std::string doc, std::vector<T> ExperimentConfig::*field) {
  return {name, std::move(doc), [field](const ExperimentConfig& c) { return join(c.*field); },
          [field, name](ExperimentConfig& c, const std::string& s) {
            std::vector<T> v;
            if (!trim(s).empty())
              for (const auto& part : split_list(s)) v.push_back(parse_number<T>(name, part));
            c.*field = std::move(v);
          }};
}

}  // namespace detail

/// Every documented key, in serialization order.
inline const std::vector<detail::KeySpec>& config_keys() {
  using namespace detail;
  using C = ExperimentConfig;
  static const std::vector<KeySpec> keys = {
      {"task", "copy | mnist | mnist-permuted | ptb-char", [](const C& c) { return to_string(c.task); },
       [](C& c, const std::string& s) { c.task = parse_task(s); }},
      {"mode", "hrnn | gr-hrnn | ours | mr-hrnn", [](const C& c) { return to_string(c.mode); },
       [](C& c, const std::string& s) { c.mode = parse_mode(s); }},
      {"backward", "oracle | streaming", [](const C& c) { return to_string(c.backward); },
       [](C& c, const std::string& s) { c.backward = parse_backward(s); }},
      number_key("levels", "number of hierarchy levels", &C::levels),
      list_key("sizes", "hidden units per level, lowest first", &C::sizes),
      list_key("k", "tick ratio between consecutive levels (unused by ptb-char)", &C::k),
      number_key("T", "truncation length (mr-hrnn shortens it to 2T/k + k)", &C::T),
      list_key("beta", "auxiliary loss weight per non-top level", &C::beta),
      number_key("decoder_hidden", "decoder hidden units", &C::decoder_hidden),
      number_key("lr", "Adam learning rate", &C::lr),
      number_key("adam_beta1", "Adam first-moment decay", &C::adam_beta1),
      number_key("adam_beta2", "Adam second-moment decay", &C::adam_beta2),
      number_key("adam_eps", "Adam epsilon", &C::adam_eps),
      number_key("batch", "sequences per optimizer step", &C::batch),
      number_key("steps", "optimizer steps", &C::steps),
      number_key("seed_init", "parameter initialization seed", &C::seed_init),
      number_key("seed_data", "training data seed", &C::seed_data),
      number_key("seed_eval", "evaluation data seed", &C::seed_eval),
      {"precision", "fp32 | fp64", [](const C& c) { return c.precision; },
       [](C& c, const std::string& s) { c.precision = s; }},
      {"check_finite", "true | false: raise on NaN/Inf in any op",
       [](const C& c) { return std::string(c.check_finite ? "true" : "false"); },
       [](C& c, const std::string& s) {
         if (s != "true" && s != "false") throw Error("check_finite: expected true or false");
         c.check_finite = s == "true";
       }},
      number_key("eval_every", "steps between evaluations (0: only at the end)", &C::eval_every),
      number_key("eval_batch", "rows per evaluation batch", &C::eval_batch),
      number_key("stop_after", "stop after this many consecutive passing evaluations (0: never)", &C::stop_after),
      number_key("copy_len", "copy task: longest training length n (sequences are 2n long)", &C::copy_len),
      number_key("copy_min_len", "copy task: shortest training length", &C::copy_min_len),
      number_key("lmax_threshold", "copy task: bits/char below which a length counts as solved",
                 &C::lmax_threshold),
      number_key("lmax_cap", "copy task: longest length tried by the L_max search", &C::lmax_cap),
      number_key("mnist_side", "pixel tasks: images are mean-pooled to side x side (28: unchanged)",
                 &C::mnist_side),
      number_key("mnist_train", "pixel tasks: training images used (0: all)", &C::mnist_train),
      number_key("mnist_test", "pixel tasks: test images used (0: all)", &C::mnist_test),
      number_key("mnist_perm_seed", "mnist-permuted: seed of the fixed pixel permutation", &C::mnist_perm_seed),
      number_key("ptb_train_bytes", "ptb-char: training prefix in bytes (0: whole split)", &C::ptb_train_bytes),
      number_key("ptb_eval_chars", "ptb-char: validation characters scored (0: all)", &C::ptb_eval_chars),
      number_key("ptb_eval_T", "ptb-char: evaluation window length", &C::ptb_eval_T),
      {"out_dir", "output directory for metrics, checkpoint and resolved config",
       [](const C& c) { return c.out_dir; }, [](C& c, const std::string& s) { c.out_dir = s; }},
  };
  return keys;
}

inline const detail::KeySpec& config_key(const std::string& name) {
  for (const auto& k : config_keys())
    if (k.name == name) return k;
  throw Error("unknown config key '" + name + "'");
}

inline void set_config_value(ExperimentConfig& c, const std::string& key, const std::string& value) {
  config_key(key).set(c, detail::trim(value));
}

/// Applies `key = value` lines on top of `base`.
inline ExperimentConfig parse_config(const std::string& text, ExperimentConfig base = {}) {
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error("config line " + std::to_string(lineno) + ": expected key = value");
    const auto key = detail::trim(line.substr(0, eq));
    try {
      set_config_value(base, key, line.substr(eq + 1));
    } catch (const Error& e) {
      throw Error("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

inline std::string serialize_config(const ExperimentConfig& c) {
  std::string s;
  for (const auto& k : config_keys()) s += k.name + " = " + k.get(c) + "\n";
  return s;
}

}  // namespace hrnn
