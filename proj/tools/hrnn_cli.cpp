// hrnn_cli: train, verify and inspect hierarchical RNN experiments.
//
//   hrnn_cli train      --config FILE [--KEY VALUE ...]
//   hrnn_cli gradcheck  [--config FILE] [--KEY VALUE ...]
//   hrnn_cli memcheck   --l L --k K --T T
//   hrnn_cli lmax       --checkpoint FILE [--config FILE] [--KEY VALUE ...]
//   hrnn_cli eval       --checkpoint FILE [--config FILE] [--KEY VALUE ...]
//   hrnn_cli export-csv --log FILE [--out FILE]
//
// Every config key is also a flag of the same name; flags override the file.
// Exit status: 0 success, 1 a check failed, 2 bad usage or input.

#include <cstdio>
#include <iostream>
#include <map>

#include "CLI11.hpp"

#include "hrnn/experiment.hpp"
#include "hrnn/verify.hpp"

using namespace hrnn;

namespace {

struct ConfigArgs {
  std::string path;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> opts;

  void attach(CLI::App* app, bool config_required) {
    auto* c = app->add_option("--config", path, "key = value config file");
    if (config_required) c->required()->check(CLI::ExistingFile);
    for (const auto& k : config_keys()) opts[k.name] = app->add_option("--" + k.name, values[k.name], k.doc);
  }

  ExperimentConfig resolve(ExperimentConfig base) const {
    if (!path.empty()) {
      std::ifstream in(path);
      if (!in) throw Error("cannot open config " + path);
      std::stringstream ss;
      ss << in.rdbuf();
      base = parse_config(ss.str(), base);
    }
    for (const auto& [name, opt] : opts)
      if (opt->count()) {
        try {
          set_config_value(base, name, values.at(name));
        } catch (const Error& e) {
          throw Error(std::string("--") + e.what());
        }
      }
    return base;
  }
};

int cmd_train(const ConfigArgs& args) {
  auto cfg = args.resolve({});
  cfg.validate();
  const auto summary = run_experiment_any(cfg);
  std::cout << "wrote " << cfg.out_dir << "/metrics.jsonl, checkpoint.bin, config.txt\n";
  for (const auto& [k, v] : summary.final_eval) std::cout << k << " = " << v << "\n";
  return 0;
}

/// Small problem used when gradcheck runs without a config file.
ExperimentConfig gradcheck_defaults() {
  ExperimentConfig c;
  c.sizes = {8, 8};
  c.k = {4};
  c.T = 24;
  c.beta = {1.0};
  c.precision = "fp64";
  return c;
}

template <class Real>
double equivalence_error(const CaseSpec& c) {
  return compare_backends<Real>(c).grad_rel;
}

int cmd_gradcheck(const ConfigArgs& args) {
  auto cfg = args.resolve(gradcheck_defaults());
  if (!barriered(cfg.mode)) {
    std::cerr << "gradcheck: mode " << to_string(cfg.mode)
              << " has no streaming counterpart; use gr-hrnn or ours\n";
    return 2;
  }
  if (cfg.T > 60) {
    std::cerr << "gradcheck: T = " << cfg.T << " is too large (limit 60)\n";
    return 2;
  }
  cfg.backward = Backward::streaming;
  cfg.task = TaskKind::copy;
  cfg.copy_len = std::min(cfg.copy_len, cfg.T / 2);
  cfg.copy_min_len = std::min(cfg.copy_min_len, cfg.copy_len);
  cfg.validate();

  CaseSpec c;
  c.sizes = cfg.sizes;
  c.k = cfg.k;
  c.steps = cfg.T;
  c.rows = std::min<std::size_t>(cfg.batch, 4);
  c.decoder_hidden = std::min<std::size_t>(cfg.decoder_hidden, 16);
  c.mode = cfg.mode;
  c.beta = cfg.beta;
  c.seed = cfg.seed_init;

  const bool fp64 = cfg.precision == "fp64";
  const double tol = fp64 ? 1e-9 : 1e-4;
  const double eq = fp64 ? equivalence_error<double>(c) : equivalence_error<float>(c);
  std::printf("config: %s\n", c.describe().c_str());
  std::printf("streaming vs oracle (%s): max rel err %.3g, tolerance %.0e%s\n", cfg.precision.c_str(), eq, tol,
              fp64 ? "" : " (relaxed for single precision)");

  // Finite differences need true derivatives: two levels, no barriers, fp64.
  CaseSpec fd = c;
  fd.sizes = {std::min<std::size_t>(c.sizes[0], 4), std::min<std::size_t>(c.sizes[1], 4)};
  fd.k = {c.k[0]};
  fd.beta = {c.beta[0] > 0 ? c.beta[0] : 1.0};
  fd.decoder_hidden = 5;
  fd.mode = Mode::hrnn;
  fd.steps = std::min<std::size_t>(c.steps, 16);
  if (fd.steps < fd.k[0]) fd.steps = fd.k[0];
  const double fd_tol = 1e-5;
  const auto g = finite_diff_step<double>(fd, 3e-4, 1e-6);
  std::printf("finite differences (fp64, hrnn, sizes %zu/%zu, T=%zu): max rel err %.3g, tolerance %.0e\n",
              fd.sizes[0], fd.sizes[1], fd.steps, g.max_rel_err, fd_tol);

  const bool ok = eq <= tol && g.max_rel_err <= fd_tol;
  std::printf("%s\n", ok ? "PASS" : "FAIL");
  return ok ? 0 : 1;
}

int cmd_memcheck(std::size_t l, std::size_t k, std::size_t T) {
  const auto r = memcheck(l, k, T);
  std::printf("levels=%zu k=%zu T=%zu\n", l, k, T);
  std::printf("ledger peak      %zu vectors\n", r.peak);
  std::printf("memory_formula   %zu vectors (ceil convention)\n", r.formula);
  std::printf("full TBPTT       %zu vectors (every state of every level)\n", r.full);
  std::printf("%s\n", r.within() ? "PASS: peak within bound" : "FAIL: peak exceeds bound");
  return r.within() ? 0 : 1;
}

ExperimentConfig checkpoint_config_with(const ConfigArgs& args, const std::string& checkpoint) {
  auto base = parse_config(checkpoint_config(checkpoint));
  return args.resolve(base);
}

template <class Real>
int lmax_impl(const ExperimentConfig& cfg, const std::string& checkpoint) {
  auto [e, params] = restore<Real>(checkpoint, cfg);
  const auto L = l_max_search([&](std::size_t n) { return e.copy_bits_at(params, n); }, cfg.lmax_threshold,
                              cfg.lmax_cap);
  std::printf("L_max = %zu\n", L);
  return 0;
}

int cmd_lmax(const ConfigArgs& args, const std::string& checkpoint) {
  const auto stored = parse_config(checkpoint_config(checkpoint));
  const auto cfg = checkpoint_config_with(args, checkpoint);
  if (stored.task != TaskKind::copy || cfg.task != TaskKind::copy)
    throw Error("lmax: task mismatch, L_max is defined for the copy task (checkpoint task is " +
                to_string(stored.task) + ")");
  return cfg.precision == "fp64" ? lmax_impl<double>(cfg, checkpoint) : lmax_impl<float>(cfg, checkpoint);
}

template <class Real>
int eval_impl(const ExperimentConfig& cfg, const std::string& checkpoint) {
  auto [e, params] = restore<Real>(checkpoint, cfg);
  const auto r = e.evaluate(cfg.steps, params);
  ojson j;
  for (const auto& [k, v] : r.metrics) j[k] = v;
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_eval(const ConfigArgs& args, const std::string& checkpoint) {
  const auto cfg = checkpoint_config_with(args, checkpoint);
  return cfg.precision == "fp64" ? eval_impl<double>(cfg, checkpoint) : eval_impl<float>(cfg, checkpoint);
}

int cmd_export_csv(const std::string& log, const std::string& out) {
  const auto csv = metrics_to_csv(read_metrics_file(log));
  if (out.empty()) {
    std::cout << csv;
    return 0;
  }
  std::ofstream f(out, std::ios::trunc);
  if (!f) throw Error("cannot write " + out);
  f << csv;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical RNN training with restricted gradients"};
  app.require_subcommand(1);

  ConfigArgs train_args, grad_args, lmax_args, eval_args;
  auto* train = app.add_subcommand("train", "train a model; writes metrics.jsonl, checkpoint.bin, config.txt");
  train_args.attach(train, true);

  auto* grad = app.add_subcommand("gradcheck", "streaming vs oracle gradients and finite differences");
  grad_args.attach(grad, false);

  std::size_t mem_l = 2, mem_k = 10, mem_T = 200;
  auto* mem = app.add_subcommand("memcheck", "ledger peak of one streaming step vs the memory formula");
  mem->add_option("--l", mem_l, "levels")->check(CLI::Range(2, 16));
  mem->add_option("--k", mem_k, "tick ratio")->check(CLI::PositiveNumber);
  mem->add_option("--T", mem_T, "truncation length")->check(CLI::PositiveNumber);

  std::string lmax_ckpt, eval_ckpt;
  auto* lmax = app.add_subcommand("lmax", "longest copy length solved by a checkpoint");
  lmax->add_option("--checkpoint", lmax_ckpt)->required()->check(CLI::ExistingFile);
  lmax_args.attach(lmax, false);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint with its task's metric");
  eval->add_option("--checkpoint", eval_ckpt)->required()->check(CLI::ExistingFile);
  eval_args.attach(eval, false);

  std::string csv_log, csv_out;
  auto* csv = app.add_subcommand("export-csv", "convert a metrics log to CSV");
  csv->add_option("--log", csv_log)->required()->check(CLI::ExistingFile);
  csv->add_option("--out", csv_out, "output file (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train) return cmd_train(train_args);
    if (*grad) return cmd_gradcheck(grad_args);
    if (*mem) return cmd_memcheck(mem_l, mem_k, mem_T);
    if (*lmax) return cmd_lmax(lmax_args, lmax_ckpt);
    if (*eval) return cmd_eval(eval_args, eval_ckpt);
    if (*csv) return cmd_export_csv(csv_log, csv_out);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
