#include <gtest/gtest.h>
#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>

#include "hrnn/experiment.hpp"

using namespace hrnn;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + HRNN_CLI_PATH + " " + args + " 2>&1";
  Run r;
  FILE* p = ::popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), p)) r.out += buf.data();
  const int st = ::pclose(p);
  r.code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

bool contains(const std::string& s, const std::string& part) { return s.find(part) != std::string::npos; }

fs::path scratch(const std::string& name) {
  auto d = fs::temp_directory_path() / ("hrnn_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

ExperimentConfig tiny_copy(const fs::path& out) {
  ExperimentConfig c;
  c.task = TaskKind::copy;
  c.mode = Mode::ours;
  c.backward = Backward::streaming;
  c.sizes = {8, 8};
  c.k = {3};
  c.beta = {1.0};
  c.T = 12;
  c.decoder_hidden = 8;
  c.batch = 4;
  c.steps = 6;
  c.eval_every = 3;
  c.eval_batch = 16;
  c.copy_len = 4;
  c.lmax_cap = 6;
  c.precision = "fp64";
  c.out_dir = out.string();
  return c;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::trunc);
  out << s;
}

}  // namespace

TEST(Config, RoundTripOnEveryKey) {
  ExperimentConfig c = tiny_copy("x");
  c.lr = 0.1 + 0.2;  // not exactly representable in short decimal
  c.beta = {0.1};
  c.check_finite = false;
  const auto text = serialize_config(c);
  const auto back = parse_config(text);
  EXPECT_EQ(serialize_config(back), text);
  EXPECT_EQ(back.lr, c.lr);
  for (const auto& k : config_keys()) EXPECT_TRUE(contains(text, k.name + " = ")) << k.name;
}

TEST(Config, UnknownKeysAndBadValuesAreErrors) {
  try {
    parse_config("mode = ours\nsizez = 4,4\n");
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_TRUE(contains(e.what(), "sizez")) << e.what();
    EXPECT_TRUE(contains(e.what(), "line 2")) << e.what();
  }
  EXPECT_THROW(parse_config("mode = fast\n"), Error);
  EXPECT_THROW(parse_config("T = -3\n"), Error);
  EXPECT_THROW(parse_config("just words\n"), Error);
  EXPECT_NO_THROW(parse_config("# comment\n\n  T = 30  \n"));
}

TEST(Metrics, CsvFromFixtureLog) {
  std::istringstream log(
      "{\"step\":0,\"task_nats\":1.0,\"task_bits\":1.4,\"combined\":1.2,\"ledger_peak\":26,\"wall_time\":0.1,"
      "\"aux0\":0.5}\n"
      "{\"step\":1,\"task_nats\":0.9,\"task_bits\":1.3,\"combined\":1.1,\"ledger_peak\":26,\"wall_time\":0.2,"
      "\"aux0\":0.4,\"eval_bits\":0.7}\n"
      "\n"
      "{\"step\":2,\"task_nats\":0.8,\"task_bits\":1.2,\"combined\":1.0,\"ledger_peak\":26,\"wall_time\":0.3,"
      "\"aux0\":0.3}\n");
  const auto recs = read_metrics(log);
  ASSERT_EQ(recs.size(), 3u);
  const auto csv = metrics_to_csv(recs);
  std::istringstream lines(csv);
  std::string header, row;
  std::getline(lines, header);
  EXPECT_EQ(header, "step,task_nats,task_bits,combined,ledger_peak,wall_time,aux0,eval_bits");
  std::vector<std::string> rows;
  while (std::getline(lines, row)) rows.push_back(row);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].substr(0, 2), "0,");
  EXPECT_EQ(rows[0].back(), ',');  // no eval_bits on this step
  EXPECT_TRUE(contains(rows[1], ",0.7"));
}

TEST(Metrics, EmptyLogGivesHeaderOnly) {
  std::istringstream empty("");
  EXPECT_EQ(metrics_to_csv(read_metrics(empty)), "step,task_nats,task_bits,combined,ledger_peak,wall_time\n");
}

TEST(Metrics, MalformedLineNamesItsNumber) {
  std::istringstream bad("{\"step\":0}\n{\"step\":1\n");
  try {
    read_metrics(bad);
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_TRUE(contains(e.what(), "line 2")) << e.what();
  }
  std::istringstream not_object("[1,2]\n");
  EXPECT_THROW(read_metrics(not_object), Error);
}

TEST(Metrics, SameMetricsIgnoresWallTime) {
  ojson a{{"step", 0}, {"combined", 1.0}, {"wall_time", 0.1}};
  ojson b{{"step", 0}, {"combined", 1.0}, {"wall_time", 0.9}};
  EXPECT_TRUE(same_metrics({a}, {b}));
  b["combined"] = 1.0000001;
  EXPECT_FALSE(same_metrics({a}, {b}));
  EXPECT_FALSE(same_metrics({a}, {}));
}

TEST(Experiment, CopyRunWritesOutputsAndIsDeterministic) {
  const auto d1 = scratch("run1"), d2 = scratch("run2");
  const auto s1 = run_experiment<double>(tiny_copy(d1));
  run_experiment<double>(tiny_copy(d2));
  for (const char* f : {"metrics.jsonl", "checkpoint.bin", "config.txt"}) EXPECT_TRUE(fs::exists(d1 / f)) << f;
  EXPECT_FALSE(fs::exists(d1 / ".lock"));
  const auto m1 = read_metrics_file((d1 / "metrics.jsonl").string());
  const auto m2 = read_metrics_file((d2 / "metrics.jsonl").string());
  ASSERT_EQ(m1.size(), 6u);
  EXPECT_TRUE(same_metrics(m1, m2));
  EXPECT_TRUE(m1.back().contains("eval_bits"));
  EXPECT_TRUE(m1[2].contains("eval_bits"));
  EXPECT_FALSE(m1[0].contains("eval_bits"));
  EXPECT_EQ(metric(s1.final_eval, "bits"), m1.back()["eval_bits"].get<double>());
}

TEST(Experiment, CheckpointReproducesEvaluationBitwise) {
  const auto d = scratch("ckpt");
  const auto cfg = tiny_copy(d);
  const auto s = run_experiment<double>(cfg);
  const auto stored = parse_config(checkpoint_config((d / "checkpoint.bin").string()));
  EXPECT_EQ(serialize_config(stored), serialize_config(cfg));
  auto [e, params] = restore<double>((d / "checkpoint.bin").string(), stored);
  const auto r = e.evaluate(0, params);
  EXPECT_EQ(metric(r.metrics, "bits"), metric(s.final_eval, "bits"));
}

TEST(Experiment, OutputDirectoryLock) {
  const auto d = scratch("lock");
  DirLock held(d.string());
  EXPECT_THROW(run_experiment<double>(tiny_copy(d)), Error);
  EXPECT_THROW(DirLock again(d.string()), Error);
}

TEST(Experiment, MissingDataFileNamesPath) {
  const auto d = scratch("nodata");
  ::setenv("HRNN_DATA_ROOT", d.c_str(), 1);
  auto c = tiny_copy(d / "out");
  c.task = TaskKind::mnist;
  c.mnist_side = 4;
  c.T = 16;
  try {
    make_experiment<double>(c);
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_TRUE(contains(e.what(), (d / "mnist" / "train-images-idx3-ubyte").string())) << e.what();
  }
  c.task = TaskKind::ptb_char;
  EXPECT_THROW(make_experiment<double>(c), Error);
  ::unsetenv("HRNN_DATA_ROOT");
}

TEST(Cli, TrainSmokeAndFlagOverrides) {
  const auto d = scratch("train");
  write_text(d / "c.cfg", serialize_config(tiny_copy(d / "out")));
  const auto r = cli("train --config " + (d / "c.cfg").string() + " --steps 3 --eval_every 3");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(contains(r.out, "bits = ")) << r.out;
  EXPECT_EQ(read_metrics_file((d / "out" / "metrics.jsonl").string()).size(), 3u);
  const auto snap = parse_config(std::string(std::istreambuf_iterator<char>(std::ifstream(d / "out" / "config.txt").rdbuf()), {}));
  EXPECT_EQ(snap.steps, 3u);

  const auto csv = cli("export-csv --log " + (d / "out" / "metrics.jsonl").string());
  EXPECT_EQ(csv.code, 0);
  EXPECT_EQ(std::count(csv.out.begin(), csv.out.end(), '\n'), 4);

  const auto ev = cli("eval --checkpoint " + (d / "out" / "checkpoint.bin").string());
  EXPECT_EQ(ev.code, 0) << ev.out;
  EXPECT_TRUE(contains(ev.out, "\"bits\"")) << ev.out;

  const auto lm = cli("lmax --checkpoint " + (d / "out" / "checkpoint.bin").string());
  EXPECT_EQ(lm.code, 0) << lm.out;
  EXPECT_TRUE(contains(lm.out, "L_max = 0")) << lm.out;
}

TEST(Cli, UsageErrorsNameTheField) {
  const auto d = scratch("usage");
  write_text(d / "c.cfg", serialize_config(tiny_copy(d / "out")));
  auto r = cli("train --config " + (d / "c.cfg").string() + " --mode turbo");
  EXPECT_EQ(r.code, 2);
  EXPECT_TRUE(contains(r.out, "mode")) << r.out;
  write_text(d / "bad.cfg", "wibble = 1\n");
  r = cli("train --config " + (d / "bad.cfg").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_TRUE(contains(r.out, "wibble")) << r.out;
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("frobnicate").code, 2);
  EXPECT_EQ(cli("train").code, 2);
}

TEST(Cli, GradcheckDefaultsPassAndGateModes) {
  auto r = cli("gradcheck");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(contains(r.out, "PASS")) << r.out;
  r = cli("gradcheck --mode hrnn");
  EXPECT_EQ(r.code, 2);
  EXPECT_TRUE(contains(r.out, "no streaming counterpart")) << r.out;
  r = cli("gradcheck --T 100");
  EXPECT_EQ(r.code, 2);
  r = cli("gradcheck --precision fp32");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(contains(r.out, "tolerance 1e-04 (relaxed for single precision)")) << r.out;
}

TEST(Cli, MemcheckReportsPeakAndFullStorage) {
  auto r = cli("memcheck --l 2 --k 10 --T 200");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(contains(r.out, "ledger peak      50 vectors")) << r.out;
  EXPECT_TRUE(contains(r.out, "full TBPTT       220 vectors")) << r.out;
  r = cli("memcheck --l 2 --k 10 --T 784");
  EXPECT_TRUE(contains(r.out, "ledger peak      166 vectors")) << r.out;
  EXPECT_TRUE(contains(r.out, "memory_formula   168 vectors")) << r.out;
  EXPECT_EQ(cli("memcheck --l 2 --k 0 --T 10").code, 2);
}

TEST(Cli, LmaxRejectsOtherTasks) {
  const auto d = scratch("lmaxtask");
  const auto cfg = tiny_copy(d);
  auto params = init_params<double>(1, make_experiment<double>(cfg).dims);
  auto other = cfg;
  other.task = TaskKind::mnist;
  save_checkpoint((d / "c.bin").string(), serialize_config(other), params, make_adam(params));
  const auto r = cli("lmax --checkpoint " + (d / "c.bin").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_TRUE(contains(r.out, "task mismatch")) << r.out;
}
