#pragma once

// Wires an ExperimentConfig to data, model, sampler and evaluator, and runs
// it with metrics/checkpoint output.

#include <fcntl.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "hrnn/checkpoint.hpp"
#include "hrnn/config.hpp"
#include "hrnn/metrics.hpp"
#include "hrnn/tasks.hpp"
#include "hrnn/training.hpp"

namespace hrnn {

/// Directory holding mnist/ and ptb/; HRNN_DATA_ROOT overrides ./data.
inline std::string data_root() {
  const char* env = std::getenv("HRNN_DATA_ROOT");
  return env && *env ? env : "data";
}

inline void require_file(const std::string& path) {
  if (!std::filesystem::exists(path)) throw Error("missing data file " + path + " (set HRNN_DATA_ROOT)");
}

/// Exclusive claim on an output directory for the lifetime of the object.
class DirLock {
 public:
  explicit DirLock(const std::string& dir) : path_(dir + "/.lock") {
    std::filesystem::create_directories(dir);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) throw Error("output directory " + dir + " is in use (remove " + path_ + " if stale)");
    const auto pid = std::to_string(::getpid()) + "\n";
    if (::write(fd, pid.data(), pid.size()) < 0) {
      ::close(fd);
      throw Error("cannot write " + path_);
    }
    ::close(fd);
  }
  ~DirLock() { std::filesystem::remove(path_); }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::string path_;
};

struct MnistData {
  PixelDataset train, test;
};

inline std::shared_ptr<MnistData> load_mnist_data(const ExperimentConfig& c) {
  const auto dir = data_root() + "/mnist/";
  MnistOptions o;
  o.permute = c.task == TaskKind::mnist_permuted;
  o.perm_seed = c.mnist_perm_seed;
  o.downsample = c.mnist_side;
  auto d = std::make_shared<MnistData>();
  auto path = [&](const std::string& split, const std::string& kind) {
    const auto p = dir + split + "-" + kind;
    require_file(p);
    return p;
  };
  const auto train_images = path("train", "images-idx3-ubyte"), train_labels = path("train", "labels-idx1-ubyte");
  const auto test_images = path("test", "images-idx3-ubyte"), test_labels = path("test", "labels-idx1-ubyte");
  o.limit = c.mnist_train;
  d->train = load_mnist(train_images, train_labels, o);
  o.limit = c.mnist_test;
  d->test = load_mnist(test_images, test_labels, o);
  return d;
}

inline std::shared_ptr<CharCorpus> load_ptb_data(const ExperimentConfig& c) {
  const auto dir = data_root() + "/ptb";
  for (const char* f : {"/ptb.train.txt", "/ptb.valid.txt", "/ptb.test.txt"}) require_file(dir + f);
  return std::make_shared<CharCorpus>(load_ptb(dir, c.ptb_train_bytes));
}

/// Model, data access and training options for one configuration.
template <class Real>
struct Experiment {
  ExperimentConfig cfg;
  ModelDims dims;
  TrainOptions train;
  std::function<Batch<Real>(std::size_t)> sample;
  std::function<EvalResult<Real>(std::size_t, const ModelParams<Real>&)> evaluate;
  std::shared_ptr<MnistData> mnist;
  std::shared_ptr<CharCorpus> corpus;

  ModelParams<Real> init() const { return init_params<Real>(cfg.seed_init, dims); }

  /// Copy loss on fresh length-n samples from the evaluation seed.
  double copy_bits_at(const ModelParams<Real>& p, std::size_t n) const {
    return copy_bits(p, cfg.mode, cfg.k, n, cfg.eval_batch, hash_key(cfg.seed_eval, n));
  }
};

template <class Real>
Experiment<Real> make_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  Experiment<Real> e;
  e.cfg = cfg;
  e.dims.sizes = cfg.sizes;
  e.dims.decoder_hidden = cfg.decoder_hidden;
  e.train.step = StepOptions{cfg.mode, cfg.backward, cfg.beta, cfg.T, cfg.k, cfg.check_finite};
  e.train.adam = AdamConfig{cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps};
  e.train.steps = cfg.steps;
  e.train.eval_every = cfg.eval_every ? cfg.eval_every : cfg.steps;
  e.train.stop_after = cfg.stop_after;

  switch (cfg.task) {
    case TaskKind::copy: {
      if (2 * cfg.copy_len > cfg.T)
        throw Error("copy_len: sequences of length 2*" + std::to_string(cfg.copy_len) + " exceed T = " +
                    std::to_string(cfg.T));
      e.dims.input_dim = e.dims.output_dim = e.dims.aux_out = kCopySymbols;
      e.dims.k_max = cfg.k;
      const BatchSchedule sched(TickSchedule::fixed(cfg.k), cfg.batch);
      e.sample = [cfg, sched](std::size_t step) {
        return copy_batch<Real>(cfg.batch, cfg.copy_min_len, cfg.copy_len, cfg.T, sched,
                                hash_key(cfg.seed_data, step));
      };
      e.evaluate = [cfg](std::size_t, const ModelParams<Real>& p) {
        EvalResult<Real> r;
        const double bits = copy_bits(p, cfg.mode, cfg.k, cfg.copy_len, cfg.eval_batch,
                                      hash_key(cfg.seed_eval, cfg.copy_len));
        r.metrics.emplace_back("bits", bits);
        r.done = bits < cfg.lmax_threshold;
        return r;
      };
      break;
    }
    case TaskKind::mnist:
    case TaskKind::mnist_permuted: {
      if (cfg.T != cfg.mnist_side * cfg.mnist_side)
        throw Error("T: pixel tasks need T = mnist_side^2 = " + std::to_string(cfg.mnist_side * cfg.mnist_side));
      e.mnist = load_mnist_data(cfg);
      e.dims.input_dim = e.dims.aux_out = 1;
      e.dims.output_dim = 10;
      e.dims.k_max = cfg.k;
      const BatchSchedule sched(TickSchedule::fixed(cfg.k), cfg.batch);
      auto data = e.mnist;
      e.sample = [cfg, sched, data](std::size_t step) {
        // Epoch-wise shuffles of the training set; batches may straddle epochs.
        const auto N = data->train.size();
        std::vector<std::size_t> idx, perm;
        std::size_t epoch = SIZE_MAX;
        for (std::size_t r = 0; r < cfg.batch; ++r) {
          const auto pos = step * cfg.batch + r;
          if (pos / N != epoch) {
            epoch = pos / N;
            perm = make_permutation(N, hash_key(cfg.seed_data, epoch));
          }
          idx.push_back(perm[pos % N]);
        }
        return pixel_batch<Real>(data->train, idx, sched, hash_key(cfg.seed_data, step, 1));
      };
      e.evaluate = [cfg, data](std::size_t, const ModelParams<Real>& p) {
        EvalResult<Real> r;
        r.metrics.emplace_back("accuracy", evaluate_classification(p, cfg.mode, cfg.k, data->test, cfg.eval_batch));
        return r;
      };
      break;
    }
    case TaskKind::ptb_char: {
      e.corpus = load_ptb_data(cfg);
      const auto V = e.corpus->symbols();
      e.dims.input_dim = e.dims.output_dim = e.dims.aux_out = V;
      e.dims.k_max = {e.corpus->k_max};
      if (e.corpus->train.size() <= cfg.T + 1) throw Error("ptb-char: training text shorter than T");
      auto corpus = e.corpus;
      e.sample = [cfg, corpus, V](std::size_t step) {
        Rng rng(hash_key(cfg.seed_data, step));
        std::vector<std::size_t> starts;
        for (std::size_t r = 0; r < cfg.batch; ++r)
          starts.push_back(uniform_index(rng, corpus->train.size() - cfg.T - 1));
        return char_batch<Real>(corpus->train, corpus->train_end, V, starts, cfg.T, hash_key(cfg.seed_data, step, 1));
      };
      const double unigram = unigram_bits(*corpus, corpus->valid, cfg.ptb_eval_chars);
      e.evaluate = [cfg, corpus, V, unigram](std::size_t, const ModelParams<Real>& p) {
        EvalResult<Real> r;
        r.metrics.emplace_back("valid_bits", char_bits(p, cfg.mode, corpus->valid, corpus->valid_end, V,
                                                       cfg.ptb_eval_T, cfg.ptb_eval_chars, cfg.eval_batch));
        r.metrics.emplace_back("unigram_bits", unigram);
        return r;
      };
      break;
    }
  }
  e.dims.validate();
  return e;
}

struct RunSummary {
  std::vector<ojson> records;
  std::vector<std::pair<std::string, double>> final_eval;
};

inline double metric(const std::vector<std::pair<std::string, double>>& m, const std::string& name) {
  for (const auto& [k, v] : m)
    if (k == name) return v;
  throw Error("no metric named " + name);
}

/// Trains from scratch and writes metrics.jsonl, checkpoint.bin and
/// config.txt into cfg.out_dir.
template <class Real>
RunSummary run_experiment(const ExperimentConfig& cfg) {
  auto e = make_experiment<Real>(cfg);
  DirLock lock(cfg.out_dir);
  const auto config_text = serialize_config(cfg);
  {
    std::ofstream out(cfg.out_dir + "/config.txt", std::ios::trunc);
    if (!out) throw Error("cannot write " + cfg.out_dir + "/config.txt");
    out << config_text;
  }
  auto params = e.init();
  auto adam = make_adam(params, e.train.adam);
  RunSummary summary;
  MetricsWriter log(cfg.out_dir + "/metrics.jsonl");
  run_training<Real>(params, adam, e.train, e.sample, e.evaluate, [&](const StepRecord& rec) {
    auto j = to_json(rec);
    log.write(j);
    if (!rec.eval.empty()) summary.final_eval = rec.eval;
    summary.records.push_back(std::move(j));
  });
  save_checkpoint(cfg.out_dir + "/checkpoint.bin", config_text, params, adam);
  return summary;
}

inline RunSummary run_experiment_any(const ExperimentConfig& cfg) {
  return cfg.precision == "fp64" ? run_experiment<double>(cfg) : run_experiment<float>(cfg);
}

/// Loads a checkpoint written by run_experiment with the stored config.
template <class Real>
std::pair<Experiment<Real>, ModelParams<Real>> restore(const std::string& checkpoint, const ExperimentConfig& cfg) {
  auto e = make_experiment<Real>(cfg);
  auto params = e.init();
  AdamState<Real> adam;
  load_checkpoint(checkpoint, params, adam);
  return {std::move(e), std::move(params)};
}

}  // namespace hrnn
