#pragma once

// Task generators, data loaders and evaluation: copy, pixel MNIST and
// character-level Penn Treebank.

#include <algorithm>
#include <array>
#include <cstdio>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "hrnn/hierarchy.hpp"
#include "hrnn/random.hpp"
#include "hrnn/training.hpp"

namespace hrnn {

// -- copy ----------------------------------------------------------------------

inline constexpr int kCopyStar = 2;  // symbols: 0, 1, '*'
inline constexpr std::size_t kCopySymbols = 3;

struct CopySample {
  std::vector<int> input, target;
  std::vector<bool> recall;

  std::size_t n() const { return input.size() / 2; }
};

inline char copy_char(int s) { return s == kCopyStar ? '*' : static_cast<char>('0' + s); }

inline std::string copy_string(const std::vector<int>& seq) {
  std::string s;
  for (int v : seq) s += copy_char(v);
  return s;
}

/// `bits` followed by n stars; the target is n stars followed by `bits`.
inline CopySample make_copy(const std::vector<int>& bits) {
  const auto n = bits.size();
  if (n == 0) throw Error("copy: length must be at least 1");
  CopySample c;
  c.input.assign(2 * n, kCopyStar);
  c.target.assign(2 * n, kCopyStar);
  c.recall.assign(2 * n, false);
  for (std::size_t j = 0; j < n; ++j) {
    if (bits[j] != 0 && bits[j] != 1) throw Error("copy: prefix symbols must be 0 or 1");
    c.input[j] = bits[j];
    c.target[n + j] = bits[j];
    c.recall[n + j] = true;
  }
  return c;
}

inline CopySample gen_copy(std::size_t n, Rng& rng) {
  if (n == 0) throw Error("copy: length must be at least 1");
  std::vector<int> bits(n);
  for (auto& b : bits) b = static_cast<int>(rng() >> 63);
  return make_copy(bits);
}

/// A copy batch of `rows` samples with lengths drawn from [n_min, n_max],
/// padded with '*' to `steps` steps. Only recall positions carry task
/// weight; weights sum to one.
template <class Real>
Batch<Real> copy_batch(std::size_t rows, std::size_t n_min, std::size_t n_max, std::size_t steps,
                       const BatchSchedule& sched, std::uint64_t seed) {
  if (n_min == 0 || n_min > n_max) throw Error("copy: need 1 <= n_min <= n_max");
  if (2 * n_max > steps)
    throw Error("copy: sequences of length 2*" + std::to_string(n_max) + " do not fit in " + std::to_string(steps) +
                " steps");
  Rng rng(seed);
  std::vector<CopySample> samples;
  std::size_t recall = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const auto n = n_min + uniform_index(rng, n_max - n_min + 1);
    samples.push_back(gen_copy(n, rng));
    recall += n;
  }
  Batch<Real> b;
  b.aux_kind = AuxKind::discrete;
  b.schedule = sched;
  b.aux_seed = splitmix64(seed ^ 0xa5a5a5a5ULL);
  for (std::size_t r = 0; r < rows; ++r) b.row_ids.push_back(r);
  const Real w = Real(1) / static_cast<Real>(recall);
  for (std::size_t t = 0; t < steps; ++t) {
    Tensor<Real> x = Tensor<Real>::zeros(Shape{rows, kCopySymbols});
    std::vector<int> sym(rows), tg(rows);
    std::vector<Real> wt(rows, Real(0));
    for (std::size_t r = 0; r < rows; ++r) {
      const auto& s = samples[r];
      const bool in = t < s.input.size();
      sym[r] = in ? s.input[t] : kCopyStar;
      tg[r] = in ? s.target[t] : kCopyStar;
      if (in && s.recall[t]) wt[r] = w;
      x.at(r, static_cast<std::size_t>(sym[r])) = Real(1);
    }
    b.inputs.push_back(std::move(x));
    b.symbols.push_back(std::move(sym));
    b.targets.push_back(std::move(tg));
    b.weights.push_back(std::move(wt));
  }
  return b;
}

/// Mean base-2 cross-entropy over the positions with nonzero mask.
template <class Real>
double bits_per_char(const std::vector<Tensor<Real>>& logits, const std::vector<std::vector<int>>& targets,
                     const std::vector<std::vector<Real>>& mask) {
  if (logits.size() != targets.size() || logits.size() != mask.size())
    throw Error("bits_per_char: logits, targets and mask must cover the same steps");
  double total = 0;
  std::size_t count = 0;
  for (std::size_t t = 0; t < logits.size(); ++t) {
    const auto& L = logits[t];
    const auto C = L.cols();
    for (std::size_t r = 0; r < L.rows(); ++r) {
      if (mask[t][r] == Real(0)) continue;
      const Real* row = L.values.data() + r * C;
      const double mx = *std::max_element(row, row + C);
      double z = 0;
      for (std::size_t c = 0; c < C; ++c) z += std::exp(static_cast<double>(row[c]) - mx);
      const int y = targets[t][r];
      if (y < 0 || static_cast<std::size_t>(y) >= C) throw Error("bits_per_char: target out of range");
      total += (std::log(z) + mx - row[y]) / std::numbers::ln2;
      ++count;
    }
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

/// Copy loss of a model on fresh length-n samples (recall positions only).
template <class Real>
double copy_bits(const ModelParams<Real>& params, Mode mode, const std::vector<std::size_t>& k, std::size_t n,
                 std::size_t rows, std::uint64_t seed) {
  auto b = copy_batch<Real>(rows, n, n, 2 * n, BatchSchedule(TickSchedule::fixed(k), rows), seed);
  auto fwd = forward_sequence(params, b.inputs, b.schedule, mode, false);
  return bits_per_char(fwd.logits, b.targets, b.weights);
}

/// Largest n such that every length 1..n scores below `threshold`, scanning
/// upward and stopping at the first failure or at `cap`.
inline std::size_t l_max_search(const std::function<double(std::size_t)>& loss_at, double threshold = 0.15,
                                std::size_t cap = 200) {
  std::size_t best = 0;
  for (std::size_t n = 1; n <= cap; ++n) {
    if (!(loss_at(n) < threshold)) break;
    best = n;
  }
  return best;
}

// -- IDX / MNIST -----------------------------------------------------------------

struct IdxFile {
  std::uint8_t type = 0x08;  // unsigned byte
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> data;
};

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off) {
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) | (std::uint32_t(b[off + 2]) << 8) |
         std::uint32_t(b[off + 3]);
}

inline IdxFile parse_idx(const std::vector<std::uint8_t>& bytes, std::uint32_t expected_magic) {
  if (bytes.size() < 4) throw Error("idx: truncated header at offset 0");
  const auto magic = read_be32(bytes, 0);
  if (magic != expected_magic) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "idx: bad magic 0x%08x at offset 0 (expected 0x%08x)", magic, expected_magic);
    throw Error(buf);
  }
  IdxFile f;
  f.type = static_cast<std::uint8_t>((magic >> 8) & 0xff);
  const auto rank = magic & 0xff;
  if (f.type != 0x08) throw Error("idx: only unsigned-byte data is supported (offset 2)");
  if (bytes.size() < 4 + 4 * rank) throw Error("idx: truncated dimensions at offset 4");
  std::size_t n = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const auto d = read_be32(bytes, 4 + 4 * i);
    if (d == 0) throw Error("idx: zero dimension at offset " + std::to_string(4 + 4 * i));
    f.dims.push_back(d);
    n *= d;
  }
  const std::size_t off = 4 + 4 * rank;
  if (bytes.size() != off + n)
    throw Error("idx: payload at offset " + std::to_string(off) + " has " + std::to_string(bytes.size() - off) +
                " bytes, dims need " + std::to_string(n));
  f.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(off), bytes.end());
  return f;
}

inline std::vector<std::uint8_t> serialize_idx(const IdxFile& f) {
  std::vector<std::uint8_t> b{0, 0, f.type, static_cast<std::uint8_t>(f.dims.size())};
  for (auto d : f.dims)
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(d >> s));
  b.insert(b.end(), f.data.begin(), f.data.end());
  return b;
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline constexpr std::uint32_t kIdxImages = 0x00000803;
inline constexpr std::uint32_t kIdxLabels = 0x00000801;

struct PixelDataset {
  std::size_t side = 28;
  std::vector<std::vector<float>> pixels;  // presentation order, values in [0, 1]
  std::vector<int> labels;
  std::vector<std::size_t> permutation;    // empty: natural order

  std::size_t size() const { return labels.size(); }
  std::size_t length() const { return side * side; }
};

/// Fisher-Yates permutation of [0, n) from a seed.
inline std::vector<std::size_t> make_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[uniform_index(rng, i)]);
  return p;
}

/// out[t] = in[perm[t]].
inline std::vector<float> apply_permutation(const std::vector<float>& in, const std::vector<std::size_t>& perm) {
  if (perm.size() != in.size()) throw Error("permutation length does not match sequence length");
  std::vector<float> out(in.size());
  for (std::size_t t = 0; t < perm.size(); ++t) out[t] = in.at(perm[t]);
  return out;
}

/// Mean-pools a side×side image to d×d after cropping the centre to the
/// largest multiple of d. Not part of the standard benchmark; used to make
/// pixel sequences short enough for desk runs.
inline std::vector<float> downsample(const std::vector<float>& img, std::size_t side, std::size_t d) {
  if (d == 0 || d > side) throw Error("downsample: factor must be in [1, " + std::to_string(side) + "]");
  if (d == side) return img;
  const auto block = side / d, crop = block * d, off = (side - crop) / 2;
  std::vector<float> out(d * d, 0.0f);
  for (std::size_t y = 0; y < d; ++y)
    for (std::size_t x = 0; x < d; ++x) {
      double s = 0;
      for (std::size_t dy = 0; dy < block; ++dy)
        for (std::size_t dx = 0; dx < block; ++dx) s += img[(off + y * block + dy) * side + off + x * block + dx];
      out[y * d + x] = static_cast<float>(s / static_cast<double>(block * block));
    }
  return out;
}

struct MnistOptions {
  bool permute = false;
  std::uint64_t perm_seed = 0;
  std::size_t downsample = 28;  // output side
  std::size_t limit = 0;        // 0: all images
};

inline PixelDataset load_mnist(const std::string& images_path, const std::string& labels_path,
                               const MnistOptions& opt = {}) {
  auto img = parse_idx(read_file(images_path), kIdxImages);
  auto lab = parse_idx(read_file(labels_path), kIdxLabels);
  if (img.dims.size() != 3 || img.dims[1] != img.dims[2])
    throw Error("idx: " + images_path + " is not a stack of square images (offset 4)");
  if (lab.dims.size() != 1 || lab.dims[0] != img.dims[0])
    throw Error("idx: " + labels_path + " label count does not match image count (offset 4)");
  const std::size_t side = img.dims[1], count = opt.limit ? std::min<std::size_t>(opt.limit, img.dims[0]) : img.dims[0];
  PixelDataset ds;
  ds.side = opt.downsample;
  if (opt.permute) ds.permutation = make_permutation(ds.length(), opt.perm_seed);
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<float> p(side * side);
    for (std::size_t j = 0; j < p.size(); ++j) p[j] = img.data[i * side * side + j] / 255.0f;
    p = downsample(p, side, opt.downsample);
    if (opt.permute) p = apply_permutation(p, ds.permutation);
    ds.pixels.push_back(std::move(p));
    if (lab.data[i] > 9) throw Error("idx: label " + std::to_string(lab.data[i]) + " at offset " + std::to_string(8 + i));
    ds.labels.push_back(lab.data[i]);
  }
  return ds;
}

/// Pixel sequences for the given images; the class loss sits on the final
/// step, and the decoder reconstructs pixels.
template <class Real>
Batch<Real> pixel_batch(const PixelDataset& ds, const std::vector<std::size_t>& index, const BatchSchedule& sched,
                        std::uint64_t aux_seed) {
  const auto rows = index.size(), S = ds.length();
  Batch<Real> b;
  b.aux_kind = AuxKind::continuous;
  b.schedule = sched;
  b.aux_seed = aux_seed;
  for (std::size_t r = 0; r < rows; ++r) b.row_ids.push_back(r);
  for (std::size_t t = 0; t < S; ++t) {
    Tensor<Real> x = Tensor<Real>::zeros(Shape{rows, 1});
    std::vector<int> tg(rows, 0);
    std::vector<Real> w(rows, Real(0));
    for (std::size_t r = 0; r < rows; ++r) {
      x.at(r, 0) = static_cast<Real>(ds.pixels.at(index[r])[t]);
      if (t + 1 == S) {
        tg[r] = ds.labels[index[r]];
        w[r] = Real(1) / static_cast<Real>(rows);
      }
    }
    b.inputs.push_back(std::move(x));
    b.targets.push_back(std::move(tg));
    b.weights.push_back(std::move(w));
  }
  return b;
}

inline std::size_t argmax_row(const float* begin, std::size_t n) {
  return static_cast<std::size_t>(std::max_element(begin, begin + n) - begin);
}
inline std::size_t argmax_row(const double* begin, std::size_t n) {
  return static_cast<std::size_t>(std::max_element(begin, begin + n) - begin);
}

template <class Real>
std::size_t correct_count(const Tensor<Real>& final_logits, const std::vector<int>& labels) {
  if (final_logits.rows() != labels.size()) throw Error("accuracy: rows do not match labels");
  std::size_t ok = 0;
  for (std::size_t r = 0; r < labels.size(); ++r)
    ok += argmax_row(final_logits.values.data() + r * final_logits.cols(), final_logits.cols()) ==
          static_cast<std::size_t>(labels[r]);
  return ok;
}

/// Fraction of final-step predictions equal to the label.
template <class Real>
double accuracy(const Tensor<Real>& final_logits, const std::vector<int>& labels) {
  if (labels.empty()) throw Error("accuracy: no labels");
  return static_cast<double>(correct_count(final_logits, labels)) / static_cast<double>(labels.size());
}

template <class Real>
double evaluate_classification(const ModelParams<Real>& params, Mode mode, const std::vector<std::size_t>& k,
                               const PixelDataset& ds, std::size_t chunk = 500) {
  if (ds.size() == 0) throw Error("evaluate_classification: empty dataset");
  std::size_t ok = 0;
  for (std::size_t begin = 0; begin < ds.size(); begin += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = begin; i < std::min(ds.size(), begin + chunk); ++i) idx.push_back(i);
    auto b = pixel_batch<Real>(ds, idx, BatchSchedule(TickSchedule::fixed(k), idx.size()), 0);
    auto fwd = forward_sequence(params, b.inputs, b.schedule, mode, false);
    std::vector<int> labels;
    for (auto i : idx) labels.push_back(ds.labels[i]);
    ok += correct_count(fwd.logits.back(), labels);
  }
  return static_cast<double>(ok) / static_cast<double>(ds.size());
}

// -- character corpus ---------------------------------------------------------------

/// Character stream over a byte vocabulary. Symbol 0 is reserved for bytes
/// that do not occur in the training split; the rest are the training bytes
/// in increasing order.
struct CharCorpus {
  std::vector<unsigned char> vocab;  // symbol s ≥ 1 is vocab[s − 1]
  std::vector<int> train, valid, test;
  std::vector<bool> train_end, valid_end, test_end;  // segment ends after this position
  std::size_t k_max = 0;                             // longest training segment

  std::size_t symbols() const { return vocab.size() + 1; }
};

inline bool is_space(unsigned char c) { return c == ' ' || c == '\n' || c == '\t' || c == '\r'; }

/// A segment is a word plus the whitespace that follows it: position p ends a
/// segment when it is whitespace and the next character is not (or p is last).
inline std::vector<bool> word_ends(const std::string& text) {
  std::vector<bool> end(text.size(), false);
  for (std::size_t p = 0; p < text.size(); ++p)
    end[p] = is_space(static_cast<unsigned char>(text[p])) &&
             (p + 1 == text.size() || !is_space(static_cast<unsigned char>(text[p + 1])));
  return end;
}

inline std::vector<std::size_t> segment_lengths(const std::vector<bool>& ends) {
  std::vector<std::size_t> out;
  std::size_t run = 0;
  for (bool e : ends) {
    ++run;
    if (e) {
      out.push_back(run);
      run = 0;
    }
  }
  if (run) out.push_back(run);
  return out;
}

inline std::string read_text(const std::string& path, std::size_t limit = 0) {
  auto bytes = read_file(path);
  if (bytes.empty()) throw Error("empty text file: " + path);
  if (limit && bytes.size() > limit) bytes.resize(limit);
  return {bytes.begin(), bytes.end()};
}

inline CharCorpus make_corpus(const std::string& train, const std::string& valid, const std::string& test) {
  if (train.empty()) throw Error("corpus: empty training text");
  CharCorpus c;
  std::vector<bool> seen(256, false);
  for (unsigned char ch : train) seen[ch] = true;
  std::array<int, 256> id{};
  for (int b = 0; b < 256; ++b)
    if (seen[b]) {
      c.vocab.push_back(static_cast<unsigned char>(b));
      id[b] = static_cast<int>(c.vocab.size());
    }
  auto encode = [&](const std::string& s) {
    std::vector<int> out;
    out.reserve(s.size());
    for (unsigned char ch : s) out.push_back(id[ch]);
    return out;
  };
  c.train = encode(train);
  c.valid = encode(valid);
  c.test = encode(test);
  c.train_end = word_ends(train);
  c.valid_end = word_ends(valid);
  c.test_end = word_ends(test);
  for (auto n : segment_lengths(c.train_end)) c.k_max = std::max(c.k_max, n);
  return c;
}

inline CharCorpus load_ptb(const std::string& dir, std::size_t train_limit = 0) {
  return make_corpus(read_text(dir + "/ptb.train.txt", train_limit), read_text(dir + "/ptb.valid.txt"),
                     read_text(dir + "/ptb.test.txt"));
}

/// Next-character batch over windows starting at `starts`; each row gets the
/// word-boundary tick schedule of its own window.
template <class Real>
Batch<Real> char_batch(const std::vector<int>& text, const std::vector<bool>& ends, std::size_t vocab,
                       const std::vector<std::size_t>& starts, std::size_t steps, std::uint64_t aux_seed) {
  const auto rows = starts.size();
  Batch<Real> b;
  b.aux_kind = AuxKind::discrete;
  b.aux_seed = aux_seed;
  std::vector<TickSchedule> scheds;
  for (std::size_t r = 0; r < rows; ++r) {
    if (starts[r] + steps + 1 > text.size()) throw Error("char batch: window runs past the end of the text");
    std::vector<bool> e(ends.begin() + static_cast<std::ptrdiff_t>(starts[r]),
                        ends.begin() + static_cast<std::ptrdiff_t>(starts[r] + steps));
    scheds.push_back(make_boundary_schedule(e));
    b.row_ids.push_back(r);
  }
  b.schedule = BatchSchedule(std::move(scheds));
  const Real w = Real(1) / static_cast<Real>(rows * steps);
  for (std::size_t t = 0; t < steps; ++t) {
    Tensor<Real> x = Tensor<Real>::zeros(Shape{rows, vocab});
    std::vector<int> sym(rows), tg(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      sym[r] = text[starts[r] + t];
      tg[r] = text[starts[r] + t + 1];
      x.at(r, static_cast<std::size_t>(sym[r])) = Real(1);
    }
    b.inputs.push_back(std::move(x));
    b.symbols.push_back(std::move(sym));
    b.targets.push_back(std::move(tg));
    b.weights.push_back(std::vector<Real>(rows, w));
  }
  return b;
}

/// Bits/char of a model over consecutive windows of `text` (each window starts
/// from zero state; every position is scored).
template <class Real>
double char_bits(const ModelParams<Real>& params, Mode mode, const std::vector<int>& text,
                 const std::vector<bool>& ends, std::size_t vocab, std::size_t steps, std::size_t max_chars,
                 std::size_t rows_per_pass = 100) {
  std::vector<std::size_t> starts;
  const auto usable = std::min(max_chars ? max_chars : text.size(), text.size() - 1);
  for (std::size_t s = 0; s + steps <= usable; s += steps) starts.push_back(s);
  if (starts.empty()) throw Error("char_bits: text shorter than one window");
  double total = 0;
  for (std::size_t i = 0; i < starts.size(); i += rows_per_pass) {
    std::vector<std::size_t> part(starts.begin() + static_cast<std::ptrdiff_t>(i),
                                  starts.begin() + static_cast<std::ptrdiff_t>(std::min(starts.size(), i + rows_per_pass)));
    auto b = char_batch<Real>(text, ends, vocab, part, steps, 0);
    auto fwd = forward_sequence(params, b.inputs, b.schedule, mode, false);
    total += bits_per_char(fwd.logits, b.targets, b.weights) * static_cast<double>(part.size());
  }
  return total / static_cast<double>(starts.size());
}

/// Cross-entropy (bits) of `text` under the training split's character
/// frequencies, with add-one smoothing.
inline double unigram_bits(const CharCorpus& c, const std::vector<int>& text, std::size_t max_chars = 0) {
  std::vector<double> count(c.symbols(), 1.0);
  for (int s : c.train) count[static_cast<std::size_t>(s)] += 1;
  const double z = std::accumulate(count.begin(), count.end(), 0.0);
  const auto n = max_chars ? std::min(max_chars, text.size()) : text.size();
  double total = 0;
  for (std::size_t i = 1; i < n; ++i) total -= std::log2(count[static_cast<std::size_t>(text[i])] / z);
  return total / static_cast<double>(n - 1);
}

}  // namespace hrnn
