#pragma once

// Binary checkpoint: parameters, Adam state and the resolved config text.
// The byte layout is described in docs/checkpoint.md.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "hrnn/adam.hpp"
#include "hrnn/layers.hpp"

namespace hrnn {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'H', 'R', 'N', 'N', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class Writer {
 public:
  template <class T>
  void put(const T& v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void str(const std::string& s) {
    put<std::uint64_t>(s.size());
    bytes(s.data(), s.size());
  }
  const std::vector<char>& data() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  explicit Reader(std::vector<char> b) : buf_(std::move(b)) {}
  template <class T>
  T get() {
    T v;
    need(sizeof(T));
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void bytes(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::string str() {
    const auto n = get<std::uint64_t>();
    need(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == buf_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw Error("checkpoint: truncated at byte " + std::to_string(pos_));
  }
  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <class Real>
void save_checkpoint(const std::string& path, const std::string& config_text, const ModelParams<Real>& params,
                     const AdamState<Real>& adam) {
  detail::Writer w;
  w.bytes(kCheckpointMagic, 8);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(sizeof(Real));
  w.str(config_text);
  std::vector<std::pair<std::string, const Tensor<Real>*>> named;
  params.for_each([&](const std::string& n, const Tensor<Real>& t) { named.emplace_back(n, &t); });
  w.put<std::uint32_t>(static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, t] : named) {
    w.str(name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t->shape.rank()));
    for (auto d : t->shape.dims()) w.put<std::uint64_t>(d);
    w.bytes(t->values.data(), t->numel() * sizeof(Real));
  }
  w.put<std::int64_t>(adam.t);
  for (double v : {adam.cfg.lr, adam.cfg.beta1, adam.cfg.beta2, adam.cfg.eps}) w.put<double>(v);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(adam.m.size()));
  for (std::size_t i = 0; i < adam.m.size(); ++i) {
    w.bytes(adam.m[i].values.data(), adam.m[i].numel() * sizeof(Real));
    w.bytes(adam.v[i].values.data(), adam.v[i].numel() * sizeof(Real));
  }
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint " + tmp);
    out.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
    if (!out) throw Error("short write to " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw Error("cannot move checkpoint into place at " + path);
}

inline std::vector<char> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Config text stored in a checkpoint.
inline std::string checkpoint_config(const std::string& path) {
  detail::Reader r(read_bytes(path));
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0) throw Error("checkpoint: bad magic in " + path);
  if (r.get<std::uint32_t>() != kCheckpointVersion) throw Error("checkpoint: unsupported version in " + path);
  r.get<std::uint32_t>();
  return r.str();
}

/// Fills `params` (already shaped, e.g. by init_params) and `adam` from a
/// checkpoint; every tensor must match by name and shape.
template <class Real>
std::string load_checkpoint(const std::string& path, ModelParams<Real>& params, AdamState<Real>& adam) {
  detail::Reader r(read_bytes(path));
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0) throw Error("checkpoint: bad magic in " + path);
  if (r.get<std::uint32_t>() != kCheckpointVersion) throw Error("checkpoint: unsupported version in " + path);
  const auto width = r.get<std::uint32_t>();
  if (width != sizeof(Real))
    throw Error("checkpoint: stored with " + std::to_string(8 * width) + "-bit values, loading as " +
                std::to_string(8 * sizeof(Real)) + "-bit");
  std::string config = r.str();
  std::vector<std::pair<std::string, Tensor<Real>*>> named;
  params.for_each([&](const std::string& n, Tensor<Real>& t) { named.emplace_back(n, &t); });
  const auto count = r.get<std::uint32_t>();
  if (count != named.size())
    throw Error("checkpoint: " + std::to_string(count) + " tensors, model has " + std::to_string(named.size()));
  for (auto& [name, t] : named) {
    const auto stored = r.str();
    if (stored != name) throw Error("checkpoint: expected tensor " + name + ", found " + stored);
    const auto rank = r.get<std::uint32_t>();
    std::vector<std::size_t> dims;
    for (std::uint32_t i = 0; i < rank; ++i) dims.push_back(r.get<std::uint64_t>());
    if (dims != t->shape.dims())
      throw Error("checkpoint: tensor " + name + " has shape " + Shape(dims).str() + ", model expects " +
                  t->shape.str());
    r.bytes(t->values.data(), t->numel() * sizeof(Real));
  }
  adam = make_adam(params);
  adam.t = r.get<std::int64_t>();
  adam.cfg.lr = r.get<double>();
  adam.cfg.beta1 = r.get<double>();
  adam.cfg.beta2 = r.get<double>();
  adam.cfg.eps = r.get<double>();
  if (r.get<std::uint32_t>() != adam.m.size()) throw Error("checkpoint: optimizer state count mismatch");
  for (std::size_t i = 0; i < adam.m.size(); ++i) {
    r.bytes(adam.m[i].values.data(), adam.m[i].numel() * sizeof(Real));
    r.bytes(adam.v[i].values.data(), adam.v[i].numel() * sizeof(Real));
  }
  if (!r.done()) throw Error("checkpoint: trailing bytes at offset " + std::to_string(r.pos()));
  return config;
}

}  // namespace hrnn
