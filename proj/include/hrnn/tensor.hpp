#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hrnn {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Extents of a dense tensor. Rank 1 and rank 2 are what the library uses;
/// rank-1 tensors behave as a single row wherever rows/cols matter.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims) : dims_(dims) { validate(); }
  explicit Shape(std::vector<std::size_t> dims) : dims_(std::move(dims)) { validate(); }

  std::size_t rank() const { return dims_.size(); }
  std::size_t operator[](std::size_t i) const { return dims_.at(i); }
  const std::vector<std::size_t>& dims() const { return dims_; }

  std::size_t numel() const {
    return std::accumulate(dims_.begin(), dims_.end(), std::size_t{1}, std::multiplies<>());
  }
  std::size_t cols() const { return dims_.empty() ? 1 : dims_.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }

  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < dims_.size(); ++i) os << (i ? ", " : "") << dims_[i];
    os << ']';
    return os.str();
  }

 private:
  void validate() const {
    for (auto d : dims_)
      if (d == 0) throw Error("shape extents must be positive, got " + str());
  }

  std::vector<std::size_t> dims_;
};

template <class Real>
struct Tensor {
  Shape shape;
  std::vector<Real> values;

  Tensor() = default;
  Tensor(Shape s, std::vector<Real> v) : shape(std::move(s)), values(std::move(v)) {
    if (shape.numel() != values.size())
      throw Error("tensor of shape " + shape.str() + " given " + std::to_string(values.size()) +
                  " values");
  }

  static Tensor zeros(Shape s) { return filled(std::move(s), Real(0)); }
  static Tensor filled(Shape s, Real v) {
    auto n = s.numel();
    return Tensor(std::move(s), std::vector<Real>(n, v));
  }
  static Tensor scalar(Real v) { return Tensor(Shape{1}, {v}); }

  std::size_t numel() const { return values.size(); }
  std::size_t rows() const { return shape.rows(); }
  std::size_t cols() const { return shape.cols(); }
  bool empty() const { return values.empty(); }

  Real& operator[](std::size_t i) { return values[i]; }
  const Real& operator[](std::size_t i) const { return values[i]; }
  Real& at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
  const Real& at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }

  Real item() const {
    if (values.size() != 1) throw Error("item() on tensor of shape " + shape.str());
    return values[0];
  }

  bool all_finite() const {
    return std::all_of(values.begin(), values.end(), [](Real v) { return std::isfinite(v); });
  }

  template <class Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape, std::vector<Other>(values.begin(), values.end()));
  }

  Tensor& operator+=(const Tensor& o) {
    if (o.shape != shape) throw Error("+= shape mismatch " + shape.str() + " vs " + o.shape.str());
    for (std::size_t i = 0; i < values.size(); ++i) values[i] += o.values[i];
    return *this;
  }

  /// Copy of a contiguous block of rows.
  Tensor row_block(std::size_t begin, std::size_t count) const {
    std::vector<Real> v(values.begin() + begin * cols(), values.begin() + (begin + count) * cols());
    return Tensor(Shape{count, cols()}, std::move(v));
  }
};

/// Gather rows `index[i]` of `src` into a new [index.size(), cols] tensor.
template <class Real>
Tensor<Real> gather_rows(const Tensor<Real>& src, const std::vector<std::size_t>& index) {
  const auto c = src.cols();
  Tensor<Real> out = Tensor<Real>::zeros(Shape{index.size(), c});
  for (std::size_t i = 0; i < index.size(); ++i)
    std::copy_n(src.values.begin() + index[i] * c, c, out.values.begin() + i * c);
  return out;
}

}  // namespace hrnn
