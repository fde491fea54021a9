#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "vpl/errors.hpp"

namespace vpl {

inline std::string shape_str(const std::vector<std::size_t>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  out += "]";
  return out;
}

/// Dense row-major tensor of 64-bit floats. Rank 1 (vectors) and rank 2
/// (matrices) cover every shape the losses need; scalars use shape {1}.
/// Tensors are plain values: copyable, movable, no aliasing.
class Tensor {
 public:
  Tensor() = default;

  Tensor(std::vector<std::size_t> shape, std::vector<double> values)
      : shape_(std::move(shape)), values_(std::move(values)) {
    std::size_t n = 1;
    for (std::size_t d : shape_) n *= d;
    if (n != values_.size()) {
      throw ShapeError("tensor shape " + shape_str(shape_) + " expects " +
                       std::to_string(n) + " values, got " +
                       std::to_string(values_.size()));
    }
  }

  static Tensor zeros(std::vector<std::size_t> shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }

  static Tensor full(std::vector<std::size_t> shape, double v) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor from_vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v));
  }

  static Tensor from_matrix(std::size_t rows, std::size_t cols,
                            std::vector<double> v) {
    return Tensor({rows, cols}, std::move(v));
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return values_.size(); }

  std::size_t rows() const {
    require_rank(2, "rows");
    return shape_[0];
  }
  std::size_t cols() const {
    require_rank(2, "cols");
    return shape_[1];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }

  double at(std::size_t r, std::size_t c) const {
    require_rank(2, "at");
    return values_[r * shape_[1] + c];
  }
  double& at(std::size_t r, std::size_t c) {
    require_rank(2, "at");
    return values_[r * shape_[1] + c];
  }

  double scalar_value() const {
    if (numel() != 1) {
      throw ContractError("expected scalar tensor, got " + shape_str(shape_));
    }
    return values_[0];
  }

  const std::vector<double>& data() const { return values_; }
  std::vector<double>& data() { return values_; }

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool b) {
    requires_grad_ = b;
    return *this;
  }

  bool all_finite() const {
    for (double v : values_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  void add_in_place(const Tensor& o) {
    if (!same_shape(o)) {
      throw ShapeError("accumulate shape mismatch: " + shape_str(shape_) +
                       " vs " + shape_str(o.shape_));
    }
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += o.values_[i];
  }

 private:
  void require_rank(std::size_t r, const char* what) const {
    if (shape_.size() != r) {
      throw ShapeError(std::string(what) + " requires rank-" +
                       std::to_string(r) + " tensor, got " + shape_str(shape_));
    }
  }

  std::vector<std::size_t> shape_;
  std::vector<double> values_;
  bool requires_grad_ = false;
};

inline void require_same_shape(const Tensor& a, const Tensor& b,
                               const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace vpl
