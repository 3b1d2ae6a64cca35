#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace qforget {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

/// Dense row-major array of 64-bit reals. All library code uses rank-2
/// tensors (a scalar is 1x1); higher ranks are storable but not operated on.
class Tensor {
 public:
  Tensor() = default;
  /// Zero-filled tensor. Every extent must be positive.
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }
  static Tensor scalar(double v) { return Tensor({1, 1}, {v}); }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return values_.size(); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::span<const double> row(std::size_t r) const { return values().subspan(r * cols(), cols()); }
  std::span<double> row(std::size_t r) { return values().subspan(r * cols(), cols()); }

  /// Scalar value of a 1x1 tensor.
  double item() const;

  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<double> values_;
};

/// Ordered name -> tensor map; iteration order is the deterministic
/// accumulation and serialization order throughout the library.
using NamedTensors = std::map<std::string, Tensor>;

/// Euclidean norm accumulated in row-major order.
double l2_norm(std::span<const double> values);
double max_abs(std::span<const double> values);

}  // namespace qforget
