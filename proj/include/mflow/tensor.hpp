#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mflow {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t element_count(const Shape& shape);

/// Raised when operand shapes are incompatible; the message names both shapes.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const Shape& lhs, const Shape& rhs);
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

/// Dense row-major array of doubles.
///
/// The checked constructor rejects NaN and Inf; `unchecked` skips that scan and
/// exists for diagnostics and for intermediate values that are validated later.
/// Extents may be zero (an empty conditioning block is a [B x 0] tensor).
class Tensor {
 public:
  Tensor() : shape_{1}, data_(1, 0.0) {}
  Tensor(Shape shape, std::vector<double> data);

  static Tensor unchecked(Shape shape, std::vector<double> data);
  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }

  /// Value of a single-element tensor.
  double item() const;
  bool all_finite() const;

  Tensor reshaped(Shape shape) const;
  Tensor row(std::size_t r) const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  struct NoCheck {};
  Tensor(Shape shape, std::vector<double> data, NoCheck);

  Shape shape_;
  std::vector<double> data_;
};

/// Largest absolute elementwise difference; shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace mflow
