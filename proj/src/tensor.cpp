#include "mflow/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

namespace mflow {

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

ShapeError::ShapeError(const std::string& op, const Shape& lhs, const Shape& rhs)
    : std::invalid_argument(op + ": incompatible shapes " + to_string(lhs) + " and " + to_string(rhs)) {}

Tensor::Tensor(Shape shape, std::vector<double> data, NoCheck) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_.empty()) throw ShapeError("tensor: shape must have at least one dimension");
  if (element_count(shape_) != data_.size()) {
    throw ShapeError("tensor: shape " + to_string(shape_) + " holds " + std::to_string(element_count(shape_)) +
                     " elements but " + std::to_string(data_.size()) + " were given");
  }
}

Tensor::Tensor(Shape shape, std::vector<double> data) : Tensor(std::move(shape), std::move(data), NoCheck{}) {
  if (!all_finite()) throw std::domain_error("tensor: non-finite entry in " + to_string(shape_));
}

Tensor Tensor::unchecked(Shape shape, std::vector<double> data) {
  return Tensor(std::move(shape), std::move(data), NoCheck{});
}

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::filled(Shape shape, double value) {
  const std::size_t n = element_count(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("tensor: ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw ShapeError("rows() requires a matrix, got " + to_string(shape_));
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw ShapeError("cols() requires a matrix, got " + to_string(shape_));
  return shape_[1];
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() requires a single element, got " + to_string(shape_));
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

Tensor Tensor::reshaped(Shape shape) const {
  if (element_count(shape) != data_.size()) throw ShapeError("reshape", shape_, shape);
  return Tensor(std::move(shape), data_, NoCheck{});
}

Tensor Tensor::row(std::size_t r) const {
  const std::size_t c = cols();
  return Tensor({c}, std::vector<double>(data_.begin() + r * c, data_.begin() + (r + 1) * c), NoCheck{});
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff", a.shape(), b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace mflow
