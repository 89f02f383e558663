#include "svfm/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "svfm/errors.hpp"

namespace svfm {

std::size_t shape_product(const Tensor::Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Tensor::Shape& shape) {
  std::ostringstream out;
  out << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << "x";
    out << shape[i];
  }
  out << "]";
  return out.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  if (shape_.empty()) throw ShapeError("tensor shape must have rank >= 1");
  for (auto d : shape_)
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape_));
  values_.assign(shape_product(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (shape_.empty()) throw ShapeError("tensor shape must have rank >= 1");
  for (auto d : shape_)
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape_));
  if (shape_product(shape_) != values_.size())
    throw ShapeError("shape " + shape_string(shape_) + " does not match " +
                     std::to_string(values_.size()) + " values");
}

Tensor Tensor::vector(std::vector<double> v) {
  const auto n = v.size();
  return Tensor({n}, std::move(v));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> v;
  v.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged matrix literal");
    v.insert(v.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(v));
}

std::size_t Tensor::rows() const {
  if (rank() == 1) return 1;
  if (rank() == 2) return shape_[0];
  throw ShapeError("rank-2 view requested for tensor " + shape_string(shape_));
}

std::size_t Tensor::cols() const {
  if (rank() == 1) return shape_[0];
  if (rank() == 2) return shape_[1];
  throw ShapeError("rank-2 view requested for tensor " + shape_string(shape_));
}

double Tensor::item() const {
  if (values_.size() != 1) throw ShapeError("item() on tensor " + shape_string(shape_));
  return values_[0];
}

std::vector<double> Tensor::row(std::size_t r) const {
  const auto c = cols();
  return {values_.begin() + static_cast<std::ptrdiff_t>(r * c),
          values_.begin() + static_cast<std::ptrdiff_t>((r + 1) * c)};
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_product(shape) != values_.size())
    throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  return Tensor(std::move(shape), values_);
}

bool Tensor::all_finite() const {
  for (double v : values_)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace svfm
