#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace svfm {

/// Dense row-major array of doubles. Rank 1 and rank 2 are the only ranks
/// the library produces; a rank-1 tensor of length n behaves as 1 x n in
/// broadcasting arithmetic.
class Tensor {
 public:
  using Shape = std::vector<std::size_t>;

  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor zeros(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }
  static Tensor full(std::size_t rows, std::size_t cols, double v) { return Tensor({rows, cols}, v); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  // Rank-2 view: rank-1 tensors are treated as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }
  double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }

  // Value of a single-element tensor.
  double item() const;

  std::span<const double> values() const { return values_; }
  std::span<double> values() { return values_; }
  const std::vector<double>& data() const { return values_; }

  std::vector<double> row(std::size_t r) const;
  Tensor reshaped(Shape shape) const;

  bool all_finite() const;
  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> values_;
};

std::string shape_string(const Tensor::Shape& shape);
std::size_t shape_product(const Tensor::Shape& shape);

}  // namespace svfm
