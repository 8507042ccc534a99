#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace dmq {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);

/// Dense row-major array of doubles.
class Tensor {
 public:
  Tensor() = default;
  /// Zero-filled tensor of the given shape.
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::vector<double> values);
  static Tensor identity(std::size_t n);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Matrix accessors; valid for rank-2 tensors only.
  std::size_t rows() const;
  std::size_t cols() const;
  double operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  std::span<const double> row(std::size_t i) const;
  std::span<double> row(std::size_t i);

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Dense row-major array of integer codes with the bit-width they must respect.
/// nominal_bits == 64 marks a widened accumulator with no range restriction.
class IntTensor {
 public:
  IntTensor() = default;
  IntTensor(Shape shape, int nominal_bits);
  /// Throws IntegrityError when a value falls outside the signed range of nominal_bits.
  IntTensor(Shape shape, std::vector<std::int64_t> data, int nominal_bits);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t rows() const;
  std::size_t cols() const;
  int nominal_bits() const noexcept { return bits_; }

  std::int64_t operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  std::int64_t& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  std::int64_t operator[](std::size_t i) const { return data_[i]; }
  std::int64_t& operator[](std::size_t i) { return data_[i]; }

  std::span<const std::int64_t> data() const noexcept { return data_; }
  std::span<std::int64_t> data() noexcept { return data_; }

  bool operator==(const IntTensor&) const = default;

 private:
  Shape shape_;
  std::vector<std::int64_t> data_;
  int bits_ = 64;
};

/// Smallest and largest two's-complement value of the given width.
std::int64_t signed_min(int bits);
std::int64_t signed_max(int bits);

// Matrix product with a fixed ascending-k accumulation order.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// result[i,c] = x[i,c] / v[c]; every v[c] must be positive.
Tensor channel_div(const Tensor& x, std::span<const double> v);
/// result[c,j] = w[c,j] * v[c].
Tensor channel_mul(const Tensor& w, std::span<const double> v);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double k);
/// Adds a length-cols vector to every row.
Tensor add_row_vector(const Tensor& x, std::span<const double> v);
/// Multiplies every row elementwise by a length-cols vector.
Tensor mul_row_vector(const Tensor& x, std::span<const double> v);

/// Row subset in the given order.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices);
/// Stacks matrices with equal column counts.
Tensor concat_rows(std::span<const Tensor> parts);

double max_abs(const Tensor& x);
/// Per-column max |x|, i.e. one value per channel of a [B x C] activation.
std::vector<double> column_max_abs(const Tensor& x);
/// Per-row max |x|.
std::vector<double> row_max_abs(const Tensor& x);
double sum_squares(const Tensor& x);
double mean_squared_difference(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& x);

}  // namespace dmq
