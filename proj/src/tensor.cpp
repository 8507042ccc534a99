#include "dmq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>

#include "dmq/errors.hpp"

namespace dmq {

namespace {

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw DimensionError(std::string(what) + ": expected a matrix, got shape " + shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, const char* what, F f) {
  require_same_shape(a, b, what);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], b[i]);
  return Tensor(a.shape(), std::move(out));
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size())
    throw DimensionError("tensor shape " + shape_str(shape_) + " does not match " + std::to_string(data_.size()) +
                         " values");
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

std::size_t Tensor::rows() const {
  require_matrix(*this, "rows");
  return shape_[0];
}

std::size_t Tensor::cols() const {
  require_matrix(*this, "cols");
  return shape_[1];
}

std::span<const double> Tensor::row(std::size_t i) const {
  const std::size_t c = cols();
  return std::span<const double>(data_).subspan(i * c, c);
}

std::span<double> Tensor::row(std::size_t i) {
  const std::size_t c = cols();
  return std::span<double>(data_).subspan(i * c, c);
}

std::int64_t signed_min(int bits) {
  if (bits >= 64) return std::numeric_limits<std::int64_t>::min();
  return -(std::int64_t{1} << (bits - 1));
}

std::int64_t signed_max(int bits) {
  if (bits >= 64) return std::numeric_limits<std::int64_t>::max();
  return (std::int64_t{1} << (bits - 1)) - 1;
}

IntTensor::IntTensor(Shape shape, int nominal_bits)
    : shape_(std::move(shape)), data_(shape_size(shape_), 0), bits_(nominal_bits) {
  if (bits_ < 1 || bits_ > 64) throw DomainError("nominal bit-width must be in [1, 64]");
}

IntTensor::IntTensor(Shape shape, std::vector<std::int64_t> data, int nominal_bits)
    : shape_(std::move(shape)), data_(std::move(data)), bits_(nominal_bits) {
  if (bits_ < 1 || bits_ > 64) throw DomainError("nominal bit-width must be in [1, 64]");
  if (shape_size(shape_) != data_.size())
    throw DimensionError("int tensor shape " + shape_str(shape_) + " does not match " + std::to_string(data_.size()) +
                         " values");
  const auto lo = signed_min(bits_);
  const auto hi = signed_max(bits_);
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (data_[i] < lo || data_[i] > hi)
      throw IntegrityError("code " + std::to_string(data_[i]) + " at index " + std::to_string(i) +
                           " exceeds the " + std::to_string(bits_) + "-bit range");
  }
}

std::size_t IntTensor::rows() const {
  if (shape_.size() != 2) throw DimensionError("rows: expected a matrix");
  return shape_[0];
}

std::size_t IntTensor::cols() const {
  if (shape_.size() != 2) throw DimensionError("cols: expected a matrix");
  return shape_[1];
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != k)
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor out({n, m});
  // i-k-j loop: every output cell still accumulates in ascending k.
  for (std::size_t i = 0; i < n; ++i) {
    auto dst = out.row(i);
    const auto src = a.row(i);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = src[p];
      const auto brow = b.row(p);
      for (std::size_t j = 0; j < m; ++j) dst[j] += av * brow[j];
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  Tensor out({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

Tensor channel_div(const Tensor& x, std::span<const double> v) {
  require_matrix(x, "channel_div");
  if (v.size() != x.cols())
    throw DimensionError("channel_div: " + std::to_string(v.size()) + " divisors for " + std::to_string(x.cols()) +
                         " channels");
  for (double d : v)
    if (!(d > 0.0)) throw DomainError("channel_div: divisors must be positive");
  Tensor out = x;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t c = 0; c < r.size(); ++c) r[c] /= v[c];
  }
  return out;
}

Tensor channel_mul(const Tensor& w, std::span<const double> v) {
  require_matrix(w, "channel_mul");
  if (v.size() != w.rows())
    throw DimensionError("channel_mul: " + std::to_string(v.size()) + " factors for " + std::to_string(w.rows()) +
                         " rows");
  Tensor out = w;
  for (std::size_t c = 0; c < w.rows(); ++c)
    for (double& e : out.row(c)) e *= v[c];
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return zip(a, b, "add", [](double x, double y) { return x + y; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return zip(a, b, "sub", [](double x, double y) { return x - y; });
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  return zip(a, b, "hadamard", [](double x, double y) { return x * y; });
}

Tensor scale(const Tensor& a, double k) {
  Tensor out = a;
  for (double& e : out.data()) e *= k;
  return out;
}

Tensor add_row_vector(const Tensor& x, std::span<const double> v) {
  require_matrix(x, "add_row_vector");
  if (v.size() != x.cols()) throw DimensionError("add_row_vector: length mismatch");
  Tensor out = x;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t c = 0; c < r.size(); ++c) r[c] += v[c];
  }
  return out;
}

Tensor mul_row_vector(const Tensor& x, std::span<const double> v) {
  require_matrix(x, "mul_row_vector");
  if (v.size() != x.cols()) throw DimensionError("mul_row_vector: length mismatch");
  Tensor out = x;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t c = 0; c < r.size(); ++c) r[c] *= v[c];
  }
  return out;
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices) {
  require_matrix(x, "gather_rows");
  const std::size_t c = x.cols();
  std::vector<double> data;
  data.reserve(indices.size() * c);
  for (std::size_t idx : indices) {
    if (idx >= x.rows()) throw DimensionError("gather_rows: index out of range");
    const auto r = x.row(idx);
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({indices.size(), c}, std::move(data));
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw InputError("concat_rows: nothing to concatenate");
  const std::size_t c = parts.front().cols();
  std::size_t r = 0;
  std::vector<double> data;
  for (const auto& p : parts) {
    if (p.cols() != c) throw DimensionError("concat_rows: column count mismatch");
    r += p.rows();
    data.insert(data.end(), p.data().begin(), p.data().end());
  }
  return Tensor({r, c}, std::move(data));
}

double max_abs(const Tensor& x) {
  double m = 0.0;
  for (double v : x.data()) m = std::max(m, std::abs(v));
  return m;
}

std::vector<double> column_max_abs(const Tensor& x) {
  std::vector<double> m(x.cols(), 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto r = x.row(i);
    for (std::size_t c = 0; c < r.size(); ++c) m[c] = std::max(m[c], std::abs(r[c]));
  }
  return m;
}

std::vector<double> row_max_abs(const Tensor& x) {
  std::vector<double> m(x.rows(), 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (double v : x.row(i)) m[i] = std::max(m[i], std::abs(v));
  return m;
}

double sum_squares(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v * v;
  return s;
}

double mean_squared_difference(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mean_squared_difference");
  if (a.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

bool all_finite(const Tensor& x) {
  return std::all_of(x.data().begin(), x.data().end(), [](double v) { return std::isfinite(v); });
}

}  // namespace dmq
