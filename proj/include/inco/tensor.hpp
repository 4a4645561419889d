#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "inco/error.hpp"

namespace inco {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major array of doubles. The shape is metadata only: a 2x3
/// matrix and a 6-vector share the same flat storage and inner product.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)), values_(shape_numel(shape_), 0.0) { check_shape(); }

  Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
    check_shape();
    if (shape_numel(shape_) != values_.size())
      throw ShapeError("tensor: shape " + shape_string(shape_) + " does not match " +
                       std::to_string(values_.size()) + " values");
  }

  static Tensor vector(std::vector<double> values) {
    Shape s{values.size()};
    return Tensor(std::move(s), std::move(values));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor({rows, cols}, std::move(values));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_); }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.values_[i * n + i] = 1.0;
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return values_.size(); }
  std::size_t rows() const { return dim(0); }
  std::size_t cols() const { return dim(1); }

  std::size_t dim(std::size_t axis) const {
    if (axis >= shape_.size()) throw ShapeError("tensor: axis out of range for shape " + shape_string(shape_));
    return shape_[axis];
  }

  std::span<const double> values() const noexcept { return values_; }
  std::span<double> values() noexcept { return values_; }
  double* data() noexcept { return values_.data(); }
  const double* data() const noexcept { return values_.data(); }

  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }

  double at(std::size_t r, std::size_t c) const { return values_[r * shape_[1] + c]; }
  double& at(std::size_t r, std::size_t c) { return values_[r * shape_[1] + c]; }

  std::span<const double> row(std::size_t r) const { return {values_.data() + r * shape_[1], shape_[1]}; }
  std::span<double> row(std::size_t r) { return {values_.data() + r * shape_[1], shape_[1]}; }

  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), values_); }
  Tensor flattened() const { return Tensor({values_.size()}, values_); }

  bool all_finite() const {
    for (double v : values_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool is_zero() const {
    for (double v : values_)
      if (v != 0.0) return false;
    return true;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

  Tensor& operator+=(const Tensor& o);
  Tensor& operator-=(const Tensor& o);
  Tensor& operator*=(double s) {
    for (double& v : values_) v *= s;
    return *this;
  }
  Tensor& operator/=(double s) {
    for (double& v : values_) v /= s;
    return *this;
  }

 private:
  void check_shape() const {
    for (auto d : shape_)
      if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_string(shape_));
  }

  Shape shape_;
  std::vector<double> values_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
}

inline Tensor& Tensor::operator+=(const Tensor& o) {
  require_same_shape(*this, o, "add");
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += o.values_[i];
  return *this;
}

inline Tensor& Tensor::operator-=(const Tensor& o) {
  require_same_shape(*this, o, "sub");
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] -= o.values_[i];
  return *this;
}

inline Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
inline Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
inline Tensor operator*(Tensor a, double s) { return a *= s; }
inline Tensor operator*(double s, Tensor a) { return a *= s; }
inline Tensor operator/(Tensor a, double s) { return a /= s; }

/// Flat dot product; for matrices this is tr(AᵀB).
inline double inner(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "inner");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double norm(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v * v;
  return std::sqrt(acc);
}

/// Returns a + s * b.
inline Tensor axpy(const Tensor& a, double s, const Tensor& b) {
  require_same_shape(a, b, "axpy");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += s * b[i];
  return out;
}

namespace detail {
inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_string(t.shape()));
}
}  // namespace detail

inline Tensor transpose(const Tensor& a) {
  detail::require_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

// (m x k) * (k x n)
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a.at(i, p);
      const double* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

// (m x k) * (n x k)ᵀ
inline Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul_bt");
  detail::require_matrix(b, "matmul_bt");
  if (a.cols() != b.cols())
    throw ShapeError("matmul_bt: inner dimensions differ " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()) + "T");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b.data() + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      out.at(i, j) = acc;
    }
  }
  return out;
}

// (k x m)ᵀ * (k x n)
inline Tensor matmul_at(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul_at");
  detail::require_matrix(b, "matmul_at");
  if (a.rows() != b.rows())
    throw ShapeError("matmul_at: inner dimensions differ " + shape_string(a.shape()) + "T x " +
                     shape_string(b.shape()));
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  Tensor out({m, n});
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a.data() + p * m;
    const double* brow = b.data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      double* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

inline double trace(const Tensor& a) {
  detail::require_matrix(a, "trace");
  if (a.rows() != a.cols()) throw ShapeError("trace: matrix is not square " + shape_string(a.shape()));
  double acc = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) acc += a.at(i, i);
  return acc;
}

// Copies the listed rows, in order, into a new matrix.
inline Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  detail::require_matrix(a, "gather_rows");
  const std::size_t n = a.cols();
  Tensor out({rows.size(), n});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= a.rows()) throw ShapeError("gather_rows: row index out of range");
    auto src = a.row(rows[i]);
    std::copy(src.begin(), src.end(), out.data() + i * n);
  }
  return out;
}

}  // namespace inco
