#pragma once

// Dense row-major matrices and the value-mode kernels shared by the tape.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <fmt/format.h>

namespace flatnce {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <class T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError(fmt::format("data length {} does not match shape {}x{}", data_.size(),
                                   rows_, cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<T>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("ragged initializer list");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix zeros(std::size_t r, std::size_t c) { return Matrix(r, c, T(0)); }
  static Matrix ones(std::size_t r, std::size_t c) { return Matrix(r, c, T(1)); }
  static Matrix scalar(T v) { return Matrix(1, 1, v); }
  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  /// Scalar value of a 1x1 matrix.
  T item() const {
    if (rows_ != 1 || cols_ != 1) {
      throw ShapeError(fmt::format("item() requires a 1x1 matrix, got {}x{}", rows_, cols_));
    }
    return data_[0];
  }

  template <class U>
  Matrix<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Matrix<U>(rows_, cols_, std::move(out));
  }

  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }
  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

template <class T>
std::string shape_str(const Matrix<T>& m) {
  return fmt::format("{}x{}", m.rows(), m.cols());
}

namespace detail {

template <class T>
void require_same_shape(const Matrix<T>& a, const Matrix<T>& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(fmt::format("{}: shape mismatch {} vs {}", op, shape_str(a), shape_str(b)));
  }
}

template <class T, class F>
Matrix<T> map(const Matrix<T>& a, F&& f) {
  Matrix<T> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

template <class T, class F>
Matrix<T> zip(const Matrix<T>& a, const Matrix<T>& b, const char* op, F&& f) {
  require_same_shape(a, b, op);
  Matrix<T> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

// C += A * B with i-k-j ordering.
template <class T>
void gemm_accumulate(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  for (std::size_t i = 0; i < n; ++i) {
    T* crow = c.row(i).data();
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a(i, p);
      if (aip == T(0)) continue;
      const T* brow = b.row(p).data();
      for (std::size_t j = 0; j < m; ++j) crow[j] += aip * brow[j];
    }
  }
}

template <class T>
T row_max(std::span<const T> r, std::size_t skip) {
  T m = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < r.size(); ++j) {
    if (j != skip && r[j] > m) m = r[j];
  }
  return m;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Value-mode kernels. Each has a tape counterpart of the same name in autodiff.hpp.

template <class T>
Matrix<T> add(const Matrix<T>& a, const Matrix<T>& b) {
  return detail::zip(a, b, "add", [](T x, T y) { return x + y; });
}

template <class T>
Matrix<T> sub(const Matrix<T>& a, const Matrix<T>& b) {
  return detail::zip(a, b, "sub", [](T x, T y) { return x - y; });
}

/// Elementwise (Hadamard) product.
template <class T>
Matrix<T> mul(const Matrix<T>& a, const Matrix<T>& b) {
  return detail::zip(a, b, "mul", [](T x, T y) { return x * y; });
}

template <class T>
Matrix<T> scale(const Matrix<T>& a, T s) {
  return detail::map(a, [s](T x) { return x * s; });
}

template <class T>
Matrix<T> add_scalar(const Matrix<T>& a, T s) {
  return detail::map(a, [s](T x) { return x + s; });
}

template <class T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError(fmt::format("matmul: shape mismatch {} vs {}", shape_str(a), shape_str(b)));
  }
  Matrix<T> c(a.rows(), b.cols());
  detail::gemm_accumulate(a, b, c);
  return c;
}

template <class T>
Matrix<T> exp(const Matrix<T>& a) {
  return detail::map(a, [](T x) { return std::exp(x); });
}

template <class T>
Matrix<T> log(const Matrix<T>& a) {
  return detail::map(a, [](T x) { return std::log(x); });
}

template <class T>
Matrix<T> relu(const Matrix<T>& a) {
  return detail::map(a, [](T x) { return x > T(0) ? x : T(0); });
}

template <class T>
Matrix<T> transpose(const Matrix<T>& a) {
  Matrix<T> out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

template <class T>
Matrix<T> row_sum(const Matrix<T>& a) {
  Matrix<T> out(a.rows(), 1);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T s = 0;
    for (T v : a.row(i)) s += v;
    out[i] = s;
  }
  return out;
}

template <class T>
Matrix<T> row_mean(const Matrix<T>& a) {
  if (a.cols() == 0) throw ShapeError("row_mean: matrix has no columns");
  return scale(row_sum(a), T(1) / static_cast<T>(a.cols()));
}

template <class T>
Matrix<T> sum(const Matrix<T>& a) {
  T s = 0;
  for (T v : a.data()) s += v;
  return Matrix<T>::scalar(s);
}

template <class T>
Matrix<T> mean(const Matrix<T>& a) {
  if (a.empty()) throw ShapeError("mean: empty matrix");
  return Matrix<T>::scalar(sum(a).item() / static_cast<T>(a.size()));
}

/// Rows divided by max(‖row‖, eps); an all-zero row stays zero.
template <class T>
inline constexpr T kNormalizeEps = T(1e-12);

template <class T>
Matrix<T> row_l2_normalize(const Matrix<T>& a) {
  Matrix<T> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T ss = 0;
    for (T v : a.row(i)) ss += v * v;
    const T norm = std::max(std::sqrt(ss), kNormalizeEps<T>);
    for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = a(i, j) / norm;
  }
  return out;
}

/// Adds a 1xC row vector to every row of an RxC matrix.
template <class T>
Matrix<T> add_row(const Matrix<T>& a, const Matrix<T>& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError(fmt::format("add_row: shape mismatch {} vs {}", shape_str(a), shape_str(row)));
  }
  Matrix<T> out = a;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) += row[j];
  return out;
}

/// Diagonal of a square matrix as a column.
template <class T>
Matrix<T> diag(const Matrix<T>& a) {
  if (a.rows() != a.cols()) throw ShapeError("diag: matrix is not square: " + shape_str(a));
  Matrix<T> out(a.rows(), 1);
  for (std::size_t i = 0; i < a.rows(); ++i) out[i] = a(i, i);
  return out;
}

/// Row-wise contrasts: out(i, j) = a(i, j) - a(i, i).
template <class T>
Matrix<T> subtract_diagonal(const Matrix<T>& a) {
  if (a.rows() != a.cols()) {
    throw ShapeError("subtract_diagonal: matrix is not square: " + shape_str(a));
  }
  Matrix<T> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const T d = a(i, i);
    for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = a(i, j) - d;
  }
  return out;
}

template <class T>
Matrix<T> reshape(const Matrix<T>& a, std::size_t rows, std::size_t cols) {
  if (rows * cols != a.size()) {
    throw ShapeError(fmt::format("reshape: cannot view {} as {}x{}", shape_str(a), rows, cols));
  }
  return Matrix<T>(rows, cols, a.storage());
}

/// Per-row m + log sum_j exp(a_ij - m), m the row maximum. With exclude_diagonal the
/// entry (i, i) is left out of row i (square input required).
template <class T>
Matrix<T> logsumexp_row(const Matrix<T>& a, bool exclude_diagonal = false) {
  if (a.cols() == 0 || (exclude_diagonal && a.cols() < 2)) {
    throw std::invalid_argument("logsumexp_row: empty row");
  }
  if (exclude_diagonal && a.rows() != a.cols()) {
    throw ShapeError("logsumexp_row: diagonal exclusion needs a square matrix, got " +
                     shape_str(a));
  }
  Matrix<T> out(a.rows(), 1);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto r = a.row(i);
    const std::size_t skip = exclude_diagonal ? i : r.size();
    const T m = detail::row_max(r, skip);
    if (!std::isfinite(m)) {
      out[i] = m;
      continue;
    }
    T s = 0;
    for (std::size_t j = 0; j < r.size(); ++j) {
      if (j != skip) s += std::exp(r[j] - m);
    }
    out[i] = m + std::log(s);
  }
  return out;
}

template <class T>
Matrix<T> logsumexp_row_offdiag(const Matrix<T>& a) {
  return logsumexp_row(a, true);
}

/// Constant capture is the identity on values.
template <class T>
Matrix<T> detach(const Matrix<T>& a) {
  return a;
}

template <class T>
T max_abs(const Matrix<T>& a) {
  T m = 0;
  for (T v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace flatnce
