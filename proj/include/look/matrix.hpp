#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

namespace look {

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  /// Copies the listed rows, in order, into a new matrix.
  Matrix gather_rows(std::span<const std::size_t> indices) const;

  bool all_finite() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
/// a * b^T without materializing the transpose.
Matrix matmul_bt(const Matrix& a, const Matrix& b);
/// Rows [begin, end) of a * b^T written row-major into out, which is resized
/// and reused across calls.
void matmul_bt_rows(const Matrix& a, std::size_t begin, std::size_t end, const Matrix& b,
                    std::vector<double>& out);
/// a^T * b without materializing the transpose.
Matrix matmul_at(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
Matrix add(const Matrix& a, const Matrix& b);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> v);

inline constexpr double kNormFloor = 1e-12;

struct NormalizedRow {
  std::vector<double> values;
  bool degenerate = false;
};

/// Unit-normalizes v. Inputs with norm below kNormFloor map to the zero vector
/// and set the degeneracy flag.
NormalizedRow l2_normalize(std::span<const double> v);

/// Row-wise l2_normalize; degenerate rows become zero. Optionally reports the
/// number of degenerate rows.
Matrix normalize_rows(const Matrix& m, std::size_t* degenerate_count = nullptr);

/// Entry (i,j) is dot(q_i, keys_j). Both inputs are expected row-normalized.
Matrix cosine_sim_matrix(const Matrix& q, const Matrix& keys);

/// Throws NumericError naming `what` when m holds a NaN or Inf.
void require_finite(const Matrix& m, const char* what);

using ScalarFn = std::function<double(std::span<const double>)>;

/// Compares an analytic gradient against central differences of f at x.
/// Returns max_i |analytic_i - fd_i| / max(1, |fd_i|).
double grad_check(const ScalarFn& f, std::span<const double> x,
                  std::span<const double> analytic, double h = 1e-5);

}  // namespace look
