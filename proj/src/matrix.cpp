#include "look/matrix.hpp"

#include <Eigen/Core>

#include <cmath>
#include <string>

#include "look/error.hpp"

namespace look {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

ConstMap view(const Matrix& m) { return ConstMap(m.data(), m.rows(), m.cols()); }
MutMap view(Matrix& m) { return MutMap(m.data(), m.rows(), m.cols()); }

std::string dims(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                     " does not match " + std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged initializer for Matrix");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::gather_rows(std::span<const std::size_t> indices) const {
  Matrix out(indices.size(), cols_);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    auto src = row(indices[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

bool Matrix::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + dims(a) + " x " + dims(b));
  }
  Matrix out(a.rows(), b.cols());
  if (a.cols() == 0) return out;
  view(out).noalias() = view(a) * view(b);
  return out;
}

Matrix matmul_bt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_bt: " + dims(a) + " x (" + dims(b) + ")^T");
  }
  Matrix out(a.rows(), b.rows());
  if (a.cols() == 0) return out;
  view(out).noalias() = view(a) * view(b).transpose();
  return out;
}

void matmul_bt_rows(const Matrix& a, std::size_t begin, std::size_t end, const Matrix& b,
                    std::vector<double>& out) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_bt_rows: " + dims(a) + " x (" + dims(b) + ")^T");
  }
  if (begin > end || end > a.rows()) throw ShapeError("matmul_bt_rows: row range outside " + dims(a));
  const std::size_t m = end - begin;
  out.resize(m * b.rows());
  if (m == 0 || b.rows() == 0) return;
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RowMajor> av(a.data() + begin * a.cols(), static_cast<Eigen::Index>(m),
                                static_cast<Eigen::Index>(a.cols()));
  Eigen::Map<const RowMajor> bv(b.data(), static_cast<Eigen::Index>(b.rows()), static_cast<Eigen::Index>(b.cols()));
  Eigen::Map<RowMajor> ov(out.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(b.rows()));
  if (a.cols() == 0) {
    ov.setZero();
    return;
  }
  ov.noalias() = av * bv.transpose();
}

Matrix matmul_at(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_at: (" + dims(a) + ")^T x " + dims(b));
  }
  Matrix out(a.cols(), b.cols());
  if (a.rows() == 0) return out;
  view(out).noalias() = view(a).transpose() * view(b);
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t c = 0; c < a.cols(); ++c) out(c, r) = a(r, c);
  }
  return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("add: " + dims(a) + " + " + dims(b));
  }
  Matrix out = a;
  auto o = out.values();
  auto v = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += v[i];
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

NormalizedRow l2_normalize(std::span<const double> v) {
  NormalizedRow out;
  out.values.assign(v.size(), 0.0);
  const double n = norm2(v);
  if (!(n >= kNormFloor)) {
    out.degenerate = true;
    return out;
  }
  for (std::size_t i = 0; i < v.size(); ++i) out.values[i] = v[i] / n;
  return out;
}

Matrix normalize_rows(const Matrix& m, std::size_t* degenerate_count) {
  Matrix out(m.rows(), m.cols());
  std::size_t degenerate = 0;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto src = m.row(r);
    const double n = norm2(src);
    auto dst = out.row(r);
    if (!(n >= kNormFloor)) {
      ++degenerate;
      continue;
    }
    for (std::size_t c = 0; c < src.size(); ++c) dst[c] = src[c] / n;
  }
  if (degenerate_count != nullptr) *degenerate_count = degenerate;
  return out;
}

Matrix cosine_sim_matrix(const Matrix& q, const Matrix& keys) {
  if (q.cols() != keys.cols()) {
    throw ShapeError("cosine_sim_matrix: query dim " + std::to_string(q.cols()) +
                     " vs key dim " + std::to_string(keys.cols()));
  }
  return matmul_bt(q, keys);
}

void require_finite(const Matrix& m, const char* what) {
  if (!m.all_finite()) throw NumericError(std::string("non-finite values in ") + what);
}

double grad_check(const ScalarFn& f, std::span<const double> x,
                  std::span<const double> analytic, double h) {
  if (x.size() != analytic.size()) throw ShapeError("grad_check: gradient length mismatch");
  std::vector<double> probe(x.begin(), x.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("grad_check: non-finite function value at coordinate " +
                         std::to_string(i));
    }
    const double fd = (up - down) / (2.0 * h);
    const double err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace look
