#include "srlora/matrix.hpp"

#include <cmath>
#include <cstdint>
#include <utility>

#include "srlora/error.hpp"

namespace srlora {

namespace {

// Below this many multiply-adds the OpenMP fork overhead dominates.
constexpr std::size_t kParallelFlopThreshold = 64 * 1024;

void check_shapes(std::size_t a, std::size_t b, const char* where) {
  if (a != b) {
    throw Error(ErrorCode::ShapeMismatch,
                std::string(where) + ": inner dimensions " +
                    std::to_string(a) + " vs " + std::to_string(b));
  }
}

}  // namespace

Matrix Matrix::from_data(std::size_t rows, std::size_t cols,
                         std::vector<double> data) {
  if (data.size() != rows * cols) {
    throw Error(ErrorCode::ShapeMismatch,
                "data length " + std::to_string(data.size()) +
                    " does not match " + std::to_string(rows) + "x" +
                    std::to_string(cols));
  }
  Matrix m;
  m.rows_ = rows;
  m.cols_ = cols;
  m.data_ = std::move(data);
  if (!m.all_finite()) {
    throw Error(ErrorCode::NonFiniteTensor, "matrix contains NaN or Inf");
  }
  return m;
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::diagonal(const std::vector<double>& values) {
  Matrix m(values.size(), values.size());
  for (std::size_t i = 0; i < values.size(); ++i) m(i, i) = values[i];
  return m;
}

Matrix Matrix::gaussian(std::size_t rows, std::size_t cols, Rng& rng) {
  Matrix m(rows, cols);
  for (double& v : m.data_) v = rng.next_gaussian();
  return m;
}

bool Matrix::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

bool Matrix::is_zero() const {
  for (double v : data_) {
    if (v != 0.0) return false;
  }
  return true;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  check_shapes(a.cols(), b.rows(), "matmul");
  Matrix c(a.rows(), b.cols());
  const std::int64_t m = static_cast<std::int64_t>(a.rows());
  const std::size_t n = b.cols();
  const std::size_t inner = a.cols();
  const bool parallel = a.rows() * n * inner >= kParallelFlopThreshold;
#pragma omp parallel for schedule(static) if (parallel)
  for (std::int64_t i = 0; i < m; ++i) {
    double* crow = c.row(static_cast<std::size_t>(i));
    const double* arow = a.row(static_cast<std::size_t>(i));
    for (std::size_t k = 0; k < inner; ++k) {
      const double aik = arow[k];
      if (aik == 0.0) continue;
      const double* brow = b.row(k);
      for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  check_shapes(a.cols(), b.cols(), "matmul_nt");
  Matrix c(a.rows(), b.rows());
  const std::int64_t m = static_cast<std::int64_t>(a.rows());
  const std::size_t n = b.rows();
  const std::size_t inner = a.cols();
  const bool parallel = a.rows() * n * inner >= kParallelFlopThreshold;
#pragma omp parallel for schedule(static) if (parallel)
  for (std::int64_t i = 0; i < m; ++i) {
    double* crow = c.row(static_cast<std::size_t>(i));
    const double* arow = a.row(static_cast<std::size_t>(i));
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < inner; ++k) acc += arow[k] * brow[k];
      crow[j] = acc;
    }
  }
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  check_shapes(a.rows(), b.rows(), "matmul_tn");
  Matrix c(a.cols(), b.cols());
  const std::int64_t m = static_cast<std::int64_t>(a.cols());
  const std::size_t n = b.cols();
  const std::size_t inner = a.rows();
  const bool parallel = a.cols() * n * inner >= kParallelFlopThreshold;
#pragma omp parallel for schedule(static) if (parallel)
  for (std::int64_t i = 0; i < m; ++i) {
    double* crow = c.row(static_cast<std::size_t>(i));
    for (std::size_t k = 0; k < inner; ++k) {
      const double aki = a(k, static_cast<std::size_t>(i));
      if (aki == 0.0) continue;
      const double* brow = b.row(k);
      for (std::size_t j = 0; j < n; ++j) crow[j] += aki * brow[j];
    }
  }
  return c;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  }
  return t;
}

Matrix add(const Matrix& a, const Matrix& b) {
  Matrix c = a;
  add_in_place(c, b);
  return c;
}

Matrix sub(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) {
    throw Error(ErrorCode::ShapeMismatch, "sub: shapes differ");
  }
  Matrix c = a;
  auto cd = c.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < cd.size(); ++i) cd[i] -= bd[i];
  return c;
}

Matrix scale(const Matrix& a, double factor) {
  Matrix c = a;
  for (double& v : c.data()) v *= factor;
  return c;
}

void add_in_place(Matrix& dst, const Matrix& src) {
  if (!dst.same_shape(src)) {
    throw Error(ErrorCode::ShapeMismatch, "add: shapes differ");
  }
  auto dd = dst.data();
  auto sd = src.data();
  for (std::size_t i = 0; i < dd.size(); ++i) dd[i] += sd[i];
}

void add_scaled_in_place(Matrix& dst, const Matrix& src, double factor) {
  if (!dst.same_shape(src)) {
    throw Error(ErrorCode::ShapeMismatch, "add_scaled: shapes differ");
  }
  auto dd = dst.data();
  auto sd = src.data();
  for (std::size_t i = 0; i < dd.size(); ++i) dd[i] += factor * sd[i];
}

std::vector<double> matvec(const Matrix& a, const std::vector<double>& x) {
  check_shapes(a.cols(), x.size(), "matvec");
  std::vector<double> y(a.rows(), 0.0);
  const std::int64_t m = static_cast<std::int64_t>(a.rows());
  const bool parallel = a.rows() * a.cols() >= kParallelFlopThreshold;
#pragma omp parallel for schedule(static) if (parallel)
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = a.row(static_cast<std::size_t>(i));
    double acc = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) acc += arow[j] * x[j];
    y[static_cast<std::size_t>(i)] = acc;
  }
  return y;
}

std::vector<double> matvec_t(const Matrix& a, const std::vector<double>& x) {
  check_shapes(a.rows(), x.size(), "matvec_t");
  std::vector<double> y(a.cols(), 0.0);
  const std::int64_t n = static_cast<std::int64_t>(a.cols());
  const bool parallel = a.rows() * a.cols() >= kParallelFlopThreshold;
#pragma omp parallel for schedule(static) if (parallel)
  for (std::int64_t j = 0; j < n; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      acc += a(i, static_cast<std::size_t>(j)) * x[i];
    }
    y[static_cast<std::size_t>(j)] = acc;
  }
  return y;
}

double dot(std::span<const double> x, std::span<const double> y) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * y[i];
  return acc;
}

double vector_norm(std::span<const double> x) {
  return std::sqrt(dot(x, x));
}

Matrix take_rows(const Matrix& a, std::size_t n) {
  if (n > a.rows()) {
    throw Error(ErrorCode::ShapeMismatch, "take_rows: not enough rows");
  }
  Matrix out(n, a.cols());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = a(i, j);
  }
  return out;
}

Matrix take_cols(const Matrix& a, std::size_t n) {
  if (n > a.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "take_cols: not enough cols");
  }
  Matrix out(a.rows(), n);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < n; ++j) out(i, j) = a(i, j);
  }
  return out;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) {
    throw Error(ErrorCode::ShapeMismatch, "max_abs_diff: shapes differ");
  }
  double worst = 0.0;
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i) {
    worst = std::max(worst, std::abs(ad[i] - bd[i]));
  }
  return worst;
}

}  // namespace srlora
