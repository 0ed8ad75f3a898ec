#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "srlora/rng.hpp"

namespace srlora {

// Dense row-major matrix of 64-bit reals. The universal carrier for weights,
// adapter factors and feature stacks.
class Matrix {
 public:
  Matrix() = default;

  // Zero-initialized rows x cols matrix.
  Matrix(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

  // Takes ownership of `data` (row-major, length rows*cols) and rejects
  // non-finite entries. Use this when the values come from outside the
  // library (files, user input).
  static Matrix from_data(std::size_t rows, std::size_t cols,
                          std::vector<double> data);

  static Matrix identity(std::size_t n);
  static Matrix diagonal(const std::vector<double>& values);
  static Matrix gaussian(std::size_t rows, std::size_t cols, Rng& rng);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) {
    return data_[i * cols_ + j];
  }
  double operator()(std::size_t i, std::size_t j) const {
    return data_[i * cols_ + j];
  }

  double* row(std::size_t i) { return data_.data() + i * cols_; }
  const double* row(std::size_t i) const { return data_.data() + i * cols_; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  bool same_shape(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  bool all_finite() const;
  bool is_zero() const;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// C = A * B. Parallel over output rows; each output element is accumulated
// in a fixed serial order, so results are bit-identical for any thread count.
Matrix matmul(const Matrix& a, const Matrix& b);
// C = A * B^T
Matrix matmul_nt(const Matrix& a, const Matrix& b);
// C = A^T * B
Matrix matmul_tn(const Matrix& a, const Matrix& b);

Matrix transpose(const Matrix& a);
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double factor);
void add_in_place(Matrix& dst, const Matrix& src);
void add_scaled_in_place(Matrix& dst, const Matrix& src, double factor);

// y = A * x and y = A^T * x for a dense vector x.
std::vector<double> matvec(const Matrix& a, const std::vector<double>& x);
std::vector<double> matvec_t(const Matrix& a, const std::vector<double>& x);

double dot(std::span<const double> x, std::span<const double> y);
double vector_norm(std::span<const double> x);

// Copies of the leading rows / columns.
Matrix take_rows(const Matrix& a, std::size_t n);
Matrix take_cols(const Matrix& a, std::size_t n);

// Max |a - b| over entries; shapes must match.
double max_abs_diff(const Matrix& a, const Matrix& b);

}  // namespace srlora
