// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major matrices over doubles and the handful of value-level
// kernels the rest of the library composes.
#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace damex {

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix row_vector(std::span<const double> values);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  /// Scalar value of a 1x1 matrix.
  double scalar() const;

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

/// Softmax of one row, computed after subtracting the row maximum.
std::vector<double> softmax(std::span<const double> logits);
Matrix softmax_rows(const Matrix& logits);

/// Standard normal CDF and density.
double std_normal_cdf(double z);
double std_normal_pdf(double z);

/// CDF of N(0, sigma^2) evaluated at p. Throws ParameterError when sigma <= 0.
double normal_cdf(double p, double sigma);
/// Derivative of normal_cdf with respect to p.
double normal_pdf(double p, double sigma);

bool all_finite(const Matrix& m);

}  // namespace damex
