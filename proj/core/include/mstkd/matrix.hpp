#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace mstkd {

// Dense row-major matrix of doubles. Vectors are 1×n or n×1, scalars 1×1.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  static Matrix scalar(double v) { return Matrix(1, 1, v); }
  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }
  bool same_shape(const Matrix& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }

  double& operator()(std::size_t r, std::size_t c) {
    return values_[r * cols_ + c];
  }
  double operator()(std::size_t r, std::size_t c) const {
    return values_[r * cols_ + c];
  }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  std::span<double> row(std::size_t r) {
    return {values_.data() + r * cols_, cols_};
  }
  std::span<const double> row(std::size_t r) const {
    return {values_.data() + r * cols_, cols_};
  }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  const std::vector<double>& storage() const { return values_; }

  void fill(double v);
  // out += scale * other
  void add_scaled(const Matrix& other, double scale = 1.0);

  bool operator==(const Matrix& o) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

Matrix transpose(const Matrix& m);
// C = A·B, or with either side transposed.
Matrix multiply(const Matrix& a, const Matrix& b);
Matrix multiply_at_b(const Matrix& a, const Matrix& b);  // Aᵀ·B
Matrix multiply_a_bt(const Matrix& a, const Matrix& b);  // A·Bᵀ

// Copies the listed rows of `m`, in order.
Matrix gather_rows(const Matrix& m, std::span<const std::size_t> rows);
Matrix concat_columns(std::span<const Matrix> blocks);

}  // namespace mstkd
