#include "mstkd/matrix.hpp"

#include <algorithm>
#include <string>

#include "mstkd/error.hpp"

namespace mstkd {

namespace {

std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
  if (values_.size() != rows_ * cols_) {
    throw DimensionError("matrix value count " + std::to_string(values_.size()) +
                         " does not match shape " + std::to_string(rows) + "x" +
                         std::to_string(cols));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

void Matrix::fill(double v) { std::fill(values_.begin(), values_.end(), v); }

void Matrix::add_scaled(const Matrix& other, double scale) {
  if (!same_shape(other)) {
    throw DimensionError("add_scaled: " + shape_str(*this) + " vs " +
                         shape_str(other));
  }
  for (std::size_t i = 0; i < values_.size(); ++i) {
    values_[i] += scale * other.values_[i];
  }
}

Matrix transpose(const Matrix& m) {
  Matrix t(m.cols(), m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) t(c, r) = m(r, c);
  return t;
}

Matrix multiply(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + shape_str(a) + " · " + shape_str(b));
  }
  Matrix c(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* out = c.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* brow = b.row(k).data();
      for (std::size_t j = 0; j < n; ++j) out[j] += aik * brow[j];
    }
  }
  return c;
}

Matrix multiply_at_b(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul Aᵀ·B: " + shape_str(a) + " · " + shape_str(b));
  }
  Matrix c(a.cols(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const double* brow = b.row(k).data();
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a(k, i);
      if (aki == 0.0) continue;
      double* out = c.row(i).data();
      for (std::size_t j = 0; j < n; ++j) out[j] += aki * brow[j];
    }
  }
  return c;
}

Matrix multiply_a_bt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul A·Bᵀ: " + shape_str(a) + " · " + shape_str(b));
  }
  Matrix c(a.rows(), b.rows());
  const std::size_t k = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* arow = a.row(i).data();
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double* brow = b.row(j).data();
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) acc += arow[t] * brow[t];
      c(i, j) = acc;
    }
  }
  return c;
}

Matrix gather_rows(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(rows.size(), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= m.rows()) {
      throw DimensionError("gather_rows: row " + std::to_string(rows[i]) +
                           " out of range " + std::to_string(m.rows()));
    }
    std::copy_n(m.row(rows[i]).data(), m.cols(), out.row(i).data());
  }
  return out;
}

Matrix concat_columns(std::span<const Matrix> blocks) {
  if (blocks.empty()) return {};
  std::size_t width = 0;
  for (const auto& b : blocks) {
    if (b.rows() != blocks.front().rows()) {
      throw ContractError("concat_columns: row counts differ (" +
                          std::to_string(b.rows()) + " vs " +
                          std::to_string(blocks.front().rows()) + ")");
    }
    width += b.cols();
  }
  Matrix out(blocks.front().rows(), width);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    double* dst = out.row(r).data();
    for (const auto& b : blocks) {
      dst = std::copy_n(b.row(r).data(), b.cols(), dst);
    }
  }
  return out;
}

}  // namespace mstkd
