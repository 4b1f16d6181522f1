#include <doctest.h>

#include "mstkd/error.hpp"
#include "mstkd/matrix.hpp"
#include "support.hpp"

using namespace mstkd;

namespace {

Matrix naive_product(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

void check_close(const Matrix& a, const Matrix& b, double tol) {
  REQUIRE(a.rows() == b.rows());
  REQUIRE(a.cols() == b.cols());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(tol));
}

}  // namespace

TEST_CASE("matrix products agree with a triple loop") {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 1 + rng() % 9, k = 1 + rng() % 9, m = 1 + rng() % 9;
    Matrix a = testing::random_matrix(n, k, rng), b = testing::random_matrix(k, m, rng);
    check_close(multiply(a, b), naive_product(a, b), 1e-12);
    check_close(multiply_at_b(transpose(a), b), naive_product(a, b), 1e-12);
    check_close(multiply_a_bt(a, transpose(b)), naive_product(a, b), 1e-12);
  }
}

TEST_CASE("shape mismatches are dimension errors") {
  Matrix a(2, 3), b(2, 3);
  CHECK_THROWS_AS(multiply(a, b), DimensionError);
  CHECK_THROWS_AS(concat_columns(std::vector<Matrix>{Matrix(2, 1), Matrix(3, 1)}), ContractError);
}

TEST_CASE("gather and concat keep row alignment") {
  Matrix a(3, 2, std::vector<double>{1, 2, 3, 4, 5, 6});
  Matrix g = gather_rows(a, std::vector<std::size_t>{2, 0});
  CHECK(g == Matrix(2, 2, std::vector<double>{5, 6, 1, 2}));
  Matrix c = concat_columns(std::vector<Matrix>{a, Matrix(3, 1, 9.0)});
  CHECK(c.cols() == 3);
  CHECK(c(1, 0) == 3);
  CHECK(c(1, 2) == 9);
  CHECK(Matrix::identity(3)(1, 1) == 1.0);
  CHECK(Matrix::identity(3)(1, 2) == 0.0);
}
