#include <doctest.h>

#include <cmath>

#include "mstkd/autodiff.hpp"
#include "mstkd/error.hpp"
#include "support.hpp"

using namespace mstkd;
using ad::Tape;
using ad::Var;

namespace {

// Reduces any tensor to a scalar with fixed random weights so every output
// entry gets a distinct upstream gradient.
Var weighted_sum(Var x, std::uint64_t seed) {
  Rng rng(seed);
  Var w = x.tape().constant(testing::random_matrix(x.rows(), x.cols(), rng));
  return ad::sum(ad::mul(x, w));
}

void require_grad_ok(const testing::ScalarFn& f, std::vector<Matrix> inputs) {
  auto r = testing::finite_difference_check(f, std::move(inputs));
  INFO("failures " << r.failures << "/" << r.entries << " worst rel " << r.worst_rel
                   << " worst abs " << r.worst_abs);
  CHECK(r.ok());
}

}  // namespace

TEST_CASE("elementwise and structural ops pass finite differences") {
  Rng rng(11);
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 1 + rng() % 4, k = 1 + rng() % 4, m = 1 + rng() % 4;
    Matrix a = testing::random_matrix(n, k, rng), b = testing::random_matrix(k, m, rng);
    Matrix c = testing::random_matrix(n, k, rng), bias = testing::random_matrix(1, k, rng);
    require_grad_ok([](Tape&, std::span<const Var> v) { return weighted_sum(ad::matmul(v[0], v[1]), 1); }, {a, b});
    require_grad_ok([](Tape&, std::span<const Var> v) { return weighted_sum(ad::transpose(v[0]), 2); }, {a});
    require_grad_ok([](Tape&, std::span<const Var> v) { return weighted_sum(ad::add(v[0], v[1]), 3); }, {a, c});
    require_grad_ok([](Tape&, std::span<const Var> v) { return weighted_sum(ad::sub(v[0], v[1]), 4); }, {a, c});
    require_grad_ok([](Tape&, std::span<const Var> v) { return weighted_sum(ad::mul(v[0], v[1]), 5); }, {a, c});
    require_grad_ok([](Tape&, std::span<const Var> v) { return weighted_sum(ad::scale(v[0], -2.5), 6); }, {a});
    require_grad_ok([](Tape&, std::span<const Var> v) { return weighted_sum(ad::add_row_bias(v[0], v[1]), 7); }, {a, bias});
    require_grad_ok([](Tape&, std::span<const Var> v) {
      std::vector<Var> parts{v[0], v[1]};
      return weighted_sum(ad::concat_cols(parts), 8);
    }, {a, c});
    require_grad_ok([](Tape&, std::span<const Var> v) { return ad::mean(v[0]); }, {a});
    require_grad_ok([](Tape&, std::span<const Var> v) { return ad::mean_squared_error(v[0], v[1]); }, {a, c});
    require_grad_ok([](Tape&, std::span<const Var> v) { return weighted_sum(ad::leaky_relu(v[0], 0.01), 9); }, {a});
    require_grad_ok([](Tape&, std::span<const Var> v) { return weighted_sum(ad::l2_normalize(v[0]), 10); }, {a});
    require_grad_ok([](Tape&, std::span<const Var> v) { return weighted_sum(ad::cos(v[0]), 12); }, {a});
    require_grad_ok([](Tape&, std::span<const Var> v) { return weighted_sum(ad::log_sum_exp_rows(v[0]), 13); }, {a});
    Matrix inside = testing::random_matrix(n, k, rng, -0.95, 0.95);
    require_grad_ok([](Tape&, std::span<const Var> v) { return weighted_sum(ad::arccos_clamped(v[0]), 14); }, {inside});
    auto y = testing::random_labels(n, k, rng);
    std::vector<double> margins(n);
    for (auto& mg : margins) mg = 0.3 + 0.4 * std::uniform_real_distribution<double>()(rng);
    require_grad_ok([&](Tape&, std::span<const Var> v) { return weighted_sum(ad::pick(v[0], y), 15); }, {a});
    require_grad_ok([&](Tape&, std::span<const Var> v) { return weighted_sum(ad::cos_margin(v[0], y, margins), 16); }, {inside});
  }
}

TEST_CASE("dropout gradient follows its mask") {
  Rng rng(5);
  Matrix x = testing::random_matrix(6, 5, rng);
  require_grad_ok([](Tape&, std::span<const Var> v) {
    Rng mask_rng(99);  // same mask on every evaluation
    return weighted_sum(ad::dropout(v[0], 0.3, ad::Mode::kTrain, mask_rng), 17);
  }, {x});
}

TEST_CASE("a variable used twice accumulates both gradient paths") {
  Tape tape;
  Var x = tape.leaf(Matrix(1, 1, 3.0));
  Var y = ad::sum(ad::mul(x, x));  // x^2
  tape.backward(y);
  CHECK(tape.grad(x)(0, 0) == doctest::Approx(6.0));
  // A second backward pass starts from scratch.
  tape.backward(y);
  CHECK(tape.grad(x)(0, 0) == doctest::Approx(6.0));
}

TEST_CASE("detach and constants block gradients") {
  Tape tape;
  Var x = tape.leaf(Matrix(2, 2, 1.5));
  Var c = tape.constant(Matrix(2, 2, 2.0));
  Var loss = ad::sum(ad::add(ad::mul(ad::detach(x), c), ad::mul(x, c)));
  tape.backward(loss);
  CHECK(tape.grad(x)(0, 0) == doctest::Approx(2.0));
  CHECK_FALSE(tape.requires_grad(c));
  CHECK_FALSE(tape.has_grad(c));
  CHECK_THROWS_AS(tape.grad(c), ContractError);
}

TEST_CASE("backward needs a scalar") {
  Tape tape;
  Var x = tape.leaf(Matrix(2, 2, 1.0));
  CHECK_THROWS_AS(tape.backward(x), ContractError);
}

TEST_CASE("leaky_relu takes the positive branch at zero") {
  Tape tape;
  Var x = tape.leaf(Matrix(1, 3, std::vector<double>{-2.0, 0.0, 2.0}));
  Var y = ad::leaky_relu(x, 0.1);
  CHECK(y.value()(0, 0) == doctest::Approx(-0.2));
  CHECK(y.value()(0, 1) == 0.0);
  tape.backward(ad::sum(y));
  CHECK(tape.grad(x)(0, 0) == doctest::Approx(0.1));
  CHECK(tape.grad(x)(0, 1) == doctest::Approx(1.0));
  CHECK_THROWS_AS(ad::leaky_relu(x, 1.0), ContractError);
}

TEST_CASE("dropout is the identity in eval mode and drops about p in train mode") {
  Tape tape;
  Rng rng(42);
  Var x = tape.constant(Matrix(200, 200, 1.0));
  Var e = ad::dropout(x, 0.2, ad::Mode::kEval, rng);
  CHECK(e.value() == x.value());
  Var d = ad::dropout(x, 0.2, ad::Mode::kTrain, rng);
  std::size_t zeros = 0;
  for (double v : d.value().values()) {
    if (v == 0.0) ++zeros;
    else CHECK(v == doctest::Approx(1.25));
  }
  CHECK(static_cast<double>(zeros) / 40000.0 == doctest::Approx(0.2).epsilon(0.1));
}

TEST_CASE("l2_normalize yields unit rows and rejects zero rows") {
  Rng rng(1);
  Tape tape;
  Var x = tape.constant(testing::random_matrix(10, 7, rng, -5, 5));
  Var n = ad::l2_normalize(x);
  for (std::size_t r = 0; r < 10; ++r) {
    double s = 0.0;
    for (double v : n.value().row(r)) s += v * v;
    CHECK(std::sqrt(s) == doctest::Approx(1.0).epsilon(1e-12));
  }
  Var z = tape.constant(Matrix(2, 3, 0.0));
  CHECK_THROWS_AS(ad::l2_normalize(z), DegenerateEmbeddingError);
}

TEST_CASE("arccos clamps and zeroes the gradient outside the clamp") {
  Tape tape;
  Var x = tape.leaf(Matrix(1, 3, std::vector<double>{1.0, -1.0, 0.0}));
  Var a = ad::arccos_clamped(x);
  CHECK(std::isfinite(a.value()(0, 0)));
  CHECK(a.value()(0, 0) == doctest::Approx(std::acos(1.0 - ad::kCosineClamp)));
  CHECK(a.value()(0, 2) == doctest::Approx(M_PI / 2));
  tape.backward(ad::sum(a));
  CHECK(tape.grad(x)(0, 0) == 0.0);
  CHECK(tape.grad(x)(0, 1) == 0.0);
  CHECK(tape.grad(x)(0, 2) == doctest::Approx(-1.0));
}

TEST_CASE("cos_margin shifts only the target angle") {
  Tape tape;
  Var c = tape.constant(Matrix(1, 2, std::vector<double>{0.5, 0.25}));
  std::vector<std::uint32_t> y{0};
  std::vector<double> m{0.5};
  Var out = ad::cos_margin(c, y, m);
  CHECK(out.value()(0, 0) == doctest::Approx(std::cos(std::acos(0.5) + 0.5)));
  CHECK(out.value()(0, 1) == doctest::Approx(0.25));
}
