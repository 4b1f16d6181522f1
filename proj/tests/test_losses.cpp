#include <doctest.h>

#include <cmath>

#include "mstkd/error.hpp"
#include "mstkd/losses.hpp"
#include "support.hpp"

using namespace mstkd;
using ad::Tape;
using ad::Var;

namespace {

Matrix cosine_logits(const Matrix& e, const Matrix& w, double s) {
  Matrix out(e.rows(), w.rows());
  for (std::size_t i = 0; i < e.rows(); ++i)
    for (std::size_t j = 0; j < w.rows(); ++j) {
      double dot = 0.0, ne = 0.0, nw = 0.0;
      for (std::size_t d = 0; d < e.cols(); ++d) {
        dot += e(i, d) * w(j, d);
        ne += e(i, d) * e(i, d);
        nw += w(j, d) * w(j, d);
      }
      out(i, j) = s * dot / std::sqrt(ne * nw);
    }
  return out;
}

}  // namespace

TEST_CASE("softmax_ce matches the probability-space formula") {
  Rng rng(7);
  for (int t = 0; t < 50; ++t) {
    Matrix z = testing::random_matrix(8, 10, rng, -5, 5);
    auto y = testing::random_labels(8, 10, rng);
    Tape tape;
    const double got = loss::softmax_ce(tape.constant(z), y).item();
    CHECK(got == doctest::Approx(testing::naive_softmax_ce(z, y)).epsilon(1e-10));
  }
}

TEST_CASE("elastic_arcface hand-evaluated example") {
  Tape tape;
  Var e = tape.constant(Matrix(1, 2, std::vector<double>{1.0, 0.0}));
  Var w = tape.constant(Matrix(2, 2, std::vector<double>{1.0, 0.0, 0.0, 1.0}));
  std::vector<std::uint32_t> y{0};
  Rng rng(1);
  loss::EafConfig cfg{64.0, 0.5, 0.0};
  const double got = loss::elastic_arcface(e, w, y, cfg, ad::Mode::kTrain, rng).item();
  // Target angle is clamped to acos(1 - 1e-7) before the margin is added.
  const double target = 64.0 * std::cos(std::acos(1.0 - 1e-7) + 0.5);
  const double expected = std::log1p(std::exp(0.0 - target));
  CHECK(target == doctest::Approx(64.0 * std::cos(0.5)).epsilon(1e-3));
  CHECK(got == doctest::Approx(expected).epsilon(1e-9));
  CHECK(got < 1e-24);
  CHECK(got > 1e-26);
}

TEST_CASE("elastic_arcface with zero margin is softmax on scaled cosines") {
  Rng rng(13);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 1 + rng() % 6, c = 2 + rng() % 6, d = 2 + rng() % 6;
    Matrix e = testing::random_unit_rows(n, d, rng);
    Matrix w = testing::random_matrix(c, d, rng);
    auto y = testing::random_labels(n, c, rng);
    Tape tape;
    loss::EafConfig cfg{64.0, 0.0, 0.0};
    const double got = loss::elastic_arcface(tape.constant(e), tape.constant(w), y, cfg,
                                             ad::Mode::kTrain, rng).item();
    CHECK(std::abs(got - testing::naive_softmax_ce(cosine_logits(e, w, 64.0), y)) < 1e-12);
  }
}

TEST_CASE("larger margins never lower the loss") {
  Rng rng(17);
  for (int t = 0; t < 30; ++t) {
    Matrix e = testing::random_unit_rows(5, 4, rng);
    Matrix w = testing::random_matrix(6, 4, rng);
    auto y = testing::random_labels(5, 6, rng);
    double prev = -1.0;
    for (double m = 0.0; m <= 1.0; m += 0.1) {
      Tape tape;
      loss::EafConfig cfg{64.0, m, 0.0};
      const double l = loss::elastic_arcface(tape.constant(e), tape.constant(w), y, cfg,
                                             ad::Mode::kTrain, rng).item();
      CHECK(l >= prev - 1e-12);
      prev = l;
    }
  }
}

TEST_CASE("margins are Gaussian in train mode, fixed in eval mode, and not clamped") {
  Rng rng(3);
  loss::EafConfig cfg;
  auto eval = loss::draw_margins(100, cfg, ad::Mode::kEval, rng);
  for (double m : eval) CHECK(m == 0.5);
  auto train = loss::draw_margins(20000, cfg, ad::Mode::kTrain, rng);
  double mean = 0.0;
  for (double m : train) mean += m;
  mean /= static_cast<double>(train.size());
  CHECK(mean == doctest::Approx(0.5).epsilon(0.01));
  CHECK(testing::naive_sample_std(train) == doctest::Approx(0.05).epsilon(0.03));
  loss::EafConfig wide{64.0, 0.0, 1.0};
  auto w = loss::draw_margins(100, wide, ad::Mode::kTrain, rng);
  CHECK(std::any_of(w.begin(), w.end(), [](double m) { return m < 0.0; }));
}

TEST_CASE("elastic_arcface rejects non-unit embeddings") {
  Tape tape;
  Var e = tape.constant(Matrix(1, 2, std::vector<double>{2.0, 0.0}));
  Var w = tape.constant(Matrix(2, 2, 1.0));
  std::vector<std::uint32_t> y{0};
  Rng rng(1);
  CHECK_THROWS_AS(loss::elastic_arcface(e, w, y, {}, ad::Mode::kEval, rng), ContractError);
}

TEST_CASE("kd_mse matches a double loop and only feeds the student side") {
  Rng rng(19);
  for (int t = 0; t < 50; ++t) {
    Matrix a = testing::random_matrix(7, 5, rng), b = testing::random_matrix(7, 5, rng);
    Tape tape;
    Var target = tape.leaf(a);
    Var student = tape.leaf(b);
    Var kd = loss::kd_mse(target, student);
    CHECK(std::abs(kd.item() - testing::naive_kd_mse(a, b)) < 1e-12);
    tape.backward(kd);
    CHECK_FALSE(tape.has_grad(target));
    CHECK(tape.has_grad(student));
  }
  Tape tape;
  CHECK_THROWS_AS(loss::kd_mse(tape.constant(Matrix(2, 3)), tape.constant(Matrix(3, 2))),
                  DimensionError);
}

TEST_CASE("student objectives compose as eaf + lambda*kd and lambda*kd") {
  Tape tape;
  Var eaf = tape.constant(Matrix::scalar(2.5));
  Var kd = tape.constant(Matrix::scalar(1e-3));
  loss::StudentLossConfig both{10000.0, loss::StudentMode::kEafKd};
  loss::StudentLossConfig only{10000.0, loss::StudentMode::kAKd};
  CHECK(loss::student_loss(eaf, kd, both).item() == doctest::Approx(12.5));
  CHECK(loss::student_loss(std::nullopt, kd, only).item() == doctest::Approx(10.0));
  CHECK_THROWS_AS(loss::student_loss(std::nullopt, kd, both), ContractError);
  CHECK(loss::parse_student_mode("a_kd") == loss::StudentMode::kAKd);
  CHECK_THROWS_AS(loss::parse_student_mode("kd"), ConfigError);
}

TEST_CASE("loss gradients pass finite differences") {
  Rng rng(23);
  for (int t = 0; t < 10; ++t) {
    const std::size_t n = 2 + rng() % 3, c = 3 + rng() % 3, d = 3 + rng() % 3;
    auto y = testing::random_labels(n, c, rng);
    auto margins = loss::draw_margins(n, {}, ad::Mode::kTrain, rng);
    Matrix raw = testing::random_matrix(n, d, rng), w = testing::random_matrix(c, d, rng);
    Matrix tgt = testing::random_unit_rows(n, d, rng);
    auto check = [](const testing::ScalarFn& f, std::vector<Matrix> in) {
      auto r = testing::finite_difference_check(f, std::move(in));
      INFO("worst rel " << r.worst_rel << " abs " << r.worst_abs);
      CHECK(r.ok());
    };
    check([&](Tape&, std::span<const Var> v) { return loss::softmax_ce(v[0], y); },
          {testing::random_matrix(n, c, rng, -4, 4)});
    check([&](Tape&, std::span<const Var> v) {
      return loss::elastic_arcface_with_margins(ad::l2_normalize(v[0]), v[1], y, margins, 64.0);
    }, {raw, w});
    check([&](Tape& tape, std::span<const Var> v) {
      return loss::kd_mse(tape.constant(tgt), ad::l2_normalize(v[0]));
    }, {raw});
    check([&](Tape& tape, std::span<const Var> v) {
      Var e = ad::l2_normalize(v[0]);
      Var eaf = loss::elastic_arcface_with_margins(e, v[1], y, margins, 64.0);
      return loss::student_loss(eaf, loss::kd_mse(tape.constant(tgt), e),
                                {10.0, loss::StudentMode::kEafKd});
    }, {raw, w});
    check([&](Tape& tape, std::span<const Var> v) {
      return loss::student_loss(std::nullopt, loss::kd_mse(tape.constant(tgt), ad::l2_normalize(v[0])),
                                {10.0, loss::StudentMode::kAKd});
    }, {raw});
  }
}
