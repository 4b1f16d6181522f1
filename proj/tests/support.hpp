#pragma once
// Test-only oracles. Everything here is written independently of the library
// code paths it checks: naive loops, probability-space formulas, exhaustive
// searches and central finite differences.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mstkd/autodiff.hpp"
#include "mstkd/matrix.hpp"
#include "mstkd/models.hpp"
#include "mstkd/rng.hpp"

namespace mstkd::testing {

inline Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng,
                            double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(rows, cols);
  for (auto& v : m.values()) v = u(rng);
  return m;
}

inline Matrix random_unit_rows(std::size_t rows, std::size_t cols, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (auto& v : m.row(r)) {
      v = n(rng);
      s += v * v;
    }
    for (auto& v : m.row(r)) v /= std::sqrt(s);
  }
  return m;
}

inline std::vector<std::uint32_t> random_labels(std::size_t n, std::size_t classes,
                                                Rng& rng) {
  std::uniform_int_distribution<std::uint32_t> u(0, static_cast<std::uint32_t>(classes - 1));
  std::vector<std::uint32_t> y(n);
  for (auto& v : y) v = u(rng);
  return y;
}

// Builds a scalar loss from leaves holding `inputs`.
using ScalarFn = std::function<ad::Var(ad::Tape&, std::span<const ad::Var>)>;

struct GradCheck {
  double worst_rel = 0.0;    // largest relative error among entries failing abs
  double worst_abs = 0.0;
  std::size_t entries = 0;
  std::size_t failures = 0;
  bool ok() const { return failures == 0; }
};

// Central differences on every input entry; an entry passes when the
// relative error is < rel_tol or the absolute error is < abs_tol.
inline GradCheck finite_difference_check(const ScalarFn& f, std::vector<Matrix> inputs,
                                         double h = 1e-6, double rel_tol = 1e-4,
                                         double abs_tol = 1e-7) {
  auto evaluate = [&](const std::vector<Matrix>& xs) {
    ad::Tape tape;
    std::vector<ad::Var> leaves;
    for (const auto& x : xs) leaves.push_back(tape.leaf(x));
    return f(tape, leaves).item();
  };
  std::vector<Matrix> analytic;
  {
    ad::Tape tape;
    std::vector<ad::Var> leaves;
    for (const auto& x : inputs) leaves.push_back(tape.leaf(x));
    ad::Var loss = f(tape, leaves);
    tape.backward(loss);
    for (std::size_t i = 0; i < leaves.size(); ++i)
      analytic.push_back(tape.has_grad(leaves[i]) ? tape.grad(leaves[i])
                                                  : Matrix(inputs[i].rows(), inputs[i].cols()));
  }
  GradCheck out;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      const double orig = inputs[i][k];
      inputs[i][k] = orig + h;
      const double up = evaluate(inputs);
      inputs[i][k] = orig - h;
      const double down = evaluate(inputs);
      inputs[i][k] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[i][k];
      const double abs_err = std::abs(a - numeric);
      const double rel_err = abs_err / std::max({std::abs(a), std::abs(numeric), 1e-300});
      ++out.entries;
      if (abs_err >= abs_tol && rel_err >= rel_tol) {
        ++out.failures;
        out.worst_rel = std::max(out.worst_rel, rel_err);
        out.worst_abs = std::max(out.worst_abs, abs_err);
      }
    }
  }
  return out;
}

// Same test for network parameters: the loss is rebuilt through a binder,
// trainable for the analytic pass and frozen for the perturbed ones.
using ParamLossFn = std::function<ad::Var(model::ParamBinder&)>;

inline GradCheck parameter_fd_check(std::vector<model::Parameter*> params,
                                    const ParamLossFn& f, double h = 1e-6,
                                    double rel_tol = 1e-4, double abs_tol = 1e-7) {
  std::vector<Matrix> analytic;
  {
    ad::Tape tape;
    model::ParamBinder binder(tape, true);
    ad::Var loss = f(binder);
    tape.backward(loss);
    for (const auto* p : params) analytic.push_back(binder.grad(*p));
  }
  auto evaluate = [&] {
    ad::Tape tape;
    model::ParamBinder binder(tape, false);
    return f(binder).item();
  };
  GradCheck out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& v = params[i]->value;
    for (std::size_t k = 0; k < v.size(); ++k) {
      const double orig = v[k];
      v[k] = orig + h;
      const double up = evaluate();
      v[k] = orig - h;
      const double down = evaluate();
      v[k] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[i][k];
      const double abs_err = std::abs(a - numeric);
      const double rel_err = abs_err / std::max({std::abs(a), std::abs(numeric), 1e-300});
      ++out.entries;
      if (abs_err >= abs_tol && rel_err >= rel_tol) {
        ++out.failures;
        out.worst_rel = std::max(out.worst_rel, rel_err);
        out.worst_abs = std::max(out.worst_abs, abs_err);
      }
    }
  }
  return out;
}

// mean_i -log( exp(z_iy) / sum_j exp(z_ij) ) evaluated in probability space.
inline double naive_softmax_ce(const Matrix& logits, std::span<const std::uint32_t> y) {
  double total = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < logits.cols(); ++j) mx = std::max(mx, logits(i, j));
    double denom = 0.0;
    for (std::size_t j = 0; j < logits.cols(); ++j) denom += std::exp(logits(i, j) - mx);
    const double p = std::exp(logits(i, y[i]) - mx) / denom;
    total += -std::log(p);
  }
  return total / static_cast<double>(logits.rows());
}

inline double naive_kd_mse(const Matrix& target, const Matrix& student) {
  double batch_sum = 0.0;
  for (std::size_t i = 0; i < target.rows(); ++i) {
    double row = 0.0;
    for (std::size_t d = 0; d < target.cols(); ++d) {
      const double diff = target(i, d) - student(i, d);
      row += diff * diff;
    }
    batch_sum += row / static_cast<double>(target.cols());
  }
  return batch_sum / static_cast<double>(target.rows());
}

struct BruteThreshold {
  double accuracy = 0.0;        // percent
  double lowest_best_cut = 0.0;  // pairs with score > cut are genuine
};

// Tries "everything genuine" and every observed score as a cut; O(n^2).
inline BruteThreshold brute_force_threshold(std::span<const double> scores,
                                            std::span<const bool> genuine) {
  std::vector<double> cuts(scores.begin(), scores.end());
  cuts.push_back(-std::numeric_limits<double>::infinity());
  std::sort(cuts.begin(), cuts.end());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
  BruteThreshold best{-1.0, 0.0};
  for (double t : cuts) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < scores.size(); ++i)
      correct += ((scores[i] > t) == genuine[i]) ? 1 : 0;
    const double acc = 100.0 * static_cast<double>(correct) / static_cast<double>(scores.size());
    if (acc > best.accuracy) best = {acc, t};  // ascending cuts: first hit is lowest
  }
  return best;
}

// Sample standard deviation and SER straight from their definitions.
inline double naive_sample_std(std::span<const double> v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

}  // namespace mstkd::testing
