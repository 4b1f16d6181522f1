#include <benchmark/benchmark.h>

#include <cstdint>
#include <memory>
#include <span>
#include <random>
#include <vector>

#include "mstkd/autodiff.hpp"
#include "mstkd/evaluation.hpp"
#include "mstkd/losses.hpp"
#include "mstkd/models.hpp"
#include "mstkd/rng.hpp"
#include "mstkd/training.hpp"

namespace {

using namespace mstkd;

Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Matrix m(rows, cols);
  for (auto& v : m.values()) v = u(rng);
  return m;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Matrix a = random_matrix(n, n, rng), b = random_matrix(n, n, rng);
  for (auto _ : state) {
    ad::Tape tape;
    benchmark::DoNotOptimize(ad::matmul(tape.constant(a), tape.constant(b)).value());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(128)->Arg(256);

// One forward/backward/update of a desk-sized teacher on a 128-row batch.
void BM_TeacherStep(benchmark::State& state) {
  Rng rng(2);
  model::BackboneConfig cfg;
  cfg.input_dim = 64;
  const std::size_t classes = 200, batch = 128;
  auto teacher = model::TeacherModel::init(cfg, classes, 0, rng);
  const Matrix x = random_matrix(batch, cfg.input_dim, rng);
  std::vector<std::uint32_t> y(batch);
  for (std::size_t i = 0; i < batch; ++i) y[i] = static_cast<std::uint32_t>(i % classes);
  train::SgdMomentum opt(teacher.parameters(), 0.9);
  Rng margins(3);
  for (auto _ : state) {
    ad::Tape tape;
    model::ParamBinder binder(tape, true);
    auto out = model::teacher_forward(teacher, binder, tape.constant(x), false);
    ad::Var loss = loss::elastic_arcface(out.embeddings, binder.bind(teacher.header), y,
                                         {}, ad::Mode::kTrain, margins);
    tape.backward(loss);
    opt.step(binder, 1e-3);
    benchmark::DoNotOptimize(loss.item());
  }
}
BENCHMARK(BM_TeacherStep)->Unit(benchmark::kMicrosecond);

void BM_ThresholdSweep(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(4);
  std::normal_distribution<double> noise(0.0, 0.2);
  std::vector<double> scores(n);
  std::vector<char> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = (i % 2 == 0);
    scores[i] = (labels[i] ? 0.6 : 0.1) + noise(rng);
  }
  // std::span<const bool> needs real bool storage
  std::unique_ptr<bool[]> genuine(new bool[n]);
  for (std::size_t i = 0; i < n; ++i) genuine[i] = labels[i] != 0;
  for (auto _ : state)
    benchmark::DoNotOptimize(
        eval::best_threshold_accuracy(scores, std::span<const bool>(genuine.get(), n)));
  state.SetComplexityN(static_cast<int64_t>(n));
}
BENCHMARK(BM_ThresholdSweep)->RangeMultiplier(10)->Range(100, 100000)->Complexity();

}  // namespace

BENCHMARK_MAIN();
