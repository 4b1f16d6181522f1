#include "mstkd/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <map>
#include <mutex>
#include <numeric>
#include <limits>
#include <thread>

#include <json.hpp>

#include "mstkd/error.hpp"
#include "mstkd/evaluation.hpp"
#include "mstkd/rng.hpp"

namespace mstkd::train {

using ad::Var;

namespace {

constexpr std::size_t kMaxNonFiniteSteps = 3;

enum StreamTag : std::uint64_t {
  kShuffleStream = 11,
  kMarginStream = 12,
  kDropoutStream = 13,
  kHeaderStream = 14,
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

// Maps arbitrary identity labels onto 0..C-1 in ascending label order.
struct LabelMap {
  std::map<std::uint32_t, std::uint32_t> index;

  explicit LabelMap(std::span<const std::uint32_t> labels) {
    std::vector<std::uint32_t> sorted(labels.begin(), labels.end());
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    for (std::uint32_t i = 0; i < sorted.size(); ++i) index[sorted[i]] = i;
  }
  std::size_t classes() const { return index.size(); }
  std::uint32_t operator()(std::uint32_t label) const { return index.at(label); }
};

// Shared epoch/batch driver. `step` consumes one batch of row indices and
// returns its loss, or nullopt when the loss was non-finite and no update
// was applied.
struct EpochStats {
  double mean_loss = 0.0;
  std::size_t batches = 0;
};

template <typename StepFn>
EpochStats run_epoch(std::size_t rows, const OptimConfig& cfg, std::size_t epoch,
                     std::size_t& non_finite_streak, StepFn&& step) {
  const auto order = epoch_order(rows, cfg.seed, epoch);
  EpochStats stats;
  double total = 0.0;
  std::size_t finite_batches = 0;
  for (std::size_t start = 0; start < rows; start += cfg.batch_size) {
    const std::size_t end = std::min(rows, start + cfg.batch_size);
    std::span<const std::size_t> batch(order.data() + start, end - start);
    const std::optional<double> loss = step(batch);
    ++stats.batches;
    if (!loss) {
      if (++non_finite_streak >= kMaxNonFiniteSteps) {
        throw DivergenceError("loss was non-finite for " +
                              std::to_string(kMaxNonFiniteSteps) +
                              " consecutive steps (epoch " +
                              std::to_string(epoch) + ")");
      }
      continue;
    }
    non_finite_streak = 0;
    total += *loss;
    ++finite_batches;
  }
  stats.mean_loss = finite_batches ? total / static_cast<double>(finite_batches)
                                   : std::numeric_limits<double>::quiet_NaN();
  return stats;
}

std::vector<std::uint32_t> gather_labels(std::span<const std::uint32_t> labels,
                                         std::span<const std::size_t> rows,
                                         const LabelMap& map) {
  std::vector<std::uint32_t> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(map(labels[r]));
  return out;
}

std::vector<double> validation_accuracies(const Matrix& embeddings,
                                          std::span<const data::VerificationPair> pairs,
                                          std::size_t groups) {
  std::vector<double> acc(groups, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t g = 0; g < groups; ++g) {
    auto gp = data::pairs_for_group(pairs, static_cast<std::uint8_t>(g));
    if (!gp.empty()) acc[g] = eval::verification_accuracy(embeddings, gp).accuracy;
  }
  return acc;
}

}  // namespace

void OptimConfig::validate() const {
  if (!(lr0 > 0.0)) throw ConfigError("lr0 must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0))
    throw ConfigError("momentum must lie in [0, 1)");
  if (!(decay_factor > 0.0)) throw ConfigError("decay_factor must be > 0");
  if (epochs == 0) throw ConfigError("epochs must be > 0");
  if (batch_size == 0) throw ConfigError("batch_size must be > 0");
  for (std::size_t i = 0; i < decay_epochs.size(); ++i) {
    if (decay_epochs[i] >= epochs)
      throw ConfigError("decay epoch " + std::to_string(decay_epochs[i]) +
                        " must be < epochs (" + std::to_string(epochs) + ")");
    if (i > 0 && decay_epochs[i] <= decay_epochs[i - 1])
      throw ConfigError("decay epochs must be strictly increasing");
  }
}

double OptimConfig::lr_at(std::size_t epoch) const {
  const auto passed = std::count_if(decay_epochs.begin(), decay_epochs.end(),
                                    [epoch](std::size_t d) { return d <= epoch; });
  return lr0 / std::pow(decay_factor, static_cast<double>(passed));
}

OptimConfig SchedulePreset::scaled(double scale) const {
  if (!(scale > 0.0)) throw ConfigError("schedule scale must be > 0");
  OptimConfig cfg;
  cfg.lr0 = lr0;
  cfg.epochs = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::ceil(static_cast<double>(epochs) * scale - 1e-9)));
  std::size_t prev = 0;
  for (auto d : decay_epochs) {
    auto s = static_cast<std::size_t>(std::floor(static_cast<double>(d) * scale + 1e-9));
    s = std::max(s, prev + 1);
    if (s >= cfg.epochs) break;
    cfg.decay_epochs.push_back(s);
    prev = s;
  }
  return cfg;
}

SchedulePreset teacher_preset() { return {52, 0.1, {16, 28, 40, 50}}; }
SchedulePreset student_preset() { return {26, 0.1, {8, 14, 20, 25}}; }
SchedulePreset adaptor_preset() { return {26, 1.0, {8, 14, 20, 25}}; }

std::string to_json_line(const TrainLogRecord& r) {
  nlohmann::json j;
  j["epoch"] = r.epoch;
  j["loss"] = r.mean_loss;
  j["lr"] = r.lr;
  if (!r.validation_acc.empty()) {
    auto acc = nlohmann::json::array();
    for (double a : r.validation_acc)
      acc.push_back(std::isfinite(a) ? nlohmann::json(a) : nlohmann::json());
    j["validation_acc"] = acc;
  }
  if (r.mean_eaf) j["eaf"] = *r.mean_eaf;
  if (r.mean_kd) j["kd"] = *r.mean_kd;
  j["wall_time_s"] = r.wall_time_s;
  return j.dump() + "\n";
}

void sgd_step(Matrix& param, const Matrix& grad, Matrix& velocity, double lr,
              double momentum) {
  if (!param.same_shape(grad) || !param.same_shape(velocity))
    throw DimensionError("sgd_step: parameter, gradient and velocity shapes differ");
  for (double g : grad.values()) {
    if (!std::isfinite(g)) throw DivergenceError("non-finite gradient");
  }
  for (std::size_t i = 0; i < param.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grad[i];
    param[i] -= lr * velocity[i];
  }
}

SgdMomentum::SgdMomentum(std::vector<model::Parameter*> params, double momentum)
    : params_(std::move(params)), momentum_(momentum) {
  for (const auto* p : params_)
    velocity_.emplace_back(p->value.rows(), p->value.cols());
}

void SgdMomentum::step(const model::ParamBinder& binder, double lr) {
  // Gradients are collected first so a divergence leaves parameters intact.
  std::vector<Matrix> grads;
  grads.reserve(params_.size());
  for (const auto* p : params_) {
    grads.push_back(binder.grad(*p));
    for (double g : grads.back().values())
      if (!std::isfinite(g)) throw DivergenceError("non-finite gradient in " + p->name);
  }
  for (std::size_t i = 0; i < params_.size(); ++i)
    sgd_step(params_[i]->value, grads[i], velocity_[i], lr, momentum_);
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed,
                                     std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(derive_seed(seed, kShuffleStream), epoch));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

model::TeacherModel train_teacher(const TeacherJob& job,
                                  const data::EmbeddingSet& train,
                                  const data::EmbeddingSet& validation,
                                  std::span<const data::VerificationPair> val_pairs,
                                  std::size_t groups, const LogSink& log) {
  job.optim.validate();
  job.eaf.validate();
  const auto rows = data::rows_for_identities(train, job.identities);
  if (rows.empty()) throw DataError("teacher subset has no samples");
  const Matrix inputs = gather_rows(train.values, rows);
  std::vector<std::uint32_t> subset_labels;
  for (auto r : rows) subset_labels.push_back(train.labels[r]);
  const LabelMap labels(subset_labels);
  const auto own_pairs = data::pairs_for_group(val_pairs, job.group);
  if (own_pairs.empty())
    throw DataError("no validation pairs for teacher group " + std::to_string(job.group));

  Rng init_rng = make_rng(job.init_seed, job.group);
  model::TeacherModel teacher =
      model::TeacherModel::init(job.backbone, labels.classes(), job.group, init_rng);
  SgdMomentum opt(teacher.parameters(), job.optim.momentum);
  Rng margin_rng = make_rng(job.optim.seed, kMarginStream);

  model::TeacherModel best = teacher;
  double best_acc = -1.0;
  std::size_t streak = 0;
  const auto start = Clock::now();
  for (std::size_t epoch = 1; epoch <= job.optim.epochs; ++epoch) {
    const double lr = job.optim.lr_at(epoch);
    auto stats = run_epoch(rows.size(), job.optim, epoch, streak,
                           [&](std::span<const std::size_t> batch) -> std::optional<double> {
      ad::Tape tape;
      model::ParamBinder binder(tape, true);
      Var x = tape.constant(gather_rows(inputs, batch));
      auto y = gather_labels(subset_labels, batch, labels);
      auto out = model::teacher_forward(teacher, binder, x, false);
      Var loss = loss::elastic_arcface(out.embeddings, binder.bind(teacher.header), y,
                                       job.eaf, ad::Mode::kTrain, margin_rng);
      const double value = loss.item();
      if (!std::isfinite(value)) return std::nullopt;
      tape.backward(loss);
      opt.step(binder, lr);
      return value;
    });
    const Matrix val_emb = model::embed(teacher, validation.values);
    for (double v : val_emb.values())
      if (!std::isfinite(v)) throw DivergenceError("teacher embeddings became non-finite");
    const double own_acc = eval::verification_accuracy(val_emb, own_pairs).accuracy;
    if (own_acc > best_acc) {
      best_acc = own_acc;
      best = teacher;
      best.best_epoch = epoch;
    }
    if (log) {
      TrainLogRecord rec;
      rec.epoch = epoch;
      rec.mean_loss = stats.mean_loss;
      rec.lr = lr;
      rec.validation_acc = validation_accuracies(val_emb, val_pairs, groups);
      rec.wall_time_s = seconds_since(start);
      log(rec);
    }
  }
  return best;
}

std::vector<model::TeacherModel> train_teachers(
    std::span<const TeacherJob> jobs, const data::EmbeddingSet& train,
    const data::EmbeddingSet& validation,
    std::span<const data::VerificationPair> val_pairs, std::size_t groups,
    std::size_t workers, const std::vector<LogSink>& logs) {
  std::vector<std::optional<model::TeacherModel>> results(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  std::size_t next = 0;
  std::mutex mu;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= jobs.size()) return;
        i = next++;
      }
      try {
        results[i] = train_teacher(jobs[i], train, validation, val_pairs, groups,
                                   i < logs.size() ? logs[i] : LogSink{});
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(workers, jobs.size()));
  std::vector<std::thread> threads;
  for (std::size_t t = 1; t < n; ++t) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  std::vector<model::TeacherModel> out;
  for (auto& r : results) out.push_back(std::move(*r));
  return out;
}

std::vector<data::EmbeddingSet> extract_embeddings(
    std::span<const model::TeacherModel> teachers,
    const data::EmbeddingSet& dataset) {
  dataset.validate();
  std::vector<data::EmbeddingSet> out;
  for (const auto& t : teachers) {
    data::EmbeddingSet set;
    set.values = model::embed(t, dataset.values);
    set.labels = dataset.labels;
    set.groups = dataset.groups;
    out.push_back(std::move(set));
  }
  return out;
}

AdaptorResult train_adaptor(const AdaptorJob& job,
                            std::span<const Matrix> teacher_embeddings,
                            std::span<const std::uint32_t> labels,
                            const LogSink& log) {
  job.optim.validate();
  job.eaf.validate();
  if (teacher_embeddings.empty()) throw ContractError("adaptor needs teacher embeddings");
  const std::size_t dim = teacher_embeddings.front().cols();
  for (const auto& m : teacher_embeddings) {
    if (m.cols() != dim) throw DimensionError("teacher embedding widths differ");
    if (m.rows() != labels.size())
      throw ContractError("teacher embeddings are not aligned with the labels");
  }
  const Matrix fused = model::fuse_inputs(teacher_embeddings, job.order);
  const LabelMap map(labels);

  Rng init_rng = make_rng(job.init_seed, static_cast<std::uint64_t>(job.kind));
  AdaptorResult result;
  model::AdaptorModel adaptor =
      model::AdaptorModel::init(job.kind, teacher_embeddings.size(), dim, init_rng);
  Rng header_rng = make_rng(job.init_seed, kHeaderStream);
  model::Parameter header = model::init_header("header", map.classes(), dim, header_rng);
  auto params = adaptor.parameters();
  params.push_back(&header);
  SgdMomentum opt(params, job.optim.momentum);
  Rng margin_rng = make_rng(job.optim.seed, kMarginStream);
  Rng dropout_rng = make_rng(job.optim.seed, kDropoutStream);

  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t streak = 0;
  const auto start = Clock::now();
  for (std::size_t epoch = 1; epoch <= job.optim.epochs; ++epoch) {
    const double lr = job.optim.lr_at(epoch);
    auto stats = run_epoch(fused.rows(), job.optim, epoch, streak,
                           [&](std::span<const std::size_t> batch) -> std::optional<double> {
      ad::Tape tape;
      model::ParamBinder binder(tape, true);
      Var x = tape.constant(gather_rows(fused, batch));
      auto y = gather_labels(labels, batch, map);
      Var e = model::adaptor_forward(adaptor, binder, x, ad::Mode::kTrain, dropout_rng);
      Var loss = loss::elastic_arcface(e, binder.bind(header), y, job.eaf,
                                       ad::Mode::kTrain, margin_rng);
      const double value = loss.item();
      if (!std::isfinite(value)) return std::nullopt;
      tape.backward(loss);
      opt.step(binder, lr);
      return value;
    });
    result.epoch_losses.push_back(stats.mean_loss);
    if (stats.mean_loss < best_loss) {
      best_loss = stats.mean_loss;
      result.adaptor = adaptor;
      result.selected_epoch = epoch;
    }
    if (log) {
      TrainLogRecord rec;
      rec.epoch = epoch;
      rec.mean_loss = stats.mean_loss;
      rec.lr = lr;
      rec.wall_time_s = seconds_since(start);
      log(rec);
    }
  }
  if (result.selected_epoch == 0) throw DivergenceError("adaptor training produced no finite epoch");
  return result;
}

Matrix multi_teacher_targets(std::span<const model::TeacherModel> teachers,
                             const model::AdaptorModel& adaptor,
                             std::span<const std::size_t> order,
                             const Matrix& inputs) {
  std::vector<Matrix> per_teacher;
  for (const auto& t : teachers) per_teacher.push_back(model::embed(t, inputs));
  return model::embed(adaptor, model::fuse_inputs(per_teacher, order));
}

model::StudentModel initial_student(const StudentJob& job, std::size_t classes) {
  Rng init_rng = make_rng(job.init_seed, static_cast<std::uint64_t>(job.loss.mode));
  return model::StudentModel::init(job.backbone, job.loss.mode, classes, init_rng);
}

model::StudentModel train_student(const StudentJob& job,
                                  const model::AdaptorModel& adaptor,
                                  std::span<const model::TeacherModel> teachers,
                                  const Matrix& inputs,
                                  std::span<const std::uint32_t> labels,
                                  const LogSink& log) {
  job.optim.validate();
  job.loss.validate();
  const bool with_eaf = job.loss.mode == loss::StudentMode::kEafKd;
  if (teachers.size() != adaptor.groups)
    throw ContractError("adaptor expects " + std::to_string(adaptor.groups) +
                        " teachers, got " + std::to_string(teachers.size()));
  std::optional<LabelMap> map;
  if (with_eaf) {
    job.eaf.validate();
    if (labels.size() != inputs.rows())
      throw ContractError("eaf_kd student needs one label per input row");
    map.emplace(labels);
  }

  model::StudentModel student = initial_student(job, map ? map->classes() : 0);
  SgdMomentum opt(student.parameters(), job.optim.momentum);
  Rng margin_rng = make_rng(job.optim.seed, kMarginStream);
  Rng unused_rng(0);

  std::size_t streak = 0;
  const auto start = Clock::now();
  for (std::size_t epoch = 1; epoch <= job.optim.epochs; ++epoch) {
    const double lr = job.optim.lr_at(epoch);
    double eaf_sum = 0.0, kd_sum = 0.0;
    std::size_t finite = 0;
    auto stats = run_epoch(inputs.rows(), job.optim, epoch, streak,
                           [&](std::span<const std::size_t> batch) -> std::optional<double> {
      ad::Tape tape;
      model::ParamBinder frozen(tape, false);
      model::ParamBinder binder(tape, true);
      Var x = tape.constant(gather_rows(inputs, batch));
      std::vector<Var> teacher_out;
      for (const auto& t : teachers)
        teacher_out.push_back(model::teacher_forward(t, frozen, x, false).embeddings);
      Var target = model::adaptor_forward(adaptor, frozen,
                                          model::fuse_inputs(teacher_out, job.order),
                                          ad::Mode::kEval, unused_rng);
      auto out = model::student_forward(student, binder, x, false);
      Var kd = loss::kd_mse(target, out.embeddings);
      std::optional<Var> eaf;
      if (with_eaf) {
        auto y = gather_labels(labels, batch, *map);
        eaf = loss::elastic_arcface(out.embeddings, binder.bind(*student.header), y,
                                    job.eaf, ad::Mode::kTrain, margin_rng);
      }
      Var total = loss::student_loss(eaf, kd, job.loss);
      const double value = total.item();
      if (!std::isfinite(value)) return std::nullopt;
      tape.backward(total);
      opt.step(binder, lr);
      kd_sum += kd.item();
      if (eaf) eaf_sum += eaf->item();
      ++finite;
      return value;
    });
    if (log) {
      TrainLogRecord rec;
      rec.epoch = epoch;
      rec.mean_loss = stats.mean_loss;
      rec.lr = lr;
      if (finite) {
        rec.mean_kd = kd_sum / static_cast<double>(finite);
        if (with_eaf) rec.mean_eaf = eaf_sum / static_cast<double>(finite);
      }
      rec.wall_time_s = seconds_since(start);
      log(rec);
    }
  }
  return student;
}

double held_out_kd_mse(const model::StudentModel& student,
                       const model::AdaptorModel& adaptor,
                       std::span<const model::TeacherModel> teachers,
                       std::span<const std::size_t> order, const Matrix& inputs) {
  const Matrix target = multi_teacher_targets(teachers, adaptor, order, inputs);
  const Matrix emb = model::embed(student, inputs);
  double s = 0.0;
  for (std::size_t i = 0; i < emb.size(); ++i) {
    const double d = target[i] - emb[i];
    s += d * d;
  }
  return emb.size() ? s / static_cast<double>(emb.size()) : 0.0;
}

}  // namespace mstkd::train
