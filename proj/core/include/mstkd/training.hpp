#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mstkd/datasets.hpp"
#include "mstkd/losses.hpp"
#include "mstkd/models.hpp"

namespace mstkd::train {

struct OptimConfig {
  double lr0 = 0.1;
  double momentum = 0.9;
  std::vector<std::size_t> decay_epochs;  // 1-based epochs, strictly increasing
  double decay_factor = 10.0;
  std::size_t epochs = 1;
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;

  void validate() const;
  // lr0 / decay_factor^(number of decay epochs <= epoch); epochs are 1-based.
  double lr_at(std::size_t epoch) const;
};

struct SchedulePreset {
  std::size_t epochs;
  double lr0;
  std::vector<std::size_t> decay_epochs;

  // Epochs become ceil(epochs·scale); decay epochs are floored, kept >= 1,
  // pushed apart to stay strictly increasing, and dropped if they reach the
  // scaled epoch count.
  OptimConfig scaled(double scale) const;
};

SchedulePreset teacher_preset();  // 52 epochs, lr 0.1, decays {16,28,40,50}
SchedulePreset student_preset();  // 26 epochs, lr 0.1, decays {8,14,20,25}
SchedulePreset adaptor_preset();  // 26 epochs, lr 1,   decays {8,14,20,25}

struct TrainLogRecord {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double lr = 0.0;
  std::vector<double> validation_acc;  // per group, when evaluated
  std::optional<double> mean_eaf;
  std::optional<double> mean_kd;
  double wall_time_s = 0.0;
};

std::string to_json_line(const TrainLogRecord& r);
using LogSink = std::function<void(const TrainLogRecord&)>;

// Heavy-ball update: v <- momentum·v + g; p <- p - lr·v.
// Throws DivergenceError when the gradient holds a non-finite value.
void sgd_step(Matrix& param, const Matrix& grad, Matrix& velocity, double lr,
              double momentum);

// Owns one zero-initialized velocity buffer per parameter.
class SgdMomentum {
 public:
  SgdMomentum(std::vector<model::Parameter*> params, double momentum);
  void step(const model::ParamBinder& binder, double lr);
  const std::vector<Matrix>& velocities() const { return velocity_; }

 private:
  std::vector<model::Parameter*> params_;
  std::vector<Matrix> velocity_;
  double momentum_;
};

// Seeded per-epoch permutation of [0, n); each epoch visits every index once.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed,
                                     std::size_t epoch);

struct TeacherJob {
  std::uint8_t group = 0;
  std::vector<std::uint32_t> identities;  // training subset
  model::BackboneConfig backbone;
  loss::EafConfig eaf;
  OptimConfig optim;
  std::uint64_t init_seed = 0;
};

// Trains backbone + header on the subset with ElasticArcFace and returns the
// epoch checkpoint with the best verification accuracy on the assigned
// group's validation pairs (earliest epoch on ties).
model::TeacherModel train_teacher(const TeacherJob& job,
                                  const data::EmbeddingSet& train,
                                  const data::EmbeddingSet& validation,
                                  std::span<const data::VerificationPair> val_pairs,
                                  std::size_t groups, const LogSink& log = {});

// Runs the jobs on up to `workers` threads; results keep job order.
std::vector<model::TeacherModel> train_teachers(
    std::span<const TeacherJob> jobs, const data::EmbeddingSet& train,
    const data::EmbeddingSet& validation,
    std::span<const data::VerificationPair> val_pairs, std::size_t groups,
    std::size_t workers, const std::vector<LogSink>& logs = {});

// Every teacher embeds every sample; rows stay aligned with `dataset`.
std::vector<data::EmbeddingSet> extract_embeddings(
    std::span<const model::TeacherModel> teachers,
    const data::EmbeddingSet& dataset);

struct AdaptorJob {
  model::AdaptorKind kind = model::AdaptorKind::kSL;
  std::vector<std::size_t> order;  // teacher block order in the fused input
  loss::EafConfig eaf;
  OptimConfig optim;
  std::uint64_t init_seed = 0;
};

struct AdaptorResult {
  model::AdaptorModel adaptor;
  std::size_t selected_epoch = 0;
  std::vector<double> epoch_losses;
};

// Trains adaptor + a throwaway ElasticArcFace header on the fused teacher
// embeddings; keeps the epoch with the lowest mean training loss. Takes no
// group information.
AdaptorResult train_adaptor(const AdaptorJob& job,
                            std::span<const Matrix> teacher_embeddings,
                            std::span<const std::uint32_t> labels,
                            const LogSink& log = {});

struct StudentJob {
  loss::StudentLossConfig loss;
  model::BackboneConfig backbone;
  std::vector<std::size_t> order;
  loss::EafConfig eaf;
  OptimConfig optim;
  std::uint64_t init_seed = 0;
};

// Frozen multi-teacher target: adaptor(fuse(teacher embeddings)), eval mode.
Matrix multi_teacher_targets(std::span<const model::TeacherModel> teachers,
                             const model::AdaptorModel& adaptor,
                             std::span<const std::size_t> order,
                             const Matrix& inputs);

// The untrained student train_student starts from; `classes` is ignored in
// a_kd mode.
model::StudentModel initial_student(const StudentJob& job, std::size_t classes);

// Distills the frozen multi-teacher space into a new student; returns the
// final-epoch model. In a_kd mode `labels` is never read and may be empty.
model::StudentModel train_student(const StudentJob& job,
                                  const model::AdaptorModel& adaptor,
                                  std::span<const model::TeacherModel> teachers,
                                  const Matrix& inputs,
                                  std::span<const std::uint32_t> labels,
                                  const LogSink& log = {});

// Mean kd_mse between the student and the frozen targets over `inputs`.
double held_out_kd_mse(const model::StudentModel& student,
                       const model::AdaptorModel& adaptor,
                       std::span<const model::TeacherModel> teachers,
                       std::span<const std::size_t> order, const Matrix& inputs);

}  // namespace mstkd::train
