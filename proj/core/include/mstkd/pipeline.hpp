#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mstkd/datasets.hpp"
#include "mstkd/evaluation.hpp"
#include "mstkd/losses.hpp"
#include "mstkd/models.hpp"
#include "mstkd/training.hpp"

namespace mstkd::pipeline {

std::string tool_version();

struct Seeds {
  std::uint64_t data = 1;
  std::uint64_t init = 2;
  std::uint64_t train = 3;
};

struct ScheduleConfig {
  double scale = 0.25;
  std::size_t batch_size = 128;
  double momentum = 0.9;
  train::SchedulePreset teacher = train::teacher_preset();
  train::SchedulePreset adaptor = train::adaptor_preset();
  train::SchedulePreset student = train::student_preset();

  train::OptimConfig teacher_optim(std::uint64_t seed) const;
  train::OptimConfig adaptor_optim(std::uint64_t seed) const;
  train::OptimConfig student_optim(std::uint64_t seed) const;
};

struct ExperimentConfig {
  std::string name = "desk";
  data::SyntheticDatasetSpec dataset = data::default_spec();
  std::size_t pairs_per_group = 400;
  double genuine_fraction = 0.5;
  data::SplitKind split = data::SplitKind::kSpecialized;
  std::vector<std::size_t> group_order;  // empty => 0..G-1
  model::BackboneConfig teacher_backbone;
  model::BackboneConfig student_backbone;
  std::vector<model::AdaptorKind> adaptors = {
      model::AdaptorKind::kSL, model::AdaptorKind::kDuL, model::AdaptorKind::kDLDPO};
  std::vector<loss::StudentMode> student_modes = {loss::StudentMode::kEafKd,
                                                  loss::StudentMode::kAKd};
  ScheduleConfig schedule;
  double lambda = 10000.0;
  // When non-zero, the distillation weight is lambda·D/lambda_reference_dim so
  // a weight tuned for reference_dim-wide embeddings keeps the same balance
  // against the classification term at embedding width D.
  std::size_t lambda_reference_dim = 512;
  loss::EafConfig eaf;
  Seeds seeds;
  std::string output_dir = "runs/desk";

  // Throws ConfigError on any violated invariant.
  void validate() const;
  std::vector<std::size_t> resolved_group_order() const;
  // Group names in report order.
  std::vector<std::string> group_names() const;
  double effective_lambda() const;
};

// Strict parser: unknown keys and wrong types are ConfigError.
ExperimentConfig config_from_json(const std::string& text);
// Canonical serialization (sorted keys); the config hash is taken over it.
std::string config_to_json(const ExperimentConfig& cfg);
std::string config_hash(const ExperimentConfig& cfg);
ExperimentConfig load_config(const std::filesystem::path& path);
// All three seeds are replaced by `seed`; streams stay distinct through tags.
ExperimentConfig with_seed_override(ExperimentConfig cfg, std::uint64_t seed);

// 64-bit FNV-1a, hex encoded; used for artifact integrity in the manifest.
std::string content_hash(std::span<const std::uint8_t> bytes);

enum class Stage { kGenData, kTrainTeachers, kExtract, kTrainAdaptor, kTrainStudent, kEvaluate };
inline constexpr Stage kAllStages[] = {Stage::kGenData,      Stage::kTrainTeachers,
                                       Stage::kExtract,      Stage::kTrainAdaptor,
                                       Stage::kTrainStudent, Stage::kEvaluate};
const char* to_string(Stage s);
Stage parse_stage(const std::string& text);

struct StageRecord {
  std::string config_hash;
  std::map<std::string, std::string> artifacts;  // relative path -> hash
};

struct RunManifest {
  std::string tool_version;
  std::string config_hash;
  std::string group_order;  // recorded for traceability, e.g. "0,1,2,3"
  std::map<std::string, StageRecord> stages;

  std::string to_json() const;
  static RunManifest from_json(const std::string& text);
};

struct StageOutcome {
  Stage stage;
  bool skipped = false;
  std::vector<std::string> artifacts;
};

// Owns one output directory. Each stage checks that every upstream stage is
// recorded with the current config hash and that its artifacts are still on
// disk unchanged; completed stages are skipped unless forced, and re-running
// a stage drops the records of everything downstream.
class Pipeline {
 public:
  Pipeline(ExperimentConfig cfg, std::filesystem::path out_dir,
           std::ostream& log);

  StageOutcome run(Stage stage, bool force = false);
  std::vector<StageOutcome> run_all(bool force = false);

  const ExperimentConfig& config() const { return cfg_; }
  const std::filesystem::path& out_dir() const { return out_; }
  const RunManifest& manifest() const { return manifest_; }
  bool is_complete(Stage stage) const;
  // Artifacts a stage produces under the current config (relative paths).
  std::vector<std::string> expected_artifacts(Stage stage) const;

  // Relative artifact paths.
  static std::string teacher_path(std::size_t g);
  static std::string embedding_path(std::size_t g);
  static std::string adaptor_path(model::AdaptorKind k);
  static std::string student_path(model::AdaptorKind k, loss::StudentMode m);
  static std::string student_report_path(model::AdaptorKind k, loss::StudentMode m);
  static std::string teacher_report_path(std::size_t g);

 private:
  void require_upstream(Stage stage) const;
  void save_manifest() const;
  void record(std::map<std::string, std::string>& artifacts,
              const std::string& rel, std::span<const std::uint8_t> bytes) const;
  void write_text(const std::string& rel, const std::string& text) const;

  using Artifacts = std::map<std::string, std::string>;
  void gen_data(Artifacts& out);
  void train_teachers(Artifacts& out);
  void extract(Artifacts& out);
  void train_adaptors(Artifacts& out);
  void train_students(Artifacts& out);
  void evaluate(Artifacts& out);

  std::vector<model::TeacherModel> load_teachers() const;

  ExperimentConfig cfg_;
  std::filesystem::path out_;
  std::ostream& log_;
  std::string hash_;
  RunManifest manifest_;
};

// One completed run as seen by the report stage.
struct RunSummary {
  std::filesystem::path dir;
  ExperimentConfig config;
  // (adaptor, mode) -> report
  std::map<std::pair<model::AdaptorKind, loss::StudentMode>, eval::FairnessReport> students;
};

RunSummary load_run(const std::filesystem::path& dir);

// Ours (specialized) vs Baseline (balanced) tables, one per student mode.
// Runs sharing a split kind are pooled by averaging per-group accuracies
// across seeds before the fairness metrics are recomputed.
std::string comparison_report(const std::vector<RunSummary>& runs);

}  // namespace mstkd::pipeline
