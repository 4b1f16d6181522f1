#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mstkd/datasets.hpp"
#include "mstkd/matrix.hpp"
#include "mstkd/models.hpp"

namespace mstkd::eval {

// Label written into every report; the threshold protocol changes absolute
// accuracies, so it travels with the numbers.
inline constexpr const char* kProtocol = "per-group best threshold (cosine)";

struct VerificationResult {
  double accuracy = 0.0;   // percent
  double threshold = 0.0;  // pairs with score > threshold are called genuine
  std::size_t pairs = 0;
};

// Best single-threshold accuracy over midpoints between adjacent distinct
// sorted scores (plus the all-genuine and all-impostor extremes); ties go to
// the lowest threshold. Throws ProtocolError for empty or single-class input.
VerificationResult best_threshold_accuracy(std::span<const double> scores,
                                           std::span<const bool> genuine);

// Scores pairs by the dot product of unit-norm rows of `embeddings`.
VerificationResult verification_accuracy(
    const Matrix& embeddings, std::span<const data::VerificationPair> pairs);

struct FairnessReport {
  std::vector<std::string> group_names;
  std::vector<double> per_group_acc;  // percent
  double global_acc = 0.0;
  double std_dev = 0.0;               // sample standard deviation (G-1)
  std::optional<double> ser;          // empty when max(acc) == 100
  std::vector<double> thresholds;
  std::string protocol = kProtocol;
};

// Global accuracy, sample STD and skewed error ratio of per-group accuracies.
FairnessReport fairness_metrics(std::span<const double> acc);

// (100 - min) / (100 - max); throws ProtocolError when max(acc) == 100.
double skewed_error_ratio(std::span<const double> acc);

FairnessReport evaluate_embeddings(const Matrix& embeddings,
                                   std::span<const data::VerificationPair> pairs,
                                   const std::vector<std::string>& group_names);

FairnessReport evaluate_model(const model::TeacherModel& t,
                              const data::EmbeddingSet& pool,
                              std::span<const data::VerificationPair> pairs,
                              const std::vector<std::string>& group_names);
FairnessReport evaluate_model(const model::StudentModel& s,
                              const data::EmbeddingSet& pool,
                              std::span<const data::VerificationPair> pairs,
                              const std::vector<std::string>& group_names);

struct ReportDelta {
  std::vector<double> per_group;  // a - b
  double global = 0.0;
  double std_dev = 0.0;
  std::optional<double> ser;
};

// Throws ContractError when the two reports cover different groups.
ReportDelta compare_reports(const FairnessReport& a, const FairnessReport& b);

struct TableRow {
  std::string section;  // e.g. "Ours", "Baseline"
  std::string label;    // e.g. "SL"
  FairnessReport report;
};

// Aligned UTF-8 table with the best value of each column wrapped in ** **
// within each section: highest accuracy, lowest STD, lowest SER.
std::string format_table(const std::vector<TableRow>& rows);

std::string format_delta(const std::string& label, const ReportDelta& d,
                         const std::vector<std::string>& group_names);

std::string report_to_json(const FairnessReport& r);
FairnessReport report_from_json(const std::string& text);

// Formats with two decimals (emission-time rounding).
std::string fixed2(double v);

}  // namespace mstkd::eval
