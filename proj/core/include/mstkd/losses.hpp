#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mstkd/autodiff.hpp"
#include "mstkd/rng.hpp"

namespace mstkd::loss {

using ad::Mode;
using ad::Var;

struct EafConfig {
  double s = 64.0;
  double m = 0.5;
  double sigma = 0.05;

  void validate() const;  // ConfigError unless s > 0, m >= 0, sigma >= 0
};

enum class StudentMode { kEafKd, kAKd };
const char* to_string(StudentMode mode);
StudentMode parse_student_mode(const std::string& text);

struct StudentLossConfig {
  double lambda = 10000.0;
  StudentMode mode = StudentMode::kEafKd;

  void validate() const;
};

// Mean over rows of -log softmax(logits)[y].
Var softmax_ce(Var logits, std::span<const std::uint32_t> labels);

// Per-row margins: Normal(m, sigma^2) in train mode, m in eval mode.
std::vector<double> draw_margins(std::size_t rows, const EafConfig& cfg,
                                 Mode mode, Rng& rng);

// ElasticArcFace. `embeddings` rows must already be unit-norm (tolerance
// 1e-6); class weights are normalized here. Logits are s·cos(θ_y + E) for the
// target and s·cos θ_j otherwise.
Var elastic_arcface(Var embeddings, Var class_weights,
                    std::span<const std::uint32_t> labels, const EafConfig& cfg,
                    Mode mode, Rng& rng);

// Same loss with caller-supplied margins (one per row).
Var elastic_arcface_with_margins(Var embeddings, Var class_weights,
                                 std::span<const std::uint32_t> labels,
                                 std::span<const double> margins, double s);

// mean over batch and dimensions of (target - student)^2; the target is
// detached so gradients reach only the student side.
Var kd_mse(Var target, Var student);

// eaf_kd: eaf + lambda·kd; a_kd: lambda·kd.
Var student_loss(std::optional<Var> eaf, Var kd, const StudentLossConfig& cfg);

}  // namespace mstkd::loss
