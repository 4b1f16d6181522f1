#include "mstkd/losses.hpp"

#include <cmath>

#include "mstkd/error.hpp"

namespace mstkd::loss {

namespace {

constexpr double kUnitTolerance = 1e-6;

void require_unit_rows(const Matrix& m) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double s = 0.0;
    for (double v : m.row(r)) s += v * v;
    if (std::abs(std::sqrt(s) - 1.0) > kUnitTolerance) {
      throw ContractError("elastic_arcface: embedding row " + std::to_string(r) +
                          " is not unit-norm (norm " +
                          std::to_string(std::sqrt(s)) + ")");
    }
  }
}

}  // namespace

void EafConfig::validate() const {
  if (!(s > 0.0)) throw ConfigError("ElasticArcFace scale s must be > 0");
  if (!(m >= 0.0)) throw ConfigError("ElasticArcFace margin m must be >= 0");
  if (!(sigma >= 0.0)) throw ConfigError("ElasticArcFace sigma must be >= 0");
}

const char* to_string(StudentMode mode) {
  return mode == StudentMode::kEafKd ? "eaf_kd" : "a_kd";
}

StudentMode parse_student_mode(const std::string& text) {
  if (text == "eaf_kd") return StudentMode::kEafKd;
  if (text == "a_kd") return StudentMode::kAKd;
  throw ConfigError("unknown student mode '" + text + "'");
}

void StudentLossConfig::validate() const {
  if (!(lambda > 0.0)) throw ConfigError("lambda must be > 0");
}

Var softmax_ce(Var logits, std::span<const std::uint32_t> labels) {
  return ad::mean(ad::cross_entropy_rows(logits, labels));
}

std::vector<double> draw_margins(std::size_t rows, const EafConfig& cfg,
                                 Mode mode, Rng& rng) {
  std::vector<double> margins(rows, cfg.m);
  if (mode == Mode::kTrain && cfg.sigma > 0.0) {
    std::normal_distribution<double> normal(cfg.m, cfg.sigma);
    for (auto& m : margins) m = normal(rng);
  }
  return margins;
}

Var elastic_arcface_with_margins(Var embeddings, Var class_weights,
                                 std::span<const std::uint32_t> labels,
                                 std::span<const double> margins, double s) {
  require_unit_rows(embeddings.value());
  if (embeddings.cols() != class_weights.cols()) {
    throw DimensionError("elastic_arcface: embedding width " +
                         std::to_string(embeddings.cols()) +
                         " vs class weight width " +
                         std::to_string(class_weights.cols()));
  }
  Var w = ad::l2_normalize(class_weights);
  Var cosines = ad::matmul(embeddings, ad::transpose(w));
  Var logits = ad::scale(ad::cos_margin(cosines, labels, margins), s);
  return softmax_ce(logits, labels);
}

Var elastic_arcface(Var embeddings, Var class_weights,
                    std::span<const std::uint32_t> labels, const EafConfig& cfg,
                    Mode mode, Rng& rng) {
  cfg.validate();
  auto margins = draw_margins(embeddings.rows(), cfg, mode, rng);
  return elastic_arcface_with_margins(embeddings, class_weights, labels,
                                      margins, cfg.s);
}

Var kd_mse(Var target, Var student) {
  if (!target.value().same_shape(student.value())) {
    throw DimensionError("kd_mse: target " + std::to_string(target.rows()) +
                         "x" + std::to_string(target.cols()) + " vs student " +
                         std::to_string(student.rows()) + "x" +
                         std::to_string(student.cols()));
  }
  return ad::mean_squared_error(student, ad::detach(target));
}

Var student_loss(std::optional<Var> eaf, Var kd, const StudentLossConfig& cfg) {
  cfg.validate();
  Var weighted = ad::scale(kd, cfg.lambda);
  if (cfg.mode == StudentMode::kAKd) return weighted;
  if (!eaf) {
    throw ContractError("eaf_kd student loss requires the classification term");
  }
  return ad::add(*eaf, weighted);
}

}  // namespace mstkd::loss
