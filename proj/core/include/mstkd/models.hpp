#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mstkd/autodiff.hpp"
#include "mstkd/losses.hpp"
#include "mstkd/matrix.hpp"
#include "mstkd/rng.hpp"

namespace mstkd::model {

using ad::Mode;
using ad::Var;

struct Parameter {
  std::string name;
  Matrix value;
};

// Puts parameters on a tape, as leaves when trainable and as constants when
// the owning network is frozen. Remembers the handle for gradient lookup.
class ParamBinder {
 public:
  ParamBinder(ad::Tape& tape, bool trainable)
      : tape_(&tape), trainable_(trainable) {}

  Var bind(const Parameter& p);
  ad::Tape& tape() const { return *tape_; }
  bool trainable() const { return trainable_; }

  // Gradient of the last backward pass w.r.t. `p`; zeros if `p` was bound but
  // did not influence the loss. Throws ContractError if `p` was never bound.
  Matrix grad(const Parameter& p) const;

 private:
  ad::Tape* tape_;
  bool trainable_;
  std::map<const Parameter*, Var> bound_;
};

struct Linear {
  Parameter weight;  // in × out
  Parameter bias;    // 1 × out

  static Linear init(const std::string& name, std::size_t in, std::size_t out,
                     Rng& rng);
  Var forward(ParamBinder& binder, Var x) const;
  std::size_t input_dim() const { return weight.value.rows(); }
  std::size_t output_dim() const { return weight.value.cols(); }
};

struct BackboneConfig {
  std::size_t input_dim = 64;
  std::vector<std::size_t> hidden = {128};
  std::size_t embedding_dim = 32;
  double slope = 0.01;

  void validate() const;
};

// Multilayer perceptron: (affine → leaky_relu) per hidden layer, then an
// affine projection to the embedding width. Output is not normalized.
struct Backbone {
  BackboneConfig config;
  std::vector<Linear> layers;

  static Backbone init(const BackboneConfig& cfg, Rng& rng);
  Var forward(ParamBinder& binder, Var x) const;
};

// Header rows drawn from a unit Gaussian and normalized.
Parameter init_header(const std::string& name, std::size_t classes,
                      std::size_t dim, Rng& rng);

struct ForwardOutput {
  Var embeddings;              // unit-norm rows
  std::optional<Var> logits;   // cosines against normalized header rows
};

struct TeacherModel {
  Backbone backbone;
  Parameter header;  // C_t × D
  std::uint8_t assigned_group = 0;
  std::size_t best_epoch = 0;

  static TeacherModel init(const BackboneConfig& cfg, std::size_t classes,
                           std::uint8_t group, Rng& rng);
  std::vector<const Parameter*> parameters() const;
  std::vector<Parameter*> parameters();
};

ForwardOutput teacher_forward(const TeacherModel& t, ParamBinder& binder,
                              Var batch, bool with_logits = true);

enum class AdaptorKind { kSL, kDuL, kDLDPO };
const char* to_string(AdaptorKind kind);
AdaptorKind parse_adaptor_kind(const std::string& text);

inline constexpr double kAdaptorSlope = 0.01;
inline constexpr double kAdaptorDropout = 0.2;

struct AdaptorModel {
  AdaptorKind kind = AdaptorKind::kSL;
  std::size_t groups = 0;
  std::size_t dim = 0;
  Linear first;                 // G·D → D
  std::optional<Linear> second; // D → D for DuL / DLDPO
  double dropout = 0.0;         // applied before the activation (DLDPO)
  double slope = kAdaptorSlope;

  static AdaptorModel init(AdaptorKind kind, std::size_t groups,
                           std::size_t dim, Rng& rng);
  std::size_t input_dim() const { return groups * dim; }
  std::vector<const Parameter*> parameters() const;
  std::vector<Parameter*> parameters();
};

// Returns the L2-normalized multi-teacher embedding. `rng` drives dropout in
// train mode only.
Var adaptor_forward(const AdaptorModel& a, ParamBinder& binder, Var fused,
                    Mode mode, Rng& rng);

// Concatenates per-teacher embedding blocks (rows aligned) in `order`.
Matrix fuse_inputs(std::span<const Matrix> per_teacher,
                   std::span<const std::size_t> order);
Var fuse_inputs(std::span<const Var> per_teacher,
                std::span<const std::size_t> order);

// Frobenius norm of each teacher block of an SL weight matrix, normalized to
// sum to one.
std::vector<double> trace_teacher_attribution(const AdaptorModel& a);

struct StudentModel {
  Backbone backbone;
  std::optional<Parameter> header;  // present only in eaf_kd mode
  loss::StudentMode mode = loss::StudentMode::kAKd;

  static StudentModel init(const BackboneConfig& cfg, loss::StudentMode mode,
                           std::size_t classes, Rng& rng);
  std::vector<const Parameter*> parameters() const;
  std::vector<Parameter*> parameters();
};

ForwardOutput student_forward(const StudentModel& s, ParamBinder& binder,
                              Var batch, bool with_logits = true);

std::size_t parameter_count(std::span<const Parameter* const> params);

// Eval-mode, gradient-free embedding of many rows (processed in chunks).
Matrix embed(const TeacherModel& t, const Matrix& inputs);
Matrix embed(const StudentModel& s, const Matrix& inputs);
Matrix embed(const AdaptorModel& a, const Matrix& fused);

// Checkpoint container: "MSTC", u32 version, u64 manifest length, a UTF-8
// manifest ("meta <key> <value>" and "param <name> <rows> <cols> <offset>"
// lines, offsets counted in doubles), then raw f64 little-endian data.
struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<Parameter> params;

  const Parameter& param(const std::string& name) const;
  const std::string& get(const std::string& key) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

Checkpoint to_checkpoint(const TeacherModel& t);
Checkpoint to_checkpoint(const AdaptorModel& a);
Checkpoint to_checkpoint(const StudentModel& s);
TeacherModel teacher_from_checkpoint(const Checkpoint& c);
AdaptorModel adaptor_from_checkpoint(const Checkpoint& c);
StudentModel student_from_checkpoint(const Checkpoint& c);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mstkd::model
