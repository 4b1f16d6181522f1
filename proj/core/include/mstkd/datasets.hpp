#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mstkd/matrix.hpp"

namespace mstkd::data {

struct GroupTag {
  std::uint8_t index = 0;
  std::string name;
};

// Rows of vectors (input features or unit-norm embeddings) with one identity
// label and one group tag per row. Datasets and embedding files share this
// representation and the on-disk container.
struct EmbeddingSet {
  Matrix values;
  std::vector<std::uint32_t> labels;
  std::vector<std::uint8_t> groups;

  std::size_t size() const { return values.rows(); }
  std::size_t dim() const { return values.cols(); }

  // Throws DimensionError if label/group counts disagree with the row count.
  void validate() const;
  bool operator==(const EmbeddingSet&) const = default;
};

// Read-only view of one row.
struct LabeledSample {
  std::span<const double> features;
  std::uint32_t identity;
  std::uint8_t group;
};

LabeledSample sample_at(const EmbeddingSet& set, std::size_t row);

struct SyntheticDatasetSpec {
  std::size_t groups = 4;
  std::vector<std::string> group_names;  // empty => "g0", "g1", ...
  std::size_t identities_per_group = 50;
  std::size_t samples_per_identity = 20;
  std::size_t validation_identities_per_group = 20;
  std::size_t test_identities_per_group = 20;
  std::size_t eval_samples_per_identity = 10;
  std::size_t input_dim = 64;
  std::size_t shared_dim = 8;
  std::size_t group_dim = 8;
  // Standard deviation of identity prototypes along the shared and private
  // coordinates respectively.
  double shared_scale = 0.6;
  double group_scale = 1.0;
  // Per-group isotropic sample noise; size must equal `groups`.
  std::vector<double> intra_class_noise = {0.45, 0.35, 0.35, 0.35};
  std::uint64_t seed = 1;

  std::vector<GroupTag> group_tags() const;
  // Throws ConfigError on violated invariants.
  void validate() const;
};

// Default desk-scale spec for G groups (noise of group 0 is the highest).
SyntheticDatasetSpec default_spec(std::size_t groups = 4);

struct GeneratedData {
  EmbeddingSet train;
  EmbeddingSet validation;
  EmbeddingSet test;
};

// Training identities are numbered 0..G·C_g-1 in group-major order; the
// validation and test identities continue the numbering and never overlap.
GeneratedData generate(const SyntheticDatasetSpec& spec);

// Identity transform on synthetic vectors; slot for an augmentation step.
using AugmentFn = void (*)(std::span<double> features, std::uint64_t seed);
void no_augmentation(std::span<double> features, std::uint64_t seed);

enum class SplitKind { kSpecialized, kBalanced };
const char* to_string(SplitKind kind);
SplitKind parse_split_kind(const std::string& text);

struct DataSplit {
  SplitKind kind = SplitKind::kSpecialized;
  // One sorted identity list per subset.
  std::vector<std::vector<std::uint32_t>> subsets;
};

// Subset g holds every identity of group g.
DataSplit split_specialized(const EmbeddingSet& train, std::size_t groups);
// Every subset gets an equal share of each group's identities; remainders are
// dealt round-robin continuing across groups.
DataSplit split_balanced(const EmbeddingSet& train, std::size_t groups,
                         std::uint64_t seed);

// Rows of `set` whose identity is in `identities`, preserving row order.
std::vector<std::size_t> rows_for_identities(
    const EmbeddingSet& set, std::span<const std::uint32_t> identities);
EmbeddingSet select_rows(const EmbeddingSet& set,
                         std::span<const std::size_t> rows);

struct VerificationPair {
  std::size_t a = 0;
  std::size_t b = 0;
  bool genuine = false;
  std::uint8_t group = 0;
  bool operator==(const VerificationPair&) const = default;
};

// Per group: `pairs_per_group` intra-group pairs, round(f·n) of them genuine;
// impostors are uniformly random within the group; no duplicate unordered
// pairs. Throws DataError when a group cannot supply enough distinct pairs.
std::vector<VerificationPair> build_pairs(const EmbeddingSet& pool,
                                          std::size_t groups,
                                          std::size_t pairs_per_group,
                                          double genuine_fraction,
                                          std::uint64_t seed);

std::vector<VerificationPair> pairs_for_group(
    std::span<const VerificationPair> pairs, std::uint8_t group);

// Binary container: "MSTE", u32 version, u8 dtype (0 f32, 1 f64), u64 rows,
// u64 dim, row-major values, u32 labels, u8 groups. All little-endian.
enum class DType : std::uint8_t { kF32 = 0, kF64 = 1 };
inline constexpr std::uint32_t kEmbeddingFormatVersion = 1;

std::vector<std::uint8_t> encode_embeddings(const EmbeddingSet& set,
                                            DType dtype = DType::kF64);
EmbeddingSet decode_embeddings(std::span<const std::uint8_t> bytes);

void save_embeddings(const EmbeddingSet& set, const std::filesystem::path& path,
                     DType dtype = DType::kF64);
EmbeddingSet load_embeddings(const std::filesystem::path& path);

// Text format, one pair per line: "idx_a idx_b genuine(0|1) group_index".
std::string format_pairs(std::span<const VerificationPair> pairs);
std::vector<VerificationPair> parse_pairs(const std::string& text);
void save_pairs(std::span<const VerificationPair> pairs,
                const std::filesystem::path& path);
std::vector<VerificationPair> load_pairs(const std::filesystem::path& path);

// Whole-file helpers shared by the other persistence code.
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path,
                std::span<const std::uint8_t> bytes);

}  // namespace mstkd::data
