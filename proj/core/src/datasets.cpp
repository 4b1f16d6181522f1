#include "mstkd/datasets.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "mstkd/error.hpp"
#include "mstkd/rng.hpp"

namespace mstkd::data {

namespace {

constexpr char kMagic[4] = {'M', 'S', 'T', 'E'};
constexpr std::size_t kHeaderSize = 4 + 4 + 1 + 8 + 8;

enum StreamTag : std::uint64_t {
  kTrainStream = 1,
  kValidationStream = 2,
  kTestStream = 3,
};

// Appends identities [first_identity, first_identity + G·per_group) in
// group-major order.
void append_identities(EmbeddingSet& out, const SyntheticDatasetSpec& spec,
                       std::size_t per_group, std::size_t samples,
                       std::uint32_t first_identity, Rng& rng) {
  const std::size_t g_count = spec.groups;
  const std::size_t rows = g_count * per_group * samples;
  out.values = Matrix(rows, spec.input_dim);
  out.labels.resize(rows);
  out.groups.resize(rows);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> prototype(spec.input_dim);
  std::size_t row = 0;
  std::uint32_t identity = first_identity;
  for (std::size_t g = 0; g < g_count; ++g) {
    const std::size_t private_begin = spec.shared_dim + g * spec.group_dim;
    for (std::size_t k = 0; k < per_group; ++k, ++identity) {
      std::fill(prototype.begin(), prototype.end(), 0.0);
      for (std::size_t c = 0; c < spec.shared_dim; ++c)
        prototype[c] = spec.shared_scale * normal(rng);
      for (std::size_t c = 0; c < spec.group_dim; ++c)
        prototype[private_begin + c] = spec.group_scale * normal(rng);
      const double noise = spec.intra_class_noise[g];
      for (std::size_t s = 0; s < samples; ++s, ++row) {
        auto features = out.values.row(row);
        for (std::size_t c = 0; c < spec.input_dim; ++c)
          features[c] = prototype[c] + noise * normal(rng);
        out.labels[row] = identity;
        out.groups[row] = static_cast<std::uint8_t>(g);
      }
    }
  }
}

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  using U = std::make_unsigned_t<
      std::conditional_t<std::is_floating_point_v<T>,
                         std::conditional_t<sizeof(T) == 8, std::int64_t,
                                            std::int32_t>,
                         T>>;
  U bits;
  std::memcpy(&bits, &value, sizeof(T));
  for (std::size_t i = 0; i < sizeof(T); ++i)
    out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

template <typename U>
U get_le(std::span<const std::uint8_t> bytes, std::size_t offset) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i)
    v |= static_cast<U>(bytes[offset + i]) << (8 * i);
  return v;
}

}  // namespace

void EmbeddingSet::validate() const {
  if (labels.size() != values.rows() || groups.size() != values.rows()) {
    throw DimensionError("embedding set has " + std::to_string(values.rows()) +
                         " rows but " + std::to_string(labels.size()) +
                         " labels and " + std::to_string(groups.size()) +
                         " group tags");
  }
}

LabeledSample sample_at(const EmbeddingSet& set, std::size_t row) {
  if (row >= set.size()) {
    throw DimensionError("sample index " + std::to_string(row) +
                         " out of range " + std::to_string(set.size()));
  }
  return {set.values.row(row), set.labels[row], set.groups[row]};
}

std::vector<GroupTag> SyntheticDatasetSpec::group_tags() const {
  std::vector<GroupTag> tags;
  for (std::size_t g = 0; g < groups; ++g) {
    tags.push_back({static_cast<std::uint8_t>(g),
                    g < group_names.size() ? group_names[g]
                                           : "g" + std::to_string(g)});
  }
  return tags;
}

void SyntheticDatasetSpec::validate() const {
  if (groups < 2) throw ConfigError("dataset needs at least 2 groups");
  if (groups > 255) throw ConfigError("at most 255 groups are supported");
  if (!group_names.empty()) {
    if (group_names.size() != groups)
      throw ConfigError("group_names must list one name per group");
    std::set<std::string> unique(group_names.begin(), group_names.end());
    if (unique.size() != group_names.size())
      throw ConfigError("group names must be unique");
  }
  if (identities_per_group == 0 || samples_per_identity == 0)
    throw ConfigError("identities_per_group and samples_per_identity must be > 0");
  if (shared_dim + groups * group_dim > input_dim)
    throw ConfigError("shared_dim + groups * group_dim exceeds input_dim");
  if (intra_class_noise.size() != groups)
    throw ConfigError("intra_class_noise must have one entry per group");
  for (double n : intra_class_noise)
    if (!(n > 0.0)) throw ConfigError("intra_class_noise values must be > 0");
  if (!(shared_scale >= 0.0) || !(group_scale >= 0.0))
    throw ConfigError("prototype scales must be non-negative");
  const std::size_t total =
      groups * (identities_per_group + validation_identities_per_group +
                test_identities_per_group);
  if (total > std::numeric_limits<std::uint32_t>::max())
    throw ConfigError("identity count exceeds u32 label range");
}

SyntheticDatasetSpec default_spec(std::size_t groups) {
  SyntheticDatasetSpec spec;
  spec.groups = groups;
  spec.intra_class_noise.assign(groups, 0.35);
  spec.intra_class_noise[0] = 0.45;
  return spec;
}

GeneratedData generate(const SyntheticDatasetSpec& spec) {
  spec.validate();
  GeneratedData out;
  const auto train_ids =
      static_cast<std::uint32_t>(spec.groups * spec.identities_per_group);
  const auto val_ids = static_cast<std::uint32_t>(
      spec.groups * spec.validation_identities_per_group);
  Rng train_rng = make_rng(spec.seed, kTrainStream);
  append_identities(out.train, spec, spec.identities_per_group,
                    spec.samples_per_identity, 0, train_rng);
  Rng val_rng = make_rng(spec.seed, kValidationStream);
  append_identities(out.validation, spec, spec.validation_identities_per_group,
                    spec.eval_samples_per_identity, train_ids, val_rng);
  Rng test_rng = make_rng(spec.seed, kTestStream);
  append_identities(out.test, spec, spec.test_identities_per_group,
                    spec.eval_samples_per_identity, train_ids + val_ids,
                    test_rng);
  return out;
}

void no_augmentation(std::span<double>, std::uint64_t) {}

const char* to_string(SplitKind kind) {
  return kind == SplitKind::kSpecialized ? "specialized" : "balanced";
}

SplitKind parse_split_kind(const std::string& text) {
  if (text == "specialized") return SplitKind::kSpecialized;
  if (text == "balanced") return SplitKind::kBalanced;
  throw ConfigError("unknown split kind '" + text + "'");
}

namespace {

std::vector<std::vector<std::uint32_t>> identities_by_group(
    const EmbeddingSet& train, std::size_t groups) {
  std::vector<std::set<std::uint32_t>> sets(groups);
  for (std::size_t r = 0; r < train.size(); ++r) {
    if (train.groups[r] >= groups) {
      throw DataError("sample group " + std::to_string(train.groups[r]) +
                      " outside [0, " + std::to_string(groups) + ")");
    }
    sets[train.groups[r]].insert(train.labels[r]);
  }
  std::vector<std::vector<std::uint32_t>> out(groups);
  for (std::size_t g = 0; g < groups; ++g) {
    out[g].assign(sets[g].begin(), sets[g].end());
  }
  return out;
}

}  // namespace

DataSplit split_specialized(const EmbeddingSet& train, std::size_t groups) {
  train.validate();
  DataSplit split;
  split.kind = SplitKind::kSpecialized;
  split.subsets = identities_by_group(train, groups);
  for (std::size_t g = 0; g < groups; ++g) {
    if (split.subsets[g].empty())
      throw DataError("group " + std::to_string(g) + " has no identities");
  }
  return split;
}

DataSplit split_balanced(const EmbeddingSet& train, std::size_t groups,
                         std::uint64_t seed) {
  train.validate();
  auto by_group = identities_by_group(train, groups);
  DataSplit split;
  split.kind = SplitKind::kBalanced;
  split.subsets.assign(groups, {});
  Rng rng(derive_seed(seed, 0));
  std::size_t counter = 0;
  for (auto& ids : by_group) {
    std::shuffle(ids.begin(), ids.end(), rng);
    for (auto id : ids) split.subsets[counter++ % groups].push_back(id);
  }
  for (auto& s : split.subsets) std::sort(s.begin(), s.end());
  return split;
}

std::vector<std::size_t> rows_for_identities(
    const EmbeddingSet& set, std::span<const std::uint32_t> identities) {
  std::set<std::uint32_t> wanted(identities.begin(), identities.end());
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < set.size(); ++r)
    if (wanted.count(set.labels[r])) rows.push_back(r);
  return rows;
}

EmbeddingSet select_rows(const EmbeddingSet& set,
                         std::span<const std::size_t> rows) {
  EmbeddingSet out;
  out.values = gather_rows(set.values, rows);
  out.labels.reserve(rows.size());
  out.groups.reserve(rows.size());
  for (auto r : rows) {
    out.labels.push_back(set.labels[r]);
    out.groups.push_back(set.groups[r]);
  }
  return out;
}

std::vector<VerificationPair> build_pairs(const EmbeddingSet& pool,
                                          std::size_t groups,
                                          std::size_t pairs_per_group,
                                          double genuine_fraction,
                                          std::uint64_t seed) {
  pool.validate();
  if (!(genuine_fraction >= 0.0 && genuine_fraction <= 1.0))
    throw ConfigError("genuine_fraction must lie in [0, 1]");
  // group -> identity -> rows
  std::vector<std::map<std::uint32_t, std::vector<std::size_t>>> index(groups);
  for (std::size_t r = 0; r < pool.size(); ++r) {
    if (pool.groups[r] >= groups)
      throw DataError("pool sample group out of range");
    index[pool.groups[r]][pool.labels[r]].push_back(r);
  }
  const auto genuine_target = static_cast<std::size_t>(
      std::llround(genuine_fraction * static_cast<double>(pairs_per_group)));
  const std::size_t impostor_target = pairs_per_group - genuine_target;

  std::vector<VerificationPair> out;
  out.reserve(groups * pairs_per_group);
  for (std::size_t g = 0; g < groups; ++g) {
    Rng rng = make_rng(seed, g);
    std::vector<std::vector<std::size_t>> multi;  // identities with >= 2 rows
    std::vector<std::vector<std::size_t>> all;
    std::size_t genuine_capacity = 0;
    for (const auto& [id, rows] : index[g]) {
      all.push_back(rows);
      if (rows.size() >= 2) {
        multi.push_back(rows);
        genuine_capacity += rows.size() * (rows.size() - 1) / 2;
      }
    }
    if (multi.empty() || genuine_capacity < genuine_target) {
      throw DataError("group " + std::to_string(g) +
                      " cannot supply " + std::to_string(genuine_target) +
                      " distinct genuine pairs");
    }
    if (impostor_target > 0 && all.size() < 2) {
      throw DataError("group " + std::to_string(g) +
                      " needs at least two identities for impostor pairs");
    }
    std::set<std::pair<std::size_t, std::size_t>> seen;
    std::vector<VerificationPair> group_pairs;
    const std::size_t max_attempts = 1000 + 100 * pairs_per_group;
    auto pick = [&rng](std::size_t n) {
      return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    };
    auto try_add = [&](std::size_t a, std::size_t b, bool genuine) {
      auto key = std::minmax(a, b);
      if (!seen.insert({key.first, key.second}).second) return false;
      group_pairs.push_back(
          {key.first, key.second, genuine, static_cast<std::uint8_t>(g)});
      return true;
    };
    std::size_t made = 0, attempts = 0;
    while (made < genuine_target) {
      if (++attempts > max_attempts)
        throw DataError("could not draw enough distinct genuine pairs");
      const auto& rows = multi[pick(multi.size())];
      const std::size_t i = pick(rows.size());
      std::size_t j = pick(rows.size() - 1);
      if (j >= i) ++j;
      if (try_add(rows[i], rows[j], true)) ++made;
    }
    made = attempts = 0;
    while (made < impostor_target) {
      if (++attempts > max_attempts)
        throw DataError("could not draw enough distinct impostor pairs");
      const std::size_t p = pick(all.size());
      std::size_t q = pick(all.size() - 1);
      if (q >= p) ++q;
      if (try_add(all[p][pick(all[p].size())], all[q][pick(all[q].size())],
                  false))
        ++made;
    }
    std::shuffle(group_pairs.begin(), group_pairs.end(), rng);
    out.insert(out.end(), group_pairs.begin(), group_pairs.end());
  }
  return out;
}

std::vector<VerificationPair> pairs_for_group(
    std::span<const VerificationPair> pairs, std::uint8_t group) {
  std::vector<VerificationPair> out;
  for (const auto& p : pairs)
    if (p.group == group) out.push_back(p);
  return out;
}

std::vector<std::uint8_t> encode_embeddings(const EmbeddingSet& set,
                                            DType dtype) {
  set.validate();
  std::vector<std::uint8_t> out;
  const std::size_t width = dtype == DType::kF64 ? 8 : 4;
  out.reserve(kHeaderSize + set.values.size() * width + set.size() * 5);
  out.insert(out.end(), kMagic, kMagic + 4);
  put_le<std::uint32_t>(out, kEmbeddingFormatVersion);
  out.push_back(static_cast<std::uint8_t>(dtype));
  put_le<std::uint64_t>(out, set.size());
  put_le<std::uint64_t>(out, set.dim());
  for (double v : set.values.values()) {
    if (dtype == DType::kF64)
      put_le<double>(out, v);
    else
      put_le<float>(out, static_cast<float>(v));
  }
  for (auto l : set.labels) put_le<std::uint32_t>(out, l);
  out.insert(out.end(), set.groups.begin(), set.groups.end());
  return out;
}

EmbeddingSet decode_embeddings(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderSize)
    throw FormatError("embedding file truncated: header incomplete");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw FormatError("embedding file has wrong magic bytes");
  const auto version = get_le<std::uint32_t>(bytes, 4);
  if (version != kEmbeddingFormatVersion)
    throw FormatError("unsupported embedding format version " +
                      std::to_string(version));
  const std::uint8_t dtype = bytes[8];
  if (dtype > 1) throw FormatError("unknown dtype code " + std::to_string(dtype));
  const std::size_t width = dtype == 1 ? 8 : 4;
  const auto rows = get_le<std::uint64_t>(bytes, 9);
  const auto dim = get_le<std::uint64_t>(bytes, 17);
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() / 16;
  if (rows > limit || dim > limit || (dim != 0 && rows > limit / dim))
    throw FormatError("dimension overflow in embedding header");
  const std::uint64_t count = rows * dim;
  const std::uint64_t expected = kHeaderSize + count * width + rows * 5;
  if (bytes.size() < expected)
    throw FormatError("embedding file truncated: expected " +
                      std::to_string(expected) + " bytes, found " +
                      std::to_string(bytes.size()));
  if (bytes.size() > expected)
    throw FormatError("embedding file has trailing bytes");

  EmbeddingSet set;
  set.values = Matrix(rows, dim);
  std::size_t off = kHeaderSize;
  for (std::size_t i = 0; i < count; ++i, off += width) {
    if (width == 8) {
      set.values[i] = std::bit_cast<double>(get_le<std::uint64_t>(bytes, off));
    } else {
      set.values[i] = std::bit_cast<float>(get_le<std::uint32_t>(bytes, off));
    }
  }
  set.labels.resize(rows);
  for (std::size_t r = 0; r < rows; ++r, off += 4)
    set.labels[r] = get_le<std::uint32_t>(bytes, off);
  set.groups.assign(bytes.begin() + static_cast<std::ptrdiff_t>(off),
                    bytes.end());
  return set;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path,
                std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void save_embeddings(const EmbeddingSet& set, const std::filesystem::path& path,
                     DType dtype) {
  write_file(path, encode_embeddings(set, dtype));
}

EmbeddingSet load_embeddings(const std::filesystem::path& path) {
  return decode_embeddings(read_file(path));
}

std::string format_pairs(std::span<const VerificationPair> pairs) {
  std::string out;
  for (const auto& p : pairs) {
    out += std::to_string(p.a) + ' ' + std::to_string(p.b) + ' ' +
           (p.genuine ? '1' : '0') + ' ' + std::to_string(p.group) + '\n';
  }
  return out;
}

std::vector<VerificationPair> parse_pairs(const std::string& text) {
  std::vector<VerificationPair> pairs;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::size_t a, b;
    int genuine, group;
    std::string extra;
    if (!(fields >> a >> b >> genuine >> group) || (fields >> extra) ||
        (genuine != 0 && genuine != 1) || group < 0 || group > 255) {
      throw FormatError("malformed pair line " + std::to_string(line_no) +
                        ": '" + line + "'");
    }
    pairs.push_back({a, b, genuine == 1, static_cast<std::uint8_t>(group)});
  }
  return pairs;
}

void save_pairs(std::span<const VerificationPair> pairs,
                const std::filesystem::path& path) {
  const std::string text = format_pairs(pairs);
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()),
                             text.size()));
}

std::vector<VerificationPair> load_pairs(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  return parse_pairs(std::string(bytes.begin(), bytes.end()));
}

}  // namespace mstkd::data
