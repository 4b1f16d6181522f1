#include "mstkd/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "mstkd/error.hpp"
#include "mstkd/evaluation.hpp"
#include "mstkd/rng.hpp"

#ifndef MSTKD_VERSION
#define MSTKD_VERSION "0.0.0"
#endif

namespace mstkd::pipeline {

using nlohmann::json;
namespace fs = std::filesystem;

std::string tool_version() { return MSTKD_VERSION; }

namespace {

// Seed-stream tags; one per pipeline role so changing one stage's seed use
// never shifts another's.
enum : std::uint64_t {
  kSplitTag = 101,
  kValidationPairsTag = 102,
  kTestPairsTag = 103,
  kTeacherTag = 200,
  kAdaptorTag = 300,
  kStudentTag = 400,
};

// Reads an object and rejects keys it never asked for.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + " must be a JSON object");
  }
  ~ObjectReader() = default;

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;  // keep the default
    try {
      out = it->template get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where_ + "." + key + " has the wrong type");
    }
  }
  const json* child(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key()))
        throw ConfigError("unknown key " + where_ + "." + it.key());
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

void read_backbone(const json& j, const std::string& where, model::BackboneConfig& b) {
  ObjectReader r(j, where);
  r.get("hidden", b.hidden);
  r.get("embedding_dim", b.embedding_dim);
  r.get("slope", b.slope);
  r.finish();
}

json backbone_json(const model::BackboneConfig& b) {
  return {{"hidden", b.hidden}, {"embedding_dim", b.embedding_dim}, {"slope", b.slope}};
}

void read_preset(const json& j, const std::string& where, train::SchedulePreset& p) {
  ObjectReader r(j, where);
  r.get("epochs", p.epochs);
  r.get("lr", p.lr0);
  r.get("decay_epochs", p.decay_epochs);
  r.finish();
}

json preset_json(const train::SchedulePreset& p) {
  return {{"epochs", p.epochs}, {"lr", p.lr0}, {"decay_epochs", p.decay_epochs}};
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<std::uint8_t> as_bytes(const std::string& s) {
  return {s.begin(), s.end()};
}

std::string read_text(const fs::path& p) {
  auto bytes = data::read_file(p);
  return {bytes.begin(), bytes.end()};
}

std::size_t worker_count(std::size_t jobs) {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("MSTKD_WORKERS"); env && *env) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1) throw ConfigError("MSTKD_WORKERS must be a positive integer");
    n = static_cast<std::size_t>(v);
  }
  return std::min(n, jobs);
}

std::string kind_mode_stem(model::AdaptorKind k, loss::StudentMode m) {
  return std::string(model::to_string(k)) + "_" + loss::to_string(m);
}

}  // namespace

train::OptimConfig ScheduleConfig::teacher_optim(std::uint64_t seed) const {
  auto c = teacher.scaled(scale);
  c.batch_size = batch_size;
  c.momentum = momentum;
  c.seed = seed;
  return c;
}

train::OptimConfig ScheduleConfig::adaptor_optim(std::uint64_t seed) const {
  auto c = adaptor.scaled(scale);
  c.batch_size = batch_size;
  c.momentum = momentum;
  c.seed = seed;
  return c;
}

train::OptimConfig ScheduleConfig::student_optim(std::uint64_t seed) const {
  auto c = student.scaled(scale);
  c.batch_size = batch_size;
  c.momentum = momentum;
  c.seed = seed;
  return c;
}

void ExperimentConfig::validate() const {
  if (name.empty()) throw ConfigError("name must not be empty");
  dataset.validate();
  if (pairs_per_group == 0) throw ConfigError("pairs_per_group must be > 0");
  if (!(genuine_fraction > 0.0 && genuine_fraction < 1.0))
    throw ConfigError("genuine_fraction must lie in (0, 1)");
  if (!group_order.empty()) {
    std::vector<std::size_t> sorted = group_order;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i)
      if (sorted[i] != i || sorted.size() != dataset.groups)
        throw ConfigError("group_order must be a permutation of 0..groups-1");
  }
  teacher_backbone.validate();
  student_backbone.validate();
  if (teacher_backbone.input_dim != dataset.input_dim ||
      student_backbone.input_dim != dataset.input_dim)
    throw ConfigError("backbone input_dim must equal dataset input_dim");
  if (teacher_backbone.embedding_dim != student_backbone.embedding_dim)
    throw ConfigError("teacher and student embedding_dim must match");
  if (adaptors.empty()) throw ConfigError("at least one adaptor kind is required");
  if (student_modes.empty()) throw ConfigError("at least one student mode is required");
  if (std::set(adaptors.begin(), adaptors.end()).size() != adaptors.size())
    throw ConfigError("adaptor kinds must be unique");
  if (std::set(student_modes.begin(), student_modes.end()).size() != student_modes.size())
    throw ConfigError("student modes must be unique");
  if (schedule.batch_size == 0) throw ConfigError("batch_size must be > 0");
  schedule.teacher_optim(0).validate();
  schedule.adaptor_optim(0).validate();
  schedule.student_optim(0).validate();
  loss::StudentLossConfig{effective_lambda(), loss::StudentMode::kAKd}.validate();
  eaf.validate();
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

std::vector<std::size_t> ExperimentConfig::resolved_group_order() const {
  if (!group_order.empty()) return group_order;
  std::vector<std::size_t> order(dataset.groups);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  return order;
}

double ExperimentConfig::effective_lambda() const {
  if (lambda_reference_dim == 0) return lambda;
  return lambda * static_cast<double>(student_backbone.embedding_dim) /
         static_cast<double>(lambda_reference_dim);
}

std::vector<std::string> ExperimentConfig::group_names() const {
  std::vector<std::string> names;
  for (const auto& t : dataset.group_tags()) names.push_back(t.name);
  return names;
}

ExperimentConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  ObjectReader r(j, "config");
  r.get("name", c.name);
  r.get("output_dir", c.output_dir);
  if (const json* d = r.child("dataset")) {
    ObjectReader dr(*d, "dataset");
    auto& s = c.dataset;
    dr.get("groups", s.groups);
    dr.get("group_names", s.group_names);
    dr.get("identities_per_group", s.identities_per_group);
    dr.get("samples_per_identity", s.samples_per_identity);
    dr.get("validation_identities_per_group", s.validation_identities_per_group);
    dr.get("test_identities_per_group", s.test_identities_per_group);
    dr.get("eval_samples_per_identity", s.eval_samples_per_identity);
    dr.get("input_dim", s.input_dim);
    dr.get("shared_dim", s.shared_dim);
    dr.get("group_dim", s.group_dim);
    dr.get("shared_scale", s.shared_scale);
    dr.get("group_scale", s.group_scale);
    dr.get("intra_class_noise", s.intra_class_noise);
    dr.finish();
  }
  if (const json* p = r.child("pairs")) {
    ObjectReader pr(*p, "pairs");
    pr.get("per_group", c.pairs_per_group);
    pr.get("genuine_fraction", c.genuine_fraction);
    pr.finish();
  }
  std::string split = data::to_string(c.split);
  r.get("split", split);
  c.split = data::parse_split_kind(split);
  r.get("group_order", c.group_order);
  if (const json* b = r.child("teacher_backbone")) read_backbone(*b, "teacher_backbone", c.teacher_backbone);
  if (const json* b = r.child("student_backbone")) read_backbone(*b, "student_backbone", c.student_backbone);
  c.teacher_backbone.input_dim = c.dataset.input_dim;
  c.student_backbone.input_dim = c.dataset.input_dim;
  if (const json* a = r.child("adaptors")) {
    std::vector<std::string> names;
    try {
      names = a->get<std::vector<std::string>>();
    } catch (const json::exception&) {
      throw ConfigError("adaptors must be a list of strings");
    }
    c.adaptors.clear();
    for (const auto& n : names) c.adaptors.push_back(model::parse_adaptor_kind(n));
  }
  if (const json* m = r.child("student_modes")) {
    std::vector<std::string> names;
    try {
      names = m->get<std::vector<std::string>>();
    } catch (const json::exception&) {
      throw ConfigError("student_modes must be a list of strings");
    }
    c.student_modes.clear();
    for (const auto& n : names) c.student_modes.push_back(loss::parse_student_mode(n));
  }
  if (const json* s = r.child("schedule")) {
    ObjectReader sr(*s, "schedule");
    sr.get("scale", c.schedule.scale);
    sr.get("batch_size", c.schedule.batch_size);
    sr.get("momentum", c.schedule.momentum);
    if (const json* p = sr.child("teacher")) read_preset(*p, "schedule.teacher", c.schedule.teacher);
    if (const json* p = sr.child("adaptor")) read_preset(*p, "schedule.adaptor", c.schedule.adaptor);
    if (const json* p = sr.child("student")) read_preset(*p, "schedule.student", c.schedule.student);
    sr.finish();
  }
  r.get("lambda", c.lambda);
  r.get("lambda_reference_dim", c.lambda_reference_dim);
  if (const json* e = r.child("eaf")) {
    ObjectReader er(*e, "eaf");
    er.get("s", c.eaf.s);
    er.get("m", c.eaf.m);
    er.get("sigma", c.eaf.sigma);
    er.finish();
  }
  if (const json* s = r.child("seeds")) {
    ObjectReader sr(*s, "seeds");
    sr.get("data", c.seeds.data);
    sr.get("init", c.seeds.init);
    sr.get("train", c.seeds.train);
    sr.finish();
  }
  r.finish();
  c.dataset.seed = c.seeds.data;
  c.validate();
  return c;
}

std::string config_to_json(const ExperimentConfig& c) {
  const auto& s = c.dataset;
  json j;
  j["name"] = c.name;
  j["output_dir"] = c.output_dir;
  j["dataset"] = {{"groups", s.groups},
                  {"group_names", s.group_names},
                  {"identities_per_group", s.identities_per_group},
                  {"samples_per_identity", s.samples_per_identity},
                  {"validation_identities_per_group", s.validation_identities_per_group},
                  {"test_identities_per_group", s.test_identities_per_group},
                  {"eval_samples_per_identity", s.eval_samples_per_identity},
                  {"input_dim", s.input_dim},
                  {"shared_dim", s.shared_dim},
                  {"group_dim", s.group_dim},
                  {"shared_scale", s.shared_scale},
                  {"group_scale", s.group_scale},
                  {"intra_class_noise", s.intra_class_noise}};
  j["pairs"] = {{"per_group", c.pairs_per_group}, {"genuine_fraction", c.genuine_fraction}};
  j["split"] = data::to_string(c.split);
  j["group_order"] = c.resolved_group_order();
  j["teacher_backbone"] = backbone_json(c.teacher_backbone);
  j["student_backbone"] = backbone_json(c.student_backbone);
  auto adaptors = json::array();
  for (auto k : c.adaptors) adaptors.push_back(model::to_string(k));
  j["adaptors"] = adaptors;
  auto modes = json::array();
  for (auto m : c.student_modes) modes.push_back(loss::to_string(m));
  j["student_modes"] = modes;
  j["schedule"] = {{"scale", c.schedule.scale},
                   {"batch_size", c.schedule.batch_size},
                   {"momentum", c.schedule.momentum},
                   {"teacher", preset_json(c.schedule.teacher)},
                   {"adaptor", preset_json(c.schedule.adaptor)},
                   {"student", preset_json(c.schedule.student)}};
  j["lambda"] = c.lambda;
  j["lambda_reference_dim"] = c.lambda_reference_dim;
  j["eaf"] = {{"s", c.eaf.s}, {"m", c.eaf.m}, {"sigma", c.eaf.sigma}};
  j["seeds"] = {{"data", c.seeds.data}, {"init", c.seeds.init}, {"train", c.seeds.train}};
  return j.dump(2) + "\n";
}

std::string content_hash(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string config_hash(const ExperimentConfig& cfg) {
  // The output directory is where a run lives, not what it computes.
  ExperimentConfig c = cfg;
  c.output_dir = "-";
  return content_hash(as_bytes(config_to_json(c)));
}

ExperimentConfig load_config(const fs::path& path) {
  if (!fs::exists(path))
    throw ConfigError("config file not found: " + path.string());
  return config_from_json(read_text(path));
}

ExperimentConfig with_seed_override(ExperimentConfig cfg, std::uint64_t seed) {
  cfg.seeds = {seed, seed, seed};
  cfg.dataset.seed = seed;
  return cfg;
}

const char* to_string(Stage s) {
  switch (s) {
    case Stage::kGenData: return "gen-data";
    case Stage::kTrainTeachers: return "train-teachers";
    case Stage::kExtract: return "extract";
    case Stage::kTrainAdaptor: return "train-adaptor";
    case Stage::kTrainStudent: return "train-student";
    case Stage::kEvaluate: return "evaluate";
  }
  return "?";
}

Stage parse_stage(const std::string& text) {
  for (auto s : kAllStages)
    if (text == to_string(s)) return s;
  throw ConfigError("unknown stage '" + text + "'");
}

std::string RunManifest::to_json() const {
  json j;
  j["tool_version"] = tool_version;
  j["config_hash"] = config_hash;
  j["group_order"] = group_order;
  json stages_j = json::object();
  for (const auto& [name, rec] : stages)
    stages_j[name] = {{"config_hash", rec.config_hash}, {"artifacts", rec.artifacts}};
  j["stages"] = stages_j;
  return j.dump(2) + "\n";
}

RunManifest RunManifest::from_json(const std::string& text) {
  RunManifest m;
  try {
    const json j = json::parse(text);
    m.tool_version = j.at("tool_version").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.group_order = j.at("group_order").get<std::string>();
    for (const auto& [name, rec] : j.at("stages").items()) {
      StageRecord r;
      r.config_hash = rec.at("config_hash").get<std::string>();
      r.artifacts = rec.at("artifacts").get<std::map<std::string, std::string>>();
      m.stages[name] = std::move(r);
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("invalid run manifest: ") + e.what());
  }
  return m;
}

Pipeline::Pipeline(ExperimentConfig cfg, fs::path out_dir, std::ostream& log)
    : cfg_(std::move(cfg)), out_(std::move(out_dir)), log_(log) {
  cfg_.validate();
  hash_ = config_hash(cfg_);
  const fs::path mpath = out_ / "manifest.json";
  if (fs::exists(mpath)) manifest_ = RunManifest::from_json(read_text(mpath));
  manifest_.tool_version = tool_version();
}

std::string Pipeline::teacher_path(std::size_t g) {
  return "teachers/teacher_g" + std::to_string(g) + ".mstc";
}
std::string Pipeline::embedding_path(std::size_t g) {
  return "embeddings/teacher_g" + std::to_string(g) + ".mste";
}
std::string Pipeline::adaptor_path(model::AdaptorKind k) {
  return std::string("adaptors/") + model::to_string(k) + ".mstc";
}
std::string Pipeline::student_path(model::AdaptorKind k, loss::StudentMode m) {
  return "students/" + kind_mode_stem(k, m) + ".mstc";
}
std::string Pipeline::student_report_path(model::AdaptorKind k, loss::StudentMode m) {
  return "reports/student_" + kind_mode_stem(k, m) + ".json";
}
std::string Pipeline::teacher_report_path(std::size_t g) {
  return "reports/teacher_g" + std::to_string(g) + ".json";
}

std::vector<std::string> Pipeline::expected_artifacts(Stage stage) const {
  const std::size_t G = cfg_.dataset.groups;
  std::vector<std::string> out;
  switch (stage) {
    case Stage::kGenData:
      out = {"data/train.mste", "data/validation.mste", "data/test.mste",
             "data/validation_pairs.txt", "data/test_pairs.txt", "data/split.json"};
      break;
    case Stage::kTrainTeachers:
      for (std::size_t g = 0; g < G; ++g) out.push_back(teacher_path(g));
      break;
    case Stage::kExtract:
      for (std::size_t g = 0; g < G; ++g) out.push_back(embedding_path(g));
      break;
    case Stage::kTrainAdaptor:
      for (auto k : cfg_.adaptors) out.push_back(adaptor_path(k));
      break;
    case Stage::kTrainStudent:
      for (auto k : cfg_.adaptors)
        for (auto m : cfg_.student_modes) out.push_back(student_path(k, m));
      break;
    case Stage::kEvaluate:
      for (std::size_t g = 0; g < G; ++g) out.push_back(teacher_report_path(g));
      for (auto k : cfg_.adaptors)
        for (auto m : cfg_.student_modes) out.push_back(student_report_path(k, m));
      out.push_back("reports/summary.md");
      break;
  }
  return out;
}

bool Pipeline::is_complete(Stage stage) const {
  auto it = manifest_.stages.find(to_string(stage));
  if (it == manifest_.stages.end() || it->second.config_hash != hash_) return false;
  for (const auto& rel : expected_artifacts(stage)) {
    auto a = it->second.artifacts.find(rel);
    if (a == it->second.artifacts.end() || !fs::exists(out_ / rel)) return false;
    if (content_hash(data::read_file(out_ / rel)) != a->second) return false;
  }
  return true;
}

void Pipeline::require_upstream(Stage stage) const {
  for (auto s : kAllStages) {
    if (s == stage) return;
    for (const auto& rel : expected_artifacts(s)) {
      if (!fs::exists(out_ / rel))
        throw MissingArtifactError("missing upstream artifact " + (out_ / rel).string() +
                                   " (run stage '" + to_string(s) + "' first)");
    }
    auto it = manifest_.stages.find(to_string(s));
    if (it == manifest_.stages.end())
      throw MissingArtifactError("stage '" + std::string(to_string(s)) +
                                 "' has no completion record in " +
                                 (out_ / "manifest.json").string());
    if (it->second.config_hash != hash_)
      throw ConfigError("config hash mismatch: stage '" + std::string(to_string(s)) +
                        "' was produced with config " + it->second.config_hash +
                        ", current config is " + hash_ + "; re-run it");
    if (!is_complete(s))
      throw MissingArtifactError("artifacts of stage '" + std::string(to_string(s)) +
                                 "' changed on disk since they were recorded; re-run it");
  }
}

void Pipeline::save_manifest() const {
  data::write_file(out_ / "manifest.json", as_bytes(manifest_.to_json()));
}

void Pipeline::record(Artifacts& artifacts, const std::string& rel,
                      std::span<const std::uint8_t> bytes) const {
  data::write_file(out_ / rel, bytes);
  artifacts[rel] = content_hash(bytes);
}

void Pipeline::write_text(const std::string& rel, const std::string& text) const {
  data::write_file(out_ / rel, as_bytes(text));
}

StageOutcome Pipeline::run(Stage stage, bool force) {
  StageOutcome outcome{stage, false, {}};
  if (!force && is_complete(stage)) {
    log_ << "[" << to_string(stage) << "] up to date (config " << hash_ << "), skipping\n";
    outcome.skipped = true;
    outcome.artifacts = expected_artifacts(stage);
    return outcome;
  }
  require_upstream(stage);
  log_ << "[" << to_string(stage) << "] running (config " << hash_ << ")\n";

  // This stage and everything after it stop being valid from here on.
  bool downstream = false;
  for (auto s : kAllStages) {
    if (s == stage) downstream = true;
    if (downstream) manifest_.stages.erase(to_string(s));
  }
  manifest_.config_hash = hash_;
  manifest_.group_order = join(cfg_.resolved_group_order());
  write_text("config.json", config_to_json(cfg_));
  save_manifest();

  Artifacts artifacts;
  switch (stage) {
    case Stage::kGenData: gen_data(artifacts); break;
    case Stage::kTrainTeachers: train_teachers(artifacts); break;
    case Stage::kExtract: extract(artifacts); break;
    case Stage::kTrainAdaptor: train_adaptors(artifacts); break;
    case Stage::kTrainStudent: train_students(artifacts); break;
    case Stage::kEvaluate: evaluate(artifacts); break;
  }
  manifest_.stages[to_string(stage)] = StageRecord{hash_, artifacts};
  save_manifest();
  for (const auto& [rel, h] : artifacts) outcome.artifacts.push_back(rel);
  log_ << "[" << to_string(stage) << "] done, " << artifacts.size() << " artifact(s)\n";
  return outcome;
}

std::vector<StageOutcome> Pipeline::run_all(bool force) {
  std::vector<StageOutcome> out;
  for (auto s : kAllStages) out.push_back(run(s, force));
  return out;
}

void Pipeline::gen_data(Artifacts& arts) {
  const std::size_t G = cfg_.dataset.groups;
  auto spec = cfg_.dataset;
  spec.seed = cfg_.seeds.data;
  const auto d = data::generate(spec);
  const auto split = cfg_.split == data::SplitKind::kSpecialized
                         ? data::split_specialized(d.train, G)
                         : data::split_balanced(d.train, G,
                                                derive_seed(cfg_.seeds.data, kSplitTag));
  const auto val_pairs = data::build_pairs(d.validation, G, cfg_.pairs_per_group,
                                           cfg_.genuine_fraction,
                                           derive_seed(cfg_.seeds.data, kValidationPairsTag));
  const auto test_pairs = data::build_pairs(d.test, G, cfg_.pairs_per_group,
                                            cfg_.genuine_fraction,
                                            derive_seed(cfg_.seeds.data, kTestPairsTag));
  record(arts, "data/train.mste", data::encode_embeddings(d.train));
  record(arts, "data/validation.mste", data::encode_embeddings(d.validation));
  record(arts, "data/test.mste", data::encode_embeddings(d.test));
  record(arts, "data/validation_pairs.txt", as_bytes(data::format_pairs(val_pairs)));
  record(arts, "data/test_pairs.txt", as_bytes(data::format_pairs(test_pairs)));
  json sj;
  sj["kind"] = data::to_string(split.kind);
  sj["subsets"] = split.subsets;
  record(arts, "data/split.json", as_bytes(sj.dump(2) + "\n"));
}

namespace {

data::DataSplit load_split(const fs::path& path) {
  data::DataSplit split;
  try {
    const json j = json::parse(read_text(path));
    split.kind = data::parse_split_kind(j.at("kind").get<std::string>());
    split.subsets = j.at("subsets").get<std::vector<std::vector<std::uint32_t>>>();
  } catch (const json::exception& e) {
    throw FormatError("invalid split file " + path.string() + ": " + e.what());
  }
  return split;
}

std::string log_text(const std::vector<train::TrainLogRecord>& recs) {
  std::string s;
  for (const auto& r : recs) s += train::to_json_line(r);
  return s;
}

}  // namespace

void Pipeline::train_teachers(Artifacts& arts) {
  const std::size_t G = cfg_.dataset.groups;
  const auto train = data::load_embeddings(out_ / "data/train.mste");
  const auto validation = data::load_embeddings(out_ / "data/validation.mste");
  const auto val_pairs = data::load_pairs(out_ / "data/validation_pairs.txt");
  const auto split = load_split(out_ / "data/split.json");
  if (split.subsets.size() != G)
    throw DataError("split has " + std::to_string(split.subsets.size()) +
                    " subsets, expected " + std::to_string(G));

  std::vector<train::TeacherJob> jobs;
  for (std::size_t g = 0; g < G; ++g) {
    train::TeacherJob job;
    // Balanced teachers have no own group; teacher g is validated on group
    // g's pairs so both origins use the same selection rule.
    job.group = static_cast<std::uint8_t>(g);
    job.identities = split.subsets[g];
    job.backbone = cfg_.teacher_backbone;
    job.eaf = cfg_.eaf;
    job.optim = cfg_.schedule.teacher_optim(derive_seed(cfg_.seeds.train, kTeacherTag + g));
    job.init_seed = derive_seed(cfg_.seeds.init, kTeacherTag + g);
    jobs.push_back(std::move(job));
  }
  std::vector<std::vector<train::TrainLogRecord>> logs(G);
  std::vector<train::LogSink> sinks;
  for (std::size_t g = 0; g < G; ++g)
    sinks.push_back([&logs, g](const train::TrainLogRecord& r) { logs[g].push_back(r); });
  const std::size_t workers = worker_count(G);
  log_ << "  training " << G << " teachers on " << workers << " worker(s)\n";
  const auto teachers = train::train_teachers(jobs, train, validation, val_pairs, G,
                                              workers, sinks);
  for (std::size_t g = 0; g < G; ++g) {
    record(arts, teacher_path(g), model::encode_checkpoint(model::to_checkpoint(teachers[g])));
    write_text("teachers/teacher_g" + std::to_string(g) + ".log.jsonl", log_text(logs[g]));
    log_ << "  teacher " << g << ": best epoch " << teachers[g].best_epoch << "\n";
  }
}

std::vector<model::TeacherModel> Pipeline::load_teachers() const {
  std::vector<model::TeacherModel> teachers;
  for (std::size_t g = 0; g < cfg_.dataset.groups; ++g)
    teachers.push_back(model::teacher_from_checkpoint(model::load_checkpoint(out_ / teacher_path(g))));
  return teachers;
}

void Pipeline::extract(Artifacts& arts) {
  const auto train = data::load_embeddings(out_ / "data/train.mste");
  const auto teachers = load_teachers();
  const auto sets = train::extract_embeddings(teachers, train);
  for (std::size_t g = 0; g < sets.size(); ++g)
    record(arts, embedding_path(g), data::encode_embeddings(sets[g]));
}

void Pipeline::train_adaptors(Artifacts& arts) {
  std::vector<Matrix> embeddings;
  std::vector<std::uint32_t> labels;
  for (std::size_t g = 0; g < cfg_.dataset.groups; ++g) {
    auto set = data::load_embeddings(out_ / embedding_path(g));
    if (g == 0) labels = set.labels;
    else if (set.labels != labels)
      throw DataError("teacher embedding files are not row-aligned");
    embeddings.push_back(std::move(set.values));
  }
  for (auto kind : cfg_.adaptors) {
    const auto k = static_cast<std::uint64_t>(kind);
    train::AdaptorJob job;
    job.kind = kind;
    job.order = cfg_.resolved_group_order();
    job.eaf = cfg_.eaf;
    job.optim = cfg_.schedule.adaptor_optim(derive_seed(cfg_.seeds.train, kAdaptorTag + k));
    job.init_seed = derive_seed(cfg_.seeds.init, kAdaptorTag + k);
    std::vector<train::TrainLogRecord> recs;
    auto result = train::train_adaptor(job, embeddings, labels,
                                       [&recs](const train::TrainLogRecord& r) { recs.push_back(r); });
    auto ckpt = model::to_checkpoint(result.adaptor);
    ckpt.meta["selected_epoch"] = std::to_string(result.selected_epoch);
    ckpt.meta["group_order"] = join(job.order);
    record(arts, adaptor_path(kind), model::encode_checkpoint(ckpt));
    write_text(std::string("adaptors/") + model::to_string(kind) + ".log.jsonl", log_text(recs));
    log_ << "  adaptor " << model::to_string(kind) << ": selected epoch "
         << result.selected_epoch << "\n";
  }
}

void Pipeline::train_students(Artifacts& arts) {
  const auto train = data::load_embeddings(out_ / "data/train.mste");
  const auto teachers = load_teachers();
  const auto order = cfg_.resolved_group_order();
  std::vector<std::uint8_t> teacher_bytes;
  for (const auto& t : teachers) {
    auto b = model::encode_checkpoint(model::to_checkpoint(t));
    teacher_bytes.insert(teacher_bytes.end(), b.begin(), b.end());
  }
  for (auto kind : cfg_.adaptors) {
    const auto adaptor =
        model::adaptor_from_checkpoint(model::load_checkpoint(out_ / adaptor_path(kind)));
    const auto adaptor_bytes = model::encode_checkpoint(model::to_checkpoint(adaptor));
    for (auto mode : cfg_.student_modes) {
      const auto tag = kStudentTag + 10 * static_cast<std::uint64_t>(kind) +
                       static_cast<std::uint64_t>(mode);
      train::StudentJob job;
      job.loss = {cfg_.effective_lambda(), mode};
      job.backbone = cfg_.student_backbone;
      job.order = order;
      job.eaf = cfg_.eaf;
      job.optim = cfg_.schedule.student_optim(derive_seed(cfg_.seeds.train, tag));
      job.init_seed = derive_seed(cfg_.seeds.init, tag);
      std::span<const std::uint32_t> labels;
      if (mode == loss::StudentMode::kEafKd) labels = train.labels;
      std::vector<train::TrainLogRecord> recs;
      const auto student = train::train_student(
          job, adaptor, teachers, train.values, labels,
          [&recs](const train::TrainLogRecord& r) { recs.push_back(r); });

      // Distillation must leave the teacher side untouched.
      std::vector<std::uint8_t> after;
      for (const auto& t : teachers) {
        auto b = model::encode_checkpoint(model::to_checkpoint(t));
        after.insert(after.end(), b.begin(), b.end());
      }
      if (after != teacher_bytes ||
          model::encode_checkpoint(model::to_checkpoint(adaptor)) != adaptor_bytes)
        throw ContractError("frozen teacher or adaptor parameters changed during distillation");

      record(arts, student_path(kind, mode), model::encode_checkpoint(model::to_checkpoint(student)));
      write_text("students/" + kind_mode_stem(kind, mode) + ".log.jsonl", log_text(recs));
      log_ << "  student " << kind_mode_stem(kind, mode) << ": final loss "
           << (recs.empty() ? 0.0 : recs.back().mean_loss) << "\n";
    }
  }
}

void Pipeline::evaluate(Artifacts& arts) {
  const auto test = data::load_embeddings(out_ / "data/test.mste");
  const auto pairs = data::load_pairs(out_ / "data/test_pairs.txt");
  const auto names = cfg_.group_names();
  const auto teachers = load_teachers();
  const char* origin = cfg_.split == data::SplitKind::kSpecialized ? "T-" : "BT-";
  std::vector<eval::TableRow> teacher_rows;
  for (std::size_t g = 0; g < teachers.size(); ++g) {
    auto report = eval::evaluate_model(teachers[g], test, pairs, names);
    record(arts, teacher_report_path(g), as_bytes(eval::report_to_json(report)));
    const std::string label = cfg_.split == data::SplitKind::kSpecialized
                                  ? origin + names[g]
                                  : origin + std::to_string(g + 1);
    teacher_rows.push_back({"Teachers", label, std::move(report)});
  }
  std::vector<eval::TableRow> student_rows;
  for (auto mode : cfg_.student_modes) {
    for (auto kind : cfg_.adaptors) {
      const auto student =
          model::student_from_checkpoint(model::load_checkpoint(out_ / student_path(kind, mode)));
      auto report = eval::evaluate_model(student, test, pairs, names);
      record(arts, student_report_path(kind, mode), as_bytes(eval::report_to_json(report)));
      student_rows.push_back({loss::to_string(mode), model::to_string(kind), std::move(report)});
    }
  }
  std::string md = "# " + cfg_.name + " (" + data::to_string(cfg_.split) + " teachers)\n\n";
  md += "Verification protocol: " + std::string(eval::kProtocol) + ".\n\n";
  md += "## Teachers\n\n" + eval::format_table(teacher_rows) + "\n";
  md += "## Students\n\n" + eval::format_table(student_rows);
  record(arts, "reports/summary.md", as_bytes(md));
}

RunSummary load_run(const fs::path& dir) {
  const fs::path cpath = dir / "config.json";
  if (!fs::exists(cpath))
    throw MissingArtifactError("no run found in " + dir.string() + " (missing config.json)");
  RunSummary run;
  run.dir = dir;
  run.config = load_config(cpath);
  std::ostringstream quiet;
  Pipeline p(run.config, dir, quiet);
  if (!p.is_complete(Stage::kEvaluate)) {
    for (const auto& rel : p.expected_artifacts(Stage::kEvaluate))
      if (!fs::exists(dir / rel))
        throw MissingArtifactError("run " + dir.string() + " is missing " + rel);
    throw MissingArtifactError("run " + dir.string() + " has no valid evaluate record");
  }
  for (auto kind : run.config.adaptors)
    for (auto mode : run.config.student_modes)
      run.students[{kind, mode}] =
          eval::report_from_json(read_text(dir / Pipeline::student_report_path(kind, mode)));
  return run;
}

std::string comparison_report(const std::vector<RunSummary>& runs) {
  if (runs.empty()) throw ContractError("comparison needs at least one run");
  const auto names = runs.front().config.group_names();
  for (const auto& r : runs)
    if (r.config.group_names() != names)
      throw ContractError("runs cover different groups");

  auto section_of = [](data::SplitKind k) {
    return k == data::SplitKind::kSpecialized ? std::string("Ours") : std::string("Baseline");
  };
  const model::AdaptorKind kinds[] = {model::AdaptorKind::kSL, model::AdaptorKind::kDuL,
                                      model::AdaptorKind::kDLDPO};
  const loss::StudentMode modes[] = {loss::StudentMode::kEafKd, loss::StudentMode::kAKd};
  const data::SplitKind origins[] = {data::SplitKind::kSpecialized, data::SplitKind::kBalanced};

  // Per-group accuracies averaged over the runs (seeds) of one origin.
  auto pooled = [&](data::SplitKind origin, model::AdaptorKind k,
                    loss::StudentMode m) -> std::optional<std::pair<eval::FairnessReport, std::size_t>> {
    std::vector<double> sum(names.size(), 0.0);
    std::size_t n = 0;
    for (const auto& r : runs) {
      if (r.config.split != origin) continue;
      auto it = r.students.find({k, m});
      if (it == r.students.end()) continue;
      for (std::size_t g = 0; g < names.size(); ++g) sum[g] += it->second.per_group_acc[g];
      ++n;
    }
    if (n == 0) return std::nullopt;
    for (auto& s : sum) s /= static_cast<double>(n);
    auto rep = eval::fairness_metrics(sum);
    rep.group_names = names;
    return std::make_pair(rep, n);
  };

  std::string out = "# Ours (specialized teachers) vs Baseline (balanced teachers)\n\n";
  out += "Verification protocol: " + std::string(eval::kProtocol) + ".\n";
  out += "Per-group accuracies are averaged over runs of the same origin; "
         "Global Acc, STD and SER are recomputed from the averages.\n";
  for (auto mode : modes) {
    std::vector<eval::TableRow> rows;
    std::map<std::pair<int, int>, eval::FairnessReport> by_key;
    std::map<data::SplitKind, std::size_t> run_counts;
    for (auto origin : origins) {
      for (auto kind : kinds) {
        auto p = pooled(origin, kind, mode);
        if (!p) continue;
        run_counts[origin] = std::max(run_counts[origin], p->second);
        by_key[{static_cast<int>(origin), static_cast<int>(kind)}] = p->first;
        rows.push_back({section_of(origin), model::to_string(kind), p->first});
      }
    }
    if (rows.empty()) continue;
    out += "\n## Students trained with " + std::string(loss::to_string(mode)) + "\n\n";
    for (auto origin : origins)
      if (run_counts.count(origin))
        out += section_of(origin) + ": " + std::to_string(run_counts[origin]) + " run(s)\n";
    out += "\n" + eval::format_table(rows);
    std::string deltas;
    for (auto kind : kinds) {
      auto a = by_key.find({static_cast<int>(data::SplitKind::kSpecialized), static_cast<int>(kind)});
      auto b = by_key.find({static_cast<int>(data::SplitKind::kBalanced), static_cast<int>(kind)});
      if (a == by_key.end() || b == by_key.end()) continue;
      deltas += eval::format_delta(std::string("Ours - Baseline ") + model::to_string(kind),
                                   eval::compare_reports(a->second, b->second), names);
    }
    if (!deltas.empty()) out += "\n" + deltas;
  }
  return out;
}

}  // namespace mstkd::pipeline
