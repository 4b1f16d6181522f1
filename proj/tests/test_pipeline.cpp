#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mstkd/error.hpp"
#include "mstkd/pipeline.hpp"

using namespace mstkd;
using namespace mstkd::pipeline;
namespace fs = std::filesystem;

#ifndef MSTKD_TEST_DATA_DIR
#error "MSTKD_TEST_DATA_DIR must point at tests/data"
#endif

namespace {

const fs::path kTiny = fs::path(MSTKD_TEST_DATA_DIR) / "tiny.json";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Fresh directory removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = fs::temp_directory_path() / ("mstkd_test_" + tag);
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::string with_key(const std::string& key, const nlohmann::json& value) {
  auto j = nlohmann::json::parse(slurp(kTiny));
  j[key] = value;
  return j.dump();
}

}  // namespace

TEST_CASE("config parsing is strict") {
  CHECK_NOTHROW(config_from_json(slurp(kTiny)));
  CHECK_THROWS_AS(config_from_json(with_key("colour", "blue")), ConfigError);
  CHECK_THROWS_AS(config_from_json(with_key("lambda", "big")), ConfigError);
  CHECK_THROWS_AS(config_from_json(with_key("split", "random")), ConfigError);
  CHECK_THROWS_AS(config_from_json(with_key("adaptors", nlohmann::json::array({"SL", "XL"}))),
                  ConfigError);
  CHECK_THROWS_AS(config_from_json(with_key("adaptors", nlohmann::json::array({"SL", "SL"}))),
                  ConfigError);
  CHECK_THROWS_AS(config_from_json(with_key("group_order", nlohmann::json::array({0, 0, 1}))),
                  ConfigError);
  CHECK_THROWS_AS(config_from_json("{ not json"), ConfigError);
  auto j = nlohmann::json::parse(slurp(kTiny));
  j["dataset"]["noise"] = 1;
  CHECK_THROWS_AS(config_from_json(j.dump()), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("config serialization is canonical and hashed without the output dir") {
  auto c = load_config(kTiny);
  CHECK(c.dataset.seed == c.seeds.data);
  CHECK(c.teacher_backbone.input_dim == 28);
  CHECK(c.effective_lambda() == doctest::Approx(10000.0 * 8 / 512));
  auto back = config_from_json(config_to_json(c));
  CHECK(config_to_json(back) == config_to_json(c));
  CHECK(config_hash(back) == config_hash(c));
  auto moved = c;
  moved.output_dir = "elsewhere";
  CHECK(config_hash(moved) == config_hash(c));
  auto changed = c;
  changed.lambda = 1.0;
  CHECK_FALSE(config_hash(changed) == config_hash(c));
  auto reseeded = with_seed_override(c, 77);
  CHECK(reseeded.seeds.data == 77);
  CHECK(reseeded.seeds.init == 77);
  CHECK(reseeded.seeds.train == 77);
  CHECK(reseeded.dataset.seed == 77);
  CHECK_FALSE(config_hash(reseeded) == config_hash(c));
}

TEST_CASE("stage names round-trip") {
  for (auto s : kAllStages) CHECK(parse_stage(to_string(s)) == s);
  CHECK(std::string(to_string(Stage::kTrainAdaptor)) == "train-adaptor");
  CHECK_THROWS_AS(parse_stage("train-everything"), ConfigError);
}

TEST_CASE("manifest JSON round-trips") {
  RunManifest m;
  m.tool_version = "1.2.3";
  m.config_hash = "abc";
  m.group_order = "0,1,2";
  m.stages["gen-data"] = {"abc", {{"data/train.mste", "0011"}}};
  auto back = RunManifest::from_json(m.to_json());
  CHECK(back.to_json() == m.to_json());
  CHECK_THROWS_AS(RunManifest::from_json("[]"), FormatError);
}

TEST_CASE("stages run in order and refuse missing upstream artifacts") {
  TempDir dir("dag");
  std::ostringstream log;
  Pipeline p(load_config(kTiny), dir.path(), log);
  CHECK_THROWS_AS(p.run(Stage::kTrainTeachers), MissingArtifactError);
  p.run(Stage::kGenData);
  p.run(Stage::kTrainTeachers);
  p.run(Stage::kExtract);
  p.run(Stage::kTrainAdaptor);
  try {
    p.run(Stage::kEvaluate);
    FAIL("evaluate ran without students");
  } catch (const MissingArtifactError& e) {
    CHECK(std::string(e.what()).find("students/SL_eaf_kd.mstc") != std::string::npos);
  }
  p.run(Stage::kTrainStudent);
  p.run(Stage::kEvaluate);
  for (auto s : kAllStages) {
    CHECK(p.is_complete(s));
    for (const auto& rel : p.expected_artifacts(s)) CHECK(fs::exists(dir.path() / rel));
  }
  CHECK(fs::exists(dir.path() / "teachers/teacher_g0.log.jsonl"));
  CHECK(fs::exists(dir.path() / "config.json"));
  const auto manifest = RunManifest::from_json(slurp(dir.path() / "manifest.json"));
  CHECK(manifest.stages.size() == 6);
  CHECK(manifest.group_order == "0,1,2");
}

TEST_CASE("completed stages are skipped, forced stages invalidate downstream") {
  TempDir dir("idem");
  std::ostringstream log;
  Pipeline p(load_config(kTiny), dir.path(), log);
  p.run_all();
  const auto student = slurp(dir.path() / Pipeline::student_path(model::AdaptorKind::kDuL,
                                                                  loss::StudentMode::kAKd));
  auto again = p.run_all();
  CHECK(std::all_of(again.begin(), again.end(), [](const auto& o) { return o.skipped; }));

  // a fresh Pipeline object sees the same state on disk
  Pipeline q(load_config(kTiny), dir.path(), log);
  CHECK(q.is_complete(Stage::kEvaluate));

  auto forced = q.run(Stage::kTrainAdaptor, true);
  CHECK_FALSE(forced.skipped);
  CHECK(q.is_complete(Stage::kTrainAdaptor));
  CHECK_FALSE(q.is_complete(Stage::kTrainStudent));
  CHECK_FALSE(q.is_complete(Stage::kEvaluate));
  q.run_all();
  CHECK(q.is_complete(Stage::kEvaluate));
  // same inputs, same bytes
  CHECK(slurp(dir.path() / Pipeline::student_path(model::AdaptorKind::kDuL,
                                                  loss::StudentMode::kAKd)) == student);
}

TEST_CASE("deleted or edited artifacts and config changes block downstream stages") {
  TempDir dir("tamper");
  std::ostringstream log;
  const auto cfg = load_config(kTiny);
  {
    Pipeline p(cfg, dir.path(), log);
    p.run(Stage::kGenData);
    p.run(Stage::kTrainTeachers);
  }
  fs::remove(dir.path() / Pipeline::teacher_path(1));
  {
    Pipeline p(cfg, dir.path(), log);
    CHECK_FALSE(p.is_complete(Stage::kTrainTeachers));
    CHECK_THROWS_AS(p.run(Stage::kExtract), MissingArtifactError);
    p.run(Stage::kTrainTeachers);
    CHECK_NOTHROW(p.run(Stage::kExtract));
  }
  {
    std::ofstream out(dir.path() / "data/test_pairs.txt", std::ios::app);
    out << "0 1 1 0\n";
  }
  {
    Pipeline p(cfg, dir.path(), log);
    CHECK_FALSE(p.is_complete(Stage::kGenData));
    CHECK_THROWS_AS(p.run(Stage::kTrainAdaptor), MissingArtifactError);
  }
  auto other = cfg;
  other.eaf.m = 0.4;
  Pipeline p(other, dir.path(), log);
  CHECK_THROWS_AS(p.run(Stage::kTrainTeachers), ConfigError);
}

TEST_CASE("a rerun in a fresh directory reproduces every artifact") {
  TempDir a("det_a"), b("det_b");
  std::ostringstream log;
  const auto cfg = load_config(kTiny);
  Pipeline pa(cfg, a.path(), log), pb(cfg, b.path(), log);
  pa.run_all();
  pb.run_all();
  for (auto s : kAllStages)
    for (const auto& rel : pa.expected_artifacts(s))
      CHECK_MESSAGE(slurp(a.path() / rel) == slurp(b.path() / rel), rel);
}

TEST_CASE("comparison report pairs specialized and balanced runs") {
  TempDir ours("cmp_ours"), base("cmp_base");
  std::ostringstream log;
  auto cfg = load_config(kTiny);
  Pipeline(cfg, ours.path(), log).run_all();
  auto balanced = cfg;
  balanced.split = data::SplitKind::kBalanced;
  Pipeline(balanced, base.path(), log).run_all();

  CHECK_THROWS_AS(load_run(fs::temp_directory_path() / "mstkd_no_such_run"), MissingArtifactError);
  std::vector<RunSummary> runs = {load_run(ours.path()), load_run(base.path())};
  CHECK(runs[0].students.size() == 6);
  const std::string md = comparison_report(runs);
  for (const char* mode : {"eaf_kd", "a_kd"})
    CHECK(md.find(std::string("Students trained with ") + mode) != std::string::npos);
  auto count = [&](const std::string& needle) {
    std::size_t n = 0;
    for (auto pos = md.find(needle); pos != std::string::npos; pos = md.find(needle, pos + 1)) ++n;
    return n;
  };
  // 3 Ours rows and 3 Baseline rows in each of the two tables
  CHECK(count("| Ours ") == 6);
  CHECK(count("| Baseline ") == 6);
  CHECK(count("Ours - Baseline SL:") == 2);
  CHECK(md.find(eval::kProtocol) != std::string::npos);

  // pooled values equal the single-run reports when there is one run per origin
  const auto& rep = runs[0].students.at({model::AdaptorKind::kSL, loss::StudentMode::kAKd});
  CHECK(md.find(eval::fixed2(rep.global_acc)) != std::string::npos);
}
