// mstkd: stage runner for the multi-teacher distillation pipeline.
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mstkd/error.hpp"
#include "mstkd/pipeline.hpp"

namespace fs = std::filesystem;
using namespace mstkd;

namespace {

struct Options {
  std::string config;
  bool force = false;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> runs;
};

pipeline::ExperimentConfig resolve(const Options& o, fs::path& out_dir) {
  auto cfg = pipeline::load_config(o.config);
  if (o.seed) cfg = pipeline::with_seed_override(cfg, *o.seed);
  out_dir = o.out.empty() ? fs::path(cfg.output_dir) : fs::path(o.out);
  if (!o.out.empty()) cfg.output_dir = o.out;
  return cfg;
}

int run_stage(const Options& o, std::optional<pipeline::Stage> stage) {
  fs::path out;
  auto cfg = resolve(o, out);
  pipeline::Pipeline p(cfg, out, std::cerr);
  if (stage)
    p.run(*stage, o.force);
  else
    p.run_all(o.force);
  return 0;
}

int run_report(const Options& o) {
  fs::path out;
  auto cfg = resolve(o, out);
  std::vector<fs::path> dirs(o.runs.begin(), o.runs.end());
  if (dirs.empty()) dirs.push_back(out);
  std::vector<pipeline::RunSummary> runs;
  for (const auto& d : dirs) runs.push_back(pipeline::load_run(d));
  const std::string text = pipeline::comparison_report(runs);
  data::write_file(out / "reports" / "comparison.md",
                   std::vector<std::uint8_t>(text.begin(), text.end()));
  std::cout << text;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-teacher knowledge distillation pipeline (desk scale)"};
  app.require_subcommand(1);
  app.set_version_flag("--version", pipeline::tool_version());

  Options opts;
  auto add_common = [&opts](CLI::App* sub) {
    sub->add_option("--config", opts.config, "Experiment config (JSON)")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_flag("--force", opts.force, "Re-run even if the stage is up to date");
    sub->add_option("--seed-override", opts.seed, "Replace the data, init and train seeds");
    sub->add_option("--out", opts.out, "Output directory (default: config output_dir)");
  };

  std::optional<pipeline::Stage> chosen;
  bool report = false;
  for (auto stage : pipeline::kAllStages) {
    auto* sub = app.add_subcommand(pipeline::to_string(stage),
                                   std::string("Run the ") + pipeline::to_string(stage) + " stage");
    add_common(sub);
    sub->callback([&chosen, stage] { chosen = stage; });
  }
  auto* run_all = app.add_subcommand("run-all", "Run every stage in order");
  add_common(run_all);
  auto* rep = app.add_subcommand("report", "Ours vs Baseline comparison over finished runs");
  add_common(rep);
  rep->add_option("--run", opts.runs, "Run directory to include (repeatable; default: --out)");
  rep->callback([&report] { report = true; });

  CLI11_PARSE(app, argc, argv);

  try {
    if (report) return run_report(opts);
    return run_stage(opts, chosen);
  } catch (const Error& e) {
    std::cerr << "mstkd: " << to_string(e.kind()) << " error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "mstkd: internal error: " << e.what() << "\n";
    return 1;
  }
}
