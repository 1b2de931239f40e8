// cascade-detect: drives the detection experiment pipeline stage by stage or
// end to end. Every stage reads its inputs from the output directory and is
// independently rerunnable; artifacts carry the config hash that made them.
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cascade/errors.hpp"
#include "cascade/experiment.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::vector<int> folds;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool with_folds) {
  cmd->add_option("--config", args.config_path, "experiment config (JSON)")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("--out", args.out_dir, "output directory (overrides the config)");
  cmd->add_option("--seed", args.seed, "master seed (overrides the config)");
  if (with_folds)
    cmd->add_option("--folds", args.folds, "restrict to these fold indices (comma separated)")
        ->delimiter(',');
}

cascade::ExperimentConfig load_config(const CommonArgs& args) {
  cascade::ExperimentConfig cfg = cascade::read_experiment_config(args.config_path);
  if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
  if (args.seed) cfg.master_seed = *args.seed;
  cascade::validate_experiment_config(cfg);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"two-tier lesion detection experiment driver"};
  app.require_subcommand(1);

  CommonArgs args;
  bool print_default = false;

  CLI::App* init = app.add_subcommand("init", "print a default config as JSON");
  init->add_flag("--defaults", print_default,
                 "kept for symmetry; init always prints the defaults");

  CLI::App* gen = app.add_subcommand("gen-data", "generate the phantom suite");
  CLI::App* tier1 = app.add_subcommand("tier1", "candidate generation + committee scoring");
  CLI::App* views = app.add_subcommand("sample-views", "extract per-candidate 2D views");
  CLI::App* train = app.add_subcommand("train", "train one CNN per fold");
  CLI::App* evaluate = app.add_subcommand("evaluate", "score held-out candidates per fold");
  CLI::App* report = app.add_subcommand("report", "regenerate CSV/SVG reports from stored scores");
  CLI::App* run = app.add_subcommand("run", "all stages in order");
  for (CLI::App* cmd : {gen, tier1, views, report, run}) add_common(cmd, args, false);
  for (CLI::App* cmd : {train, evaluate}) add_common(cmd, args, true);

  CLI11_PARSE(app, argc, argv);

  try {
    if (init->parsed()) {
      std::fputs(cascade::experiment_config_to_json(cascade::ExperimentConfig{}).c_str(), stdout);
      return 0;
    }
    const cascade::ExperimentConfig cfg = load_config(args);
    const std::vector<int>* fold_filter = args.folds.empty() ? nullptr : &args.folds;
    if (gen->parsed()) cascade::stage_gen_data(cfg);
    if (tier1->parsed()) cascade::stage_tier1(cfg);
    if (views->parsed()) cascade::stage_sample_views(cfg);
    if (train->parsed()) cascade::stage_train(cfg, fold_filter);
    if (evaluate->parsed()) cascade::stage_evaluate(cfg, fold_filter);
    if (report->parsed()) cascade::stage_report(cfg);
    if (run->parsed()) cascade::run_end_to_end(cfg);
  } catch (const cascade::DependencyError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const cascade::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
