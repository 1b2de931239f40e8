#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cascade/candidates.hpp"
#include "cascade/cnn.hpp"
#include "cascade/eval.hpp"
#include "cascade/phantom.hpp"
#include "cascade/views.hpp"

namespace cascade {

/// Everything one end-to-end run needs. A single master seed pins every
/// random choice: per-stage seeds are derived from it by name, so stages can
/// rerun independently and still agree.
struct ExperimentConfig {
  // synthetic suite
  int lesion_volumes = 40;    ///< phantoms carrying ground-truth lesions
  int control_volumes = 10;   ///< lesion-free phantoms (false-positive denominator)
  int calibration_volumes = 12;  ///< separate suite that trains the tier-1 committee
  PhantomSpec phantom;        ///< template; per-volume seeds are derived

  // pipeline
  Tier1Config tier1;
  CommitteeTrainConfig committee;  ///< seed field is ignored (derived from master)
  ViewSampleConfig eval_views;     ///< full observer budget, default 4*5*5 = 100
  ViewSampleConfig train_views;    ///< smaller training budget, default 2*3*3 = 18
  NetworkSpec network = NetworkSpec::reference();
  TrainConfig train;               ///< seed field is ignored (derived per fold)
  MatchRule match;

  // evaluation protocol
  int folds = 5;
  std::vector<int> ablation = {1, 5, 10, 25, 50, 100};  ///< view-count study

  std::uint64_t master_seed = 0;
  std::string out_dir = "out";

  ExperimentConfig() {
    train_views.scales_mm = {30.0, 40.0};
    train_views.n_translations = 3;
    train_views.n_rotations = 3;
    // the synthetic suite saturates well before TrainConfig's standalone
    // default of 30 epochs; 12 keeps the full protocol under a quarter hour
    train.epochs = 12;
  }
};

/// Checks every nested config plus the cross-cutting rules: at least as many
/// patients as folds, ablation values within the eval view budget, at least
/// one lesion volume and one calibration volume.
void validate_experiment_config(const ExperimentConfig& cfg);

/// JSON round-trip. Field names mirror the struct; absent fields keep their
/// defaults; unknown keys are rejected. Throws IoError on file problems,
/// ValidationError on bad content.
ExperimentConfig read_experiment_config(const std::string& path);
void write_experiment_config(const std::string& path, const ExperimentConfig& cfg);
ExperimentConfig experiment_config_from_json(const std::string& json_text);
std::string experiment_config_to_json(const ExperimentConfig& cfg);

/// 16-hex-digit digest of the canonical config JSON (master seed included).
/// Every stage artifact records it; stages refuse upstream artifacts whose
/// hash disagrees with the live config.
std::string experiment_config_hash(const ExperimentConfig& cfg);

/// Pipeline stages. Each reads its upstream artifacts from cfg.out_dir,
/// throws DependencyError (naming the stage to run) when they are missing,
/// and rewrites its own outputs. `fold_filter` limits train/evaluate to the
/// given fold indices; null means all folds.
void stage_gen_data(const ExperimentConfig& cfg);
void stage_tier1(const ExperimentConfig& cfg);
void stage_sample_views(const ExperimentConfig& cfg);
void stage_train(const ExperimentConfig& cfg, const std::vector<int>* fold_filter = nullptr);
void stage_evaluate(const ExperimentConfig& cfg, const std::vector<int>* fold_filter = nullptr);
void stage_report(const ExperimentConfig& cfg);

/// All six stages in order. Produces froc_tier1.csv, froc_tier2_N{n}.csv,
/// auc.csv, froc_compare.svg, models/, folds.json and log.jsonl under
/// cfg.out_dir.
void run_end_to_end(const ExperimentConfig& cfg);

}  // namespace cascade
