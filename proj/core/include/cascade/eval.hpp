#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "cascade/candidates.hpp"
#include "cascade/volume.hpp"

namespace cascade {

/// Fuses per-view probabilities into one candidate probability: the
/// arithmetic mean, computed with compensated summation so the result is
/// independent of view order to well below 1e-12.
/// Throws ValidationError on an empty list or a value outside [0, 1].
double aggregate_views(const std::vector<double>& probs);

/// When does a candidate count as hitting a lesion.
struct MatchRule {
  enum class Mode {
    kMaskContainment,  ///< candidate centroid voxel lies inside the lesion mask
    kCentroidDistance  ///< candidate centroid within distance_mm of the lesion center
  };
  Mode mode = Mode::kMaskContainment;
  double distance_mm = 5.0;  // used by kCentroidDistance only
};

void validate_match_rule(const MatchRule& rule);

/// Labels every candidate as true lesion or false positive and returns, per
/// candidate, the index of the matched lesion (-1 for none). Several
/// candidates may match the same lesion; sensitivity bookkeeping later counts
/// that lesion once. The volume provides the world-to-voxel mapping for
/// mask containment. Lesions are expected pre-filtered to evaluation size.
std::vector<int> match_candidates(std::vector<Candidate>& candidates,
                                  const std::vector<GroundTruthLesion>& lesions, const Volume& v,
                                  const MatchRule& rule);

/// One operating point of a free-response ROC curve.
struct FrocPoint {
  double threshold = 0;
  double sensitivity = 0;    // detected lesions / total lesions
  double fp_per_volume = 0;  // unmatched candidates at or above threshold / volumes
};

/// A candidate reduced to what FROC/ROC need: which volume it came from, its
/// score (tier-1 committee margin or tier-2 fused probability), and the
/// per-volume index of the lesion it hit (-1 for a false positive).
struct ScoredCandidate {
  int volume_id = 0;
  double score = 0;
  int lesion = -1;
};

/// Sweeps a threshold over every distinct score, descending, preceded by an
/// unreachable +infinity anchor (sensitivity 0, fp 0). A lesion counts as
/// detected once no matter how many candidates hit it. total_lesions must
/// cover all volumes, and n_volumes includes lesion-free controls, which pad
/// the false-positive denominator.
/// Throws ValidationError when total_lesions < 1, n_volumes < 1, a score is
/// non-finite, or a lesion index is out of range.
std::vector<FrocPoint> compute_froc(const std::vector<ScoredCandidate>& candidates,
                                    int total_lesions, int n_volumes);

/// Candidate-level ROC area via the Mann-Whitney statistic: the probability
/// that a uniformly drawn positive outscores a uniformly drawn negative, ties
/// counted one half. Equals the trapezoidal area under the ROC curve.
/// labels are 0 (negative) / 1 (positive); both classes must be present.
double compute_roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

/// ROC polyline for plotting: (fpr, tpr) points from threshold +infinity down
/// through every distinct score. Starts at (0, 0) and ends at (1, 1).
std::vector<std::array<double, 2>> roc_points(const std::vector<double>& scores,
                                              const std::vector<int>& labels);

/// Patient-level cross-validation split.
struct FoldSplit {
  std::vector<std::vector<int>> folds;  // patient ids, fold sizes differ by <= 1
};

/// Seeded shuffle followed by round-robin assignment. Every patient lands in
/// exactly one fold. Throws ValidationError when there are fewer patients
/// than folds, k < 2, or a patient id repeats.
FoldSplit split_folds(const std::vector<int>& patient_ids, int k, std::uint64_t seed);

/// Returns indices into `labels` forming a 50/50 training multiset: all
/// original examples plus seeded with-replacement draws from the minority
/// class until the counts match. Test data never goes through this.
/// Throws ValidationError when only one class is present.
std::vector<std::size_t> balance_training(const std::vector<int>& labels, std::uint64_t seed);

// ---- report emission -----------------------------------------------------

/// CSV with header `threshold,sensitivity,fp_per_volume`.
void write_froc_csv(const std::string& path, const std::vector<FrocPoint>& points);

/// CSV with header `fpr,tpr`.
void write_roc_csv(const std::string& path, const std::vector<std::array<double, 2>>& points);

/// One named polyline of a 2D plot.
struct PlotSeries {
  std::string name;
  std::vector<std::array<double, 2>> points;  // (x, y)
};

/// Self-contained SVG line plot (axes, ticks, legend, fixed palette). Output
/// is a pure function of the inputs, so reruns are byte-identical.
void write_line_plot_svg(const std::string& path, const std::string& title,
                         const std::string& x_label, const std::string& y_label,
                         const std::vector<PlotSeries>& series);

/// Fold assignment as JSON: {"k": ..., "folds": [[patient ids] ...]}.
void write_folds_json(const std::string& path, const FoldSplit& split);
FoldSplit read_folds_json(const std::string& path);

}  // namespace cascade
