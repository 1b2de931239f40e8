#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "cascade/committee.hpp"
#include "cascade/detections.hpp"
#include "cascade/volume.hpp"

namespace cascade {

struct Tier1Config {
  double spine_hu_threshold = 200.0;
  double growing_tolerance_hu = 60.0;
  int min_component_voxels = 64;
  double closing_radius_mm = 8.0;
  double smooth_sigma_px = 1.0;
  double hu_merge_threshold = 25.0;
  double peak_margin_hu = 15.0;  // detection = sub-segment brighter than every neighbor by this much
  int min_overlap_px = 1;
  double min_volume_mm3 = 40.0;
  double score_threshold = -1.0;
};

enum class CandidateLabel { kUnknown, kFalsePositive, kTrueLesion };

struct Candidate {
  int id = 0;
  Vec3 centroid;
  std::vector<std::uint32_t> voxels;  // sorted linear volume indices
  CandidateFeatures features;
  double tier1_score = 0.0;
  CandidateLabel label = CandidateLabel::kUnknown;
};

/// Detection stage without scoring: segment the spine, watershed each slice,
/// merge, keep sub-segments brighter than all their neighbors, stack into 3D
/// and drop tiny detections.
std::vector<Detection3D> detect_raw(const Volume& v, const Tier1Config& config);

/// Detection plus feature extraction, no scoring: what the committee trains
/// on. Candidates keep detection order, tier1_score stays 0, label unknown.
std::vector<Candidate> featurize_detections(const Volume& v, const Tier1Config& config);

/// Full tier-1 chain: detect, featurize, score with the committee, keep
/// everything above the (deliberately permissive) score threshold, sorted by
/// descending score. Ids are assigned in output order.
std::vector<Candidate> generate_candidates(const Volume& v, const Tier1Config& config,
                                           const CommitteeModel& model);

void write_candidates(const std::filesystem::path& path, const std::vector<Candidate>& candidates);
std::vector<Candidate> read_candidates(const std::filesystem::path& path);

void write_committee(const std::filesystem::path& path, const CommitteeModel& model);
CommitteeModel read_committee(const std::filesystem::path& path);

}  // namespace cascade
