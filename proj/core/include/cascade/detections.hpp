#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "cascade/spine.hpp"
#include "cascade/volume.hpp"
#include "cascade/watershed.hpp"

namespace cascade {

/// A 3D detection: sub-segments stacked across consecutive slices.
struct Detection3D {
  std::vector<SubSegment2D> segments;  // ordered by (z, id)
  std::vector<std::uint32_t> voxels;   // sorted linear volume indices
  Vec3 centroid;                       // world mm
  double mean_hu = 0.0;
};

/// Groups sub-segments whose pixel sets on consecutive slices share at least
/// min_overlap_px columns. Output is ordered by each group's lowest voxel
/// index and does not depend on input ordering within a slice.
std::vector<Detection3D> stack_detections(const Volume& v,
                                          const std::vector<std::vector<SubSegment2D>>& per_slice,
                                          int min_overlap_px = 1);

struct CandidateFeatures {
  double volume_mm3 = 0;
  double mean_hu = 0;
  double max_hu = 0;
  double std_hu = 0;
  double sphericity = 0;
  double bbox_x_mm = 0;
  double bbox_y_mm = 0;
  double bbox_z_mm = 0;
  double spine_axis_offset_mm = 0;
  double relative_height = 0;
  double surface_to_volume = 0;  // 1/mm
  double slice_span = 0;

  static constexpr int kCount = 12;
  std::array<double, kCount> values() const;
  static const std::array<const char*, kCount>& names();
};

/// Shape, attenuation and location features of one detection. Sphericity is
/// pi^(1/3) * (6V)^(2/3) / A where A estimates the mask's surface area from
/// its exposed voxel faces (see the implementation for the estimator).
CandidateFeatures compute_features(const Detection3D& d, const Volume& v, const SpineFrame& frame);

}  // namespace cascade
