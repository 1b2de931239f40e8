#pragma once

#include <cstdint>
#include <vector>

namespace cascade {

/// Non-owning view of one axial slice: HU values plus an inclusion mask,
/// with enough geometry to place pixel centers in world coordinates
/// (pixel center = o + (i + 0.5) * s per axis).
struct SliceView {
  const float* hu = nullptr;
  const std::uint8_t* mask = nullptr;
  int nx = 0, ny = 0;
  double sx = 1.0, sy = 1.0;
  double ox = 0.0, oy = 0.0;
};

struct SubSegment2D {
  int id = 0;
  int z = 0;
  std::vector<std::uint32_t> pixels;  // sorted linear in-plane indices i + nx*j
  double mean_hu = 0.0;
  double cx = 0.0, cy = 0.0;  // world mm
};

/// Marker-based watershed of the masked pixels: one marker per plateau that
/// is a local maximum of the Gaussian-smoothed intensity, basins flooded in
/// order of decreasing smoothed value (ties to the lower pixel index).
/// Returns a partition of the mask, ids assigned in marker order.
std::vector<SubSegment2D> watershed_subsegments(const SliceView& s, int z = 0,
                                                double smooth_sigma_px = 1.0);

/// Greedy agglomeration: repeatedly merge the edge-adjacent pair with the
/// smallest mean-HU difference while it stays below the threshold. Ties go
/// to the pair with smaller ids; a merged segment keeps the smaller id.
std::vector<SubSegment2D> merge_subsegments(std::vector<SubSegment2D> segments, const SliceView& s,
                                            double hu_merge_threshold);

}  // namespace cascade
