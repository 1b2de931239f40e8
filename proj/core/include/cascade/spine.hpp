#pragma once

#include <cstdint>
#include <vector>

#include "cascade/volume.hpp"

namespace cascade {

/// Binary spine segmentation over a volume's voxel grid, with the spinal
/// canal extracted separately.
struct SpineMask {
  int nx = 0, ny = 0, nz = 0;
  std::vector<std::uint8_t> mask;   // bone
  std::vector<std::uint8_t> canal;  // enclosed low-attenuation tube

  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) + static_cast<std::size_t>(nx) * (static_cast<std::size_t>(j) + static_cast<std::size_t>(ny) * k);
  }
};

/// Spine-relative coordinate frame used by location features: in-plane axis
/// position and the z extent of the segmented spine.
struct SpineFrame {
  double axis_x = 0, axis_y = 0;  // world mm
  double z_lo = 0, z_hi = 0;      // world mm
};

SpineFrame spine_frame(const Volume& v, const SpineMask& m);

/// Threshold + connected components + region growing, then canal extraction
/// by per-slice morphological closing minus the original mask.
///
/// Components above `hu_threshold` smaller than `min_component_voxels` are
/// dropped; the survivors are grown into 6-neighbors with
/// HU >= hu_threshold - growing_tolerance_hu. Throws NoSpineFoundError when
/// nothing survives.
SpineMask segment_spine(const Volume& v, double hu_threshold, double growing_tolerance_hu,
                        int min_component_voxels = 64, double closing_radius_mm = 8.0);

}  // namespace cascade
