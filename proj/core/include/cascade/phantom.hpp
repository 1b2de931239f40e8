#pragma once

#include <cstdint>
#include <vector>

#include "cascade/volume.hpp"

namespace cascade {

/// Recipe for a synthetic thick-slice CT stand-in: a vertical "spine"
/// cylinder with periodic vertebra/disc modulation and a low-attenuation
/// canal, plus hyper-dense ellipsoidal lesions and (optionally) dense
/// distractor structures that are not part of the ground truth.
struct PhantomSpec {
  int nx = 64, ny = 64, nz = 60;
  double sx = 1.0, sy = 1.0, sz = 5.0;  // thick axial slices by default

  double spine_radius_mm = 14.0;
  double vertebra_hu_lo = 300.0, vertebra_hu_hi = 480.0;

  int lesion_count = 6;
  double lesion_hu_offset_lo = 350.0, lesion_hu_offset_hi = 650.0;
  double lesion_radius_lo_mm = 4.5, lesion_radius_hi_mm = 7.0;

  double background_hu = -80.0;
  double noise_sigma_hu = 15.0;
  std::uint64_t seed = 0;

  /// Dense non-lesion structures (rings, small blobs, rim arcs) that feed the
  /// tier-1 detector with honest false positives. Not reported as lesions.
  int distractor_count = 6;

  /// Placement is retried until the voxelized lesion exceeds this volume, so
  /// every emitted lesion is evaluation-eligible.
  double min_lesion_volume_mm3 = kLesionMinVolumeMm3;
};

void validate_phantom_spec(const PhantomSpec& spec);

struct Phantom {
  Volume volume;
  std::vector<GroundTruthLesion> lesions;
  /// Construction-time bone mask (cylinder minus canal), kept for
  /// segmentation oracles and placement bookkeeping.
  std::vector<std::uint8_t> spine_mask;
};

/// Deterministic given its argument (seed included). Throws CapacityError if
/// the requested lesions cannot be placed without overlap.
Phantom generate_phantom(const PhantomSpec& spec);

}  // namespace cascade
