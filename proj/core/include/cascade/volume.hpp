#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace cascade {

/// CT attenuation bounds of the 12-bit convention.
inline constexpr float kHuMin = -1024.0f;
inline constexpr float kHuMax = 3071.0f;

/// Bone window used for patch normalization.
inline constexpr double kWindowLoHu = -250.0;
inline constexpr double kWindowHiHu = 1250.0;

struct Vec3 {
  double x = 0, y = 0, z = 0;

  bool operator==(const Vec3&) const = default;
};

inline Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
inline Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }

/// 3D scalar grid of attenuation values in Hounsfield Units.
///
/// Data is row-major with x fastest. Voxel (i,j,k) covers the world box
/// origin + [i,i+1)*sx x [j,j+1)*sy x [k,k+1)*sz; its center is
/// origin + (i+0.5, j+0.5, k+0.5) * spacing.
struct Volume {
  int nx = 0, ny = 0, nz = 0;
  double sx = 1, sy = 1, sz = 1;  // mm per voxel
  Vec3 origin;                    // world position of the volume corner, mm
  std::vector<float> data;        // HU, size nx*ny*nz

  std::size_t size() const { return static_cast<std::size_t>(nx) * ny * nz; }

  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) + static_cast<std::size_t>(nx) * (static_cast<std::size_t>(j) + static_cast<std::size_t>(ny) * k);
  }

  float at(int i, int j, int k) const { return data[index(i, j, k)]; }
  float& at(int i, int j, int k) { return data[index(i, j, k)]; }

  double voxel_volume_mm3() const { return sx * sy * sz; }

  Vec3 voxel_center(int i, int j, int k) const {
    return {origin.x + (i + 0.5) * sx, origin.y + (j + 0.5) * sy, origin.z + (k + 0.5) * sz};
  }

  /// World bounding box (half-open on the far side).
  bool contains_world(const Vec3& p) const {
    return p.x >= origin.x && p.x < origin.x + nx * sx && p.y >= origin.y &&
           p.y < origin.y + ny * sy && p.z >= origin.z && p.z < origin.z + nz * sz;
  }

  /// Voxel index holding world point p (components clamped to the grid).
  std::array<int, 3> world_to_voxel(const Vec3& p) const;

  bool operator==(const Volume& o) const = default;
};

/// Throws ValidationError if any Volume invariant is broken.
void validate_volume(const Volume& v);

/// Ground-truth lesion emitted by the phantom generator.
struct GroundTruthLesion {
  Vec3 center;                           // world mm
  std::vector<std::uint32_t> voxel_mask; // sorted linear voxel indices
  double volume_mm3 = 0;
};

/// Minimum lesion volume that participates in evaluation.
inline constexpr double kLesionMinVolumeMm3 = 300.0;

/// Maps HU through the bone window [-250, 1250] to [0, 1] with clamping.
inline double window_normalize(double hu) {
  double t = (hu - kWindowLoHu) / (kWindowHiHu - kWindowLoHu);
  return t < 0.0 ? 0.0 : (t > 1.0 ? 1.0 : t);
}

/// Trilinear sample at world point p with edge clamping. Sample positions
/// within 1e-7 voxel units of a grid point snap to it, so grids that line up
/// exactly reproduce stored values bit-for-bit.
float sample_trilinear(const Volume& v, const Vec3& p);

/// Resamples to isometric spacing (t,t,t) by trilinear interpolation in world
/// coordinates. World extent is preserved to within one voxel. An input
/// already at the target spacing is returned unchanged.
Volume resample_isometric(const Volume& v, double target_spacing_mm);

}  // namespace cascade
