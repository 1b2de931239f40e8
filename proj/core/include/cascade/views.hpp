#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "cascade/volume.hpp"

namespace cascade {

struct ViewSampleConfig {
  std::vector<double> scales_mm = {30.0, 35.0, 40.0, 45.0};
  int n_translations = 5;
  int n_rotations = 5;
  double max_translation_mm = 3.0;
  int patch_px = 32;
  int channels = 3;

  int views_per_candidate() const {
    return static_cast<int>(scales_mm.size()) * n_translations * n_rotations;
  }
};

void validate_view_config(const ViewSampleConfig& cfg);

/// One 2D observation of a candidate: a windowed square crop plus the
/// sampling parameters that produced it. Pixel data is channel-major (all
/// channels identical copies).
struct Patch {
  int candidate_id = -1;
  int patch_px = 0;
  int channels = 0;
  double scale_mm = 0.0;
  std::array<double, 2> translation_mm = {0.0, 0.0};
  double rotation_deg = 0.0;
  std::vector<float> data;  // channels * patch_px * patch_px, values in [0,1]
};

/// Samples an axial scale_mm x scale_mm square centered at center +
/// translation, rotated about the patch center, on the slice nearest to
/// center's z. Bilinear interpolation of HU first, windowing to [0,1] after;
/// the grid is edge-clamped but center itself must be inside the volume.
Patch extract_patch(const Volume& v, const Vec3& center, double scale_mm,
                    const std::array<double, 2>& translation_mm, double rotation_deg, int patch_px,
                    int channels = 3);

/// Draws the N = scales x translations x rotations random views of one
/// candidate: per scale, n_translations points uniform in the translation
/// disk, each observed under n_rotations angles uniform in [0, 360) degrees.
std::vector<Patch> sample_views(const Volume& v, const Vec3& centroid, int candidate_id,
                                const ViewSampleConfig& cfg, std::uint64_t seed);

/// Patch batch persistence: JSON manifest at `path` plus a raw little-endian
/// f32 payload (patch-major) in a sibling file named by the manifest.
void write_patch_batch(const std::filesystem::path& path, const std::vector<Patch>& patches,
                       int patch_px, int channels);
std::vector<Patch> read_patch_batch(const std::filesystem::path& path);

}  // namespace cascade
