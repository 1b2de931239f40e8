#include "cascade/spine.hpp"

#include <algorithm>
#include <cstddef>
#include <utility>

#include "cascade/errors.hpp"

namespace cascade {

namespace {

// In-plane structuring element: voxel offsets within a metric disk.
std::vector<std::pair<int, int>> disk_offsets(double radius_mm, double sx, double sy) {
  const int ri = static_cast<int>(radius_mm / sx);
  const int rj = static_cast<int>(radius_mm / sy);
  std::vector<std::pair<int, int>> out;
  for (int dj = -rj; dj <= rj; ++dj)
    for (int di = -ri; di <= ri; ++di) {
      const double d2 = di * sx * di * sx + dj * sy * dj * sy;
      if (d2 <= radius_mm * radius_mm) out.emplace_back(di, dj);
    }
  return out;
}

void morph_slice(const std::uint8_t* in, std::uint8_t* out, int nx, int ny,
                 const std::vector<std::pair<int, int>>& se, bool dilate) {
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) {
      std::uint8_t hit = dilate ? 0 : 1;
      for (const auto& [di, dj] : se) {
        const int ii = i + di, jj = j + dj;
        std::uint8_t v = 0;
        if (ii >= 0 && ii < nx && jj >= 0 && jj < ny) v = in[ii + static_cast<std::size_t>(nx) * jj];
        if (dilate) {
          if (v) { hit = 1; break; }
        } else {
          if (!v) { hit = 0; break; }
        }
      }
      out[i + static_cast<std::size_t>(nx) * j] = hit;
    }
}

}  // namespace

SpineFrame spine_frame(const Volume& v, const SpineMask& m) {
  SpineFrame f;
  double sum_x = 0, sum_y = 0;
  std::size_t n = 0;
  double z_lo = 0, z_hi = 0;
  bool any = false;
  for (int k = 0; k < m.nz; ++k)
    for (int j = 0; j < m.ny; ++j)
      for (int i = 0; i < m.nx; ++i) {
        if (!m.mask[m.index(i, j, k)]) continue;
        const Vec3 c = v.voxel_center(i, j, k);
        sum_x += c.x;
        sum_y += c.y;
        if (!any || c.z < z_lo) z_lo = c.z;
        if (!any || c.z > z_hi) z_hi = c.z;
        any = true;
        ++n;
      }
  if (!any) throw NoSpineFoundError("spine_frame: empty mask");
  f.axis_x = sum_x / static_cast<double>(n);
  f.axis_y = sum_y / static_cast<double>(n);
  f.z_lo = z_lo;
  f.z_hi = z_hi;
  return f;
}

SpineMask segment_spine(const Volume& v, double hu_threshold, double growing_tolerance_hu,
                        int min_component_voxels, double closing_radius_mm) {
  validate_volume(v);
  if (growing_tolerance_hu < 0) throw ValidationError("segment_spine: negative growing tolerance");
  if (min_component_voxels < 1) throw ValidationError("segment_spine: min_component_voxels < 1");
  if (closing_radius_mm <= 0) throw ValidationError("segment_spine: closing radius must be positive");

  const std::size_t total = v.size();
  SpineMask m;
  m.nx = v.nx;
  m.ny = v.ny;
  m.nz = v.nz;
  m.mask.assign(total, 0);
  m.canal.assign(total, 0);

  std::vector<std::uint8_t> above(total, 0);
  for (std::size_t p = 0; p < total; ++p) above[p] = v.data[p] >= hu_threshold ? 1 : 0;

  // 6-connected components over the thresholded voxels; keep the large ones.
  const std::size_t plane = static_cast<std::size_t>(v.nx) * v.ny;
  std::vector<std::uint8_t> seen(total, 0);
  std::vector<std::size_t> stack, component;
  bool any_kept = false;
  for (std::size_t start = 0; start < total; ++start) {
    if (!above[start] || seen[start]) continue;
    component.clear();
    stack.clear();
    stack.push_back(start);
    seen[start] = 1;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      component.push_back(p);
      const int i = static_cast<int>(p % v.nx);
      const int j = static_cast<int>((p / v.nx) % v.ny);
      const int k = static_cast<int>(p / plane);
      const auto visit = [&](std::size_t q) {
        if (!seen[q] && above[q]) {
          seen[q] = 1;
          stack.push_back(q);
        }
      };
      if (i > 0) visit(p - 1);
      if (i + 1 < v.nx) visit(p + 1);
      if (j > 0) visit(p - v.nx);
      if (j + 1 < v.ny) visit(p + v.nx);
      if (k > 0) visit(p - plane);
      if (k + 1 < v.nz) visit(p + plane);
    }
    if (component.size() >= static_cast<std::size_t>(min_component_voxels)) {
      any_kept = true;
      for (const std::size_t p : component) m.mask[p] = 1;
    }
  }
  if (!any_kept) throw NoSpineFoundError("segment_spine: no component above threshold");

  // Region growing from the kept voxels at a relaxed threshold.
  const double grow_thr = hu_threshold - growing_tolerance_hu;
  stack.clear();
  for (std::size_t p = 0; p < total; ++p)
    if (m.mask[p]) stack.push_back(p);
  while (!stack.empty()) {
    const std::size_t p = stack.back();
    stack.pop_back();
    const int i = static_cast<int>(p % v.nx);
    const int j = static_cast<int>((p / v.nx) % v.ny);
    const int k = static_cast<int>(p / plane);
    const auto visit = [&](std::size_t q) {
      if (!m.mask[q] && v.data[q] >= grow_thr) {
        m.mask[q] = 1;
        stack.push_back(q);
      }
    };
    if (i > 0) visit(p - 1);
    if (i + 1 < v.nx) visit(p + 1);
    if (j > 0) visit(p - v.nx);
    if (j + 1 < v.ny) visit(p + v.nx);
    if (k > 0) visit(p - plane);
    if (k + 1 < v.nz) visit(p + plane);
  }

  // Canal: close each slice in-plane and take what the closing filled in.
  const auto se = disk_offsets(closing_radius_mm, v.sx, v.sy);
  std::vector<std::uint8_t> dilated(plane), closed(plane);
  for (int k = 0; k < v.nz; ++k) {
    const std::uint8_t* slice = m.mask.data() + plane * k;
    morph_slice(slice, dilated.data(), v.nx, v.ny, se, true);
    morph_slice(dilated.data(), closed.data(), v.nx, v.ny, se, false);
    std::uint8_t* canal = m.canal.data() + plane * k;
    for (std::size_t p = 0; p < plane; ++p) canal[p] = closed[p] && !slice[p] ? 1 : 0;
  }

  return m;
}

}  // namespace cascade
