#include "cascade/volume.hpp"

#include <cmath>
#include <string>

#include "cascade/errors.hpp"

namespace cascade {

std::array<int, 3> Volume::world_to_voxel(const Vec3& p) const {
  auto clampi = [](int v, int hi) { return v < 0 ? 0 : (v > hi ? hi : v); };
  int i = static_cast<int>(std::floor((p.x - origin.x) / sx));
  int j = static_cast<int>(std::floor((p.y - origin.y) / sy));
  int k = static_cast<int>(std::floor((p.z - origin.z) / sz));
  return {clampi(i, nx - 1), clampi(j, ny - 1), clampi(k, nz - 1)};
}

void validate_volume(const Volume& v) {
  if (v.nx < 1 || v.ny < 1 || v.nz < 1)
    throw ValidationError("volume dims must all be >= 1");
  if (!(v.sx > 0) || !(v.sy > 0) || !(v.sz > 0))
    throw ValidationError("volume spacing must all be > 0");
  if (v.data.size() != v.size())
    throw ValidationError("volume data length " + std::to_string(v.data.size()) +
                          " does not match dims product " + std::to_string(v.size()));
  for (float h : v.data) {
    if (!(h >= kHuMin && h <= kHuMax))
      throw ValidationError("HU value " + std::to_string(h) + " outside [-1024, 3071]");
  }
}

namespace {

// Continuous voxel-center coordinate of a world position along one axis,
// snapped to the nearest integer when within 1e-7. The snap makes aligned
// grids reproduce stored values exactly instead of lerping between equal
// neighbors with a 1-ulp weight.
inline double continuous_index(double w, double o, double s) {
  double ci = (w - o) / s - 0.5;
  double r = std::nearbyint(ci);
  if (std::fabs(ci - r) < 1e-7) ci = r;
  return ci;
}

}  // namespace

float sample_trilinear(const Volume& v, const Vec3& p) {
  double cx = continuous_index(p.x, v.origin.x, v.sx);
  double cy = continuous_index(p.y, v.origin.y, v.sy);
  double cz = continuous_index(p.z, v.origin.z, v.sz);

  auto split = [](double c, int n, int& i0, int& i1, double& f) {
    double fl = std::floor(c);
    i0 = static_cast<int>(fl);
    f = c - fl;
    if (i0 < 0) { i0 = 0; f = 0.0; }          // edge clamp
    if (i0 >= n - 1) { i0 = n - 1; f = 0.0; }
    i1 = i0 + 1 < n ? i0 + 1 : i0;
  };

  int x0, x1, y0, y1, z0, z1;
  double fx, fy, fz;
  split(cx, v.nx, x0, x1, fx);
  split(cy, v.ny, y0, y1, fy);
  split(cz, v.nz, z0, z1, fz);

  double c000 = v.at(x0, y0, z0), c100 = v.at(x1, y0, z0);
  double c010 = v.at(x0, y1, z0), c110 = v.at(x1, y1, z0);
  double c001 = v.at(x0, y0, z1), c101 = v.at(x1, y0, z1);
  double c011 = v.at(x0, y1, z1), c111 = v.at(x1, y1, z1);

  double c00 = c000 + (c100 - c000) * fx;
  double c10 = c010 + (c110 - c010) * fx;
  double c01 = c001 + (c101 - c001) * fx;
  double c11 = c011 + (c111 - c011) * fx;
  double c0 = c00 + (c10 - c00) * fy;
  double c1 = c01 + (c11 - c01) * fy;
  return static_cast<float>(c0 + (c1 - c0) * fz);
}

Volume resample_isometric(const Volume& v, double t) {
  if (!(t > 0)) throw ValidationError("target spacing must be > 0");
  validate_volume(v);
  if (v.sx == t && v.sy == t && v.sz == t) return v;

  Volume out;
  out.nx = std::max(1, static_cast<int>(std::llround(v.nx * v.sx / t)));
  out.ny = std::max(1, static_cast<int>(std::llround(v.ny * v.sy / t)));
  out.nz = std::max(1, static_cast<int>(std::llround(v.nz * v.sz / t)));
  out.sx = out.sy = out.sz = t;
  out.origin = v.origin;
  out.data.resize(out.size());

  std::size_t at = 0;
  for (int k = 0; k < out.nz; ++k) {
    double wz = v.origin.z + (k + 0.5) * t;
    for (int j = 0; j < out.ny; ++j) {
      double wy = v.origin.y + (j + 0.5) * t;
      for (int i = 0; i < out.nx; ++i, ++at) {
        double wx = v.origin.x + (i + 0.5) * t;
        out.data[at] = sample_trilinear(v, {wx, wy, wz});
      }
    }
  }
  return out;
}

}  // namespace cascade
