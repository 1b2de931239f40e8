#include "cascade/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cascade/errors.hpp"
#include "cascade/rng.hpp"

namespace cascade {

namespace {

// Spine geometry constants (mm). Bodies of kBodyPeriod - kDiscGap height
// separated by low-attenuation discs; denser ring-shaped end plates.
constexpr double kBodyPeriod = 30.0;
constexpr double kDiscGap = 4.0;
constexpr double kEndPlateMm = 2.5;
constexpr double kEndPlateInnerFrac = 0.55;
constexpr double kCanalRadiusFrac = 0.30;
constexpr double kCanalOffsetFrac = 0.45;
constexpr double kDiscHu = 80.0;
constexpr double kCanalHu = 40.0;
constexpr double kBodyInteriorFrac = 0.45;

constexpr int kPlacementTries = 400;

struct Frame {
  double ax, ay;           // spine axis, world mm
  double canal_x, canal_y; // canal axis
  double spine_r, canal_r;
};

bool in_spine_bone(const Frame& f, double wx, double wy) {
  double dx = wx - f.ax, dy = wy - f.ay;
  if (dx * dx + dy * dy > f.spine_r * f.spine_r) return false;
  double cx = wx - f.canal_x, cy = wy - f.canal_y;
  return cx * cx + cy * cy > f.canal_r * f.canal_r;
}

// z position inside the repeating body/disc pattern
struct ZKind {
  bool disc;
  bool end_plate;
};

ZKind classify_z(double wz) {
  double m = std::fmod(wz, kBodyPeriod);
  if (m < 0) m += kBodyPeriod;
  double body_len = kBodyPeriod - kDiscGap;
  if (m >= body_len) return {true, false};
  bool plate = m < kEndPlateMm || m > body_len - kEndPlateMm;
  return {false, plate};
}

struct Ellipsoid {
  Vec3 c;
  double a, b, e;  // semi-axes, mm
  double inside(const Vec3& p) const {
    double dx = (p.x - c.x) / a, dy = (p.y - c.y) / b, dz = (p.z - c.z) / e;
    return dx * dx + dy * dy + dz * dz;
  }
};

// Collects voxel indices whose centers fall inside the ellipsoid.
std::vector<std::uint32_t> rasterize(const Volume& v, const Ellipsoid& el, double inflate_mm = 0.0) {
  Ellipsoid e2{el.c, el.a + inflate_mm, el.b + inflate_mm, el.e + inflate_mm};
  std::vector<std::uint32_t> out;
  int i0 = std::max(0, static_cast<int>(std::floor((e2.c.x - e2.a - v.origin.x) / v.sx)) - 1);
  int i1 = std::min(v.nx - 1, static_cast<int>(std::ceil((e2.c.x + e2.a - v.origin.x) / v.sx)) + 1);
  int j0 = std::max(0, static_cast<int>(std::floor((e2.c.y - e2.b - v.origin.y) / v.sy)) - 1);
  int j1 = std::min(v.ny - 1, static_cast<int>(std::ceil((e2.c.y + e2.b - v.origin.y) / v.sy)) + 1);
  int k0 = std::max(0, static_cast<int>(std::floor((e2.c.z - e2.e - v.origin.z) / v.sz)) - 1);
  int k1 = std::min(v.nz - 1, static_cast<int>(std::ceil((e2.c.z + e2.e - v.origin.z) / v.sz)) + 1);
  for (int k = k0; k <= k1; ++k)
    for (int j = j0; j <= j1; ++j)
      for (int i = i0; i <= i1; ++i)
        if (e2.inside(v.voxel_center(i, j, k)) <= 1.0)
          out.push_back(static_cast<std::uint32_t>(v.index(i, j, k)));
  return out;
}

bool ellipsoid_in_bone(const Volume& v, const Ellipsoid& el,
                       const std::vector<std::uint8_t>& bone) {
  auto vox = rasterize(v, el);
  if (vox.empty()) return false;
  for (auto idx : vox)
    if (!bone[idx]) return false;
  // stay off the z faces
  double zlo = el.c.z - el.e, zhi = el.c.z + el.e;
  return zlo > v.origin.z + v.sz && zhi < v.origin.z + v.nz * v.sz - v.sz;
}

bool overlaps(const std::vector<std::uint32_t>& vox, const std::vector<std::uint8_t>& occupied) {
  for (auto idx : vox)
    if (occupied[idx]) return true;
  return false;
}

void mark(const std::vector<std::uint32_t>& vox, std::vector<std::uint8_t>& occupied) {
  for (auto idx : vox) occupied[idx] = 1;
}

}  // namespace

void validate_phantom_spec(const PhantomSpec& s) {
  if (s.nx < 1 || s.ny < 1 || s.nz < 1) throw ValidationError("phantom dims must be >= 1");
  if (!(s.sx > 0 && s.sy > 0 && s.sz > 0)) throw ValidationError("phantom spacing must be > 0");
  if (s.lesion_count < 0) throw ValidationError("lesion_count must be >= 0");
  if (s.distractor_count < 0) throw ValidationError("distractor_count must be >= 0");
  if (!(s.spine_radius_mm > 0)) throw ValidationError("spine_radius_mm must be > 0");
  if (!(s.vertebra_hu_lo < s.vertebra_hu_hi)) throw ValidationError("vertebra HU range is degenerate");
  if (!(s.lesion_hu_offset_lo < s.lesion_hu_offset_hi)) throw ValidationError("lesion HU offset range is degenerate");
  if (!(s.lesion_radius_lo_mm < s.lesion_radius_hi_mm)) throw ValidationError("lesion radius range is degenerate");
  if (!(s.lesion_radius_lo_mm > 0)) throw ValidationError("lesion radius must be > 0");
  if (!(s.noise_sigma_hu >= 0)) throw ValidationError("noise sigma must be >= 0");
}

Phantom generate_phantom(const PhantomSpec& spec) {
  validate_phantom_spec(spec);

  Phantom ph;
  Volume& v = ph.volume;
  v.nx = spec.nx; v.ny = spec.ny; v.nz = spec.nz;
  v.sx = spec.sx; v.sy = spec.sy; v.sz = spec.sz;
  v.origin = {0, 0, 0};
  v.data.assign(v.size(), static_cast<float>(spec.background_hu));

  Frame f;
  f.ax = v.origin.x + 0.5 * v.nx * v.sx;
  f.ay = v.origin.y + 0.5 * v.ny * v.sy;
  f.spine_r = spec.spine_radius_mm;
  f.canal_r = kCanalRadiusFrac * spec.spine_radius_mm;
  f.canal_x = f.ax;
  f.canal_y = f.ay + kCanalOffsetFrac * spec.spine_radius_mm;

  // Base structure: bodies, discs, end-plate rings, canal.
  ph.spine_mask.assign(v.size(), 0);
  const double hu_span = spec.vertebra_hu_hi - spec.vertebra_hu_lo;
  const double body_hu = spec.vertebra_hu_lo + kBodyInteriorFrac * hu_span;
  for (int k = 0; k < v.nz; ++k) {
    double wz = v.origin.z + (k + 0.5) * v.sz;
    ZKind zk = classify_z(wz);
    for (int j = 0; j < v.ny; ++j) {
      double wy = v.origin.y + (j + 0.5) * v.sy;
      for (int i = 0; i < v.nx; ++i) {
        double wx = v.origin.x + (i + 0.5) * v.sx;
        double dx = wx - f.ax, dy = wy - f.ay;
        double r2 = dx * dx + dy * dy;
        if (r2 > f.spine_r * f.spine_r) continue;
        double cx = wx - f.canal_x, cy = wy - f.canal_y;
        bool in_canal = cx * cx + cy * cy <= f.canal_r * f.canal_r;
        std::size_t idx = v.index(i, j, k);
        if (in_canal) {
          v.data[idx] = static_cast<float>(kCanalHu);
          continue;
        }
        ph.spine_mask[idx] = 1;
        if (zk.disc) {
          v.data[idx] = static_cast<float>(kDiscHu);
        } else {
          double hu = body_hu;
          if (zk.end_plate && r2 >= (kEndPlateInnerFrac * f.spine_r) * (kEndPlateInnerFrac * f.spine_r))
            hu = spec.vertebra_hu_hi;
          v.data[idx] = static_cast<float>(hu);
        }
      }
    }
  }

  Rng rng(spec.seed);
  std::vector<std::uint8_t> occupied(v.size(), 0);

  // Lesions: bright ellipsoids fully inside the bone, pairwise separated.
  for (int n = 0; n < spec.lesion_count; ++n) {
    bool placed = false;
    for (int attempt = 0; attempt < kPlacementTries && !placed; ++attempt) {
      Ellipsoid el;
      el.a = rng.uniform(spec.lesion_radius_lo_mm, spec.lesion_radius_hi_mm);
      el.b = rng.uniform(spec.lesion_radius_lo_mm, spec.lesion_radius_hi_mm);
      el.e = rng.uniform(spec.lesion_radius_lo_mm, spec.lesion_radius_hi_mm);
      double rr = rng.uniform(0.0, f.spine_r);
      double th = rng.uniform(0.0, 6.283185307179586);
      el.c.x = f.ax + rr * std::cos(th);
      el.c.y = f.ay + rr * std::sin(th);
      el.c.z = rng.uniform(v.origin.z + v.sz, v.origin.z + v.nz * v.sz - v.sz);
      double hu_offset = rng.uniform(spec.lesion_hu_offset_lo, spec.lesion_hu_offset_hi);

      if (!ellipsoid_in_bone(v, el, ph.spine_mask)) continue;
      auto vox = rasterize(v, el);
      double vol = static_cast<double>(vox.size()) * v.voxel_volume_mm3();
      if (vol <= spec.min_lesion_volume_mm3) continue;
      // keep 2 mm clearance so neighboring lesions do not fuse into one detection
      auto inflated = rasterize(v, el, 2.0);
      if (overlaps(inflated, occupied)) continue;

      for (auto idx : vox) v.data[idx] = static_cast<float>(v.data[idx] + hu_offset);
      mark(inflated, occupied);
      GroundTruthLesion gl;
      gl.center = el.c;
      std::sort(vox.begin(), vox.end());
      gl.voxel_mask = std::move(vox);
      gl.volume_mm3 = vol;
      ph.lesions.push_back(std::move(gl));
      placed = true;
    }
    if (!placed)
      throw CapacityError("could not place lesion " + std::to_string(n + 1) + " of " +
                          std::to_string(spec.lesion_count) + " without overlap");
  }

  // Distractors: dense structures that are not lesions. Best effort; skipped
  // if they do not fit.
  for (int n = 0; n < spec.distractor_count; ++n) {
    int kind = n % 3;
    for (int attempt = 0; attempt < kPlacementTries; ++attempt) {
      if (kind == 0) {
        // annulus ("sclerotic rim"): bright ring, hollow center
        double r_out = rng.uniform(5.5, 8.0);
        double thick = rng.uniform(1.8, 2.6);
        double hz = rng.uniform(3.5, 6.0);
        double rr = rng.uniform(0.0, f.spine_r);
        double th = rng.uniform(0.0, 6.283185307179586);
        Vec3 c{f.ax + rr * std::cos(th), f.ay + rr * std::sin(th),
               rng.uniform(v.origin.z + v.sz, v.origin.z + v.nz * v.sz - v.sz)};
        double hu_offset = rng.uniform(spec.lesion_hu_offset_lo * 0.85, spec.lesion_hu_offset_hi * 0.9);
        Ellipsoid outer{c, r_out, r_out, hz};
        if (!ellipsoid_in_bone(v, outer, ph.spine_mask)) continue;
        auto vox_out = rasterize(v, outer);
        double r_in = r_out - thick;
        std::vector<std::uint32_t> ring;
        for (auto idx : vox_out) {
          int i = static_cast<int>(idx % v.nx);
          int j = static_cast<int>((idx / v.nx) % v.ny);
          int k = static_cast<int>(idx / (static_cast<std::size_t>(v.nx) * v.ny));
          Vec3 p = v.voxel_center(i, j, k);
          double dx = p.x - c.x, dy = p.y - c.y;
          if (dx * dx + dy * dy >= r_in * r_in) ring.push_back(idx);
        }
        if (ring.empty() || overlaps(vox_out, occupied)) continue;
        for (auto idx : ring) v.data[idx] = static_cast<float>(v.data[idx] + hu_offset);
        mark(vox_out, occupied);
        break;
      } else if (kind == 1) {
        // small dense blob, below the evaluation volume cutoff
        Ellipsoid el;
        el.a = rng.uniform(2.2, 3.6);
        el.b = rng.uniform(2.2, 3.6);
        el.e = rng.uniform(2.2, 3.6);
        double rr = rng.uniform(0.0, f.spine_r);
        double th = rng.uniform(0.0, 6.283185307179586);
        el.c = {f.ax + rr * std::cos(th), f.ay + rr * std::sin(th),
                rng.uniform(v.origin.z + v.sz, v.origin.z + v.nz * v.sz - v.sz)};
        double hu_offset = rng.uniform(spec.lesion_hu_offset_lo, spec.lesion_hu_offset_hi);
        if (!ellipsoid_in_bone(v, el, ph.spine_mask)) continue;
        auto vox = rasterize(v, el);
        auto inflated = rasterize(v, el, 2.0);
        if (vox.empty() || overlaps(inflated, occupied)) continue;
        for (auto idx : vox) v.data[idx] = static_cast<float>(v.data[idx] + hu_offset);
        mark(inflated, occupied);
        break;
      } else {
        // arc along the outer cortex
        double phi0 = rng.uniform(0.0, 6.283185307179586);
        double dphi = rng.uniform(0.9, 1.6);
        double band = rng.uniform(2.5, 4.0);
        double hz = rng.uniform(3.0, 6.0);
        double zc = rng.uniform(v.origin.z + hz + v.sz, v.origin.z + v.nz * v.sz - hz - v.sz);
        double hu_offset = rng.uniform(250.0, 450.0);
        std::vector<std::uint32_t> arc;
        bool clean = true;
        for (int k = 0; k < v.nz && clean; ++k) {
          double wz = v.origin.z + (k + 0.5) * v.sz;
          if (std::fabs(wz - zc) > hz) continue;
          for (int j = 0; j < v.ny && clean; ++j)
            for (int i = 0; i < v.nx; ++i) {
              std::size_t idx = v.index(i, j, k);
              if (!ph.spine_mask[idx]) continue;
              Vec3 p = v.voxel_center(i, j, k);
              double dx = p.x - f.ax, dy = p.y - f.ay;
              double r = std::sqrt(dx * dx + dy * dy);
              if (r < f.spine_r - band || r > f.spine_r - 0.3) continue;
              double ang = std::atan2(dy, dx);
              double d = std::remainder(ang - phi0, 6.283185307179586);
              if (std::fabs(d) > dphi * 0.5) continue;
              if (occupied[idx]) { clean = false; break; }
              arc.push_back(static_cast<std::uint32_t>(idx));
            }
        }
        if (!clean || arc.size() < 4) continue;
        for (auto idx : arc) v.data[idx] = static_cast<float>(v.data[idx] + hu_offset);
        mark(arc, occupied);
        break;
      }
    }
  }

  // Additive noise, then quantize to integer HU so that the int16 file
  // round-trip is exact.
  for (std::size_t i = 0; i < v.data.size(); ++i) {
    double hu = v.data[i];
    if (spec.noise_sigma_hu > 0) hu += rng.normal(0.0, spec.noise_sigma_hu);
    hu = std::nearbyint(hu);
    if (hu < kHuMin) hu = kHuMin;
    if (hu > kHuMax) hu = kHuMax;
    v.data[i] = static_cast<float>(hu);
  }

  return ph;
}

}  // namespace cascade
