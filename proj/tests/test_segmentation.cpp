#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "cascade/detections.hpp"
#include "cascade/errors.hpp"
#include "cascade/phantom.hpp"
#include "cascade/rng.hpp"
#include "cascade/spine.hpp"
#include "cascade/watershed.hpp"

using namespace cascade;

namespace {

Volume flat_volume(int nx, int ny, int nz, float hu) {
  Volume v;
  v.nx = nx;
  v.ny = ny;
  v.nz = nz;
  v.data.assign(v.size(), hu);
  return v;
}

/// Owns the buffers a SliceView points into.
struct OwnedSlice {
  std::vector<float> hu;
  std::vector<std::uint8_t> mask;
  SliceView view;

  OwnedSlice(int nx, int ny, float fill = 0.0f, std::uint8_t in = 1)
      : hu(static_cast<std::size_t>(nx) * ny, fill),
        mask(static_cast<std::size_t>(nx) * ny, in) {
    view.hu = hu.data();
    view.mask = mask.data();
    view.nx = nx;
    view.ny = ny;
  }
};

}  // namespace

TEST_CASE("spine segmentation covers the constructed bone mask") {
  PhantomSpec spec;
  spec.seed = 21;
  const Phantom ph = generate_phantom(spec);
  const SpineMask m = segment_spine(ph.volume, 200.0, 60.0);

  // the truth mask also spans the soft intervertebral discs, which sit far
  // below any bone threshold; only closing can bridge them, so they get a
  // looser bound than the bright voxels
  std::size_t bright = 0, bright_covered = 0, all = 0, all_covered = 0;
  for (std::size_t i = 0; i < ph.spine_mask.size(); ++i) {
    if (!ph.spine_mask[i]) continue;
    ++all;
    all_covered += m.mask[i] ? 1 : 0;
    if (ph.volume.data[i] >= 200.0f) {
      ++bright;
      bright_covered += m.mask[i] ? 1 : 0;
    }
  }
  REQUIRE(bright > 0);
  CHECK(static_cast<double>(bright_covered) / static_cast<double>(bright) >= 0.95);
  CHECK(static_cast<double>(all_covered) / static_cast<double>(all) >= 0.60);

  // the canal is carved out, not bone
  for (std::size_t i = 0; i < m.canal.size(); ++i)
    if (m.canal[i]) CHECK(m.mask[i] == 0);
}

TEST_CASE("segmentation of boneless volumes fails loudly") {
  const Volume bg = flat_volume(16, 16, 8, -80.0f);
  CHECK_THROWS_AS(segment_spine(bg, 200.0, 60.0), NoSpineFoundError);

  const Volume dim = flat_volume(16, 16, 8, 100.0f);
  CHECK_THROWS_AS(segment_spine(dim, 200.0, 60.0), NoSpineFoundError);
}

TEST_CASE("spine frame tracks the cylinder axis and extent") {
  PhantomSpec spec;
  spec.seed = 22;
  const Phantom ph = generate_phantom(spec);
  const SpineMask m = segment_spine(ph.volume, 200.0, 60.0);
  const SpineFrame frame = spine_frame(ph.volume, m);

  const double cx = ph.volume.origin.x + 0.5 * ph.volume.nx * ph.volume.sx;
  const double cy = ph.volume.origin.y + 0.5 * ph.volume.ny * ph.volume.sy;
  CHECK(std::abs(frame.axis_x - cx) < 3.0);
  CHECK(std::abs(frame.axis_y - cy) < 3.0);
  const double z_extent = ph.volume.nz * ph.volume.sz;
  CHECK(frame.z_hi - frame.z_lo > 0.8 * z_extent);
}

TEST_CASE("watershed of a uniform disk is a single segment") {
  OwnedSlice s(24, 24, 0.0f, 0);
  std::size_t disk_px = 0;
  for (int j = 0; j < 24; ++j)
    for (int i = 0; i < 24; ++i) {
      const double d2 = (i - 11.5) * (i - 11.5) + (j - 11.5) * (j - 11.5);
      if (d2 <= 64.0) {
        s.hu[static_cast<std::size_t>(j) * 24 + i] = 400.0f;
        s.mask[static_cast<std::size_t>(j) * 24 + i] = 1;
        ++disk_px;
      }
    }
  const auto segs = watershed_subsegments(s.view, 3);
  REQUIRE(segs.size() == 1);
  CHECK(segs[0].pixels.size() == disk_px);
  CHECK(segs[0].z == 3);
  CHECK(std::is_sorted(segs[0].pixels.begin(), segs[0].pixels.end()));
  CHECK(segs[0].mean_hu == doctest::Approx(400.0));
}

TEST_CASE("watershed splits two bumps along the valley") {
  const int nx = 32, ny = 32;
  OwnedSlice s(nx, ny);
  const double c1x = 10, c2x = 22, cy = 16;
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) {
      const double g1 = std::exp(-((i - c1x) * (i - c1x) + (j - cy) * (j - cy)) / (2 * 9.0));
      const double g2 = std::exp(-((i - c2x) * (i - c2x) + (j - cy) * (j - cy)) / (2 * 9.0));
      s.hu[static_cast<std::size_t>(j) * nx + i] = static_cast<float>(100 + 500 * (g1 + g2));
    }
  const auto segs = watershed_subsegments(s.view, 0);
  REQUIRE(segs.size() == 2);

  // partition: disjoint cover of the mask
  std::vector<std::uint32_t> all;
  for (const auto& seg : segs) all.insert(all.end(), seg.pixels.begin(), seg.pixels.end());
  std::sort(all.begin(), all.end());
  CHECK(all.size() == static_cast<std::size_t>(nx) * ny);
  CHECK(std::adjacent_find(all.begin(), all.end()) == all.end());

  // pixels clearly nearer one bump belong to that bump's basin
  const bool first_is_left = segs[0].cx < segs[1].cx;
  const auto& left = first_is_left ? segs[0] : segs[1];
  const auto& right = first_is_left ? segs[1] : segs[0];
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) {
      const std::uint32_t p = static_cast<std::uint32_t>(j) * nx + i;
      const double d1 = std::abs(i - c1x), d2 = std::abs(i - c2x);
      if (d2 - d1 > 2.0)
        CHECK(std::binary_search(left.pixels.begin(), left.pixels.end(), p));
      else if (d1 - d2 > 2.0)
        CHECK(std::binary_search(right.pixels.begin(), right.pixels.end(), p));
    }
}

TEST_CASE("watershed of an empty mask is empty") {
  OwnedSlice s(8, 8, 300.0f, 0);
  CHECK(watershed_subsegments(s.view).empty());
}

namespace {

/// Three vertical strips A | B | C on a 6x2 slice with chosen HU plateaus.
struct StripFixture {
  OwnedSlice s{6, 2};
  std::vector<SubSegment2D> segs;

  StripFixture(float hu_a, float hu_b, float hu_c) {
    const float hu[3] = {hu_a, hu_b, hu_c};
    segs.resize(3);
    for (int r = 0; r < 3; ++r) {
      segs[r].id = r + 1;
      segs[r].z = 0;
      for (int j = 0; j < 2; ++j)
        for (int i = 2 * r; i < 2 * r + 2; ++i) {
          const std::uint32_t p = static_cast<std::uint32_t>(j) * 6 + i;
          s.hu[p] = hu[r];
          segs[r].pixels.push_back(p);
        }
      std::sort(segs[r].pixels.begin(), segs[r].pixels.end());
      segs[r].mean_hu = hu[r];
    }
  }
};

}  // namespace

TEST_CASE("adjacent segments below the merge threshold fuse") {
  StripFixture fx(400, 405, 2000);
  const auto merged = merge_subsegments({fx.segs[0], fx.segs[1]}, fx.s.view, 10.0);
  REQUIRE(merged.size() == 1);
  CHECK(merged[0].pixels.size() == 8);
  CHECK(merged[0].mean_hu == doctest::Approx(402.5));
  CHECK(merged[0].id == 1);  // merged segment keeps the smaller id
}

TEST_CASE("segments farther apart than the threshold stay separate") {
  StripFixture fx(400, 405, 2000);
  const auto merged = merge_subsegments({fx.segs[0], fx.segs[1]}, fx.s.view, 2.0);
  CHECK(merged.size() == 2);
}

TEST_CASE("greedy merging is pairwise and order-stable") {
  StripFixture fx(400, 404, 500);
  const auto merged = merge_subsegments(fx.segs, fx.s.view, 10.0);
  REQUIRE(merged.size() == 2);
  // A and B fused (diff 4 < 10), C untouched (|402 - 500| >= 10)
  const auto& ab = merged[0].pixels.size() == 8 ? merged[0] : merged[1];
  const auto& c = merged[0].pixels.size() == 8 ? merged[1] : merged[0];
  CHECK(ab.pixels.size() == 8);
  CHECK(ab.mean_hu == doctest::Approx(402.0));
  CHECK(c.pixels == fx.segs[2].pixels);
}

namespace {

std::vector<SubSegment2D> disk_segment(int nx, int z, double cx, double cy, double r, int id) {
  SubSegment2D seg;
  seg.id = id;
  seg.z = z;
  for (int j = 0; j < nx; ++j)
    for (int i = 0; i < nx; ++i)
      if ((i - cx) * (i - cx) + (j - cy) * (j - cy) <= r * r)
        seg.pixels.push_back(static_cast<std::uint32_t>(j) * nx + i);
  std::sort(seg.pixels.begin(), seg.pixels.end());
  return {seg};
}

}  // namespace

TEST_CASE("stacking joins overlapping sub-segments on consecutive slices") {
  Volume v = flat_volume(16, 16, 4, 400.0f);
  std::vector<std::vector<SubSegment2D>> per_slice(4);

  SUBCASE("same disk on z and z+1 joins") {
    per_slice[0] = disk_segment(16, 0, 8, 8, 3, 1);
    per_slice[1] = disk_segment(16, 1, 8, 8, 3, 1);
    const auto dets = stack_detections(v, per_slice);
    REQUIRE(dets.size() == 1);
    CHECK(dets[0].segments.size() == 2);
  }

  SUBCASE("disks on z and z+2 stay separate") {
    per_slice[0] = disk_segment(16, 0, 8, 8, 3, 1);
    per_slice[2] = disk_segment(16, 2, 8, 8, 3, 1);
    CHECK(stack_detections(v, per_slice).size() == 2);
  }

  SUBCASE("a three-slice chain is one detection") {
    per_slice[0] = disk_segment(16, 0, 7, 8, 3, 1);
    per_slice[1] = disk_segment(16, 1, 8, 8, 3, 1);
    per_slice[2] = disk_segment(16, 2, 9, 8, 3, 1);
    const auto dets = stack_detections(v, per_slice);
    REQUIRE(dets.size() == 1);
    CHECK(dets[0].segments.size() == 3);
    const std::uint32_t plane = 16 * 16;
    const int z_lo = static_cast<int>(dets[0].voxels.front() / plane);
    const int z_hi = static_cast<int>(dets[0].voxels.back() / plane);
    CHECK(z_hi - z_lo + 1 == 3);
  }

  SUBCASE("disjoint disks on one slice never join") {
    per_slice[0] = disk_segment(16, 0, 4, 4, 2, 1);
    auto more = disk_segment(16, 0, 12, 12, 2, 2);
    per_slice[0].push_back(more[0]);
    per_slice[1] = disk_segment(16, 1, 4, 4, 2, 1);
    CHECK(stack_detections(v, per_slice).size() == 2);
  }
}

TEST_CASE("stacking does not depend on within-slice ordering") {
  Volume v = flat_volume(16, 16, 3, 400.0f);
  std::vector<std::vector<SubSegment2D>> per_slice(3);
  for (int z = 0; z < 3; ++z) {
    per_slice[z] = disk_segment(16, z, 5, 5, 2, 1);
    per_slice[z].push_back(disk_segment(16, z, 11, 11, 2, 2)[0]);
  }
  const auto a = stack_detections(v, per_slice);
  for (auto& slice : per_slice) std::reverse(slice.begin(), slice.end());
  const auto b = stack_detections(v, per_slice);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].voxels == b[i].voxels);
}

namespace {

Detection3D ball_detection(const Volume& v, double cx, double cy, double cz, double r) {
  Detection3D d;
  for (int k = 0; k < v.nz; ++k)
    for (int j = 0; j < v.ny; ++j)
      for (int i = 0; i < v.nx; ++i) {
        const Vec3 p = v.voxel_center(i, j, k);
        const double d2 =
            (p.x - cx) * (p.x - cx) + (p.y - cy) * (p.y - cy) + (p.z - cz) * (p.z - cz);
        if (d2 <= r * r) d.voxels.push_back(static_cast<std::uint32_t>(v.index(i, j, k)));
      }
  std::sort(d.voxels.begin(), d.voxels.end());
  d.centroid = {cx, cy, cz};
  return d;
}

}  // namespace

TEST_CASE("a rasterized ball is nearly spherical by the shape feature") {
  Volume v = flat_volume(24, 24, 24, 1000.0f);
  const Detection3D d = ball_detection(v, 12, 12, 12, 10.0);
  SpineFrame frame{12.0, 12.0, 0.0, 24.0};
  const CandidateFeatures f = compute_features(d, v, frame);
  CHECK(f.sphericity >= 0.8);
  CHECK(f.sphericity <= 1.05);
  CHECK(f.volume_mm3 == doctest::Approx(4.0 / 3.0 * 3.14159265 * 1000.0).epsilon(0.05));
  CHECK(f.spine_axis_offset_mm == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(f.relative_height == doctest::Approx(0.5));
}

TEST_CASE("single-voxel detections have voxel-sized boxes") {
  Volume v = flat_volume(8, 8, 8, 700.0f);
  v.sx = 0.7;
  v.sy = 1.3;
  v.sz = 5.0;
  Detection3D d;
  d.voxels = {static_cast<std::uint32_t>(v.index(3, 4, 5))};
  d.centroid = v.voxel_center(3, 4, 5);
  const CandidateFeatures f = compute_features(d, v, SpineFrame{0, 0, 0, 40});
  CHECK(f.bbox_x_mm == doctest::Approx(0.7));
  CHECK(f.bbox_y_mm == doctest::Approx(1.3));
  CHECK(f.bbox_z_mm == doctest::Approx(5.0));
  CHECK(f.slice_span == 1.0);
  CHECK(f.std_hu == 0.0);
  CHECK(f.mean_hu == f.max_hu);
}

TEST_CASE("feature vector enumerates twelve named values") {
  CHECK(CandidateFeatures::kCount == 12);
  CHECK(CandidateFeatures::names().size() == 12);
  Volume v = flat_volume(6, 6, 6, 500.0f);
  Detection3D d;
  d.voxels = {0, 1, 2};
  d.centroid = v.voxel_center(1, 0, 0);
  const auto vals = compute_features(d, v, SpineFrame{0, 0, 0, 6}).values();
  for (const double x : vals) CHECK(std::isfinite(x));
  CHECK_THROWS_AS(compute_features(Detection3D{}, v, SpineFrame{}), ValidationError);
}
