#include <doctest.h>

#include <array>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "cascade/errors.hpp"
#include "cascade/rng.hpp"
#include "cascade/volume.hpp"
#include "cascade/volume_io.hpp"
#include "test_util.hpp"

using namespace cascade;

namespace {

Volume make_volume(int nx, int ny, int nz, double sx = 1, double sy = 1, double sz = 1) {
  Volume v;
  v.nx = nx;
  v.ny = ny;
  v.nz = nz;
  v.sx = sx;
  v.sy = sy;
  v.sz = sz;
  v.data.assign(v.size(), 0.0f);
  return v;
}

}  // namespace

TEST_CASE("volume invariants are enforced") {
  Volume v = make_volume(4, 4, 4);
  CHECK_NOTHROW(validate_volume(v));

  Volume zero_dim = v;
  zero_dim.nx = 0;
  zero_dim.data.clear();
  CHECK_THROWS_AS(validate_volume(zero_dim), ValidationError);

  Volume bad_spacing = v;
  bad_spacing.sy = 0;
  CHECK_THROWS_AS(validate_volume(bad_spacing), ValidationError);

  Volume short_data = v;
  short_data.data.pop_back();
  CHECK_THROWS_AS(validate_volume(short_data), ValidationError);

  Volume out_of_range = v;
  out_of_range.data[0] = 5000.0f;
  CHECK_THROWS_AS(validate_volume(out_of_range), ValidationError);
  out_of_range.data[0] = -2000.0f;
  CHECK_THROWS_AS(validate_volume(out_of_range), ValidationError);
}

TEST_CASE("voxel centers map back to their own indices") {
  Volume v = make_volume(5, 4, 3, 0.7, 1.3, 5.0);
  v.origin = {-3.0, 2.0, 11.0};
  for (int k = 0; k < v.nz; ++k)
    for (int j = 0; j < v.ny; ++j)
      for (int i = 0; i < v.nx; ++i) {
        const auto idx = v.world_to_voxel(v.voxel_center(i, j, k));
        CHECK(idx == std::array<int, 3>{i, j, k});
      }
}

TEST_CASE("world_to_voxel clamps points outside the grid") {
  Volume v = make_volume(4, 4, 4, 2, 2, 2);
  CHECK(v.world_to_voxel({-100, -100, -100}) == std::array<int, 3>{0, 0, 0});
  CHECK(v.world_to_voxel({100, 100, 100}) == std::array<int, 3>{3, 3, 3});
}

TEST_CASE("bone window endpoints, midpoint and clamping") {
  CHECK(window_normalize(-250.0) == 0.0);
  CHECK(window_normalize(1250.0) == 1.0);
  CHECK(window_normalize(500.0) == doctest::Approx(0.5));
  CHECK(window_normalize(-1000.0) == 0.0);
  CHECK(window_normalize(3000.0) == 1.0);
}

TEST_CASE("trilinear sampling reproduces grid values and midpoints") {
  Volume v = make_volume(4, 4, 4);
  Rng rng(5);
  for (auto& x : v.data) x = static_cast<float>(rng.uniform(-500, 2000));

  // exact at voxel centers
  for (int k = 0; k < 4; ++k)
    for (int j = 0; j < 4; ++j)
      for (int i = 0; i < 4; ++i)
        CHECK(sample_trilinear(v, v.voxel_center(i, j, k)) == v.at(i, j, k));

  // midpoint between two x-neighbors is their average
  const Vec3 a = v.voxel_center(1, 2, 2);
  const Vec3 b = v.voxel_center(2, 2, 2);
  const Vec3 mid = {0.5 * (a.x + b.x), a.y, a.z};
  CHECK(sample_trilinear(v, mid) ==
        doctest::Approx(0.5 * (v.at(1, 2, 2) + v.at(2, 2, 2))).epsilon(1e-6));
}

TEST_CASE("resampling to the current spacing is the identity") {
  Volume v = make_volume(6, 5, 4, 2, 2, 2);
  Rng rng(7);
  for (auto& x : v.data) x = static_cast<float>(rng.uniform(-500, 2000));
  CHECK(resample_isometric(v, 2.0) == v);
}

TEST_CASE("resampling a constant volume stays constant") {
  Volume v = make_volume(6, 6, 6, 1, 1, 5);
  for (auto& x : v.data) x = 123.0f;
  const Volume r = resample_isometric(v, 2.0);
  for (const float x : r.data) CHECK(x == 123.0f);
}

TEST_CASE("resampling reproduces a linear field at interior points") {
  Volume v = make_volume(12, 12, 12, 1, 1, 5);
  const double a = 17.0, b = -40.0;
  for (int k = 0; k < v.nz; ++k)
    for (int j = 0; j < v.ny; ++j)
      for (int i = 0; i < v.nx; ++i)
        v.at(i, j, k) = static_cast<float>(a * v.voxel_center(i, j, k).x + b);

  const Volume r = resample_isometric(v, 2.0);
  // Interior only: edge clamping flattens the field in the outermost shell.
  for (int k = 1; k < r.nz - 1; ++k)
    for (int j = 1; j < r.ny - 1; ++j)
      for (int i = 1; i < r.nx - 1; ++i) {
        const Vec3 p = r.voxel_center(i, j, k);
        if (p.x < v.origin.x + 0.5 * v.sx || p.x > v.origin.x + (v.nx - 0.5) * v.sx) continue;
        CHECK(r.at(i, j, k) == doctest::Approx(a * p.x + b).epsilon(1e-4));
      }
}

TEST_CASE("volume files round-trip bit for bit") {
  testutil::ScopedTempDir tmp("volio");
  Volume v = make_volume(7, 6, 5, 0.8, 0.9, 3.5);
  v.origin = {1, -2, 3};
  Rng rng(11);
  for (auto& x : v.data) x = static_cast<float>(std::floor(rng.uniform(-1024, 3071)));
  const std::string hdr = (tmp / "vol.hdr").string();
  write_volume(v, hdr);
  const Volume back = read_volume(hdr);
  CHECK(back == v);
}

TEST_CASE("volume reader rejects inconsistent headers") {
  testutil::ScopedTempDir tmp("volio-bad");
  Volume v = make_volume(4, 4, 2);
  const std::string hdr = (tmp / "vol.hdr").string();
  write_volume(v, hdr);

  SUBCASE("declared dims larger than the payload") {
    // rewrite the header claiming an extra slice
    std::string text;
    {
      std::ifstream in(hdr);
      text.assign((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    }
    const auto pos = text.find("4 4 2");
    REQUIRE(pos != std::string::npos);
    text.replace(pos, 5, "4 4 3");
    std::ofstream(hdr) << text;
    CHECK_THROWS_AS(read_volume(hdr), IoError);
  }

  SUBCASE("zero spacing") {
    std::string text;
    {
      std::ifstream in(hdr);
      text.assign((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    }
    const auto pos = text.find("1 1 1");
    REQUIRE(pos != std::string::npos);
    text.replace(pos, 5, "0 1 1");
    std::ofstream(hdr) << text;
    CHECK_THROWS_AS(read_volume(hdr), ValidationError);
  }
}

TEST_CASE("run-length coding round-trips sorted index sets") {
  CHECK(rle_decode(rle_encode({})).empty());

  Rng rng(13);
  std::vector<std::uint32_t> idx;
  std::uint32_t at = 0;
  for (int i = 0; i < 5000; ++i) {
    at += 1 + static_cast<std::uint32_t>(rng.index(3) == 0 ? rng.index(50) : 0);
    idx.push_back(at);
  }
  CHECK(rle_decode(rle_encode(idx)) == idx);
}

TEST_CASE("lesion sidecar files round-trip") {
  testutil::ScopedTempDir tmp("lesions");
  std::vector<GroundTruthLesion> lesions(2);
  lesions[0].center = {1.5, 2.5, 3.5};
  lesions[0].voxel_mask = {4, 5, 6, 100, 101};
  lesions[0].volume_mm3 = 25.0;
  lesions[1].center = {-7, 8, 9};
  lesions[1].voxel_mask = {0};
  lesions[1].volume_mm3 = 5.0;

  const std::string path = (tmp / "gt.json").string();
  write_lesions(lesions, path);
  const auto back = read_lesions(path);
  REQUIRE(back.size() == 2);
  for (int i = 0; i < 2; ++i) {
    CHECK(back[i].center.x == lesions[i].center.x);
    CHECK(back[i].center.y == lesions[i].center.y);
    CHECK(back[i].center.z == lesions[i].center.z);
    CHECK(back[i].voxel_mask == lesions[i].voxel_mask);
    CHECK(back[i].volume_mm3 == lesions[i].volume_mm3);
  }

  write_lesions({}, path);
  CHECK(read_lesions(path).empty());
}
