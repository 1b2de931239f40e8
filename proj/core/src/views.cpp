#include "cascade/views.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "cascade/errors.hpp"
#include "cascade/rng.hpp"

namespace cascade {

void validate_view_config(const ViewSampleConfig& cfg) {
  if (cfg.scales_mm.empty()) throw ValidationError("view config: no scales");
  for (const double s : cfg.scales_mm)
    if (!(s > 0)) throw ValidationError("view config: scales must be positive");
  if (cfg.n_translations < 1) throw ValidationError("view config: n_translations must be >= 1");
  if (cfg.n_rotations < 1) throw ValidationError("view config: n_rotations must be >= 1");
  if (cfg.max_translation_mm < 0) throw ValidationError("view config: negative max translation");
  if (cfg.patch_px < 2) throw ValidationError("view config: patch_px must be >= 2");
  if (cfg.channels < 1) throw ValidationError("view config: channels must be >= 1");
}

Patch extract_patch(const Volume& v, const Vec3& center, double scale_mm,
                    const std::array<double, 2>& translation_mm, double rotation_deg, int patch_px,
                    int channels) {
  validate_volume(v);
  if (!(scale_mm > 0)) throw ValidationError("extract_patch: scale must be positive");
  if (patch_px < 2) throw ValidationError("extract_patch: patch_px must be >= 2");
  if (channels < 1) throw ValidationError("extract_patch: channels must be >= 1");
  if (!std::isfinite(rotation_deg) || !std::isfinite(translation_mm[0]) || !std::isfinite(translation_mm[1]))
    throw ValidationError("extract_patch: non-finite transform");
  if (!v.contains_world(center))
    throw OutOfBoundsError("extract_patch: center outside volume");

  // Nearest slice to the requested z; all sampling happens on that slice.
  const double cont_k = (center.z - v.origin.z) / v.sz - 0.5;
  int k = static_cast<int>(std::llround(cont_k));
  k = std::min(std::max(k, 0), v.nz - 1);
  const double slice_z = v.origin.z + (k + 0.5) * v.sz;

  const double cx = center.x + translation_mm[0];
  const double cy = center.y + translation_mm[1];
  const double rad = rotation_deg * M_PI / 180.0;
  const double ca = std::cos(rad), sa = std::sin(rad);
  const double step = scale_mm / patch_px;
  const double half = 0.5 * patch_px;

  Patch p;
  p.patch_px = patch_px;
  p.channels = channels;
  p.scale_mm = scale_mm;
  p.translation_mm = translation_mm;
  p.rotation_deg = rotation_deg;
  p.data.resize(static_cast<std::size_t>(channels) * patch_px * patch_px);

  const std::size_t plane = static_cast<std::size_t>(patch_px) * patch_px;
  for (int row = 0; row < patch_px; ++row) {
    const double w = (row + 0.5 - half) * step;
    for (int col = 0; col < patch_px; ++col) {
      const double u = (col + 0.5 - half) * step;
      const double x = cx + u * ca - w * sa;
      const double y = cy + u * sa + w * ca;
      const float hu = sample_trilinear(v, {x, y, slice_z});
      p.data[static_cast<std::size_t>(row) * patch_px + col] = window_normalize(hu);
    }
  }
  for (int c = 1; c < channels; ++c)
    std::memcpy(p.data.data() + plane * c, p.data.data(), plane * sizeof(float));
  return p;
}

std::vector<Patch> sample_views(const Volume& v, const Vec3& centroid, int candidate_id,
                                const ViewSampleConfig& cfg, std::uint64_t seed) {
  validate_view_config(cfg);
  std::vector<Patch> out;
  out.reserve(static_cast<std::size_t>(cfg.views_per_candidate()));
  Rng rng(seed);
  for (const double scale : cfg.scales_mm)
    for (int t = 0; t < cfg.n_translations; ++t) {
      // Uniform over the disk: radius via inverse CDF, angle uniform.
      const double r = cfg.max_translation_mm * std::sqrt(rng.uniform());
      const double theta = 2.0 * M_PI * rng.uniform();
      const std::array<double, 2> v_t = {r * std::cos(theta), r * std::sin(theta)};
      for (int a = 0; a < cfg.n_rotations; ++a) {
        const double alpha = 360.0 * rng.uniform();
        Patch p = extract_patch(v, centroid, scale, v_t, alpha, cfg.patch_px, cfg.channels);
        p.candidate_id = candidate_id;
        out.push_back(std::move(p));
      }
    }
  return out;
}

void write_patch_batch(const std::filesystem::path& path, const std::vector<Patch>& patches,
                       int patch_px, int channels) {
  const std::size_t per_patch = static_cast<std::size_t>(channels) * patch_px * patch_px;
  const std::filesystem::path payload_path = std::filesystem::path(path).replace_extension(".f32");

  nlohmann::json root;
  root["patch_px"] = patch_px;
  root["channels"] = channels;
  root["payload"] = payload_path.filename().string();
  root["patches"] = nlohmann::json::array();
  for (const auto& p : patches) {
    if (p.patch_px != patch_px || p.channels != channels)
      throw ValidationError("write_patch_batch: mixed patch shapes");
    if (p.data.size() != per_patch) throw ValidationError("write_patch_batch: bad patch data size");
    root["patches"].push_back({{"candidate_id", p.candidate_id},
                               {"scale_mm", p.scale_mm},
                               {"translation_mm", {p.translation_mm[0], p.translation_mm[1]}},
                               {"rotation_deg", p.rotation_deg}});
  }

  std::ofstream manifest(path);
  if (!manifest) throw IoError("cannot open for writing: " + path.string());
  manifest << root.dump(1, '\t') << '\n';
  if (!manifest) throw IoError("write failed: " + path.string());

  std::ofstream payload(payload_path, std::ios::binary);
  if (!payload) throw IoError("cannot open for writing: " + payload_path.string());
  for (const auto& p : patches)
    payload.write(reinterpret_cast<const char*>(p.data.data()),
                  static_cast<std::streamsize>(p.data.size() * sizeof(float)));
  if (!payload) throw IoError("write failed: " + payload_path.string());
}

std::vector<Patch> read_patch_batch(const std::filesystem::path& path) {
  std::ifstream manifest(path);
  if (!manifest) throw IoError("cannot open: " + path.string());
  nlohmann::json root;
  try {
    manifest >> root;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad patch manifest " + path.string() + ": " + e.what());
  }

  std::vector<Patch> out;
  int patch_px = 0, channels = 0;
  std::filesystem::path payload_path;
  try {
    patch_px = root.at("patch_px").get<int>();
    channels = root.at("channels").get<int>();
    payload_path = path.parent_path() / root.at("payload").get<std::string>();
    for (const auto& j : root.at("patches")) {
      Patch p;
      p.candidate_id = j.at("candidate_id").get<int>();
      p.patch_px = patch_px;
      p.channels = channels;
      p.scale_mm = j.at("scale_mm").get<double>();
      p.translation_mm = {j.at("translation_mm").at(0).get<double>(),
                          j.at("translation_mm").at(1).get<double>()};
      p.rotation_deg = j.at("rotation_deg").get<double>();
      out.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad patch manifest " + path.string() + ": " + e.what());
  }
  if (patch_px < 2 || channels < 1) throw IoError("bad patch manifest: invalid shape");

  std::ifstream payload(payload_path, std::ios::binary);
  if (!payload) throw IoError("cannot open: " + payload_path.string());
  payload.seekg(0, std::ios::end);
  const std::size_t bytes = static_cast<std::size_t>(payload.tellg());
  payload.seekg(0);
  const std::size_t per_patch = static_cast<std::size_t>(channels) * patch_px * patch_px;
  if (bytes != out.size() * per_patch * sizeof(float))
    throw IoError("patch payload size mismatch: " + payload_path.string());
  for (auto& p : out) {
    p.data.resize(per_patch);
    payload.read(reinterpret_cast<char*>(p.data.data()),
                 static_cast<std::streamsize>(per_patch * sizeof(float)));
  }
  if (!payload) throw IoError("read failed: " + payload_path.string());
  return out;
}

}  // namespace cascade
