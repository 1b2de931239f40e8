#include "cascade/candidates.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include <nlohmann/json.hpp>

#include "cascade/errors.hpp"
#include "cascade/spine.hpp"
#include "cascade/volume_io.hpp"
#include "cascade/watershed.hpp"

namespace cascade {

namespace {

void validate_config(const Tier1Config& c) {
  if (!std::isfinite(c.spine_hu_threshold)) throw ValidationError("tier1: non-finite spine threshold");
  if (c.growing_tolerance_hu < 0) throw ValidationError("tier1: negative growing tolerance");
  if (c.hu_merge_threshold < 0) throw ValidationError("tier1: negative merge threshold");
  if (c.peak_margin_hu < 0) throw ValidationError("tier1: negative peak margin");
  if (c.min_overlap_px < 1) throw ValidationError("tier1: min_overlap_px must be >= 1");
  if (c.min_volume_mm3 < 0) throw ValidationError("tier1: negative min volume");
}

// Sub-segments that stand out: brighter than every edge-adjacent neighbor by
// the margin. Segments with no neighbor at all are background-like, not peaks.
std::vector<SubSegment2D> select_peaks(const std::vector<SubSegment2D>& segments, const SliceView& s,
                                       double margin_hu) {
  if (segments.empty()) return {};
  const std::size_t n = static_cast<std::size_t>(s.nx) * s.ny;
  std::vector<int> owner(n, -1);
  std::map<int, double> mean;
  for (std::size_t si = 0; si < segments.size(); ++si) {
    for (const std::uint32_t p : segments[si].pixels) owner[p] = static_cast<int>(si);
    mean[static_cast<int>(si)] = segments[si].mean_hu;
  }
  std::map<int, std::set<int>> neighbors;
  for (std::uint32_t p = 0; p < n; ++p) {
    if (owner[p] == -1) continue;
    const int i = static_cast<int>(p % s.nx);
    const auto consider = [&](std::uint32_t q) {
      if (owner[q] != -1 && owner[q] != owner[p]) {
        neighbors[owner[p]].insert(owner[q]);
        neighbors[owner[q]].insert(owner[p]);
      }
    };
    if (i + 1 < s.nx) consider(p + 1);
    if (p + s.nx < n) consider(p + s.nx);
  }
  std::vector<SubSegment2D> out;
  for (std::size_t si = 0; si < segments.size(); ++si) {
    const auto it = neighbors.find(static_cast<int>(si));
    if (it == neighbors.end()) continue;
    bool peak = true;
    for (const int nb : it->second)
      if (segments[si].mean_hu < mean[nb] + margin_hu) {
        peak = false;
        break;
      }
    if (peak) out.push_back(segments[si]);
  }
  return out;
}

std::vector<Detection3D> run_detection(const Volume& v, const Tier1Config& config, SpineFrame* frame_out) {
  validate_volume(v);
  validate_config(config);
  const SpineMask spine = segment_spine(v, config.spine_hu_threshold, config.growing_tolerance_hu,
                                        config.min_component_voxels, config.closing_radius_mm);
  if (frame_out != nullptr) *frame_out = spine_frame(v, spine);

  const std::size_t plane = static_cast<std::size_t>(v.nx) * v.ny;
  std::vector<std::vector<SubSegment2D>> per_slice(v.nz);
  for (int z = 0; z < v.nz; ++z) {
    SliceView s;
    s.hu = v.data.data() + plane * z;
    s.mask = spine.mask.data() + plane * z;
    s.nx = v.nx;
    s.ny = v.ny;
    s.sx = v.sx;
    s.sy = v.sy;
    s.ox = v.origin.x;
    s.oy = v.origin.y;
    auto segs = watershed_subsegments(s, z, config.smooth_sigma_px);
    segs = merge_subsegments(std::move(segs), s, config.hu_merge_threshold);
    per_slice[z] = select_peaks(segs, s, config.peak_margin_hu);
  }

  auto detections = stack_detections(v, per_slice, config.min_overlap_px);
  std::erase_if(detections, [&](const Detection3D& d) {
    return static_cast<double>(d.voxels.size()) * v.voxel_volume_mm3() < config.min_volume_mm3;
  });
  return detections;
}

}  // namespace

std::vector<Detection3D> detect_raw(const Volume& v, const Tier1Config& config) {
  return run_detection(v, config, nullptr);
}

std::vector<Candidate> featurize_detections(const Volume& v, const Tier1Config& config) {
  SpineFrame frame;
  const auto detections = run_detection(v, config, &frame);
  std::vector<Candidate> out;
  out.reserve(detections.size());
  for (const auto& d : detections) {
    Candidate c;
    c.id = static_cast<int>(out.size());
    c.centroid = d.centroid;
    c.voxels = d.voxels;
    c.features = compute_features(d, v, frame);
    out.push_back(std::move(c));
  }
  return out;
}

std::vector<Candidate> generate_candidates(const Volume& v, const Tier1Config& config,
                                           const CommitteeModel& model) {
  std::vector<Candidate> out = featurize_detections(v, config);
  for (Candidate& c : out) {
    const auto values = c.features.values();
    c.tier1_score = committee_score(model, std::vector<double>(values.begin(), values.end()));
  }
  std::erase_if(out, [&](const Candidate& c) { return !(c.tier1_score > config.score_threshold); });
  std::sort(out.begin(), out.end(), [](const Candidate& a, const Candidate& b) {
    if (a.tier1_score != b.tier1_score) return a.tier1_score > b.tier1_score;
    return a.voxels.front() < b.voxels.front();
  });
  for (std::size_t i = 0; i < out.size(); ++i) out[i].id = static_cast<int>(i);
  return out;
}

namespace {

const char* label_name(CandidateLabel label) {
  switch (label) {
    case CandidateLabel::kTrueLesion: return "true-lesion";
    case CandidateLabel::kFalsePositive: return "false-positive";
    default: return "unknown";
  }
}

CandidateLabel label_from(const std::string& name) {
  if (name == "true-lesion") return CandidateLabel::kTrueLesion;
  if (name == "false-positive") return CandidateLabel::kFalsePositive;
  if (name == "unknown") return CandidateLabel::kUnknown;
  throw IoError("candidates: unknown label '" + name + "'");
}

}  // namespace

void write_candidates(const std::filesystem::path& path, const std::vector<Candidate>& candidates) {
  nlohmann::json root;
  root["candidates"] = nlohmann::json::array();
  for (const auto& c : candidates) {
    nlohmann::json j;
    j["id"] = c.id;
    j["centroid"] = {c.centroid.x, c.centroid.y, c.centroid.z};
    j["tier1_score"] = c.tier1_score;
    j["label"] = label_name(c.label);
    nlohmann::json feat;
    const auto values = c.features.values();
    for (int i = 0; i < CandidateFeatures::kCount; ++i) feat[CandidateFeatures::names()[i]] = values[i];
    j["features"] = feat;
    nlohmann::json rle = nlohmann::json::array();
    for (const auto& [start, len] : rle_encode(c.voxels)) rle.push_back({start, len});
    j["mask_rle"] = rle;
    root["candidates"].push_back(std::move(j));
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << root.dump(1, '\t') << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<Candidate> read_candidates(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path.string());
  nlohmann::json root;
  try {
    in >> root;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad candidate file " + path.string() + ": " + e.what());
  }
  std::vector<Candidate> out;
  try {
    for (const auto& j : root.at("candidates")) {
      Candidate c;
      c.id = j.at("id").get<int>();
      const auto& ctr = j.at("centroid");
      c.centroid = {ctr.at(0).get<double>(), ctr.at(1).get<double>(), ctr.at(2).get<double>()};
      c.tier1_score = j.at("tier1_score").get<double>();
      c.label = label_from(j.at("label").get<std::string>());
      const auto& feat = j.at("features");
      std::array<double, CandidateFeatures::kCount> values{};
      for (int i = 0; i < CandidateFeatures::kCount; ++i)
        values[i] = feat.at(CandidateFeatures::names()[i]).get<double>();
      CandidateFeatures& f = c.features;
      f.volume_mm3 = values[0];
      f.mean_hu = values[1];
      f.max_hu = values[2];
      f.std_hu = values[3];
      f.sphericity = values[4];
      f.bbox_x_mm = values[5];
      f.bbox_y_mm = values[6];
      f.bbox_z_mm = values[7];
      f.spine_axis_offset_mm = values[8];
      f.relative_height = values[9];
      f.surface_to_volume = values[10];
      f.slice_span = values[11];
      std::vector<std::pair<std::uint32_t, std::uint32_t>> runs;
      for (const auto& r : j.at("mask_rle")) runs.emplace_back(r.at(0).get<std::uint32_t>(), r.at(1).get<std::uint32_t>());
      c.voxels = rle_decode(runs);
      out.push_back(std::move(c));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad candidate file " + path.string() + ": " + e.what());
  }
  return out;
}

void write_committee(const std::filesystem::path& path, const CommitteeModel& model) {
  nlohmann::json root;
  root["feature_mean"] = model.feature_mean;
  root["feature_scale"] = model.feature_scale;
  root["members"] = nlohmann::json::array();
  for (int m = 0; m < model.members(); ++m)
    root["members"].push_back({{"weights", model.weights[m]}, {"bias", model.bias[m]}});
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << root.dump(1, '\t') << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

CommitteeModel read_committee(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path.string());
  nlohmann::json root;
  try {
    in >> root;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad committee file " + path.string() + ": " + e.what());
  }
  CommitteeModel model;
  try {
    model.feature_mean = root.at("feature_mean").get<std::vector<double>>();
    model.feature_scale = root.at("feature_scale").get<std::vector<double>>();
    for (const auto& m : root.at("members")) {
      model.weights.push_back(m.at("weights").get<std::vector<double>>());
      model.bias.push_back(m.at("bias").get<double>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad committee file " + path.string() + ": " + e.what());
  }
  if (model.weights.size() != model.bias.size()) throw IoError("bad committee file: member mismatch");
  for (const auto& w : model.weights)
    if (w.size() != model.feature_mean.size()) throw IoError("bad committee file: weight size mismatch");
  return model;
}

}  // namespace cascade
