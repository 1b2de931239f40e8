#include "cascade/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <utility>

#include <nlohmann/json.hpp>

#include "cascade/errors.hpp"
#include "cascade/rng.hpp"
#include "cascade/volume_io.hpp"
#include "json_internal.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace cascade {

// ---- config validation -----------------------------------------------------

void validate_experiment_config(const ExperimentConfig& cfg) {
  if (cfg.lesion_volumes < 1) throw ValidationError("experiment: need at least one lesion volume");
  if (cfg.control_volumes < 0) throw ValidationError("experiment: negative control count");
  if (cfg.calibration_volumes < 1)
    throw ValidationError("experiment: need at least one calibration volume");
  validate_phantom_spec(cfg.phantom);
  if (cfg.phantom.lesion_count < 1)
    throw ValidationError("experiment: phantom template must place lesions");
  validate_view_config(cfg.eval_views);
  validate_view_config(cfg.train_views);
  validate_network(cfg.network);
  validate_train_config(cfg.train);
  validate_match_rule(cfg.match);
  const int patients = cfg.lesion_volumes + cfg.control_volumes;
  if (cfg.folds < 2) throw ValidationError("experiment: need at least 2 folds");
  if (cfg.folds > patients)
    throw ValidationError("experiment: more folds than patients (" +
                          std::to_string(cfg.folds) + " > " + std::to_string(patients) + ")");
  if (cfg.ablation.empty()) throw ValidationError("experiment: empty ablation list");
  for (const int n : cfg.ablation)
    if (n < 1 || n > cfg.eval_views.views_per_candidate())
      throw ValidationError("experiment: ablation value " + std::to_string(n) +
                            " outside [1, " +
                            std::to_string(cfg.eval_views.views_per_candidate()) + "]");
  if (cfg.out_dir.empty()) throw ValidationError("experiment: empty output directory");
}

// ---- config JSON ----------------------------------------------------------

namespace {

void check_keys(const json& j, const char* where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ValidationError(std::string(where) + ": expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (std::find_if(allowed.begin(), allowed.end(),
                     [&](const char* a) { return key == a; }) == allowed.end())
      throw ValidationError(std::string(where) + ": unknown field '" + key + "'");
  }
}

template <typename T>
void load(const json& j, const char* key, T& into) {
  if (auto it = j.find(key); it != j.end()) into = it->get<T>();
}

json phantom_to_json(const PhantomSpec& s) {
  return {{"nx", s.nx},
          {"ny", s.ny},
          {"nz", s.nz},
          {"sx", s.sx},
          {"sy", s.sy},
          {"sz", s.sz},
          {"spine_radius_mm", s.spine_radius_mm},
          {"vertebra_hu_lo", s.vertebra_hu_lo},
          {"vertebra_hu_hi", s.vertebra_hu_hi},
          {"lesion_count", s.lesion_count},
          {"lesion_hu_offset_lo", s.lesion_hu_offset_lo},
          {"lesion_hu_offset_hi", s.lesion_hu_offset_hi},
          {"lesion_radius_lo_mm", s.lesion_radius_lo_mm},
          {"lesion_radius_hi_mm", s.lesion_radius_hi_mm},
          {"background_hu", s.background_hu},
          {"noise_sigma_hu", s.noise_sigma_hu},
          {"distractor_count", s.distractor_count},
          {"min_lesion_volume_mm3", s.min_lesion_volume_mm3}};
}

PhantomSpec phantom_from_json(const json& j) {
  check_keys(j, "phantom",
             {"nx", "ny", "nz", "sx", "sy", "sz", "spine_radius_mm", "vertebra_hu_lo",
              "vertebra_hu_hi", "lesion_count", "lesion_hu_offset_lo", "lesion_hu_offset_hi",
              "lesion_radius_lo_mm", "lesion_radius_hi_mm", "background_hu", "noise_sigma_hu",
              "distractor_count", "min_lesion_volume_mm3"});
  PhantomSpec s;
  load(j, "nx", s.nx);
  load(j, "ny", s.ny);
  load(j, "nz", s.nz);
  load(j, "sx", s.sx);
  load(j, "sy", s.sy);
  load(j, "sz", s.sz);
  load(j, "spine_radius_mm", s.spine_radius_mm);
  load(j, "vertebra_hu_lo", s.vertebra_hu_lo);
  load(j, "vertebra_hu_hi", s.vertebra_hu_hi);
  load(j, "lesion_count", s.lesion_count);
  load(j, "lesion_hu_offset_lo", s.lesion_hu_offset_lo);
  load(j, "lesion_hu_offset_hi", s.lesion_hu_offset_hi);
  load(j, "lesion_radius_lo_mm", s.lesion_radius_lo_mm);
  load(j, "lesion_radius_hi_mm", s.lesion_radius_hi_mm);
  load(j, "background_hu", s.background_hu);
  load(j, "noise_sigma_hu", s.noise_sigma_hu);
  load(j, "distractor_count", s.distractor_count);
  load(j, "min_lesion_volume_mm3", s.min_lesion_volume_mm3);
  return s;
}

json tier1_to_json(const Tier1Config& c) {
  return {{"spine_hu_threshold", c.spine_hu_threshold},
          {"growing_tolerance_hu", c.growing_tolerance_hu},
          {"min_component_voxels", c.min_component_voxels},
          {"closing_radius_mm", c.closing_radius_mm},
          {"smooth_sigma_px", c.smooth_sigma_px},
          {"hu_merge_threshold", c.hu_merge_threshold},
          {"peak_margin_hu", c.peak_margin_hu},
          {"min_overlap_px", c.min_overlap_px},
          {"min_volume_mm3", c.min_volume_mm3},
          {"score_threshold", c.score_threshold}};
}

Tier1Config tier1_from_json(const json& j) {
  check_keys(j, "tier1",
             {"spine_hu_threshold", "growing_tolerance_hu", "min_component_voxels",
              "closing_radius_mm", "smooth_sigma_px", "hu_merge_threshold", "peak_margin_hu",
              "min_overlap_px", "min_volume_mm3", "score_threshold"});
  Tier1Config c;
  load(j, "spine_hu_threshold", c.spine_hu_threshold);
  load(j, "growing_tolerance_hu", c.growing_tolerance_hu);
  load(j, "min_component_voxels", c.min_component_voxels);
  load(j, "closing_radius_mm", c.closing_radius_mm);
  load(j, "smooth_sigma_px", c.smooth_sigma_px);
  load(j, "hu_merge_threshold", c.hu_merge_threshold);
  load(j, "peak_margin_hu", c.peak_margin_hu);
  load(j, "min_overlap_px", c.min_overlap_px);
  load(j, "min_volume_mm3", c.min_volume_mm3);
  load(j, "score_threshold", c.score_threshold);
  return c;
}

json committee_to_json(const CommitteeTrainConfig& c) {
  return {{"members", c.members},
          {"epochs", c.epochs},
          {"learning_rate", c.learning_rate},
          {"l2", c.l2}};
}

CommitteeTrainConfig committee_from_json(const json& j) {
  check_keys(j, "committee", {"members", "epochs", "learning_rate", "l2"});
  CommitteeTrainConfig c;
  load(j, "members", c.members);
  load(j, "epochs", c.epochs);
  load(j, "learning_rate", c.learning_rate);
  load(j, "l2", c.l2);
  return c;
}

json views_to_json(const ViewSampleConfig& c) {
  return {{"scales_mm", c.scales_mm},
          {"n_translations", c.n_translations},
          {"n_rotations", c.n_rotations},
          {"max_translation_mm", c.max_translation_mm},
          {"patch_px", c.patch_px},
          {"channels", c.channels}};
}

ViewSampleConfig views_from_json(const json& j, const char* where) {
  check_keys(j, where,
             {"scales_mm", "n_translations", "n_rotations", "max_translation_mm", "patch_px",
              "channels"});
  ViewSampleConfig c;
  load(j, "scales_mm", c.scales_mm);
  load(j, "n_translations", c.n_translations);
  load(j, "n_rotations", c.n_rotations);
  load(j, "max_translation_mm", c.max_translation_mm);
  load(j, "patch_px", c.patch_px);
  load(j, "channels", c.channels);
  return c;
}

json train_to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"keep_prob", c.keep_prob},
          {"lr_decay_factor", c.lr_decay_factor},
          {"lr_decay_fraction", c.lr_decay_fraction}};
}

TrainConfig train_from_json(const json& j) {
  check_keys(j, "train",
             {"learning_rate", "momentum", "weight_decay", "batch_size", "epochs", "keep_prob",
              "lr_decay_factor", "lr_decay_fraction"});
  TrainConfig c;
  load(j, "learning_rate", c.learning_rate);
  load(j, "momentum", c.momentum);
  load(j, "weight_decay", c.weight_decay);
  load(j, "batch_size", c.batch_size);
  load(j, "epochs", c.epochs);
  load(j, "keep_prob", c.keep_prob);
  load(j, "lr_decay_factor", c.lr_decay_factor);
  load(j, "lr_decay_fraction", c.lr_decay_fraction);
  return c;
}

json match_to_json(const MatchRule& m) {
  return {{"mode", m.mode == MatchRule::Mode::kMaskContainment ? "mask-containment"
                                                               : "centroid-distance"},
          {"distance_mm", m.distance_mm}};
}

MatchRule match_from_json(const json& j) {
  check_keys(j, "match", {"mode", "distance_mm"});
  MatchRule m;
  if (auto it = j.find("mode"); it != j.end()) {
    const std::string mode = it->get<std::string>();
    if (mode == "mask-containment")
      m.mode = MatchRule::Mode::kMaskContainment;
    else if (mode == "centroid-distance")
      m.mode = MatchRule::Mode::kCentroidDistance;
    else
      throw ValidationError("match: unknown mode '" + mode + "'");
  }
  load(j, "distance_mm", m.distance_mm);
  return m;
}

json config_to_json_obj(const ExperimentConfig& cfg) {
  json j;
  j["lesion_volumes"] = cfg.lesion_volumes;
  j["control_volumes"] = cfg.control_volumes;
  j["calibration_volumes"] = cfg.calibration_volumes;
  j["phantom"] = phantom_to_json(cfg.phantom);
  j["tier1"] = tier1_to_json(cfg.tier1);
  j["committee"] = committee_to_json(cfg.committee);
  j["eval_views"] = views_to_json(cfg.eval_views);
  j["train_views"] = views_to_json(cfg.train_views);
  j["network"] = network_to_json(cfg.network);
  j["train"] = train_to_json(cfg.train);
  j["match"] = match_to_json(cfg.match);
  j["folds"] = cfg.folds;
  j["ablation"] = cfg.ablation;
  j["master_seed"] = cfg.master_seed;
  j["out_dir"] = cfg.out_dir;
  return j;
}

ExperimentConfig config_from_json_obj(const json& j) {
  check_keys(j, "experiment config",
             {"lesion_volumes", "control_volumes", "calibration_volumes", "phantom", "tier1",
              "committee", "eval_views", "train_views", "network", "train", "match", "folds",
              "ablation", "master_seed", "out_dir"});
  ExperimentConfig cfg;
  load(j, "lesion_volumes", cfg.lesion_volumes);
  load(j, "control_volumes", cfg.control_volumes);
  load(j, "calibration_volumes", cfg.calibration_volumes);
  if (j.contains("phantom")) cfg.phantom = phantom_from_json(j.at("phantom"));
  if (j.contains("tier1")) cfg.tier1 = tier1_from_json(j.at("tier1"));
  if (j.contains("committee")) cfg.committee = committee_from_json(j.at("committee"));
  if (j.contains("eval_views")) cfg.eval_views = views_from_json(j.at("eval_views"), "eval_views");
  if (j.contains("train_views"))
    cfg.train_views = views_from_json(j.at("train_views"), "train_views");
  if (j.contains("network")) cfg.network = network_from_json(j.at("network"));
  if (j.contains("train")) cfg.train = train_from_json(j.at("train"));
  if (j.contains("match")) cfg.match = match_from_json(j.at("match"));
  load(j, "folds", cfg.folds);
  load(j, "ablation", cfg.ablation);
  load(j, "master_seed", cfg.master_seed);
  load(j, "out_dir", cfg.out_dir);
  return cfg;
}

}  // namespace

std::string experiment_config_to_json(const ExperimentConfig& cfg) {
  return config_to_json_obj(cfg).dump(1, '\t') + "\n";
}

ExperimentConfig experiment_config_from_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("experiment config: ") + e.what());
  }
  try {
    return config_from_json_obj(j);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("experiment config: ") + e.what());
  }
}

ExperimentConfig read_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return experiment_config_from_json(text);
}

void write_experiment_config(const std::string& path, const ExperimentConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write config " + path);
  out << experiment_config_to_json(cfg);
  if (!out) throw IoError("write failed: " + path);
}

std::string experiment_config_hash(const ExperimentConfig& cfg) {
  // nlohmann objects iterate in key order, so the dump is canonical
  const std::string canonical = config_to_json_obj(cfg).dump();
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a(canonical)));
  return buf;
}

// ---- stage plumbing --------------------------------------------------------

namespace {

struct Paths {
  fs::path root, data, tier1, views, models, scores;
  explicit Paths(const ExperimentConfig& cfg)
      : root(cfg.out_dir),
        data(root / "data"),
        tier1(root / "tier1"),
        views(root / "views"),
        models(root / "models"),
        scores(root / "scores") {}

  fs::path volume_hdr(int id) const { return data / ("vol" + std::to_string(id) + ".hdr"); }
  fs::path truth(int id) const { return data / ("vol" + std::to_string(id) + ".lesions.json"); }
  fs::path calib_hdr(int i) const { return data / ("calib" + std::to_string(i) + ".hdr"); }
  fs::path calib_truth(int i) const {
    return data / ("calib" + std::to_string(i) + ".lesions.json");
  }
  fs::path candidates(int id) const {
    return tier1 / ("vol" + std::to_string(id) + ".candidates.json");
  }
  fs::path committee_file() const { return models / "committee.json"; }
  fs::path train_patches(int id) const {
    return views / ("train_vol" + std::to_string(id) + ".json");
  }
  fs::path eval_patches(int id) const {
    return views / ("eval_vol" + std::to_string(id) + ".json");
  }
  fs::path model(int fold) const { return models / ("fold" + std::to_string(fold) + ".model"); }
  fs::path folds_file() const { return root / "folds.json"; }
  fs::path score_file(int id) const {
    return scores / ("vol" + std::to_string(id) + ".scores.json");
  }
  fs::path manifest(const std::string& stage) const {
    return root / (stage + ".manifest.json");
  }
};

void write_manifest(const Paths& p, const std::string& stage, const std::string& hash,
                    json payload) {
  payload["stage"] = stage;
  payload["config_hash"] = hash;
  std::ofstream out(p.manifest(stage));
  if (!out) throw IoError("cannot write " + p.manifest(stage).string());
  out << payload.dump(1, '\t') << '\n';
  if (!out) throw IoError("write failed: " + p.manifest(stage).string());
}

/// Loads an upstream manifest, or explains which stage to run first.
json require_manifest(const Paths& p, const std::string& this_stage,
                      const std::string& upstream_stage, const std::string& hash) {
  const fs::path path = p.manifest(upstream_stage);
  std::ifstream in(path);
  if (!in)
    throw DependencyError(this_stage + ": missing artifacts of stage '" + upstream_stage +
                          "'; run " + upstream_stage + " first");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  const std::string found = j.value("config_hash", "");
  if (found != hash)
    throw ValidationError(this_stage + ": artifacts of '" + upstream_stage +
                          "' were produced by a different config (hash " + found + ", expected " +
                          hash + "); rerun " + upstream_stage);
  return j;
}

void append_log(const Paths& p, const std::string& stage, double seconds,
                const std::string& hash) {
  std::ofstream out(p.root / "log.jsonl", std::ios::app);
  if (!out) throw IoError("cannot write log.jsonl");
  json e{{"stage", stage}, {"seconds", seconds}, {"config_hash", hash}};
  out << e.dump() << '\n';
}

class StageTimer {
 public:
  StageTimer() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

int total_volumes(const ExperimentConfig& cfg) {
  return cfg.lesion_volumes + cfg.control_volumes;
}

PhantomSpec volume_spec(const ExperimentConfig& cfg, int id) {
  PhantomSpec spec = cfg.phantom;
  if (id >= cfg.lesion_volumes) spec.lesion_count = 0;  // control
  spec.seed = derive_seed(cfg.master_seed, "phantom", static_cast<std::uint64_t>(id));
  return spec;
}

PhantomSpec calib_spec(const ExperimentConfig& cfg, int i) {
  PhantomSpec spec = cfg.phantom;
  spec.seed = derive_seed(cfg.master_seed, "phantom-calib", static_cast<std::uint64_t>(i));
  return spec;
}

}  // namespace

// ---- stages ----------------------------------------------------------------

void stage_gen_data(const ExperimentConfig& cfg) {
  validate_experiment_config(cfg);
  const std::string hash = experiment_config_hash(cfg);
  const Paths p(cfg);
  StageTimer timer;
  fs::create_directories(p.data);
  write_experiment_config((p.root / "config.json").string(), cfg);

  json volumes = json::array();
  for (int id = 0; id < total_volumes(cfg); ++id) {
    const Phantom phantom = generate_phantom(volume_spec(cfg, id));
    write_volume(phantom.volume, p.volume_hdr(id).string());
    write_lesions(phantom.lesions, p.truth(id).string());
    volumes.push_back({{"id", id},
                       {"kind", id < cfg.lesion_volumes ? "lesion" : "control"},
                       {"lesions", phantom.lesions.size()}});
  }
  json calib = json::array();
  for (int i = 0; i < cfg.calibration_volumes; ++i) {
    const Phantom phantom = generate_phantom(calib_spec(cfg, i));
    write_volume(phantom.volume, p.calib_hdr(i).string());
    write_lesions(phantom.lesions, p.calib_truth(i).string());
    calib.push_back({{"id", i}, {"lesions", phantom.lesions.size()}});
  }
  write_manifest(p, "gen-data", hash, {{"volumes", volumes}, {"calibration", calib}});
  append_log(p, "gen-data", timer.seconds(), hash);
}

void stage_tier1(const ExperimentConfig& cfg) {
  validate_experiment_config(cfg);
  const std::string hash = experiment_config_hash(cfg);
  const Paths p(cfg);
  StageTimer timer;
  const json data = require_manifest(p, "tier1", "gen-data", hash);
  fs::create_directories(p.tier1);
  fs::create_directories(p.models);

  // committee training on the calibration suite
  std::vector<std::vector<double>> features;
  std::vector<int> labels;
  for (int i = 0; i < cfg.calibration_volumes; ++i) {
    const Volume v = read_volume(p.calib_hdr(i).string());
    const auto truth = read_lesions(p.calib_truth(i).string());
    std::vector<Candidate> cands = featurize_detections(v, cfg.tier1);
    const auto matched = match_candidates(cands, truth, v, cfg.match);
    for (std::size_t c = 0; c < cands.size(); ++c) {
      const auto values = cands[c].features.values();
      features.emplace_back(values.begin(), values.end());
      labels.push_back(matched[c] >= 0 ? 1 : 0);
    }
  }
  CommitteeTrainConfig committee_cfg = cfg.committee;
  committee_cfg.seed = derive_seed(cfg.master_seed, "committee");
  const CommitteeModel committee = train_committee(features, labels, committee_cfg);
  write_committee(p.committee_file(), committee);

  const int positives = static_cast<int>(std::count(labels.begin(), labels.end(), 1));

  // candidate generation on the evaluation suite
  json volumes = json::array();
  for (int id = 0; id < total_volumes(cfg); ++id) {
    const Volume v = read_volume(p.volume_hdr(id).string());
    const auto truth = read_lesions(p.truth(id).string());
    std::vector<Candidate> cands = generate_candidates(v, cfg.tier1, committee);
    const auto matched = match_candidates(cands, truth, v, cfg.match);
    write_candidates(p.candidates(id), cands);
    volumes.push_back({{"id", id},
                       {"lesions", truth.size()},
                       {"candidates", cands.size()},
                       {"matched", matched}});
  }
  write_manifest(p, "tier1", hash,
                 {{"volumes", volumes},
                  {"calibration_examples", labels.size()},
                  {"calibration_positives", positives}});
  append_log(p, "tier1", timer.seconds(), hash);
}

void stage_sample_views(const ExperimentConfig& cfg) {
  validate_experiment_config(cfg);
  const std::string hash = experiment_config_hash(cfg);
  const Paths p(cfg);
  StageTimer timer;
  require_manifest(p, "sample-views", "tier1", hash);
  fs::create_directories(p.views);

  json volumes = json::array();
  for (int id = 0; id < total_volumes(cfg); ++id) {
    const Volume v = read_volume(p.volume_hdr(id).string());
    const auto cands = read_candidates(p.candidates(id));
    std::vector<Patch> train_patches, eval_patches;
    for (const Candidate& c : cands) {
      auto tr = sample_views(v, c.centroid, c.id, cfg.train_views,
                             derive_seed(cfg.master_seed, "train-views",
                                         static_cast<std::uint64_t>(id),
                                         static_cast<std::uint64_t>(c.id)));
      auto ev = sample_views(v, c.centroid, c.id, cfg.eval_views,
                             derive_seed(cfg.master_seed, "eval-views",
                                         static_cast<std::uint64_t>(id),
                                         static_cast<std::uint64_t>(c.id)));
      std::move(tr.begin(), tr.end(), std::back_inserter(train_patches));
      std::move(ev.begin(), ev.end(), std::back_inserter(eval_patches));
    }
    write_patch_batch(p.train_patches(id), train_patches, cfg.train_views.patch_px,
                      cfg.train_views.channels);
    write_patch_batch(p.eval_patches(id), eval_patches, cfg.eval_views.patch_px,
                      cfg.eval_views.channels);
    volumes.push_back({{"id", id},
                       {"candidates", cands.size()},
                       {"train_patches", train_patches.size()},
                       {"eval_patches", eval_patches.size()}});
  }
  write_manifest(p, "sample-views", hash, {{"volumes", volumes}});
  append_log(p, "sample-views", timer.seconds(), hash);
}

namespace {

/// Per-candidate labels of one volume out of the tier1 manifest: index in the
/// candidate array -> matched lesion (or -1).
std::vector<int> manifest_matches(const json& tier1_manifest, int volume_id) {
  for (const json& v : tier1_manifest.at("volumes"))
    if (v.at("id").get<int>() == volume_id) return v.at("matched").get<std::vector<int>>();
  throw ValidationError("tier1 manifest: volume " + std::to_string(volume_id) + " missing");
}

int fold_of_volume(const FoldSplit& split, int volume_id) {
  for (std::size_t f = 0; f < split.folds.size(); ++f)
    for (const int id : split.folds[f])
      if (id == volume_id) return static_cast<int>(f);
  throw ValidationError("folds: volume " + std::to_string(volume_id) + " not in any fold");
}

bool fold_selected(const std::vector<int>* filter, int fold) {
  return filter == nullptr || std::find(filter->begin(), filter->end(), fold) != filter->end();
}

}  // namespace

void stage_train(const ExperimentConfig& cfg, const std::vector<int>* fold_filter) {
  validate_experiment_config(cfg);
  const std::string hash = experiment_config_hash(cfg);
  const Paths p(cfg);
  StageTimer timer;
  const json tier1_manifest = require_manifest(p, "train", "tier1", hash);
  require_manifest(p, "train", "sample-views", hash);
  fs::create_directories(p.models);

  std::vector<int> patient_ids(static_cast<std::size_t>(total_volumes(cfg)));
  for (int id = 0; id < total_volumes(cfg); ++id) patient_ids[static_cast<std::size_t>(id)] = id;
  const FoldSplit split =
      split_folds(patient_ids, cfg.folds, derive_seed(cfg.master_seed, "folds"));
  write_folds_json(p.folds_file().string(), split);

  json fold_stats = json::array();
  for (int f = 0; f < cfg.folds; ++f) {
    // deterministic bookkeeping runs for every fold; the expensive part only
    // for selected ones
    std::vector<Patch> patches;
    std::vector<int> labels;
    for (int id = 0; id < total_volumes(cfg); ++id) {
      if (fold_of_volume(split, id) == f) continue;  // held out
      const auto matched = manifest_matches(tier1_manifest, id);
      auto vol_patches = read_patch_batch(p.train_patches(id));
      for (Patch& patch : vol_patches) {
        if (patch.candidate_id < 0 ||
            patch.candidate_id >= static_cast<int>(matched.size()))
          throw ValidationError("train: patch candidate id out of range in volume " +
                                std::to_string(id));
        labels.push_back(matched[static_cast<std::size_t>(patch.candidate_id)] >= 0 ? 1 : 0);
        patches.push_back(std::move(patch));
      }
    }
    const auto balanced =
        balance_training(labels, derive_seed(cfg.master_seed, "balance",
                                             static_cast<std::uint64_t>(f)));
    long pos = 0;
    for (const std::size_t i : balanced) pos += labels[i];
    fold_stats.push_back({{"fold", f},
                          {"examples", balanced.size()},
                          {"positives", pos},
                          {"model", p.model(f).lexically_relative(p.root).string()}});

    if (!fold_selected(fold_filter, f)) continue;
    TrainConfig train_cfg = cfg.train;
    train_cfg.seed = derive_seed(cfg.master_seed, "train", static_cast<std::uint64_t>(f));
    try {
      const ModelParams model = train_sgd(cfg.network, patches, labels, balanced, train_cfg);
      save_model(p.model(f), model);
    } catch (const DivergenceError& e) {
      // keep the type, add which fold blew up
      throw DivergenceError("train: fold " + std::to_string(f) + ": " + e.what(), e.epoch);
    }
  }
  for (int f = 0; f < cfg.folds; ++f)
    if (!fs::exists(p.model(f)))
      throw DependencyError("train: model for fold " + std::to_string(f) +
                            " missing; rerun train including that fold");
  write_manifest(p, "train", hash, {{"folds", fold_stats}});
  append_log(p, "train", timer.seconds(), hash);
}

namespace {

/// Copies a patch into slot `slot` of the batch, replicating a single stored
/// plane across all input channels when needed.
void batch_fill(Tensor& batch, int slot, const Patch& patch) {
  const std::size_t plane = static_cast<std::size_t>(batch.h) * batch.w;
  float* dst = batch.example(slot);
  if (patch.channels == batch.c) {
    std::copy(patch.data.begin(), patch.data.end(), dst);
  } else if (patch.channels == 1) {
    for (int c = 0; c < batch.c; ++c)
      std::copy(patch.data.begin(), patch.data.end(), dst + plane * static_cast<std::size_t>(c));
  } else {
    throw ValidationError("evaluate: patch channel count does not fit the network");
  }
}

/// Eval-mode class-1 probabilities for a list of patches, batched.
std::vector<double> predict_batch(const ModelParams& model,
                                  const std::vector<const Patch*>& patches) {
  std::vector<double> probs;
  probs.reserve(patches.size());
  Workspace ws;
  Tensor batch;
  const int chunk = 64;
  for (std::size_t at = 0; at < patches.size(); at += chunk) {
    const int n = static_cast<int>(std::min<std::size_t>(chunk, patches.size() - at));
    batch.resize(n, model.spec.in_channels, model.spec.in_px, model.spec.in_px);
    for (int i = 0; i < n; ++i) batch_fill(batch, i, *patches[at + static_cast<std::size_t>(i)]);
    forward(model, batch, Mode::kEval, ws, nullptr);
    const Tensor& out = ws.acts.back();
    for (int i = 0; i < n; ++i) probs.push_back(static_cast<double>(out.example(i)[1]));
  }
  return probs;
}

}  // namespace

void stage_evaluate(const ExperimentConfig& cfg, const std::vector<int>* fold_filter) {
  validate_experiment_config(cfg);
  const std::string hash = experiment_config_hash(cfg);
  const Paths p(cfg);
  StageTimer timer;
  const json tier1_manifest = require_manifest(p, "evaluate", "tier1", hash);
  require_manifest(p, "evaluate", "sample-views", hash);
  require_manifest(p, "evaluate", "train", hash);
  fs::create_directories(p.scores);

  FoldSplit split = read_folds_json(p.folds_file().string());
  if (static_cast<int>(split.folds.size()) != cfg.folds)
    throw ValidationError("evaluate: folds.json disagrees with the config");

  std::map<int, ModelParams> models;  // fold -> model, loaded lazily
  const auto model_for = [&](int fold) -> const ModelParams& {
    auto it = models.find(fold);
    if (it == models.end()) it = models.emplace(fold, load_model(p.model(fold))).first;
    return it->second;
  };

  json volumes = json::array();
  int total_lesions = 0, n_scored = 0;
  for (const json& v : tier1_manifest.at("volumes")) {
    const int id = v.at("id").get<int>();
    const int fold = fold_of_volume(split, id);
    if (!fold_selected(fold_filter, fold)) continue;
    {
      const auto matched = manifest_matches(tier1_manifest, id);
      const auto patches = read_patch_batch(p.eval_patches(id));

      // file order is candidate-major; group defensively anyway
      std::map<int, std::vector<const Patch*>> by_candidate;
      for (const Patch& patch : patches) by_candidate[patch.candidate_id].push_back(&patch);

      const ModelParams& test_model = model_for(fold);
      // a model whose training set contained this volume, for the train curve
      const ModelParams& train_model = model_for((fold + 1) % cfg.folds);

      const auto cands = read_candidates(p.candidates(id));
      json out_cands = json::array();
      for (const Candidate& c : cands) {
        const auto it = by_candidate.find(c.id);
        if (it == by_candidate.end())
          throw ValidationError("evaluate: volume " + std::to_string(id) +
                                ": no stored views for candidate " + std::to_string(c.id));
        if (static_cast<int>(it->second.size()) != cfg.eval_views.views_per_candidate())
          throw ValidationError("evaluate: volume " + std::to_string(id) +
                                ": stored view count mismatch for candidate " +
                                std::to_string(c.id));
        out_cands.push_back(
            {{"id", c.id},
             {"lesion", matched.at(static_cast<std::size_t>(c.id))},
             {"tier1_score", c.tier1_score},
             {"test_probs", predict_batch(test_model, it->second)},
             {"train_probs", predict_batch(train_model, it->second)}});
      }
      json score{{"volume_id", id}, {"fold", fold}, {"candidates", std::move(out_cands)}};
      std::ofstream out(p.score_file(id));
      if (!out) throw IoError("cannot write " + p.score_file(id).string());
      out << score.dump(1, '\t') << '\n';
      if (!out) throw IoError("write failed: " + p.score_file(id).string());
    }
    total_lesions += v.at("lesions").get<int>();
    ++n_scored;
    volumes.push_back({{"id", id}, {"fold", fold}, {"lesions", v.at("lesions").get<int>()}});
  }
  write_manifest(p, "evaluate", hash,
                 {{"volumes", volumes},
                  {"total_lesions", total_lesions},
                  {"n_volumes", n_scored}});
  append_log(p, "evaluate", timer.seconds(), hash);
}

void stage_report(const ExperimentConfig& cfg) {
  validate_experiment_config(cfg);
  const std::string hash = experiment_config_hash(cfg);
  const Paths p(cfg);
  StageTimer timer;
  const json eval_manifest = require_manifest(p, "report", "evaluate", hash);

  const int total_lesions = eval_manifest.at("total_lesions").get<int>();
  const int n_volumes = eval_manifest.at("n_volumes").get<int>();

  std::vector<int> ablation = cfg.ablation;
  std::sort(ablation.begin(), ablation.end());
  ablation.erase(std::unique(ablation.begin(), ablation.end()), ablation.end());

  std::vector<ScoredCandidate> tier1_scored;
  std::map<int, std::vector<ScoredCandidate>> tier2_scored;       // by ablation n (test)
  std::map<int, std::vector<ScoredCandidate>> tier2_train_scored; // by ablation n (train)
  std::vector<int> auc_labels;
  std::map<int, std::vector<double>> auc_scores;  // by ablation n (test)

  for (const json& v : eval_manifest.at("volumes")) {
    const int id = v.at("id").get<int>();
    std::ifstream in(p.score_file(id));
    if (!in)
      throw DependencyError("report: missing scores for volume " + std::to_string(id) +
                            "; run evaluate first");
    json score;
    try {
      score = json::parse(in);
    } catch (const json::exception& e) {
      throw IoError(p.score_file(id).string() + ": " + e.what());
    }
    for (const json& c : score.at("candidates")) {
      const int lesion = c.at("lesion").get<int>();
      tier1_scored.push_back({id, c.at("tier1_score").get<double>(), lesion});
      const auto test_probs = c.at("test_probs").get<std::vector<double>>();
      const auto train_probs = c.at("train_probs").get<std::vector<double>>();
      auc_labels.push_back(lesion >= 0 ? 1 : 0);
      for (const int n : ablation) {
        if (n > static_cast<int>(test_probs.size()))
          throw ValidationError("report: ablation " + std::to_string(n) +
                                " exceeds stored view count");
        const std::vector<double> head(test_probs.begin(), test_probs.begin() + n);
        const std::vector<double> head_train(train_probs.begin(), train_probs.begin() + n);
        const double fused = aggregate_views(head);
        tier2_scored[n].push_back({id, fused, lesion});
        tier2_train_scored[n].push_back({id, aggregate_views(head_train), lesion});
        auc_scores[n].push_back(fused);
      }
    }
  }

  const auto froc_tier1 = compute_froc(tier1_scored, total_lesions, n_volumes);
  write_froc_csv((p.root / "froc_tier1.csv").string(), froc_tier1);

  std::map<int, std::vector<FrocPoint>> froc_by_n;
  for (const int n : ablation) {
    froc_by_n[n] = compute_froc(tier2_scored[n], total_lesions, n_volumes);
    write_froc_csv((p.root / ("froc_tier2_N" + std::to_string(n) + ".csv")).string(),
                   froc_by_n[n]);
  }

  {
    std::ofstream out(p.root / "auc.csv");
    if (!out) throw IoError("cannot write auc.csv");
    out << "n_views,auc\n";
    for (const int n : ablation) {
      char buf[40];
      std::snprintf(buf, sizeof buf, "%.10g", compute_roc_auc(auc_scores[n], auc_labels));
      out << n << ',' << buf << '\n';
    }
    if (!out) throw IoError("write failed: auc.csv");
  }

  const auto to_xy = [](const std::vector<FrocPoint>& points) {
    std::vector<std::array<double, 2>> xy;
    xy.reserve(points.size());
    for (const FrocPoint& fp : points) xy.push_back({fp.fp_per_volume, fp.sensitivity});
    return xy;
  };
  const int n_max = ablation.back();
  const auto froc_train = compute_froc(tier2_train_scored[n_max], total_lesions, n_volumes);
  std::vector<PlotSeries> series;
  series.push_back({"candidate generator", to_xy(froc_tier1)});
  series.push_back({"cascade N=" + std::to_string(n_max) + " (test)", to_xy(froc_by_n[n_max])});
  series.push_back({"cascade N=" + std::to_string(n_max) + " (train)", to_xy(froc_train)});
  write_line_plot_svg((p.root / "froc_compare.svg").string(),
                      "Candidate generator vs cascade", "false positives per volume",
                      "sensitivity", series);

  write_manifest(p, "report", hash,
                 {{"ablation", ablation},
                  {"total_lesions", total_lesions},
                  {"n_volumes", n_volumes}});
  append_log(p, "report", timer.seconds(), hash);
}

void run_end_to_end(const ExperimentConfig& cfg) {
  validate_experiment_config(cfg);
  stage_gen_data(cfg);
  stage_tier1(cfg);
  stage_sample_views(cfg);
  stage_train(cfg);
  stage_evaluate(cfg);
  stage_report(cfg);
}

}  // namespace cascade
