// Acceptance gate for the two-tier detection pipeline. Each check prints one
// PASS/FAIL line; the process exits nonzero if any check fails. The
// synthetic-suite thresholds were measured once on the seeded reference
// configuration below and then frozen.
//
// Usage: cascade_acceptance [work_dir]
//   work_dir defaults to ./acceptance_out and receives the experiment trees.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cascade/cnn.hpp"
#include "cascade/errors.hpp"
#include "cascade/eval.hpp"
#include "cascade/experiment.hpp"
#include "cascade/rng.hpp"
#include "cascade/views.hpp"
#include "cascade/volume.hpp"
#include "gradcheck.hpp"

using namespace cascade;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int g_failures = 0;

void report(bool pass, const std::string& name, const std::string& detail) {
  std::printf("%s  %-22s %s\n", pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("missing file: " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string fmt(const char* f, ...) {
  char buf[256];
  va_list args;
  va_start(args, f);
  std::vsnprintf(buf, sizeof buf, f, args);
  va_end(args);
  return buf;
}

// ---- gradients -------------------------------------------------------------

void check_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::string worst_net = "none";
  const auto probe = [&](const char* name, const NetworkSpec& spec, std::uint64_t seed) {
    const auto r = testutil::gradient_check(spec, 2, 100, seed);
    if (r.worst_rel_err > worst) {
      worst = r.worst_rel_err;
      worst_net = name;
    }
  };

  NetworkSpec conv_net;
  conv_net.in_channels = 1;
  conv_net.in_px = 8;
  conv_net.layers = {LayerSpec::conv(2, 3), LayerSpec::relu(), LayerSpec::dense(2, false),
                     LayerSpec::softmax()};
  probe("conv", conv_net, 501);

  NetworkSpec pool_net;
  pool_net.in_channels = 1;
  pool_net.in_px = 8;
  pool_net.layers = {LayerSpec::conv(2, 3), LayerSpec::maxpool(2, 2), LayerSpec::dense(2, false),
                     LayerSpec::softmax()};
  probe("pool", pool_net, 503);

  NetworkSpec local_net;
  local_net.in_channels = 1;
  local_net.in_px = 6;
  local_net.layers = {LayerSpec::local(2, 3), LayerSpec::relu(), LayerSpec::dense(2, false),
                      LayerSpec::softmax()};
  probe("local", local_net, 505);

  NetworkSpec dense_net;
  dense_net.in_channels = 1;
  dense_net.in_px = 5;
  dense_net.layers = {LayerSpec::dense(6, true), LayerSpec::relu(), LayerSpec::dense(2, false),
                      LayerSpec::softmax()};
  probe("dropconnect", dense_net, 507);

  probe("reference", NetworkSpec::reference(), 509);

  const double secs = seconds_since(t0);
  report(worst < 1e-4 && secs < 60.0, "gradient-check",
         fmt("worst relative error %.3g (%s), %.1f s", worst, worst_net.c_str(), secs));
}

// ---- probability fusion ----------------------------------------------------

void check_fusion() {
  Rng rng(601);
  std::vector<double> probs(100000);
  for (auto& p : probs) p = rng.uniform(0, 1);
  long double exact = 0;
  for (const double p : probs) exact += static_cast<long double>(p);
  exact /= static_cast<long double>(probs.size());

  const double mean = aggregate_views(probs);
  const double err = std::abs(mean - static_cast<double>(exact));

  std::vector<double> shuffled = probs;
  rng.shuffle(shuffled);
  const double perm_err = std::abs(aggregate_views(shuffled) - mean);

  report(err <= 1e-12 && perm_err <= 1e-12, "fusion-mean",
         fmt("mean error %.3g, permutation error %.3g over %zu views", err, perm_err,
             probs.size()));
}

// ---- view sampling budget --------------------------------------------------

Volume gradient_volume() {
  Volume v;
  v.nx = 64;
  v.ny = 64;
  v.nz = 8;
  v.sx = v.sy = 1.0;
  v.sz = 5.0;
  v.data.resize(v.size());
  for (int k = 0; k < v.nz; ++k)
    for (int j = 0; j < v.ny; ++j)
      for (int i = 0; i < v.nx; ++i)
        v.at(i, j, k) = static_cast<float>(-100.0 + 12.0 * i + 7.0 * j + 40.0 * k);
  return v;
}

void check_view_budget() {
  const Volume v = gradient_volume();
  const Vec3 center = v.voxel_center(32, 32, 4);
  const ViewSampleConfig cfg;  // the full observer budget
  const auto patches = sample_views(v, center, 7, cfg, 611);

  std::string why;
  bool ok = patches.size() == 100;
  if (!ok) why = fmt("expected 100 patches, got %zu", patches.size());

  std::map<double, int> scale_counts;
  for (const Patch& p : patches) {
    scale_counts[p.scale_mm] += 1;
    const double r = std::hypot(p.translation_mm[0], p.translation_mm[1]);
    if (ok && p.candidate_id != 7) { ok = false; why = "candidate id not carried"; }
    if (ok && p.patch_px != 32) { ok = false; why = "patch is not 32 px"; }
    if (ok && p.channels != 3) { ok = false; why = "patch is not 3-channel"; }
    if (ok && p.data.size() != 3u * 32 * 32) { ok = false; why = "pixel payload size"; }
    if (ok && r > 3.0 + 1e-12) { ok = false; why = fmt("translation %.4f mm beyond 3 mm", r); }
    if (ok && (p.rotation_deg < 0.0 || p.rotation_deg >= 360.0)) {
      ok = false;
      why = fmt("rotation %.4f outside [0, 360)", p.rotation_deg);
    }
    if (ok)
      for (const float x : p.data)
        if (!(x >= 0.0f && x <= 1.0f)) {
          ok = false;
          why = "windowed pixel outside [0, 1]";
          break;
        }
  }
  if (ok) {
    const std::map<double, int> want = {{30.0, 25}, {35.0, 25}, {40.0, 25}, {45.0, 25}};
    if (scale_counts != want) {
      ok = false;
      why = "scales are not 4 x 25";
    }
  }
  report(ok, "view-budget",
         ok ? "100 views per candidate: 4 scales x 5 translations x 5 rotations, all in window"
            : why);
}

// ---- geometry oracles ------------------------------------------------------

void check_geometry() {
  // pattern volume with distinct values per voxel, 5 mm slices
  Volume v;
  v.nx = 40;
  v.ny = 40;
  v.nz = 4;
  v.sx = v.sy = 1.0;
  v.sz = 5.0;
  v.data.resize(v.size());
  for (int k = 0; k < v.nz; ++k)
    for (int j = 0; j < v.ny; ++j)
      for (int i = 0; i < v.nx; ++i)
        v.at(i, j, k) = static_cast<float>(-200.0 + 1.1 * i + 33.0 * j + 250.0 * k);

  bool ok = true;
  std::string why;

  // unrotated crop at native spacing lands exactly on voxel centers
  {
    const int P = 32;
    const Vec3 center = v.voxel_center(19, 19, 2) + Vec3{0.5, 0.5, 0.0};  // grid-aligned crop
    const Patch p = extract_patch(v, center, 32.0, {0.0, 0.0}, 0.0, P, 1);
    for (int row = 0; row < P && ok; ++row)
      for (int col = 0; col < P && ok; ++col) {
        const float want = static_cast<float>(window_normalize(v.at(4 + col, 4 + row, 2)));
        if (p.data[static_cast<std::size_t>(row) * P + col] != want) {
          ok = false;
          why = fmt("identity crop differs at (%d, %d)", row, col);
        }
      }
  }

  // rotating the camera by 90 degrees permutes the sampled grid
  if (ok) {
    const int P = 32;
    const Vec3 center = v.voxel_center(19, 19, 2) + Vec3{0.5, 0.5, 0.0};
    const Patch p0 = extract_patch(v, center, 30.0, {0.0, 0.0}, 0.0, P, 1);
    const Patch p90 = extract_patch(v, center, 30.0, {0.0, 0.0}, 90.0, P, 1);
    for (int row = 0; row < P && ok; ++row)
      for (int col = 0; col < P && ok; ++col) {
        const float a = p90.data[static_cast<std::size_t>(row) * P + col];
        const float b = p0.data[static_cast<std::size_t>(col) * P + (P - 1 - row)];
        if (std::abs(a - b) > 1e-4f) {
          ok = false;
          why = fmt("90-degree rotation differs at (%d, %d) by %.3g", row, col,
                    std::abs(a - b));
        }
      }
  }

  // isotropic resampling reproduces a closed-form linear field
  if (ok) {
    Volume lin;
    lin.nx = 24;
    lin.ny = 24;
    lin.nz = 12;
    lin.sx = lin.sy = 1.0;
    lin.sz = 5.0;
    lin.data.resize(lin.size());
    const auto field = [](const Vec3& p) { return 3.0 * p.x - 2.0 * p.y + 1.5 * p.z + 10.0; };
    for (int k = 0; k < lin.nz; ++k)
      for (int j = 0; j < lin.ny; ++j)
        for (int i = 0; i < lin.nx; ++i)
          lin.at(i, j, k) = static_cast<float>(field(lin.voxel_center(i, j, k)));

    const Volume iso = resample_isometric(lin, 1.0);
    double worst = 0.0;
    // trilinear interpolation is exact on a linear field away from the
    // clamped boundary shell
    for (int k = 3; k < iso.nz - 3; ++k)
      for (int j = 3; j < iso.ny - 3; ++j)
        for (int i = 3; i < iso.nx - 3; ++i)
          worst = std::max(
              worst, std::abs(static_cast<double>(iso.at(i, j, k)) -
                              field(iso.voxel_center(i, j, k))));
    if (worst > 1e-4) {
      ok = false;
      why = fmt("resampled linear field off by %.3g", worst);
    }
  }

  report(ok, "geometry", ok ? "identity crop exact, 90-degree permutation, linear resample" : why);
}

// ---- curve oracles ---------------------------------------------------------

std::vector<FrocPoint> froc_by_hand(const std::vector<ScoredCandidate>& cands, int total_lesions,
                                    int n_volumes) {
  std::vector<double> thresholds;
  for (const auto& c : cands) thresholds.push_back(c.score);
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  std::vector<FrocPoint> pts;
  pts.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  for (const double thr : thresholds) {
    std::set<std::pair<int, int>> hit;
    long fp = 0;
    for (const auto& c : cands) {
      if (c.score < thr) continue;
      if (c.lesion >= 0)
        hit.insert({c.volume_id, c.lesion});
      else
        ++fp;
    }
    pts.push_back({thr, static_cast<double>(hit.size()) / total_lesions,
                   static_cast<double>(fp) / n_volumes});
  }
  return pts;
}

double auc_by_hand(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0;
  long pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      if (scores[i] > scores[j])
        wins += 1.0;
      else if (scores[i] == scores[j])
        wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

void check_curve_oracles() {
  Rng rng(701);
  const double tie_bucket[] = {0.1, 0.25, 0.4, 0.5, 0.7, 0.9};

  for (int trial = 0; trial < 1000; ++trial) {
    const int n_volumes = 1 + static_cast<int>(rng.index(4));
    std::vector<int> lesions_per_volume(static_cast<std::size_t>(n_volumes));
    int total_lesions = 0;
    for (auto& c : lesions_per_volume) {
      c = static_cast<int>(rng.index(3));
      total_lesions += c;
    }
    if (total_lesions == 0) {
      lesions_per_volume[0] = 1;
      total_lesions = 1;
    }
    std::vector<ScoredCandidate> cands(rng.index(11));
    for (auto& c : cands) {
      c.volume_id = static_cast<int>(rng.index(static_cast<std::size_t>(n_volumes)));
      c.score = tie_bucket[rng.index(6)];
      const int nl = lesions_per_volume[static_cast<std::size_t>(c.volume_id)];
      c.lesion = nl > 0 && rng.uniform(0, 1) < 0.5
                     ? static_cast<int>(rng.index(static_cast<std::size_t>(nl)))
                     : -1;
    }
    const auto got = compute_froc(cands, total_lesions, n_volumes);
    const auto want = froc_by_hand(cands, total_lesions, n_volumes);
    bool same = got.size() == want.size();
    for (std::size_t i = 0; same && i < got.size(); ++i)
      same = got[i].threshold == want[i].threshold &&
             got[i].sensitivity == want[i].sensitivity &&
             got[i].fp_per_volume == want[i].fp_per_volume;
    if (!same) {
      report(false, "froc-auc-oracle", fmt("free-response sweep differs on trial %d", trial));
      return;
    }
  }

  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.index(99);
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = tie_bucket[rng.index(6)];
      labels[i] = static_cast<int>(rng.index(2));
    }
    labels[0] = 0;
    labels[n - 1] = 1;
    if (compute_roc_auc(scores, labels) != auc_by_hand(scores, labels)) {
      report(false, "froc-auc-oracle", fmt("rank-sum area differs on trial %d", trial));
      return;
    }
  }

  report(true, "froc-auc-oracle",
         "1000 random free-response sweeps and 1000 tie-heavy areas match enumeration exactly");
}

// ---- the seeded reference experiment ---------------------------------------

struct Curve {
  std::vector<FrocPoint> points;
};

Curve parse_froc_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("missing " + path.string());
  Curve c;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    FrocPoint p;
    std::istringstream row(line);
    std::string cell;
    std::getline(row, cell, ',');
    p.threshold = cell == "inf" ? std::numeric_limits<double>::infinity() : std::stod(cell);
    std::getline(row, cell, ',');
    p.sensitivity = std::stod(cell);
    std::getline(row, cell, ',');
    p.fp_per_volume = std::stod(cell);
    c.points.push_back(p);
  }
  return c;
}

/// False positives per volume at the first operating point reaching the
/// sensitivity target (the curve is monotone in both coordinates).
double fp_at_sensitivity(const Curve& c, double target) {
  for (const FrocPoint& p : c.points)
    if (p.sensitivity >= target) return p.fp_per_volume;
  return std::numeric_limits<double>::quiet_NaN();
}

std::map<int, double> parse_auc_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("missing " + path.string());
  std::map<int, double> auc;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    auc[std::stoi(line.substr(0, comma))] = std::stod(line.substr(comma + 1));
  }
  return auc;
}

void check_reference_suite(const fs::path& work) {
  ExperimentConfig cfg;  // the reference protocol is the default configuration
  cfg.master_seed = 0;
  cfg.out_dir = (work / "reference").string();
  fs::remove_all(cfg.out_dir);

  const auto t0 = std::chrono::steady_clock::now();
  run_end_to_end(cfg);
  const double secs = seconds_since(t0);
  report(secs < 900.0, "reference-runtime",
         fmt("40 lesion + 10 control volumes, 5 folds in %.0f s (budget 900 s)", secs));

  const Curve tier1 = parse_froc_csv(fs::path(cfg.out_dir) / "froc_tier1.csv");
  const Curve tier2 = parse_froc_csv(fs::path(cfg.out_dir) / "froc_tier2_N100.csv");
  const double fp1 = fp_at_sensitivity(tier1, 0.80);
  const double fp2 = fp_at_sensitivity(tier2, 0.80);
  const bool halved = std::isfinite(fp1) && std::isfinite(fp2) && fp2 <= 0.5 * fp1;
  report(halved, "fp-halving",
         fmt("at 80%% sensitivity: %.3f fp/volume after rescoring vs %.3f from the candidate "
             "generator",
             fp2, fp1));

  const auto auc = parse_auc_csv(fs::path(cfg.out_dir) / "auc.csv");
  const double auc100 = auc.count(100) ? auc.at(100) : std::numeric_limits<double>::quiet_NaN();
  const double auc25 = auc.count(25) ? auc.at(25) : std::numeric_limits<double>::quiet_NaN();
  report(auc100 >= 0.80, "auc-floor", fmt("candidate-level AUC %.4f with 100 views", auc100));
  report(auc25 >= auc100 - 0.01, "view-saturation",
         fmt("AUC %.4f with 25 views vs %.4f with 100", auc25, auc100));

  // balancing, from the stored training manifest: every fold trains on an
  // exactly even split, and every candidate of every volume is scored exactly
  // once by the fold that held the volume out
  bool balanced = true;
  std::string why;
  const json train = json::parse(slurp(fs::path(cfg.out_dir) / "train.manifest.json"));
  for (const json& f : train.at("folds")) {
    if (f.at("examples").get<long>() != 2 * f.at("positives").get<long>()) {
      balanced = false;
      why = fmt("fold %d trains on %ld examples with %ld positives", f.at("fold").get<int>(),
                f.at("examples").get<long>(), f.at("positives").get<long>());
      break;
    }
  }
  if (balanced) {
    const json tier1_manifest = json::parse(slurp(fs::path(cfg.out_dir) / "tier1.manifest.json"));
    for (const json& v : tier1_manifest.at("volumes")) {
      const int id = v.at("id").get<int>();
      const json score = json::parse(
          slurp(fs::path(cfg.out_dir) / "scores" / ("vol" + std::to_string(id) + ".scores.json")));
      std::set<int> scored;
      for (const json& c : score.at("candidates"))
        if (!scored.insert(c.at("id").get<int>()).second) {
          balanced = false;
          why = fmt("volume %d scored candidate %d twice", id, c.at("id").get<int>());
          break;
        }
      if (balanced && static_cast<int>(scored.size()) != v.at("candidates").get<int>()) {
        balanced = false;
        why = fmt("volume %d scored %zu of %d candidates", id, scored.size(),
                  v.at("candidates").get<int>());
      }
      if (!balanced) break;
    }
  }
  report(balanced, "balanced-training",
         balanced ? "every fold trains 50/50; every held-out candidate scored exactly once" : why);
}

// ---- determinism -----------------------------------------------------------

void check_determinism(const fs::path& work) {
  ExperimentConfig cfg;
  cfg.lesion_volumes = 4;
  cfg.control_volumes = 2;
  cfg.calibration_volumes = 3;
  cfg.folds = 2;
  cfg.train.epochs = 2;
  cfg.master_seed = 42;

  const fs::path a = work / "repeat_a", b = work / "repeat_b";
  fs::remove_all(a);
  fs::remove_all(b);
  cfg.out_dir = a.string();
  run_end_to_end(cfg);
  cfg.out_dir = b.string();
  run_end_to_end(cfg);

  std::vector<std::string> files = {"froc_tier1.csv", "auc.csv",           "froc_compare.svg",
                                    "folds.json",     "models/fold0.model", "models/fold1.model",
                                    "models/committee.json"};
  for (const int n : cfg.ablation) files.push_back("froc_tier2_N" + std::to_string(n) + ".csv");

  for (const std::string& f : files)
    if (slurp(a / f) != slurp(b / f)) {
      report(false, "determinism", "runs with one seed diverge in " + f);
      return;
    }
  report(true, "determinism",
         fmt("%zu report and model files byte-identical across two seeded runs", files.size()));
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_out");
  fs::create_directories(work);

  try {
    check_gradients();
    check_fusion();
    check_view_budget();
    check_geometry();
    check_curve_oracles();
    check_determinism(work);
    check_reference_suite(work);
  } catch (const std::exception& e) {
    std::printf("FAIL  %-22s unhandled error: %s\n", "harness", e.what());
    ++g_failures;
  }

  std::printf("%s: %d failure%s\n", g_failures == 0 ? "ACCEPTED" : "REJECTED", g_failures,
              g_failures == 1 ? "" : "s");
  return g_failures == 0 ? 0 : 1;
}
