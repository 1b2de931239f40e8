#include "cascade/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <utility>

#include <nlohmann/json.hpp>

#include "cascade/errors.hpp"
#include "cascade/rng.hpp"

namespace cascade {

double aggregate_views(const std::vector<double>& probs) {
  if (probs.empty()) throw ValidationError("aggregate_views: no view probabilities");
  double sum = 0.0, comp = 0.0;  // Kahan compensation keeps the mean order-independent
  for (const double p : probs) {
    if (!(p >= 0.0 && p <= 1.0))
      throw ValidationError("aggregate_views: probability outside [0, 1]");
    const double y = p - comp;
    const double t = sum + y;
    comp = (t - sum) - y;
    sum = t;
  }
  return sum / static_cast<double>(probs.size());
}

void validate_match_rule(const MatchRule& rule) {
  if (rule.mode == MatchRule::Mode::kCentroidDistance && !(rule.distance_mm > 0))
    throw ValidationError("match rule: distance must be positive");
}

namespace {

bool mask_contains(const GroundTruthLesion& lesion, std::uint32_t linear) {
  return std::binary_search(lesion.voxel_mask.begin(), lesion.voxel_mask.end(), linear);
}

}  // namespace

std::vector<int> match_candidates(std::vector<Candidate>& candidates,
                                  const std::vector<GroundTruthLesion>& lesions, const Volume& v,
                                  const MatchRule& rule) {
  validate_match_rule(rule);
  std::vector<int> matched(candidates.size(), -1);
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    Candidate& cand = candidates[c];
    int hit = -1;
    if (rule.mode == MatchRule::Mode::kMaskContainment) {
      const auto ijk = v.world_to_voxel(cand.centroid);
      const auto linear = static_cast<std::uint32_t>(v.index(ijk[0], ijk[1], ijk[2]));
      for (std::size_t l = 0; l < lesions.size(); ++l)
        if (mask_contains(lesions[l], linear)) {
          hit = static_cast<int>(l);
          break;
        }
    } else {
      double best = rule.distance_mm;
      for (std::size_t l = 0; l < lesions.size(); ++l) {
        const Vec3 d = cand.centroid - lesions[l].center;
        const double dist = std::sqrt(d.x * d.x + d.y * d.y + d.z * d.z);
        if (dist <= best) {
          best = dist;
          hit = static_cast<int>(l);
        }
      }
    }
    matched[c] = hit;
    cand.label = hit >= 0 ? CandidateLabel::kTrueLesion : CandidateLabel::kFalsePositive;
  }
  return matched;
}

std::vector<FrocPoint> compute_froc(const std::vector<ScoredCandidate>& candidates,
                                    int total_lesions, int n_volumes) {
  if (total_lesions < 1)
    throw ValidationError("froc: sensitivity is undefined without lesions");
  if (n_volumes < 1) throw ValidationError("froc: need at least one volume");
  for (const ScoredCandidate& c : candidates) {
    if (!std::isfinite(c.score)) throw ValidationError("froc: non-finite candidate score");
    if (c.lesion < -1) throw ValidationError("froc: bad lesion index");
  }

  std::vector<const ScoredCandidate*> order;
  order.reserve(candidates.size());
  for (const ScoredCandidate& c : candidates) order.push_back(&c);
  std::stable_sort(order.begin(), order.end(),
                   [](const ScoredCandidate* a, const ScoredCandidate* b) {
                     return a->score > b->score;
                   });

  std::vector<FrocPoint> points;
  points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});

  std::set<std::pair<int, int>> detected;  // (volume, lesion) pairs, counted once
  long fp_count = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double thr = order[i]->score;
    for (; i < order.size() && order[i]->score == thr; ++i) {
      if (order[i]->lesion >= 0)
        detected.insert({order[i]->volume_id, order[i]->lesion});
      else
        ++fp_count;
    }
    if (static_cast<int>(detected.size()) > total_lesions)
      throw ValidationError("froc: more distinct matched lesions than total_lesions");
    points.push_back({thr,
                      static_cast<double>(detected.size()) / static_cast<double>(total_lesions),
                      static_cast<double>(fp_count) / static_cast<double>(n_volumes)});
  }
  return points;
}

namespace {

void check_binary_labels(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw ValidationError("roc: score/label count mismatch");
  if (scores.empty()) throw ValidationError("roc: empty input");
  bool pos = false, neg = false;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i])) throw ValidationError("roc: non-finite score");
    if (labels[i] == 1)
      pos = true;
    else if (labels[i] == 0)
      neg = true;
    else
      throw ValidationError("roc: labels must be 0 or 1");
  }
  if (!pos || !neg) throw ValidationError("roc: both classes must be present");
}

}  // namespace

double compute_roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_binary_labels(scores, labels);
  const std::size_t n = scores.size();
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Mann-Whitney via rank sums; tied scores share their average rank, which
  // is exactly the pairwise count with ties worth one half.
  double rank_sum_pos = 0.0;
  std::size_t n_pos = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // ranks are 1-based
    for (std::size_t t = i; t < j; ++t)
      if (labels[idx[t]] == 1) {
        rank_sum_pos += avg_rank;
        ++n_pos;
      }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

std::vector<std::array<double, 2>> roc_points(const std::vector<double>& scores,
                                              const std::vector<int>& labels) {
  check_binary_labels(scores, labels);
  const std::size_t n = scores.size();
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  long n_pos = 0, n_neg = 0;
  for (const int l : labels) (l == 1 ? n_pos : n_neg) += 1;

  std::vector<std::array<double, 2>> pts;
  pts.push_back({0.0, 0.0});
  long tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < n) {
    const double thr = scores[idx[i]];
    for (; i < n && scores[idx[i]] == thr; ++i) (labels[idx[i]] == 1 ? tp : fp) += 1;
    pts.push_back({static_cast<double>(fp) / static_cast<double>(n_neg),
                   static_cast<double>(tp) / static_cast<double>(n_pos)});
  }
  return pts;
}

FoldSplit split_folds(const std::vector<int>& patient_ids, int k, std::uint64_t seed) {
  if (k < 2) throw ValidationError("folds: need at least 2 folds");
  if (static_cast<int>(patient_ids.size()) < k)
    throw ValidationError("folds: fewer patients than folds");
  std::set<int> unique(patient_ids.begin(), patient_ids.end());
  if (unique.size() != patient_ids.size())
    throw ValidationError("folds: duplicate patient id");

  std::vector<int> shuffled = patient_ids;
  Rng rng(seed);
  rng.shuffle(shuffled);

  FoldSplit split;
  split.folds.assign(static_cast<std::size_t>(k), {});
  for (std::size_t i = 0; i < shuffled.size(); ++i)
    split.folds[i % static_cast<std::size_t>(k)].push_back(shuffled[i]);
  return split;
}

std::vector<std::size_t> balance_training(const std::vector<int>& labels, std::uint64_t seed) {
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1)
      pos.push_back(i);
    else if (labels[i] == 0)
      neg.push_back(i);
    else
      throw ValidationError("balance: labels must be 0 or 1");
  }
  if (pos.empty() || neg.empty())
    throw ValidationError("balance: both classes must be present");

  std::vector<std::size_t> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) out[i] = i;
  const auto& minority = pos.size() < neg.size() ? pos : neg;
  const std::size_t deficit =
      pos.size() < neg.size() ? neg.size() - pos.size() : pos.size() - neg.size();
  Rng rng(seed);
  for (std::size_t i = 0; i < deficit; ++i)
    out.push_back(minority[rng.index(minority.size())]);
  return out;
}

// ---- report emission -----------------------------------------------------

namespace {

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", x);
  return buf;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  return out;
}

}  // namespace

void write_froc_csv(const std::string& path, const std::vector<FrocPoint>& points) {
  auto out = open_out(path);
  out << "threshold,sensitivity,fp_per_volume\n";
  for (const FrocPoint& p : points)
    out << fmt(p.threshold) << ',' << fmt(p.sensitivity) << ',' << fmt(p.fp_per_volume) << '\n';
  if (!out) throw IoError("write failed: " + path);
}

void write_roc_csv(const std::string& path, const std::vector<std::array<double, 2>>& points) {
  auto out = open_out(path);
  out << "fpr,tpr\n";
  for (const auto& p : points) out << fmt(p[0]) << ',' << fmt(p[1]) << '\n';
  if (!out) throw IoError("write failed: " + path);
}

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                          "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};

std::string fmt_px(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", x);
  return buf;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (const char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

void write_line_plot_svg(const std::string& path, const std::string& title,
                         const std::string& x_label, const std::string& y_label,
                         const std::vector<PlotSeries>& series) {
  const double W = 640, H = 480, left = 70, right = 26, top = 46, bottom = 58;
  const double pw = W - left - right, ph = H - top - bottom;

  double x_lo = 0, x_hi = 1, y_lo = 0, y_hi = 1;
  bool any = false;
  for (const PlotSeries& s : series)
    for (const auto& p : s.points) {
      if (!std::isfinite(p[0]) || !std::isfinite(p[1])) continue;
      if (!any) {
        x_lo = x_hi = p[0];
        y_lo = y_hi = p[1];
        any = true;
      } else {
        x_lo = std::min(x_lo, p[0]);
        x_hi = std::max(x_hi, p[0]);
        y_lo = std::min(y_lo, p[1]);
        y_hi = std::max(y_hi, p[1]);
      }
    }
  if (!any) {
    x_lo = y_lo = 0;
    x_hi = y_hi = 1;
  }
  if (x_hi - x_lo < 1e-12) x_hi = x_lo + 1;
  if (y_hi - y_lo < 1e-12) y_hi = y_lo + 1;

  const auto px = [&](double x) { return left + (x - x_lo) / (x_hi - x_lo) * pw; };
  const auto py = [&](double y) { return top + ph - (y - y_lo) / (y_hi - y_lo) * ph; };

  auto out = open_out(path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" viewBox=\"0 0 " << W << " " << H << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << W / 2 << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" "
         "text-anchor=\"middle\">"
      << xml_escape(title) << "</text>\n";

  // frame and ticks
  out << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"#333\"/>\n";
  const int ticks = 5;
  for (int t = 0; t <= ticks; ++t) {
    const double fx = x_lo + (x_hi - x_lo) * t / ticks;
    const double fy = y_lo + (y_hi - y_lo) * t / ticks;
    const double gx = px(fx), gy = py(fy);
    out << "<line x1=\"" << fmt_px(gx) << "\" y1=\"" << top + ph << "\" x2=\"" << fmt_px(gx)
        << "\" y2=\"" << top + ph + 5 << "\" stroke=\"#333\"/>\n"
        << "<text x=\"" << fmt_px(gx) << "\" y=\"" << top + ph + 20
        << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">" << fmt(fx)
        << "</text>\n"
        << "<line x1=\"" << left - 5 << "\" y1=\"" << fmt_px(gy) << "\" x2=\"" << left
        << "\" y2=\"" << fmt_px(gy) << "\" stroke=\"#333\"/>\n"
        << "<text x=\"" << left - 8 << "\" y=\"" << fmt_px(gy + 4)
        << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">" << fmt(fy)
        << "</text>\n";
  }
  out << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 12
      << "\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">"
      << xml_escape(x_label) << "</text>\n"
      << "<text x=\"18\" y=\"" << top + ph / 2
      << "\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
      << top + ph / 2 << ")\">" << xml_escape(y_label) << "</text>\n";

  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = kPalette[s % (sizeof kPalette / sizeof kPalette[0])];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.6\" points=\"";
    for (const auto& p : series[s].points) {
      if (!std::isfinite(p[0]) || !std::isfinite(p[1])) continue;
      out << fmt_px(px(p[0])) << ',' << fmt_px(py(p[1])) << ' ';
    }
    out << "\"/>\n";
    const double ly = top + 16 + 16 * static_cast<double>(s);
    out << "<line x1=\"" << left + pw - 150 << "\" y1=\"" << fmt_px(ly - 4) << "\" x2=\""
        << left + pw - 130 << "\" y2=\"" << fmt_px(ly - 4) << "\" stroke=\"" << color
        << "\" stroke-width=\"2\"/>\n"
        << "<text x=\"" << left + pw - 124 << "\" y=\"" << fmt_px(ly)
        << "\" font-family=\"sans-serif\" font-size=\"12\">" << xml_escape(series[s].name)
        << "</text>\n";
  }
  out << "</svg>\n";
  if (!out) throw IoError("write failed: " + path);
}

void write_folds_json(const std::string& path, const FoldSplit& split) {
  nlohmann::json j;
  j["k"] = split.folds.size();
  j["folds"] = split.folds;
  auto out = open_out(path);
  out << j.dump(1, '\t') << '\n';
  if (!out) throw IoError("write failed: " + path);
}

FoldSplit read_folds_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  FoldSplit split;
  try {
    nlohmann::json j = nlohmann::json::parse(in);
    split.folds = j.at("folds").get<std::vector<std::vector<int>>>();
    if (split.folds.size() != j.at("k").get<std::size_t>())
      throw IoError("fold file: k does not match fold count");
  } catch (const nlohmann::json::exception& e) {
    throw IoError("fold file " + path + ": " + e.what());
  }
  return split;
}

}  // namespace cascade
