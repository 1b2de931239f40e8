#include "cascade/watershed.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <queue>
#include <set>

#include "cascade/errors.hpp"

namespace cascade {

namespace {

void validate_view(const SliceView& s) {
  if (s.nx < 0 || s.ny < 0) throw ValidationError("slice view: negative dims");
  if (s.nx > 0 && s.ny > 0 && (s.hu == nullptr || s.mask == nullptr))
    throw ValidationError("slice view: null data");
  if (s.sx <= 0 || s.sy <= 0) throw ValidationError("slice view: spacing must be positive");
}

// Mask-normalized Gaussian smoothing of the intensity's deviation from its
// mask mean. Smoothing the deviation keeps constant regions exactly flat,
// so plateau detection sees them as one plateau instead of rounding noise.
std::vector<double> smooth_masked(const SliceView& s, double sigma) {
  const std::size_t n = static_cast<std::size_t>(s.nx) * s.ny;
  std::vector<double> out(n, 0.0);

  double mean = 0.0;
  std::size_t count = 0;
  for (std::size_t p = 0; p < n; ++p)
    if (s.mask[p]) {
      mean += s.hu[p];
      ++count;
    }
  if (count == 0) return out;
  mean /= static_cast<double>(count);

  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> g(static_cast<std::size_t>(2 * r + 1) * (2 * r + 1));
  for (int dj = -r; dj <= r; ++dj)
    for (int di = -r; di <= r; ++di)
      g[static_cast<std::size_t>(di + r) + static_cast<std::size_t>(2 * r + 1) * (dj + r)] =
          std::exp(-(di * di + dj * dj) / (2.0 * sigma * sigma));

  for (int j = 0; j < s.ny; ++j)
    for (int i = 0; i < s.nx; ++i) {
      const std::size_t p = static_cast<std::size_t>(i) + static_cast<std::size_t>(s.nx) * j;
      if (!s.mask[p]) continue;
      double num = 0.0, den = 0.0;
      for (int dj = -r; dj <= r; ++dj) {
        const int jj = j + dj;
        if (jj < 0 || jj >= s.ny) continue;
        for (int di = -r; di <= r; ++di) {
          const int ii = i + di;
          if (ii < 0 || ii >= s.nx) continue;
          const std::size_t q = static_cast<std::size_t>(ii) + static_cast<std::size_t>(s.nx) * jj;
          if (!s.mask[q]) continue;
          const double w = g[static_cast<std::size_t>(di + r) + static_cast<std::size_t>(2 * r + 1) * (dj + r)];
          num += w * (s.hu[q] - mean);
          den += w;
        }
      }
      out[p] = num / den;  // den >= weight of p itself, never 0 here
    }
  return out;
}

void fill_stats(SubSegment2D& seg, const SliceView& s) {
  double sum = 0.0, sx = 0.0, sy = 0.0;
  for (const std::uint32_t p : seg.pixels) {
    sum += s.hu[p];
    const int i = static_cast<int>(p % s.nx);
    const int j = static_cast<int>(p / s.nx);
    sx += s.ox + (i + 0.5) * s.sx;
    sy += s.oy + (j + 0.5) * s.sy;
  }
  const double n = static_cast<double>(seg.pixels.size());
  seg.mean_hu = sum / n;
  seg.cx = sx / n;
  seg.cy = sy / n;
}

}  // namespace

std::vector<SubSegment2D> watershed_subsegments(const SliceView& s, int z, double smooth_sigma_px) {
  validate_view(s);
  if (smooth_sigma_px <= 0) throw ValidationError("watershed: sigma must be positive");
  const std::size_t n = static_cast<std::size_t>(s.nx) * s.ny;
  bool any = false;
  for (std::size_t p = 0; p < n && !any; ++p) any = s.mask[p] != 0;
  if (!any) return {};

  const std::vector<double> sm = smooth_masked(s, smooth_sigma_px);

  const auto neighbors8 = [&](std::uint32_t p, auto&& fn) {
    const int i = static_cast<int>(p % s.nx);
    const int j = static_cast<int>(p / s.nx);
    for (int dj = -1; dj <= 1; ++dj)
      for (int di = -1; di <= 1; ++di) {
        if (di == 0 && dj == 0) continue;
        const int ii = i + di, jj = j + dj;
        if (ii < 0 || ii >= s.nx || jj < 0 || jj >= s.ny) continue;
        const std::uint32_t q = static_cast<std::uint32_t>(ii) + static_cast<std::uint32_t>(s.nx) * jj;
        if (s.mask[q]) fn(q);
      }
  };

  // Markers: 8-connected equal-value plateaus with no strictly greater
  // neighbor, numbered by their lowest pixel index.
  std::vector<int> label(n, -1);
  std::vector<std::uint8_t> visited(n, 0);
  std::vector<std::vector<std::uint32_t>> plateaus;
  std::vector<std::uint32_t> stack, region;
  for (std::uint32_t start = 0; start < n; ++start) {
    if (!s.mask[start] || visited[start]) continue;
    const double v = sm[start];
    bool is_max = true;
    region.clear();
    stack.assign(1, start);
    visited[start] = 1;
    while (!stack.empty()) {
      const std::uint32_t p = stack.back();
      stack.pop_back();
      region.push_back(p);
      neighbors8(p, [&](std::uint32_t q) {
        if (sm[q] > v) is_max = false;
        else if (sm[q] == v && !visited[q]) {
          visited[q] = 1;
          stack.push_back(q);
        }
      });
    }
    if (is_max) plateaus.push_back(region);  // BFS from the lowest index first, so plateau order = anchor order
  }

  for (std::size_t m = 0; m < plateaus.size(); ++m)
    for (const std::uint32_t p : plateaus[m]) label[p] = static_cast<int>(m);

  // Flood in order of decreasing smoothed value, lower index first on ties.
  struct Entry {
    double v;
    std::uint32_t p;
  };
  const auto cmp = [](const Entry& a, const Entry& b) {
    if (a.v != b.v) return a.v < b.v;
    return a.p > b.p;
  };
  std::priority_queue<Entry, std::vector<Entry>, decltype(cmp)> queue(cmp);
  for (const auto& plateau : plateaus)
    for (const std::uint32_t p : plateau) queue.push({sm[p], p});
  while (!queue.empty()) {
    const Entry e = queue.top();
    queue.pop();
    neighbors8(e.p, [&](std::uint32_t q) {
      if (label[q] < 0) {
        label[q] = label[e.p];
        queue.push({sm[q], q});
      }
    });
  }

  std::vector<SubSegment2D> out(plateaus.size());
  for (std::size_t m = 0; m < plateaus.size(); ++m) {
    out[m].id = static_cast<int>(m);
    out[m].z = z;
  }
  for (std::uint32_t p = 0; p < n; ++p)
    if (label[p] >= 0) out[static_cast<std::size_t>(label[p])].pixels.push_back(p);
  for (auto& seg : out) fill_stats(seg, s);
  return out;
}

std::vector<SubSegment2D> merge_subsegments(std::vector<SubSegment2D> segments, const SliceView& s,
                                            double hu_merge_threshold) {
  validate_view(s);
  if (segments.empty()) return segments;
  const std::size_t n = static_cast<std::size_t>(s.nx) * s.ny;

  struct Node {
    std::vector<std::uint32_t> pixels;
    double sum = 0.0;
    std::size_t count = 0;
    int z = 0;
  };
  std::map<int, Node> nodes;
  std::vector<int> owner(n, -1);
  const int z0 = segments.front().z;
  for (const auto& seg : segments) {
    if (seg.z != z0) throw ValidationError("merge_subsegments: segments span multiple slices");
    if (nodes.count(seg.id)) throw ValidationError("merge_subsegments: duplicate segment id");
    Node node;
    node.z = seg.z;
    for (const std::uint32_t p : seg.pixels) {
      if (p >= n) throw ValidationError("merge_subsegments: pixel out of bounds");
      if (owner[p] != -1) throw ValidationError("merge_subsegments: overlapping segments");
      owner[p] = seg.id;
      node.sum += s.hu[p];
    }
    node.count = seg.pixels.size();
    node.pixels = seg.pixels;
    nodes.emplace(seg.id, std::move(node));
  }

  // Edge-adjacent pairs, stored as (smaller id, larger id).
  std::set<std::pair<int, int>> adjacent;
  for (std::uint32_t p = 0; p < n; ++p) {
    if (owner[p] == -1) continue;
    const int i = static_cast<int>(p % s.nx);
    const auto consider = [&](std::uint32_t q) {
      if (owner[q] != -1 && owner[q] != owner[p])
        adjacent.emplace(std::min(owner[p], owner[q]), std::max(owner[p], owner[q]));
    };
    if (i + 1 < s.nx) consider(p + 1);
    if (p + s.nx < n) consider(p + s.nx);
  }

  while (!adjacent.empty()) {
    double best_diff = 0.0;
    std::pair<int, int> best{-1, -1};
    for (const auto& pr : adjacent) {
      const Node& a = nodes.at(pr.first);
      const Node& b = nodes.at(pr.second);
      const double diff = std::abs(a.sum / static_cast<double>(a.count) - b.sum / static_cast<double>(b.count));
      if (best.first < 0 || diff < best_diff) {  // set iteration is id-ordered, so ties keep the smaller pair
        best_diff = diff;
        best = pr;
      }
    }
    if (best_diff >= hu_merge_threshold) break;

    const auto [keep, gone] = best;
    Node& a = nodes.at(keep);
    Node& b = nodes.at(gone);
    a.pixels.insert(a.pixels.end(), b.pixels.begin(), b.pixels.end());
    a.sum += b.sum;
    a.count += b.count;
    nodes.erase(gone);

    std::set<std::pair<int, int>> next;
    for (const auto& [x, y] : adjacent) {
      int u = x == gone ? keep : x;
      int v = y == gone ? keep : y;
      if (u == v) continue;
      next.emplace(std::min(u, v), std::max(u, v));
    }
    adjacent = std::move(next);
  }

  std::vector<SubSegment2D> out;
  out.reserve(nodes.size());
  for (auto& [id, node] : nodes) {
    SubSegment2D seg;
    seg.id = id;
    seg.z = node.z;
    std::sort(node.pixels.begin(), node.pixels.end());
    seg.pixels = std::move(node.pixels);
    fill_stats(seg, s);
    out.push_back(std::move(seg));
  }
  return out;
}

}  // namespace cascade
