#pragma once

// Superpixel segmentation: SLIC (local k-means) and DISF (iterative seed
// removal over image-foresting-transform forests). Both operate on the
// 4-adjacency pixel graph and are fully deterministic.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <queue>
#include <string>
#include <utility>
#include <vector>

#include "imagegraph/error.hpp"
#include "imagegraph/imageio.hpp"

namespace imagegraph {

struct Point {
  int x = 0;
  int y = 0;
  bool operator==(const Point&) const = default;
};

struct SeedSet {
  std::vector<Point> positions;
  std::size_t count() const { return positions.size(); }
};

struct RegionStats {
  std::size_t pixel_count = 0;
  Lab mean;
  double centroid_x = 0, centroid_y = 0;
  int min_x = 0, min_y = 0, max_x = 0, max_y = 0;  // inclusive bounding box

  int box_width() const { return max_x - min_x + 1; }
  int box_height() const { return max_y - min_y + 1; }
};

struct Segmentation {
  int width = 0;
  int height = 0;
  std::vector<int> labels;  // row-major, values in [0, region_count)
  int region_count = 0;
  std::vector<RegionStats> regions;

  int at(int x, int y) const { return labels[static_cast<std::size_t>(y) * width + x]; }
};

struct Forest {
  int width = 0;
  int height = 0;
  std::vector<int> labels;  // index of the root seed
  std::vector<double> cost;
  std::vector<int> pred;  // -1 for roots
  std::vector<Lab> tree_mean;
  std::vector<std::size_t> tree_size;
};

// ---------------------------------------------------------------------------
// Helpers

namespace detail {

// Neighbours in scan order: up, left, right, down.
template <typename Fn>
inline void for_each_neighbor4(int idx, int width, int height, Fn&& fn) {
  const int x = idx % width, y = idx / width;
  if (y > 0) fn(idx - width);
  if (x > 0) fn(idx - 1);
  if (x + 1 < width) fn(idx + 1);
  if (y + 1 < height) fn(idx + width);
}

}  // namespace detail

/// Recomputes per-region statistics from a dense label map.
inline std::vector<RegionStats> compute_region_stats(const std::vector<int>& labels, int width, int region_count,
                                                     const LabImage& img) {
  std::vector<RegionStats> stats(static_cast<std::size_t>(region_count));
  std::vector<std::array<double, 5>> sums(stats.size(), {0, 0, 0, 0, 0});
  for (auto& s : stats) {
    s.min_x = s.min_y = std::numeric_limits<int>::max();
    s.max_x = s.max_y = -1;
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int x = static_cast<int>(i) % width, y = static_cast<int>(i) / width;
    auto& s = stats[labels[i]];
    auto& sum = sums[labels[i]];
    ++s.pixel_count;
    sum[0] += img[i].l;
    sum[1] += img[i].a;
    sum[2] += img[i].b;
    sum[3] += x;
    sum[4] += y;
    s.min_x = std::min(s.min_x, x);
    s.min_y = std::min(s.min_y, y);
    s.max_x = std::max(s.max_x, x);
    s.max_y = std::max(s.max_y, y);
  }
  for (std::size_t r = 0; r < stats.size(); ++r) {
    const double n = static_cast<double>(stats[r].pixel_count);
    if (n == 0) continue;
    stats[r].mean = {sums[r][0] / n, sums[r][1] / n, sums[r][2] / n};
    stats[r].centroid_x = sums[r][3] / n;
    stats[r].centroid_y = sums[r][4] / n;
  }
  return stats;
}

/// Wraps a label map into a Segmentation, renumbering labels densely while
/// preserving their relative order.
inline Segmentation make_segmentation(std::vector<int> labels, int width, int height, const LabImage& img) {
  if (img.width != width || img.height != height || labels.size() != img.pixel_count())
    throw ArgumentError("make_segmentation: label map and image dimensions differ");
  const int max_label = labels.empty() ? -1 : *std::max_element(labels.begin(), labels.end());
  std::vector<int> remap(static_cast<std::size_t>(max_label + 1), -1);
  for (int l : labels) {
    if (l < 0) throw ArgumentError("make_segmentation: negative label");
    remap[l] = 0;
  }
  int next = 0;
  for (auto& r : remap)
    if (r == 0) r = next++;
  for (auto& l : labels) l = remap[l];
  Segmentation seg;
  seg.width = width;
  seg.height = height;
  seg.region_count = next;
  seg.regions = compute_region_stats(labels, width, next, img);
  seg.labels = std::move(labels);
  return seg;
}

// ---------------------------------------------------------------------------
// Seeding

/// Places exactly k seeds on an approximately square grid of spacing
/// sqrt(N/k). Rows get floor/ceil shares of k so the count is exact for any
/// k; when k factors as the natural grid (e.g. 100 on 100x100) this is the
/// plain regular grid with seeds at cell centres.
inline SeedSet init_grid_seeds(int width, int height, std::size_t k) {
  if (width < 1 || height < 1) throw ArgumentError("init_grid_seeds: empty image");
  const std::size_t n = static_cast<std::size_t>(width) * height;
  if (k < 1) throw ArgumentError("init_grid_seeds: k must be >= 1");
  if (k > n) throw ArgumentError("init_grid_seeds: k exceeds pixel count");

  const double spacing = std::sqrt(static_cast<double>(n) / static_cast<double>(k));
  long rows = std::lround(height / spacing);
  const long min_rows = static_cast<long>((k + width - 1) / width);
  rows = std::clamp<long>(rows, std::max<long>(1, min_rows), std::min<long>(height, static_cast<long>(k)));

  SeedSet seeds;
  seeds.positions.reserve(k);
  for (long r = 0; r < rows; ++r) {
    const auto begin = static_cast<std::size_t>(k * r / rows);
    const auto end = static_cast<std::size_t>(k * (r + 1) / rows);
    const auto cols = static_cast<long>(end - begin);
    const int y = static_cast<int>(std::floor((r + 0.5) * height / static_cast<double>(rows)));
    for (long c = 0; c < cols; ++c) {
      const int x = static_cast<int>(std::floor((c + 0.5) * width / static_cast<double>(cols)));
      seeds.positions.push_back({x, y});
    }
  }
  return seeds;
}

// ---------------------------------------------------------------------------
// Connectivity

/// Makes every label 4-connected. Each label keeps its largest component
/// (when at least `min_size` pixels); every other component is absorbed by
/// the adjacent surviving region whose mean colour is closest. Negative
/// labels are treated as unassigned and always absorbed.
inline Segmentation enforce_connectivity(const std::vector<int>& labels, int width, int height, const LabImage& img,
                                         std::size_t min_size) {
  const std::size_t n = labels.size();
  if (n != static_cast<std::size_t>(width) * height || img.width != width || img.height != height)
    throw ArgumentError("enforce_connectivity: dimension mismatch");

  // Connected components.
  std::vector<int> comp(n, -1);
  struct Component {
    int label;
    std::size_t size = 0;
    Lab sum;
  };
  std::vector<Component> comps;
  std::vector<int> stack;
  for (std::size_t start = 0; start < n; ++start) {
    if (comp[start] >= 0) continue;
    const int id = static_cast<int>(comps.size());
    comps.push_back({labels[start], 0, {}});
    comp[start] = id;
    stack.assign(1, static_cast<int>(start));
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      auto& c = comps[id];
      ++c.size;
      c.sum.l += img[p].l;
      c.sum.a += img[p].a;
      c.sum.b += img[p].b;
      detail::for_each_neighbor4(p, width, height, [&](int q) {
        if (comp[q] < 0 && labels[q] == labels[start]) {
          comp[q] = id;
          stack.push_back(q);
        }
      });
    }
  }
  std::vector<Lab> comp_mean(comps.size());
  for (std::size_t c = 0; c < comps.size(); ++c) {
    const double s = static_cast<double>(comps[c].size);
    comp_mean[c] = {comps[c].sum.l / s, comps[c].sum.a / s, comps[c].sum.b / s};
  }

  // Largest component per label survives (first in scan order on ties).
  std::vector<int> region_of(comps.size(), -1);
  {
    std::vector<int> best_for_label;
    int max_label = -1;
    for (const auto& c : comps) max_label = std::max(max_label, c.label);
    best_for_label.assign(static_cast<std::size_t>(max_label + 1), -1);
    for (std::size_t c = 0; c < comps.size(); ++c) {
      const int l = comps[c].label;
      if (l < 0) continue;
      int& b = best_for_label[l];
      if (b < 0 || comps[c].size > comps[b].size) b = static_cast<int>(c);
    }
    std::vector<int> keepers;
    for (int b : best_for_label)
      if (b >= 0 && comps[b].size >= min_size) keepers.push_back(b);
    if (keepers.empty()) {
      int b = 0;
      for (std::size_t c = 1; c < comps.size(); ++c)
        if (comps[c].size > comps[b].size) b = static_cast<int>(c);
      keepers.push_back(b);
    }
    std::sort(keepers.begin(), keepers.end());
    for (std::size_t i = 0; i < keepers.size(); ++i) region_of[keepers[i]] = static_cast<int>(i);
  }
  const int region_count = static_cast<int>(
      std::count_if(region_of.begin(), region_of.end(), [](int r) { return r >= 0; }));
  std::vector<int> keeper_of_region(static_cast<std::size_t>(region_count));
  for (std::size_t c = 0; c < comps.size(); ++c)
    if (region_of[c] >= 0) keeper_of_region[region_of[c]] = static_cast<int>(c);

  // Component adjacency.
  std::vector<std::vector<int>> adj(comps.size());
  for (std::size_t p = 0; p < n; ++p) {
    const int x = static_cast<int>(p) % width;
    const int a = comp[p];
    if (x + 1 < width && comp[p + 1] != a) {
      adj[a].push_back(comp[p + 1]);
      adj[comp[p + 1]].push_back(a);
    }
    if (p + width < n && comp[p + width] != a) {
      adj[a].push_back(comp[p + width]);
      adj[comp[p + width]].push_back(a);
    }
  }
  for (auto& list : adj) {
    std::sort(list.begin(), list.end());
    list.erase(std::unique(list.begin(), list.end()), list.end());
  }

  // Grow surviving regions over the remaining components.
  bool pending = true;
  while (pending) {
    pending = false;
    bool progressed = false;
    for (std::size_t c = 0; c < comps.size(); ++c) {
      if (region_of[c] >= 0) continue;
      int best_region = -1;
      double best_dist = std::numeric_limits<double>::infinity();
      for (int nb : adj[c]) {
        const int r = region_of[nb];
        if (r < 0) continue;
        const double d = lab_distance(comp_mean[c], comp_mean[keeper_of_region[r]]);
        if (d < best_dist || (d == best_dist && r < best_region)) {
          best_dist = d;
          best_region = r;
        }
      }
      if (best_region >= 0) {
        region_of[c] = best_region;
        progressed = true;
      } else {
        pending = true;
      }
    }
    if (pending && !progressed) throw Error("enforce_connectivity: disconnected pixel lattice");
  }

  std::vector<int> out(n);
  for (std::size_t p = 0; p < n; ++p) out[p] = region_of[comp[p]];
  Segmentation seg;
  seg.width = width;
  seg.height = height;
  seg.region_count = region_count;
  seg.regions = compute_region_stats(out, width, region_count, img);
  seg.labels = std::move(out);
  return seg;
}

inline Segmentation enforce_connectivity(const Segmentation& seg, const LabImage& img, std::size_t min_size) {
  return enforce_connectivity(seg.labels, seg.width, seg.height, img, min_size);
}

// ---------------------------------------------------------------------------
// SLIC

struct SlicOptions {
  double compactness = 10.0;
  int iterations = 10;
  bool perturb_seeds = true;
};

namespace detail {

inline double lab_gradient(const LabImage& img, int x, int y) {
  const int xl = std::max(x - 1, 0), xr = std::min(x + 1, img.width - 1);
  const int yu = std::max(y - 1, 0), yd = std::min(y + 1, img.height - 1);
  const double gx = lab_distance(img.at(xr, y), img.at(xl, y));
  const double gy = lab_distance(img.at(x, yd), img.at(x, yu));
  return gx * gx + gy * gy;
}

}  // namespace detail

/// Local k-means over [l, a, b, x, y] with 2S x 2S search windows, followed by
/// connectivity enforcement. Returns at most k regions.
inline Segmentation slic_segment(const LabImage& img, std::size_t k, const SlicOptions& opts = {}) {
  if (!(opts.compactness > 0)) throw ArgumentError("slic_segment: compactness must be > 0");
  if (opts.iterations < 1) throw ArgumentError("slic_segment: iterations must be >= 1");
  const int w = img.width, h = img.height;
  const std::size_t n = img.pixel_count();
  const SeedSet seeds = init_grid_seeds(w, h, k);
  const double step = std::sqrt(static_cast<double>(n) / static_cast<double>(k));

  struct Center {
    double l, a, b, x, y;
  };
  std::vector<Center> centers;
  centers.reserve(seeds.count());
  for (Point p : seeds.positions) {
    if (opts.perturb_seeds) {
      Point best = p;
      double best_grad = detail::lab_gradient(img, p.x, p.y);
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int x = p.x + dx, y = p.y + dy;
          if (x < 0 || y < 0 || x >= w || y >= h) continue;
          const double g = detail::lab_gradient(img, x, y);
          if (g < best_grad) {
            best_grad = g;
            best = {x, y};
          }
        }
      p = best;
    }
    const Lab& c = img.at(p.x, p.y);
    centers.push_back({c.l, c.a, c.b, static_cast<double>(p.x), static_cast<double>(p.y)});
  }

  const double spatial_weight = (opts.compactness * opts.compactness) / (step * step);
  std::vector<int> labels(n, -1);
  std::vector<double> dist(n);
  std::vector<std::array<double, 6>> acc(centers.size());
  for (int it = 0; it < opts.iterations; ++it) {
    std::fill(dist.begin(), dist.end(), std::numeric_limits<double>::infinity());
    for (std::size_t c = 0; c < centers.size(); ++c) {
      const Center& ctr = centers[c];
      const int x0 = std::max(0, static_cast<int>(std::ceil(ctr.x - step)));
      const int x1 = std::min(w - 1, static_cast<int>(std::floor(ctr.x + step)));
      const int y0 = std::max(0, static_cast<int>(std::ceil(ctr.y - step)));
      const int y1 = std::min(h - 1, static_cast<int>(std::floor(ctr.y + step)));
      for (int y = y0; y <= y1; ++y) {
        const double dy = y - ctr.y;
        for (int x = x0; x <= x1; ++x) {
          const std::size_t p = static_cast<std::size_t>(y) * w + x;
          const Lab& v = img[p];
          const double dl = v.l - ctr.l, da = v.a - ctr.a, db = v.b - ctr.b;
          const double dx = x - ctr.x;
          const double d = dl * dl + da * da + db * db + (dx * dx + dy * dy) * spatial_weight;
          if (d < dist[p]) {
            dist[p] = d;
            labels[p] = static_cast<int>(c);
          }
        }
      }
    }
    for (auto& a : acc) a.fill(0.0);
    for (std::size_t p = 0; p < n; ++p) {
      if (labels[p] < 0) continue;
      auto& a = acc[labels[p]];
      a[0] += img[p].l;
      a[1] += img[p].a;
      a[2] += img[p].b;
      a[3] += static_cast<double>(p % w);
      a[4] += static_cast<double>(p / w);
      a[5] += 1.0;
    }
    for (std::size_t c = 0; c < centers.size(); ++c) {
      const auto& a = acc[c];
      if (a[5] == 0) continue;
      centers[c] = {a[0] / a[5], a[1] / a[5], a[2] / a[5], a[3] / a[5], a[4] / a[5]};
    }
  }
  const std::size_t min_size = std::max<std::size_t>(1, n / k / 4);
  return enforce_connectivity(labels, w, h, img, min_size);
}

// ---------------------------------------------------------------------------
// Image foresting transform

/// Seeded optimum-path forest. Extending tree T to pixel t costs
/// max(cost(pred), |mean(T) - Lab(t)|) where mean(T) is the running mean of
/// the pixels T has conquered so far. Equal costs are resolved FIFO, and a
/// pending pixel offered the same cost by a lower seed id switches to it.
inline Forest ift_forest(const LabImage& img, const SeedSet& seeds) {
  if (seeds.count() == 0) throw ArgumentError("ift_forest: empty seed set");
  const int w = img.width, h = img.height;
  const std::size_t n = img.pixel_count();

  Forest f;
  f.width = w;
  f.height = h;
  f.labels.assign(n, -1);
  f.cost.assign(n, std::numeric_limits<double>::infinity());
  f.pred.assign(n, -1);
  f.tree_mean.assign(seeds.count(), {});
  f.tree_size.assign(seeds.count(), 0);

  struct Entry {
    double cost;
    std::uint64_t seq;
    int pixel;
    bool operator>(const Entry& o) const { return cost != o.cost ? cost > o.cost : seq > o.seq; }
  };
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> heap;
  std::uint64_t seq = 0;
  std::vector<std::uint8_t> is_seed(n, 0), done(n, 0);
  for (std::size_t s = 0; s < seeds.count(); ++s) {
    const Point p = seeds.positions[s];
    if (p.x < 0 || p.y < 0 || p.x >= w || p.y >= h) throw ArgumentError("ift_forest: seed out of bounds");
    const std::size_t idx = static_cast<std::size_t>(p.y) * w + p.x;
    if (is_seed[idx]) throw ArgumentError("ift_forest: duplicate seed position");
    is_seed[idx] = 1;
    f.cost[idx] = 0.0;
    f.labels[idx] = static_cast<int>(s);
    heap.push({0.0, seq++, static_cast<int>(idx)});
  }

  std::vector<std::array<double, 3>> sums(seeds.count(), {0, 0, 0});
  while (!heap.empty()) {
    const Entry e = heap.top();
    heap.pop();
    const int p = e.pixel;
    if (done[p] || e.cost != f.cost[p]) continue;
    done[p] = 1;
    const int tree = f.labels[p];
    auto& sum = sums[tree];
    sum[0] += img[p].l;
    sum[1] += img[p].a;
    sum[2] += img[p].b;
    const double count = static_cast<double>(++f.tree_size[tree]);
    const Lab mean{sum[0] / count, sum[1] / count, sum[2] / count};
    f.tree_mean[tree] = mean;

    detail::for_each_neighbor4(p, w, h, [&](int q) {
      if (done[q] || is_seed[q]) return;
      const double c = std::max(f.cost[p], lab_distance(mean, img[q]));
      if (c < f.cost[q]) {
        f.cost[q] = c;
        f.labels[q] = tree;
        f.pred[q] = p;
        heap.push({c, seq++, q});
      } else if (c == f.cost[q] && tree < f.labels[q]) {
        f.labels[q] = tree;
        f.pred[q] = p;
      }
    });
  }
  return f;
}

// ---------------------------------------------------------------------------
// DISF

struct SeedScore {
  int seed;
  double score;
};

namespace detail {

inline std::vector<std::vector<int>> tree_adjacency(const Forest& f) {
  std::vector<std::vector<int>> adj(f.tree_size.size());
  const std::size_t n = f.labels.size();
  for (std::size_t p = 0; p < n; ++p) {
    const int a = f.labels[p];
    const int x = static_cast<int>(p % f.width);
    if (x + 1 < f.width && f.labels[p + 1] != a) {
      adj[a].push_back(f.labels[p + 1]);
      adj[f.labels[p + 1]].push_back(a);
    }
    if (p + f.width < n && f.labels[p + f.width] != a) {
      adj[a].push_back(f.labels[p + f.width]);
      adj[f.labels[p + f.width]].push_back(a);
    }
  }
  for (auto& list : adj) {
    std::sort(list.begin(), list.end());
    list.erase(std::unique(list.begin(), list.end()), list.end());
  }
  return adj;
}

}  // namespace detail

/// Relevance of each seed: tree size times the smallest mean-colour contrast
/// to an adjacent tree (0 for a tree with no neighbours). Sorted ascending by
/// score, then seed id.
inline std::vector<SeedScore> seed_relevance(const Forest& forest) {
  const auto adj = detail::tree_adjacency(forest);
  std::vector<SeedScore> scores;
  scores.reserve(adj.size());
  for (std::size_t s = 0; s < adj.size(); ++s) {
    double contrast = adj[s].empty() ? 0.0 : std::numeric_limits<double>::infinity();
    for (int nb : adj[s]) contrast = std::min(contrast, lab_distance(forest.tree_mean[s], forest.tree_mean[nb]));
    scores.push_back({static_cast<int>(s), static_cast<double>(forest.tree_size[s]) * contrast});
  }
  std::sort(scores.begin(), scores.end(), [](const SeedScore& a, const SeedScore& b) {
    return a.score != b.score ? a.score < b.score : a.seed < b.seed;
  });
  return scores;
}

struct DisfOptions {
  std::size_t oversample_factor = 8;
};

/// Oversampled grid seeds, then repeated IFT passes that drop the least
/// relevant half of the seeds until exactly k remain. Within one pass two
/// adjacent trees are never both removed, so a homogeneous object always
/// keeps a representative seed.
inline Segmentation disf_segment(const LabImage& img, std::size_t k, const DisfOptions& opts = {}) {
  const std::size_t n = img.pixel_count();
  if (k < 1) throw ArgumentError("disf_segment: k must be >= 1");
  if (k > n) throw ArgumentError("disf_segment: k exceeds pixel count");
  if (opts.oversample_factor < 1) throw ArgumentError("disf_segment: oversample_factor must be >= 1");

  const std::size_t initial = std::min(n, k * opts.oversample_factor);
  SeedSet seeds = init_grid_seeds(img.width, img.height, initial);
  Forest forest = ift_forest(img, seeds);
  while (seeds.count() > k) {
    const std::size_t current = seeds.count();
    const std::size_t keep = std::max(k, (current + 1) / 2);
    const std::size_t quota = current - keep;
    const auto adj = detail::tree_adjacency(forest);
    std::vector<std::uint8_t> removed(current, 0);
    std::size_t removed_count = 0;
    for (const SeedScore& s : seed_relevance(forest)) {
      if (removed_count == quota) break;
      const bool neighbor_removed =
          std::any_of(adj[s.seed].begin(), adj[s.seed].end(), [&](int nb) { return removed[nb] != 0; });
      if (neighbor_removed) continue;
      removed[s.seed] = 1;
      ++removed_count;
    }
    SeedSet next;
    next.positions.reserve(current - removed_count);
    for (std::size_t s = 0; s < current; ++s)
      if (!removed[s]) next.positions.push_back(seeds.positions[s]);
    seeds = std::move(next);
    forest = ift_forest(img, seeds);
  }
  return make_segmentation(forest.labels, img.width, img.height, img);
}

// ---------------------------------------------------------------------------
// Debug output

/// Label map as a 16-bit binary PGM (big-endian samples).
inline void save_label_pgm16(const std::filesystem::path& path, const Segmentation& seg) {
  if (seg.region_count > 65536) throw ArgumentError("save_label_pgm16: more than 65536 labels");
  const std::string header =
      "P5\n" + std::to_string(seg.width) + " " + std::to_string(seg.height) + "\n65535\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  bytes.reserve(bytes.size() + seg.labels.size() * 2);
  for (int l : seg.labels) {
    bytes.push_back(static_cast<std::uint8_t>(l >> 8));
    bytes.push_back(static_cast<std::uint8_t>(l & 0xFF));
  }
  detail::write_file_bytes(path, bytes);
}

/// Source image with region boundaries painted red.
inline RgbImage boundary_overlay(const RgbImage& img, const Segmentation& seg) {
  RgbImage out = img;
  for (int y = 0; y < seg.height; ++y)
    for (int x = 0; x < seg.width; ++x) {
      const int l = seg.at(x, y);
      const bool edge = (x + 1 < seg.width && seg.at(x + 1, y) != l) || (y + 1 < seg.height && seg.at(x, y + 1) != l);
      if (edge) {
        out.at(x, y, 0) = 255;
        out.at(x, y, 1) = 0;
        out.at(x, y, 2) = 0;
      }
    }
  return out;
}

}  // namespace imagegraph
