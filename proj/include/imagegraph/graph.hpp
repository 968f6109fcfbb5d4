#pragma once

// Region adjacency graphs built from a segmentation, per-region feature
// vectors, and the portable binary graph file format.
//
// Graph file (little-endian):
//   "IGPH" | u16 version=1 | u32 nodes | u32 edges | u32 F | i32 label
//   | u32 meta_count | meta_count x (u32 len, key bytes, u32 len, value bytes)
//   | edges x (u32 u, u32 v) | f32 weights[edges] | f32 features[nodes*F]

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "imagegraph/binary_io.hpp"
#include "imagegraph/error.hpp"
#include "imagegraph/imageio.hpp"
#include "imagegraph/superpixel.hpp"

namespace imagegraph {

struct GraphEdge {
  std::uint32_t u = 0;
  std::uint32_t v = 0;
  bool operator==(const GraphEdge&) const = default;
};

struct FeatureGraph {
  std::size_t node_count = 0;
  std::vector<GraphEdge> edges;  // undirected, u < v, sorted
  std::vector<float> edge_weights;
  std::size_t feature_dim = 0;
  std::vector<float> features;  // node_count x feature_dim, row-major
  int label = -1;               // -1 when unassigned
  std::map<std::string, std::string> meta;

  std::span<const float> node_features(std::size_t node) const {
    return {features.data() + node * feature_dim, feature_dim};
  }

  /// Throws ArgumentError when an invariant is violated.
  void validate() const {
    if (edge_weights.size() != edges.size()) throw ArgumentError("FeatureGraph: edge/weight count mismatch");
    if (features.size() != node_count * feature_dim) throw ArgumentError("FeatureGraph: feature matrix size mismatch");
    for (std::size_t i = 0; i < edges.size(); ++i) {
      const auto& e = edges[i];
      if (e.u >= e.v) throw ArgumentError("FeatureGraph: edge endpoints must satisfy u < v");
      if (e.v >= node_count) throw ArgumentError("FeatureGraph: edge endpoint out of range");
      if (i > 0 && !(edges[i - 1].u < e.u || (edges[i - 1].u == e.u && edges[i - 1].v < e.v)))
        throw ArgumentError("FeatureGraph: edges must be sorted and unique");
      if (!(edge_weights[i] >= 0) || !std::isfinite(edge_weights[i]))
        throw ArgumentError("FeatureGraph: edge weights must be finite and >= 0");
    }
    for (float f : features)
      if (!std::isfinite(f)) throw ArgumentError("FeatureGraph: non-finite feature");
  }

  bool operator==(const FeatureGraph&) const = default;
};

// ---------------------------------------------------------------------------
// Region adjacency

/// One node per region; an edge joins two regions that share a 4-adjacent
/// pixel pair, weighted by the Euclidean distance of their mean Lab colours.
inline FeatureGraph build_rag(const Segmentation& seg, const LabImage& img) {
  if (seg.width != img.width || seg.height != img.height)
    throw ArgumentError("build_rag: segmentation and image dimensions differ");
  std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;
  const int w = seg.width, h = seg.height;
  auto add = [&](int a, int b) {
    if (a == b) return;
    if (a > b) std::swap(a, b);
    pairs.emplace_back(static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b));
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (x + 1 < w) add(seg.at(x, y), seg.at(x + 1, y));
      if (y + 1 < h) add(seg.at(x, y), seg.at(x, y + 1));
    }
  std::sort(pairs.begin(), pairs.end());
  pairs.erase(std::unique(pairs.begin(), pairs.end()), pairs.end());

  FeatureGraph g;
  g.node_count = static_cast<std::size_t>(seg.region_count);
  g.edges.reserve(pairs.size());
  g.edge_weights.reserve(pairs.size());
  for (const auto& [u, v] : pairs) {
    g.edges.push_back({u, v});
    g.edge_weights.push_back(static_cast<float>(lab_distance(seg.regions[u].mean, seg.regions[v].mean)));
  }
  g.meta["k"] = std::to_string(seg.region_count);
  return g;
}

// ---------------------------------------------------------------------------
// Patches and handcrafted features

struct Patch {
  RgbImage pixels;                 // side x side
  std::vector<std::uint8_t> mask;  // side x side, 1 inside the region
  double mask_fraction = 0.0;      // region pixels / bounding-rectangle pixels
};

/// Crop of the region's bounding rectangle with out-of-region pixels zeroed,
/// before any resizing.
inline RgbImage masked_crop(const RgbImage& img, const Segmentation& seg, int region) {
  if (region < 0 || region >= seg.region_count) throw ArgumentError("extract_patch: invalid region id");
  if (img.width != seg.width || img.height != seg.height)
    throw ArgumentError("extract_patch: image and segmentation dimensions differ");
  const RegionStats& r = seg.regions[region];
  RgbImage crop(r.box_width(), r.box_height());
  for (int y = r.min_y; y <= r.max_y; ++y)
    for (int x = r.min_x; x <= r.max_x; ++x) {
      if (seg.at(x, y) != region) continue;
      for (int c = 0; c < 3; ++c) crop.at(x - r.min_x, y - r.min_y, c) = img.at(x, y, c);
    }
  return crop;
}

inline Patch extract_patch(const RgbImage& img, const Segmentation& seg, int region, int side) {
  if (side < 1) throw ArgumentError("extract_patch: side must be >= 1");
  const RgbImage crop = masked_crop(img, seg, region);
  const RegionStats& r = seg.regions[region];
  Patch patch;
  patch.pixels = resize_bilinear(crop, side, side);
  patch.mask.assign(static_cast<std::size_t>(side) * side, 0);
  for (int y = 0; y < side; ++y) {
    const int sy = std::min(r.box_height() - 1, static_cast<int>((y + 0.5) * r.box_height() / side));
    for (int x = 0; x < side; ++x) {
      const int sx = std::min(r.box_width() - 1, static_cast<int>((x + 0.5) * r.box_width() / side));
      patch.mask[static_cast<std::size_t>(y) * side + x] = seg.at(r.min_x + sx, r.min_y + sy) == region ? 1 : 0;
    }
  }
  patch.mask_fraction = static_cast<double>(r.pixel_count) / (static_cast<double>(r.box_width()) * r.box_height());
  return patch;
}

inline constexpr std::size_t kHandcraftedDim = 26;

/// Cheap per-region descriptor used when no external backbone features are
/// supplied. Layout:
///   [0..2]   masked patch RGB mean / 255      [3..5]  masked patch RGB std / 255
///   [6..13]  8-bin masked patch luma histogram, sums to 1
///   [14..15] centroid x / width, y / height   [16] pixel count / image pixels
///   [17]     bounding-box width / height      [18] mask fraction
///   [19..21] region Lab mean (L/100, a/128, b/128)
///   [22..24] region Lab std (same scaling)    [25] perimeter / pixel count
/// The perimeter counts pixel edges leaving the region, image border included.
inline std::vector<float> handcrafted_features(const Patch& patch, const Segmentation& seg, int region,
                                               const LabImage& img) {
  if (region < 0 || region >= seg.region_count) throw ArgumentError("handcrafted_features: invalid region id");
  std::vector<double> f(kHandcraftedDim, 0.0);

  const auto& px = patch.pixels;
  std::size_t masked = 0;
  for (auto m : patch.mask) masked += m;
  const bool use_mask = masked > 0;
  double sum[3] = {0, 0, 0}, sq[3] = {0, 0, 0};
  double hist[8] = {0};
  double count = 0;
  for (std::size_t i = 0; i < px.pixel_count(); ++i) {
    if (use_mask && !patch.mask[i]) continue;
    const double r = px.data[3 * i], g = px.data[3 * i + 1], b = px.data[3 * i + 2];
    const double rgb[3] = {r, g, b};
    for (int c = 0; c < 3; ++c) {
      sum[c] += rgb[c];
      sq[c] += rgb[c] * rgb[c];
    }
    const double luma = 0.299 * r + 0.587 * g + 0.114 * b;
    hist[std::min(7, static_cast<int>(luma / 32.0))] += 1;
    count += 1;
  }
  for (int c = 0; c < 3; ++c) {
    const double mean = sum[c] / count;
    f[c] = mean / 255.0;
    f[3 + c] = std::sqrt(std::max(0.0, sq[c] / count - mean * mean)) / 255.0;
  }
  for (int b = 0; b < 8; ++b) f[6 + b] = hist[b] / count;

  const RegionStats& r = seg.regions[region];
  const double n = static_cast<double>(r.pixel_count);
  f[14] = r.centroid_x / seg.width;
  f[15] = r.centroid_y / seg.height;
  f[16] = n / (static_cast<double>(seg.width) * seg.height);
  f[17] = static_cast<double>(r.box_width()) / r.box_height();
  f[18] = patch.mask_fraction;

  double var[3] = {0, 0, 0};
  std::size_t perimeter = 0;
  for (int y = r.min_y; y <= r.max_y; ++y)
    for (int x = r.min_x; x <= r.max_x; ++x) {
      if (seg.at(x, y) != region) continue;
      const Lab& v = img.at(x, y);
      var[0] += (v.l - r.mean.l) * (v.l - r.mean.l);
      var[1] += (v.a - r.mean.a) * (v.a - r.mean.a);
      var[2] += (v.b - r.mean.b) * (v.b - r.mean.b);
      perimeter += (x == 0 || seg.at(x - 1, y) != region);
      perimeter += (x + 1 == seg.width || seg.at(x + 1, y) != region);
      perimeter += (y == 0 || seg.at(x, y - 1) != region);
      perimeter += (y + 1 == seg.height || seg.at(x, y + 1) != region);
    }
  f[19] = r.mean.l / 100.0;
  f[20] = r.mean.a / 128.0;
  f[21] = r.mean.b / 128.0;
  f[22] = std::sqrt(var[0] / n) / 100.0;
  f[23] = std::sqrt(var[1] / n) / 128.0;
  f[24] = std::sqrt(var[2] / n) / 128.0;
  f[25] = static_cast<double>(perimeter) / n;

  return {f.begin(), f.end()};
}

// ---------------------------------------------------------------------------
// Feature providers

/// Everything a provider may need to describe the regions of one image.
struct ImageContext {
  std::string image_id;
  const RgbImage* rgb = nullptr;
  const LabImage* lab = nullptr;
  const Segmentation* seg = nullptr;
};

/// Precomputed per-region vectors keyed by (image id, segment id), read from a
/// CSV with header `id,segment,f0,...,f{F-1}`.
class ExternalFeatureTable {
 public:
  static ExternalFeatureTable load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open feature file: " + path.string());
    return parse(in, path.string());
  }

  static ExternalFeatureTable parse(std::istream& in, const std::string& source = "<stream>") {
    ExternalFeatureTable table;
    std::string line;
    if (!std::getline(in, line)) throw DataError(source + ": empty feature file");
    strip_cr(line);
    const auto header = split(line);
    if (header.size() < 3 || header[0] != "id" || header[1] != "segment")
      throw DataError(source + ": header must start with id,segment,f0");
    table.dim_ = header.size() - 2;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
      ++line_no;
      strip_cr(line);
      if (line.empty()) continue;
      const auto cells = split(line);
      if (cells.size() != table.dim_ + 2)
        throw DataError(source + ":" + std::to_string(line_no) + ": expected " + std::to_string(table.dim_ + 2) +
                        " columns");
      char* end = nullptr;
      const unsigned long seg = std::strtoul(cells[1].c_str(), &end, 10);
      if (cells[1].empty() || *end != '\0') throw DataError(source + ":" + std::to_string(line_no) + ": bad segment id");
      std::vector<float> values(table.dim_);
      for (std::size_t i = 0; i < table.dim_; ++i) {
        const double v = std::strtod(cells[i + 2].c_str(), &end);
        if (cells[i + 2].empty() || *end != '\0' || !std::isfinite(v))
          throw DataError(source + ":" + std::to_string(line_no) + ": bad or non-finite value");
        values[i] = static_cast<float>(v);
      }
      table.rows_[{cells[0], seg}] = std::move(values);
    }
    return table;
  }

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return rows_.size(); }

  const std::vector<float>& lookup(const std::string& image_id, std::size_t segment) const {
    const auto it = rows_.find({image_id, segment});
    if (it == rows_.end()) throw ResolutionError(image_id, segment);
    return it->second;
  }

 private:
  static void strip_cr(std::string& s) {
    if (!s.empty() && s.back() == '\r') s.pop_back();
  }
  static std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
  }

  std::size_t dim_ = 0;
  std::map<std::pair<std::string, std::size_t>, std::vector<float>> rows_;
};

class FeatureProvider {
 public:
  enum class Source { Builtin, External };

  static FeatureProvider builtin(int patch_side = 64) {
    FeatureProvider p;
    p.name_ = "builtin";
    p.dim_ = kHandcraftedDim;
    p.patch_side_ = patch_side;
    return p;
  }

  static FeatureProvider external(const std::filesystem::path& path) {
    auto table = std::make_shared<const ExternalFeatureTable>(ExternalFeatureTable::load(path));
    return external(std::move(table), "external:" + path.filename().string());
  }

  static FeatureProvider external(std::shared_ptr<const ExternalFeatureTable> table, std::string name) {
    FeatureProvider p;
    p.name_ = std::move(name);
    p.source_ = Source::External;
    p.dim_ = table->dim();
    p.table_ = std::move(table);
    return p;
  }

  const std::string& name() const { return name_; }
  std::size_t dim() const { return dim_; }
  Source source() const { return source_; }
  int patch_side() const { return patch_side_; }

  /// Row-major region_count x dim matrix for one image.
  std::vector<float> compute(const ImageContext& ctx) const {
    const auto regions = static_cast<std::size_t>(ctx.seg->region_count);
    std::vector<float> out;
    out.reserve(regions * dim_);
    for (std::size_t r = 0; r < regions; ++r) {
      if (source_ == Source::External) {
        const auto& row = table_->lookup(ctx.image_id, r);
        out.insert(out.end(), row.begin(), row.end());
      } else {
        const Patch patch = extract_patch(*ctx.rgb, *ctx.seg, static_cast<int>(r), patch_side_);
        const auto row = handcrafted_features(patch, *ctx.seg, static_cast<int>(r), *ctx.lab);
        out.insert(out.end(), row.begin(), row.end());
      }
    }
    return out;
  }

 private:
  std::string name_;
  Source source_ = Source::Builtin;
  std::size_t dim_ = 0;
  int patch_side_ = 64;
  std::shared_ptr<const ExternalFeatureTable> table_;
};

/// Fills the node feature matrix from `provider`; rejects non-finite values.
inline FeatureGraph attach_features(FeatureGraph g, const FeatureProvider& provider, const ImageContext& ctx) {
  if (static_cast<std::size_t>(ctx.seg->region_count) != g.node_count)
    throw ArgumentError("attach_features: graph and segmentation disagree on node count");
  auto features = provider.compute(ctx);
  for (float f : features)
    if (!std::isfinite(f)) throw DataError("attach_features: non-finite feature for image " + ctx.image_id);
  g.features = std::move(features);
  g.feature_dim = provider.dim();
  g.meta["image_id"] = ctx.image_id;
  g.meta["provider"] = provider.name();
  return g;
}

// ---------------------------------------------------------------------------
// Binary format

inline constexpr char kGraphMagic[4] = {'I', 'G', 'P', 'H'};
inline constexpr std::uint16_t kGraphVersion = 1;

inline std::vector<std::uint8_t> encode_graph(const FeatureGraph& g) {
  g.validate();
  detail::ByteWriter w;
  w.raw(kGraphMagic, 4);
  w.u16(kGraphVersion);
  w.u32(static_cast<std::uint32_t>(g.node_count));
  w.u32(static_cast<std::uint32_t>(g.edges.size()));
  w.u32(static_cast<std::uint32_t>(g.feature_dim));
  w.i32(g.label);
  w.u32(static_cast<std::uint32_t>(g.meta.size()));
  for (const auto& [key, value] : g.meta) {
    w.str(key);
    w.str(value);
  }
  for (const auto& e : g.edges) {
    w.u32(e.u);
    w.u32(e.v);
  }
  for (float f : g.edge_weights) w.f32(f);
  for (float f : g.features) w.f32(f);
  return std::move(w.bytes());
}

inline FeatureGraph decode_graph(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "graph file");
  char magic[4];
  r.raw(magic, 4);
  if (!std::equal(magic, magic + 4, kGraphMagic)) throw FormatError("graph file: bad magic");
  const std::uint16_t version = r.u16();
  if (version != kGraphVersion) throw FormatError("graph file: unsupported version " + std::to_string(version));
  FeatureGraph g;
  g.node_count = r.u32();
  const std::uint32_t edge_count = r.u32();
  g.feature_dim = r.u32();
  g.label = r.i32();
  const std::uint32_t meta_count = r.u32();
  for (std::uint32_t i = 0; i < meta_count; ++i) {
    std::string key = r.str();
    g.meta[std::move(key)] = r.str();
  }
  const std::uint64_t payload = 12ULL * edge_count + 4ULL * g.node_count * g.feature_dim;
  if (r.remaining() != payload)
    throw FormatError("graph file: payload is " + std::to_string(r.remaining()) + " bytes, expected " +
                      std::to_string(payload));
  g.edges.resize(edge_count);
  for (auto& e : g.edges) {
    e.u = r.u32();
    e.v = r.u32();
  }
  g.edge_weights.resize(edge_count);
  for (auto& f : g.edge_weights) f = r.f32();
  g.features.resize(g.node_count * g.feature_dim);
  for (auto& f : g.features) f = r.f32();
  try {
    g.validate();
  } catch (const ArgumentError& e) {
    throw FormatError(std::string("graph file: ") + e.what());
  }
  return g;
}

inline void serialize_graph(const FeatureGraph& g, const std::filesystem::path& path) {
  detail::write_file_bytes(path, encode_graph(g));
}

inline FeatureGraph deserialize_graph(const std::filesystem::path& path) {
  const auto bytes = detail::read_file_bytes(path);
  try {
    return decode_graph(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

/// Size in bytes of the encoded form of `g`.
inline std::size_t encoded_graph_size(const FeatureGraph& g) {
  std::size_t meta = 4;
  for (const auto& [k, v] : g.meta) meta += 8 + k.size() + v.size();
  return 4 + 2 + 4 + 4 + 4 + 4 + meta + 12 * g.edges.size() + 4 * g.node_count * g.feature_dim;
}

}  // namespace imagegraph
