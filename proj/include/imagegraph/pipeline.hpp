#pragma once

// Dataset scanning, run configuration and the segment / build / train /
// ensemble / report stages driven by the command-line tool.
//
// Every stage writes into BASE/<stage>-<hash>, where the hash covers the
// inputs and settings that influence the stage's output. A finished run
// leaves a DONE marker and is reused unless forced.

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <atomic>
#include <cctype>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <span>
#include <string>
#include <thread>
#include <tuple>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "imagegraph/error.hpp"
#include "imagegraph/gnn.hpp"
#include "imagegraph/graph.hpp"
#include "imagegraph/imageio.hpp"
#include "imagegraph/rng.hpp"
#include "imagegraph/superpixel.hpp"
#include "imagegraph/trainer.hpp"

namespace imagegraph::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

struct PipelineConfig {
  std::string method = "disf";
  std::size_t k = 10;
  std::string provider = "builtin";
  std::string arch = "gin";
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  fs::path out = "runs";
  fs::path data;
  double lr = 1e-3;
  double weight_decay = 1e-3;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  std::string positive_class = "PNEUMONIA";
  bool use_edge_weights = false;
  bool class_weights = false;
  int patch_side = 64;
  double compactness = 10.0;
  std::size_t oversample = 8;
  bool force = false;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline unsigned long long parse_uint(const std::string& key, const std::string& v) {
  char* end = nullptr;
  errno = 0;
  const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
  if (v.empty() || v[0] == '-' || *end != '\0' || errno == ERANGE)
    throw ArgumentError("config '" + key + "': expected a non-negative integer, got '" + v + "'");
  return x;
}

inline double parse_real(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || *end != '\0' || !std::isfinite(x))
    throw ArgumentError("config '" + key + "': expected a number, got '" + v + "'");
  return x;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw ArgumentError("config '" + key + "': expected true or false, got '" + v + "'");
}

}  // namespace detail

/// Applies one key=value setting, validating the value.
inline void set_config_value(PipelineConfig& c, const std::string& key, const std::string& value) {
  using namespace detail;
  if (key == "method") {
    if (value != "slic" && value != "disf") throw ArgumentError("unknown method '" + value + "' (valid: slic, disf)");
    c.method = value;
  } else if (key == "k") {
    c.k = parse_uint(key, value);
    if (c.k < 1) throw ArgumentError("config 'k' must be >= 1");
  } else if (key == "provider") {
    if (value != "builtin" && value.rfind("external:", 0) != 0)
      throw ArgumentError("unknown provider '" + value + "' (valid: builtin, external:FILE)");
    if (value.rfind("external:", 0) == 0 && value.size() == 9)
      throw ArgumentError("provider 'external:' needs a file path");
    c.provider = value;
  } else if (key == "arch") {
    parse_arch(value);
    c.arch = value;
  } else if (key == "seed") {
    c.seed = parse_uint(key, value);
  } else if (key == "workers") {
    c.workers = parse_uint(key, value);
    if (c.workers < 1) throw ArgumentError("config 'workers' must be >= 1");
  } else if (key == "out") {
    c.out = value;
  } else if (key == "data") {
    c.data = value;
  } else if (key == "lr") {
    c.lr = parse_real(key, value);
    if (c.lr < 0) throw ArgumentError("config 'lr' must be >= 0");
  } else if (key == "weight_decay") {
    c.weight_decay = parse_real(key, value);
    if (c.weight_decay < 0) throw ArgumentError("config 'weight_decay' must be >= 0");
  } else if (key == "epochs") {
    c.epochs = parse_uint(key, value);
  } else if (key == "batch_size") {
    c.batch_size = parse_uint(key, value);
    if (c.batch_size < 1) throw ArgumentError("config 'batch_size' must be >= 1");
  } else if (key == "positive_class") {
    c.positive_class = value;
  } else if (key == "use_edge_weights") {
    c.use_edge_weights = parse_bool(key, value);
  } else if (key == "class_weights") {
    c.class_weights = parse_bool(key, value);
  } else if (key == "patch_side") {
    c.patch_side = static_cast<int>(parse_uint(key, value));
    if (c.patch_side < 1) throw ArgumentError("config 'patch_side' must be >= 1");
  } else if (key == "compactness") {
    c.compactness = parse_real(key, value);
    if (c.compactness <= 0) throw ArgumentError("config 'compactness' must be > 0");
  } else if (key == "oversample") {
    c.oversample = parse_uint(key, value);
    if (c.oversample < 1) throw ArgumentError("config 'oversample' must be >= 1");
  } else if (key == "force") {
    c.force = parse_bool(key, value);
  } else {
    throw ArgumentError("unknown config key '" + key + "'");
  }
}

/// Flat `key = value` lines; `#` starts a comment.
inline void apply_config(PipelineConfig& c, std::istream& in, const std::string& source = "<config>") {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ArgumentError(source + ":" + std::to_string(line_no) + ": expected key = value");
    try {
      set_config_value(c, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    } catch (const ArgumentError& e) {
      throw ArgumentError(source + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

inline void apply_config_file(PipelineConfig& c, const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ArgumentError("cannot open config file: " + path.string());
  apply_config(c, in, path.string());
}

// ---------------------------------------------------------------------------
// Hashing

inline std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256: digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

inline std::string sha256_file(const fs::path& path) {
  const auto bytes = imagegraph::detail::read_file_bytes(path);
  return sha256_hex(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

// ---------------------------------------------------------------------------
// Image dataset manifest

struct ImageEntry {
  std::string id;  // relative path without extension, '/'-separated
  fs::path path;
  std::string class_name;
  std::string split;  // train | val | test
};

struct DatasetManifest {
  fs::path root;
  std::vector<std::string> class_names;  // sorted
  std::vector<ImageEntry> entries;       // sorted by id

  int class_index(const std::string& name) const {
    for (std::size_t i = 0; i < class_names.size(); ++i)
      if (class_names[i] == name) return static_cast<int>(i);
    return -1;
  }
};

inline bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".pgm" || ext == ".ppm";
}

/// Scans `root/<split>/<CLASS>/*` when any of train/val/test exists, else
/// `root/<CLASS>/*` with a seeded 70/15/15 split per class.
inline DatasetManifest scan_dataset(const fs::path& root, std::uint64_t seed = 0) {
  if (!fs::is_directory(root)) throw IoError("dataset root is not a directory: " + root.string());
  DatasetManifest m;
  m.root = root;
  std::set<std::string> classes;
  auto list_images = [](const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    return files;
  };
  auto class_dirs = [](const fs::path& dir) {
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_directory()) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
  };
  const bool split_layout =
      fs::is_directory(root / "train") || fs::is_directory(root / "val") || fs::is_directory(root / "test");
  if (split_layout) {
    for (const char* split : {"train", "val", "test"}) {
      if (!fs::is_directory(root / split)) continue;
      for (const auto& cdir : class_dirs(root / split)) {
        const std::string cls = cdir.filename().string();
        classes.insert(cls);
        for (const auto& f : list_images(cdir))
          m.entries.push_back({std::string(split) + "/" + cls + "/" + f.stem().string(), f, cls, split});
      }
    }
  } else {
    Rng rng(seed);
    for (const auto& cdir : class_dirs(root)) {
      const std::string cls = cdir.filename().string();
      auto files = list_images(cdir);
      if (files.empty()) continue;
      classes.insert(cls);
      rng.shuffle(std::span<fs::path>(files));
      const std::size_t n = files.size();
      const auto n_train = static_cast<std::size_t>(std::llround(0.70 * static_cast<double>(n)));
      const auto n_val = static_cast<std::size_t>(std::llround(0.15 * static_cast<double>(n)));
      for (std::size_t i = 0; i < n; ++i) {
        const char* split = i < n_train ? "train" : i < n_train + n_val ? "val" : "test";
        m.entries.push_back({cls + "/" + files[i].stem().string(), files[i], cls, split});
      }
    }
  }
  m.class_names.assign(classes.begin(), classes.end());
  std::sort(m.entries.begin(), m.entries.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  for (std::size_t i = 1; i < m.entries.size(); ++i)
    if (m.entries[i].id == m.entries[i - 1].id) throw DataError("duplicate image id: " + m.entries[i].id);
  return m;
}

/// Digest of the image list and file contents.
inline std::string manifest_digest(const DatasetManifest& m) {
  std::string acc;
  for (const auto& e : m.entries) acc += e.id + "|" + e.split + "|" + e.class_name + "|" + sha256_file(e.path) + "\n";
  return sha256_hex(acc);
}

// ---------------------------------------------------------------------------
// Runs

namespace detail {

/// Runs fn(i) for i in [0, n) on `workers` threads. Each index writes only
/// its own outputs, so results do not depend on the worker count. The
/// exception of the lowest failing index (if any) is rethrown.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t t = std::max<std::size_t>(1, std::min(workers, n));
  if (t == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < t; ++i) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

inline std::string read_text(const fs::path& path) {
  const auto bytes = imagegraph::detail::read_file_bytes(path);
  return {bytes.begin(), bytes.end()};
}

inline fs::path graph_file_for(const std::string& id) { return fs::path(id + ".igph"); }

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

struct StageResult {
  fs::path run_dir;
  std::size_t processed = 0;
  std::vector<std::string> errors;  // per-item failures that did not abort the run
  bool cached = false;
};

/// BASE/<stage>-<first 16 hex digits of sha256(key)>.
inline fs::path run_dir_for(const PipelineConfig& c, const std::string& stage, const std::string& key) {
  return c.out / (stage + "-" + sha256_hex(key).substr(0, 16));
}

inline bool run_complete(const fs::path& dir) { return fs::exists(dir / "DONE"); }

inline void begin_run(const fs::path& dir) {
  if (fs::exists(dir)) fs::remove_all(dir);
  fs::create_directories(dir);
}

inline void finish_run(const fs::path& dir, const std::string& key) { detail::write_text(dir / "DONE", key + "\n"); }

inline std::string segmentation_key(const PipelineConfig& c) {
  std::string key = "method=" + c.method + ";k=" + std::to_string(c.k);
  if (c.method == "slic") key += ";compactness=" + detail::fmt(c.compactness);
  else key += ";oversample=" + std::to_string(c.oversample);
  return key;
}

inline Segmentation segment_image(const LabImage& lab, const PipelineConfig& c) {
  if (c.method == "slic") {
    SlicOptions o;
    o.compactness = c.compactness;
    return slic_segment(lab, c.k, o);
  }
  if (c.method == "disf") {
    DisfOptions o;
    o.oversample_factor = c.oversample;
    return disf_segment(lab, c.k, o);
  }
  throw ArgumentError("unknown method '" + c.method + "' (valid: slic, disf)");
}

// ---------------------------------------------------------------------------
// segment

/// Label maps (16-bit PGM under labels/) and timing.csv with
/// image_id,method,k,seconds. Unreadable images are recorded and skipped.
inline StageResult cmd_segment(const PipelineConfig& c, const DatasetManifest& m, std::ostream& log = std::cerr) {
  StageResult r;
  if (m.entries.empty()) {
    log << "warning: dataset has no images; nothing to segment\n";
    return r;
  }
  const std::string key = "segment;" + segmentation_key(c) + ";data=" + manifest_digest(m);
  r.run_dir = run_dir_for(c, "segment", key);
  if (run_complete(r.run_dir) && !c.force) {
    r.cached = true;
    r.processed = m.entries.size();
    log << "segment: reusing " << r.run_dir.string() << "\n";
    return r;
  }
  begin_run(r.run_dir);
  std::vector<double> seconds(m.entries.size(), -1.0);
  std::vector<std::string> errors(m.entries.size());
  detail::parallel_for(m.entries.size(), c.workers, [&](std::size_t i) {
    const auto& e = m.entries[i];
    try {
      const LabImage lab = rgb_to_lab(load_image(e.path));
      const auto t0 = std::chrono::steady_clock::now();
      const Segmentation seg = segment_image(lab, c);
      seconds[i] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      const fs::path out = r.run_dir / "labels" / (e.id + ".pgm");
      fs::create_directories(out.parent_path());
      save_label_pgm16(out, seg);
    } catch (const DataError& err) {
      errors[i] = e.id + ": " + err.what();
    }
  });
  std::ostringstream csv;
  csv << "image_id,method,k,seconds\n";
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    if (!errors[i].empty()) {
      r.errors.push_back(errors[i]);
      log << "error: " << errors[i] << "\n";
      continue;
    }
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9f", seconds[i]);
    csv << m.entries[i].id << "," << c.method << "," << c.k << "," << buf << "\n";
    ++r.processed;
  }
  detail::write_text(r.run_dir / "timing.csv", csv.str());
  if (!r.errors.empty()) {
    std::ostringstream err;
    for (const auto& e : r.errors) err << e << "\n";
    detail::write_text(r.run_dir / "errors.txt", err.str());
  } else {
    finish_run(r.run_dir, key);
  }
  log << "segment: " << r.processed << " images, " << r.errors.size() << " failed -> " << r.run_dir.string() << "\n";
  return r;
}

// ---------------------------------------------------------------------------
// build

inline FeatureProvider make_provider(const PipelineConfig& c) {
  if (c.provider == "builtin") return FeatureProvider::builtin(c.patch_side);
  if (c.provider.rfind("external:", 0) == 0) return FeatureProvider::external(fs::path(c.provider.substr(9)));
  throw ArgumentError("unknown provider '" + c.provider + "' (valid: builtin, external:FILE)");
}

inline std::string provider_key(const PipelineConfig& c) {
  if (c.provider == "builtin") return "builtin;patch=" + std::to_string(c.patch_side);
  const fs::path file = c.provider.substr(9);
  if (!fs::exists(file)) throw IoError("feature file not found: " + file.string());
  return "external;sha256=" + sha256_file(file);
}

/// Short provider label used in reports: "builtin" or the external file stem.
inline std::string provider_label(const std::string& provider) {
  if (provider.rfind("external:", 0) == 0) return fs::path(provider.substr(9)).stem().string();
  return provider;
}

/// One graph file per image (mirroring <split>/<CLASS>/) plus manifest.json.
/// Any failure, including an unresolved feature key, aborts the build.
inline StageResult cmd_build(const PipelineConfig& c, const DatasetManifest& m, std::ostream& log = std::cerr) {
  StageResult r;
  if (m.entries.empty()) throw DataError("build: dataset has no images");
  const std::string key =
      "build;" + segmentation_key(c) + ";provider=" + provider_key(c) + ";data=" + manifest_digest(m);
  r.run_dir = run_dir_for(c, "build", key);
  if (run_complete(r.run_dir) && !c.force) {
    r.cached = true;
    r.processed = m.entries.size();
    log << "build: reusing " << r.run_dir.string() << "\n";
    return r;
  }
  const FeatureProvider provider = make_provider(c);
  begin_run(r.run_dir);
  std::vector<std::size_t> nodes(m.entries.size(), 0);
  detail::parallel_for(m.entries.size(), c.workers, [&](std::size_t i) {
    const auto& e = m.entries[i];
    const RgbImage rgb = load_image(e.path);
    const LabImage lab = rgb_to_lab(rgb);
    const Segmentation seg = segment_image(lab, c);
    FeatureGraph g = build_rag(seg, lab);
    g = attach_features(std::move(g), provider, ImageContext{e.id, &rgb, &lab, &seg});
    g.label = m.class_index(e.class_name);
    g.meta["class"] = e.class_name;
    g.meta["split"] = e.split;
    g.meta["method"] = c.method;
    nodes[i] = g.node_count;
    const fs::path out = r.run_dir / detail::graph_file_for(e.id);
    fs::create_directories(out.parent_path());
    serialize_graph(g, out);
  });
  json j;
  j["format"] = "imagegraph-dataset";
  j["version"] = 1;
  j["feature_dim"] = provider.dim();
  j["k"] = c.k;
  j["method"] = c.method;
  j["provider"] = provider_label(c.provider);
  j["class_names"] = m.class_names;
  json graphs = json::array();
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    const auto& e = m.entries[i];
    graphs.push_back({{"id", e.id},
                      {"split", e.split},
                      {"class", e.class_name},
                      {"file", detail::graph_file_for(e.id).generic_string()},
                      {"nodes", nodes[i]}});
  }
  j["graphs"] = std::move(graphs);
  detail::write_text(r.run_dir / "manifest.json", j.dump(2) + "\n");
  r.processed = m.entries.size();
  finish_run(r.run_dir, key);
  log << "build: " << r.processed << " graphs (F=" << provider.dim() << ") -> " << r.run_dir.string() << "\n";
  return r;
}

// ---------------------------------------------------------------------------
// graph datasets

struct GraphDataset {
  fs::path dir;
  json manifest;
  DatasetSplit split;
  std::size_t k = 0;
  std::string method, provider;
};

inline GraphDataset load_graph_dataset(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath)) throw DataError("no manifest.json in graph dataset " + dir.string());
  GraphDataset d;
  d.dir = dir;
  try {
    d.manifest = json::parse(detail::read_text(mpath));
    d.split.class_names = d.manifest.at("class_names").get<std::vector<std::string>>();
    d.k = d.manifest.at("k").get<std::size_t>();
    d.method = d.manifest.at("method").get<std::string>();
    d.provider = d.manifest.at("provider").get<std::string>();
    for (const auto& g : d.manifest.at("graphs")) {
      FeatureGraph fg = deserialize_graph(dir / g.at("file").get<std::string>());
      const std::string split = g.at("split").get<std::string>();
      if (split == "train") d.split.train.push_back(std::move(fg));
      else if (split == "val") d.split.val.push_back(std::move(fg));
      else if (split == "test") d.split.test.push_back(std::move(fg));
      else throw DataError("unknown split '" + split + "'");
    }
  } catch (const json::exception& e) {
    throw DataError(mpath.string() + ": " + e.what());
  }
  return d;
}

inline TrainOptions train_options(const PipelineConfig& c) {
  TrainOptions o;
  o.lr = c.lr;
  o.weight_decay = c.weight_decay;
  o.epochs = c.epochs;
  o.batch_size = c.batch_size;
  o.seed = c.seed;
  o.class_weights = c.class_weights;
  return o;
}

inline std::string training_key(const PipelineConfig& c) {
  return "lr=" + detail::fmt(c.lr) + ";wd=" + detail::fmt(c.weight_decay) + ";epochs=" + std::to_string(c.epochs) +
         ";batch=" + std::to_string(c.batch_size) + ";seed=" + std::to_string(c.seed) +
         ";edge_weights=" + std::to_string(c.use_edge_weights) + ";class_weights=" + std::to_string(c.class_weights) +
         ";positive=" + c.positive_class;
}

inline json metrics_json(const Metrics& m) {
  json j = {{"accuracy", m.accuracy}, {"tp", m.tp}, {"fp", m.fp}, {"tn", m.tn}, {"fn", m.fn}};
  j["sensitivity"] = std::isnan(m.sensitivity) ? json(nullptr) : json(m.sensitivity);
  j["auc"] = m.auc ? json(*m.auc) : json(nullptr);
  return j;
}

namespace detail {

/// Test split, or validation when there is no test split.
inline const std::vector<FeatureGraph>& report_graphs(const DatasetSplit& s, std::string& name) {
  name = s.test.empty() ? "val" : "test";
  return s.test.empty() ? s.val : s.test;
}

inline std::string epoch_csv(const std::vector<EpochLog>& log, bool with_seconds = false) {
  std::ostringstream out;
  write_epoch_csv(out, log, with_seconds);
  return out.str();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// train

/// Writes model.igwt, epochs.csv, epoch_times.csv, metrics.txt and metrics.json.
/// Everything except epoch_times.csv is reproducible for a fixed seed.
inline StageResult cmd_train(const PipelineConfig& c, const fs::path& dataset_dir, std::ostream& log = std::cerr) {
  const Arch arch = parse_arch(c.arch);
  if (!fs::exists(dataset_dir / "manifest.json"))
    throw DataError("missing manifest.json in dataset directory " + dataset_dir.string());
  StageResult r;
  const std::string key = "train;arch=" + c.arch + ";" + training_key(c) +
                          ";data=" + sha256_hex(detail::read_text(dataset_dir / "manifest.json")) +
                          ";dir=" + fs::absolute(dataset_dir).lexically_normal().string();
  r.run_dir = run_dir_for(c, "train", key);
  if (run_complete(r.run_dir) && !c.force) {
    r.cached = true;
    log << "train: reusing " << r.run_dir.string() << "\n";
    return r;
  }
  GraphDataset d = load_graph_dataset(dataset_dir);
  ModelConfig mc = ModelConfig::defaults(arch, d.split.feature_dim(), d.split.class_names.size());
  mc.use_edge_weights = c.use_edge_weights;
  TrainOptions opt = train_options(c);
  opt.on_epoch = [&](std::size_t epoch, double loss, double acc) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "epoch %zu  loss %.5f  val_acc %.4f\n", epoch, loss, acc);
    log << buf;
  };
  begin_run(r.run_dir);
  const TrainResult tr = train_model(mc, d.split, opt);
  const int positive = resolve_positive_class(d.split.class_names, c.positive_class);
  std::string part;
  const auto& eval_set = detail::report_graphs(d.split, part);
  const Metrics m = evaluate(tr.model, eval_set, positive);

  save_model(r.run_dir / "model.igwt", tr.model);
  detail::write_text(r.run_dir / "epochs.csv", detail::epoch_csv(tr.log));
  detail::write_text(r.run_dir / "epoch_times.csv", detail::epoch_csv(tr.log, true));
  detail::write_text(r.run_dir / "metrics.txt", format_metrics_table({{c.arch, m}}));
  json j;
  j["arch"] = c.arch;
  j["k"] = d.k;
  j["method"] = d.method;
  j["provider"] = d.provider;
  j["split"] = part;
  j["positive_class"] = d.split.class_names[positive];
  j["best_epoch"] = tr.best_epoch;
  j["parameters"] = tr.model.parameter_count();
  j["metrics"] = metrics_json(m);
  detail::write_text(r.run_dir / "metrics.json", j.dump(2) + "\n");
  finish_run(r.run_dir, key);
  r.processed = 1;
  log << format_metrics_table({{c.arch, m}});
  return r;
}

// ---------------------------------------------------------------------------
// ensemble

/// A member is a checkpoint file or a train run directory holding model.igwt.
inline fs::path member_checkpoint(const fs::path& p) {
  if (fs::is_directory(p)) return p / "model.igwt";
  return p;
}

/// Trains a head over the frozen members; metrics.txt lists every member and
/// the ensemble.
inline StageResult cmd_ensemble(const PipelineConfig& c, const std::vector<fs::path>& members,
                                const fs::path& dataset_dir, std::ostream& log = std::cerr) {
  if (members.empty()) throw ArgumentError("ensemble: at least one --member checkpoint is required");
  if (!fs::exists(dataset_dir / "manifest.json"))
    throw DataError("missing manifest.json in dataset directory " + dataset_dir.string());
  std::string key = "ensemble;" + training_key(c) + ";data=" + sha256_hex(detail::read_text(dataset_dir / "manifest.json"));
  for (const auto& p : members) key += ";member=" + sha256_file(member_checkpoint(p));
  StageResult r;
  r.run_dir = run_dir_for(c, "ensemble", key);
  if (run_complete(r.run_dir) && !c.force) {
    r.cached = true;
    log << "ensemble: reusing " << r.run_dir.string() << "\n";
    return r;
  }
  GraphDataset d = load_graph_dataset(dataset_dir);
  std::vector<Model> models;
  for (const auto& p : members) {
    Model m = load_model(member_checkpoint(p));
    if (m.config.input_dim != d.split.feature_dim())
      throw DataError("ensemble: member " + p.string() + " expects " + std::to_string(m.config.input_dim) +
                      " features but the dataset has " + std::to_string(d.split.feature_dim()));
    if (m.config.num_classes != d.split.class_names.size())
      throw DataError("ensemble: member " + p.string() + " has a different class count");
    models.push_back(std::move(m));
  }
  begin_run(r.run_dir);
  TrainOptions opt = train_options(c);
  const EnsembleTrainResult er = train_ensemble(models, d.split, opt);
  const int positive = resolve_positive_class(d.split.class_names, c.positive_class);
  std::string part;
  const auto& eval_set = detail::report_graphs(d.split, part);
  std::vector<std::pair<std::string, Metrics>> rows;
  json member_json = json::array();
  for (const auto& m : models) {
    rows.emplace_back(arch_name(m.config.arch), evaluate(m, eval_set, positive));
    member_json.push_back({{"arch", arch_name(m.config.arch)}, {"metrics", metrics_json(rows.back().second)}});
  }
  const Metrics em = evaluate(er.ensemble, eval_set, positive);
  rows.emplace_back("ensemble", em);

  nd::save_checkpoint(r.run_dir / "ensemble.igwt", ensemble_checkpoint(er.ensemble));
  detail::write_text(r.run_dir / "epochs.csv", detail::epoch_csv(er.log));
  detail::write_text(r.run_dir / "epoch_times.csv", detail::epoch_csv(er.log, true));
  detail::write_text(r.run_dir / "metrics.txt", format_metrics_table(rows));
  json j;
  j["arch"] = "ensemble";
  j["k"] = d.k;
  j["method"] = d.method;
  j["provider"] = d.provider;
  j["split"] = part;
  j["positive_class"] = d.split.class_names[positive];
  j["best_epoch"] = er.best_epoch;
  j["parameters"] = er.ensemble.head.parameter_count();
  j["metrics"] = metrics_json(em);
  j["members"] = std::move(member_json);
  detail::write_text(r.run_dir / "metrics.json", j.dump(2) + "\n");
  finish_run(r.run_dir, key);
  r.processed = 1;
  log << format_metrics_table(rows);
  return r;
}

// ---------------------------------------------------------------------------
// report

struct ReportCell {
  std::size_t k = 0;
  std::string arch, provider;
  double accuracy = 0;
};

struct Report {
  std::vector<std::size_t> ks;
  std::vector<std::pair<std::string, std::string>> columns;  // (arch, provider)
  std::map<std::tuple<std::size_t, std::string, std::string>, double> cells;

  std::size_t populated() const { return cells.size(); }
};

inline int arch_rank(const std::string& a) {
  static const std::vector<std::string> order = {"gcn", "gat", "gin", "ensemble"};
  const auto it = std::find(order.begin(), order.end(), a);
  return static_cast<int>(it - order.begin());
}

/// Collects metrics.json from each directory or its immediate subdirectories.
/// The first run found for a (k, arch, provider) cell wins.
inline Report collect_report(const std::vector<fs::path>& dirs) {
  std::vector<fs::path> files;
  for (const auto& d : dirs) {
    if (fs::exists(d / "metrics.json")) {
      files.push_back(d / "metrics.json");
    } else if (fs::is_directory(d)) {
      std::vector<fs::path> sub;
      for (const auto& e : fs::directory_iterator(d))
        if (e.is_directory() && fs::exists(e.path() / "metrics.json")) sub.push_back(e.path() / "metrics.json");
      std::sort(sub.begin(), sub.end());
      files.insert(files.end(), sub.begin(), sub.end());
    }
  }
  Report rep;
  std::set<std::size_t> ks;
  std::set<std::pair<std::string, std::string>> cols;
  for (const auto& f : files) {
    json j;
    try {
      j = json::parse(detail::read_text(f));
      const std::size_t k = j.at("k").get<std::size_t>();
      const std::string arch = j.at("arch").get<std::string>();
      const std::string provider = j.at("provider").get<std::string>();
      const double acc = j.at("metrics").at("accuracy").get<double>();
      ks.insert(k);
      cols.insert({arch, provider});
      rep.cells.emplace(std::make_tuple(k, arch, provider), acc);
    } catch (const json::exception& e) {
      throw DataError(f.string() + ": " + e.what());
    }
  }
  rep.ks.assign(ks.begin(), ks.end());
  rep.columns.assign(cols.begin(), cols.end());
  std::stable_sort(rep.columns.begin(), rep.columns.end(), [](const auto& a, const auto& b) {
    if (arch_rank(a.first) != arch_rank(b.first)) return arch_rank(a.first) < arch_rank(b.first);
    return a.second < b.second;
  });
  return rep;
}

inline std::string report_csv(const Report& rep) {
  std::string out = "k";
  for (const auto& [arch, provider] : rep.columns) out += "," + arch + "/" + provider;
  out += "\n";
  for (auto k : rep.ks) {
    out += std::to_string(k);
    for (const auto& [arch, provider] : rep.columns) {
      const auto it = rep.cells.find({k, arch, provider});
      out += "," + (it == rep.cells.end() ? std::string("\xE2\x80\x94") : format_real(it->second));
    }
    out += "\n";
  }
  return out;
}

/// Aligned text version of the CSV grid.
inline std::string report_text(const Report& rep) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(report_csv(rep));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  auto len = [](const std::string& s) {
    std::size_t n = 0;
    for (unsigned char ch : s) n += (ch & 0xC0) != 0x80;
    return n;
  };
  std::vector<std::size_t> width;
  for (const auto& r : rows)
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (width.size() <= i) width.push_back(0);
      width[i] = std::max(width[i], len(r[i]));
    }
  std::string out;
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      out += r[i];
      if (i + 1 < r.size()) out += std::string(width[i] - len(r[i]) + 2, ' ');
    }
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic blobs-vs-stripes dataset

struct SyntheticOptions {
  std::size_t train = 200, val = 50, test = 50;
  int size = 64;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::array<double, 3> random_colour(Rng& rng) {
  return {rng.uniform(20, 235), rng.uniform(20, 235), rng.uniform(20, 235)};
}

inline double colour_gap(const std::array<double, 3>& a, const std::array<double, 3>& b) {
  return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]));
}

inline std::array<double, 3> distinct_colour(Rng& rng, const std::array<double, 3>& from) {
  for (;;) {
    auto c = random_colour(rng);
    if (colour_gap(c, from) > 90) return c;
  }
}

inline std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

}  // namespace detail

/// 2 to 4 flat discs on a flat background, with mild noise.
inline RgbImage render_blobs(Rng& rng, int size) {
  RgbImage img(size, size);
  const auto bg = detail::random_colour(rng);
  std::vector<std::array<double, 3>> px(static_cast<std::size_t>(size) * size, bg);
  const int discs = 2 + static_cast<int>(rng.below(3));
  for (int d = 0; d < discs; ++d) {
    const auto col = detail::distinct_colour(rng, bg);
    const double r = rng.uniform(0.10, 0.22) * size;
    const double cx = rng.uniform(r, size - r), cy = rng.uniform(r, size - r);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        if ((x + 0.5 - cx) * (x + 0.5 - cx) + (y + 0.5 - cy) * (y + 0.5 - cy) <= r * r)
          px[static_cast<std::size_t>(y) * size + x] = col;
  }
  for (std::size_t i = 0; i < px.size(); ++i)
    for (int c = 0; c < 3; ++c) img.data[3 * i + c] = detail::to_byte(px[i][c] + rng.uniform(-6, 6));
  return img;
}

/// Parallel two-colour bands at a random angle and period, with mild noise.
inline RgbImage render_stripes(Rng& rng, int size) {
  RgbImage img(size, size);
  const auto a = detail::random_colour(rng);
  const auto b = detail::distinct_colour(rng, a);
  const double angle = rng.uniform(0, 3.14159265358979323846);
  const double period = rng.uniform(0.09, 0.16) * size;
  const double phase = rng.uniform(0, period);
  const double ux = std::cos(angle), uy = std::sin(angle);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double t = std::fmod((x + 0.5) * ux + (y + 0.5) * uy + phase + 4.0 * size, period);
      const auto& col = t < period / 2 ? a : b;
      const std::size_t i = static_cast<std::size_t>(y) * size + x;
      for (int c = 0; c < 3; ++c) img.data[3 * i + c] = detail::to_byte(col[c] + rng.uniform(-6, 6));
    }
  return img;
}

/// Writes root/<split>/{BLOBS,STRIPES}/<split>_<nnnn>.png, alternating classes.
inline DatasetManifest generate_synthetic(const fs::path& root, const SyntheticOptions& o) {
  if (o.size < 8) throw ArgumentError("synthetic: image size must be >= 8");
  Rng master(o.seed);
  const std::pair<const char*, std::size_t> splits[] = {{"train", o.train}, {"val", o.val}, {"test", o.test}};
  for (const auto& [split, count] : splits) {
    Rng rng = master.split();
    for (const char* cls : {"BLOBS", "STRIPES"}) fs::create_directories(root / split / cls);
    for (std::size_t i = 0; i < count; ++i) {
      const bool stripes = i % 2 == 1;
      const RgbImage img = stripes ? render_stripes(rng, o.size) : render_blobs(rng, o.size);
      char name[64];
      std::snprintf(name, sizeof name, "%s_%04zu.png", split, i);
      save_png(root / split / (stripes ? "STRIPES" : "BLOBS") / name, img);
    }
  }
  return scan_dataset(root, o.seed);
}

}  // namespace imagegraph::pipeline
