// imagegraph: superpixel graphs and GNN classifiers from image folders.
//
// Exit status: 0 success, 1 bad arguments, 2 bad data, 3 internal error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "imagegraph/pipeline.hpp"

namespace fs = std::filesystem;
namespace pl = imagegraph::pipeline;

namespace {

struct Overrides {
  std::map<std::string, std::string> values;

  void add(CLI::App& app, const std::string& flag, const std::string& key, const std::string& help) {
    app.add_option_function<std::string>(
        flag, [this, key](const std::string& v) { values[key] = v; }, help);
  }
  void add_flag(CLI::App& app, const std::string& flag, const std::string& key, const std::string& help) {
    app.add_flag_function(
        flag, [this, key](std::int64_t n) { values[key] = n > 0 ? "true" : "false"; }, help);
  }
};

pl::PipelineConfig resolve_config(const std::optional<std::string>& config_file, const Overrides& o) {
  pl::PipelineConfig cfg;
  if (config_file) pl::apply_config_file(cfg, *config_file);
  for (const auto& [key, value] : o.values) pl::set_config_value(cfg, key, value);
  return cfg;
}

fs::path require_data(const pl::PipelineConfig& cfg, const char* what) {
  if (cfg.data.empty()) throw imagegraph::ArgumentError(std::string("--data is required (") + what + ")");
  return cfg.data;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Superpixel region graphs and graph neural network classifiers"};
  app.require_subcommand(1);

  std::optional<std::string> config_file;
  Overrides o;
  app.add_option("--config", config_file, "key = value configuration file (flags override it)");
  o.add(app, "--method", "method", "superpixel method: slic | disf");
  o.add(app, "--k", "k", "number of superpixels");
  o.add(app, "--provider", "provider", "node features: builtin | external:FILE");
  o.add(app, "--arch", "arch", "model: gcn | gat | gin");
  o.add(app, "--seed", "seed", "random seed");
  o.add(app, "--workers", "workers", "parallel image workers");
  o.add(app, "--out", "out", "base directory for run outputs");
  o.add(app, "--data", "data", "image dataset root, or graph dataset directory for train/ensemble");
  o.add(app, "--lr", "lr", "learning rate");
  o.add(app, "--weight-decay", "weight_decay", "decoupled weight decay");
  o.add(app, "--epochs", "epochs", "training epochs");
  o.add(app, "--batch-size", "batch_size", "graphs per minibatch");
  o.add(app, "--positive-class", "positive_class", "class name treated as positive for sensitivity and AUC");
  o.add(app, "--patch-side", "patch_side", "side of resized region patches");
  o.add(app, "--compactness", "compactness", "SLIC compactness");
  o.add(app, "--oversample", "oversample", "DISF initial seed factor");
  o.add_flag(app, "--use-edge-weights", "use_edge_weights", "scale GCN aggregation by region colour distance");
  o.add_flag(app, "--class-weights", "class_weights", "inverse-frequency class weights in the loss");
  o.add_flag(app, "--force", "force", "recompute even when a finished run exists");

  auto* generate = app.add_subcommand("generate", "write the synthetic blobs-vs-stripes image dataset");
  pl::SyntheticOptions synth;
  generate->add_option("--train", synth.train, "training images")->capture_default_str();
  generate->add_option("--val", synth.val, "validation images")->capture_default_str();
  generate->add_option("--test", synth.test, "test images")->capture_default_str();
  generate->add_option("--size", synth.size, "image side in pixels")->capture_default_str();

  auto* segment = app.add_subcommand("segment", "segment every image and time the segmentation");
  auto* build = app.add_subcommand("build", "convert images to region adjacency graphs");
  auto* train = app.add_subcommand("train", "train a GNN on a graph dataset");
  auto* ensemble = app.add_subcommand("ensemble", "train a classifier over frozen member embeddings");
  std::vector<std::string> members;
  ensemble->add_option("--member", members, "member checkpoint or train run directory (repeatable)")->required();
  auto* report = app.add_subcommand("report", "accuracy grid by k, architecture and feature provider");
  std::vector<std::string> report_dirs;
  std::string report_csv;
  report->add_option("dirs", report_dirs, "run directories or parents of run directories");
  report->add_option("--csv", report_csv, "also write the grid as CSV");

  for (auto* sub : {generate, segment, build, train, ensemble, report}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    const pl::PipelineConfig cfg = resolve_config(config_file, o);
    if (*generate) {
      synth.seed = cfg.seed;
      const fs::path root = require_data(cfg, "output root for the generated images");
      const auto m = pl::generate_synthetic(root, synth);
      std::cerr << "generate: " << m.entries.size() << " images under " << root.string() << "\n";
      std::cout << root.string() << "\n";
    } else if (*segment) {
      const auto m = pl::scan_dataset(require_data(cfg, "image dataset root"), cfg.seed);
      const auto r = pl::cmd_segment(cfg, m);
      if (!r.run_dir.empty()) std::cout << r.run_dir.string() << "\n";
      if (!r.errors.empty()) return 2;
    } else if (*build) {
      const auto m = pl::scan_dataset(require_data(cfg, "image dataset root"), cfg.seed);
      std::cout << pl::cmd_build(cfg, m).run_dir.string() << "\n";
    } else if (*train) {
      std::cout << pl::cmd_train(cfg, require_data(cfg, "graph dataset directory")).run_dir.string() << "\n";
    } else if (*ensemble) {
      std::vector<fs::path> paths(members.begin(), members.end());
      std::cout << pl::cmd_ensemble(cfg, paths, require_data(cfg, "graph dataset directory")).run_dir.string()
                << "\n";
    } else if (*report) {
      std::vector<fs::path> dirs(report_dirs.begin(), report_dirs.end());
      if (dirs.empty()) dirs.push_back(cfg.out);
      const auto rep = pl::collect_report(dirs);
      std::cout << pl::report_text(rep);
      if (!report_csv.empty()) pl::detail::write_text(report_csv, pl::report_csv(rep));
    }
  } catch (const imagegraph::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
