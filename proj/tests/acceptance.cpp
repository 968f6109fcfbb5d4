// Acceptance run: one PASS/FAIL/SKIP line per criterion, exit status 1 if any
// criterion fails. Criterion 7 needs IMAGEGRAPH_MNIST_DIR pointing at MNIST
// digits stored as PNG files under <dir>/<digit>/ or <dir>/<split>/<digit>/.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <deque>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "imagegraph/pipeline.hpp"
#include "test_support.hpp"

using namespace imagegraph;
namespace pl = imagegraph::pipeline;
namespace fs = std::filesystem;

namespace {

// Tolerances and thresholds.
constexpr double kGradTol = 1e-5;
constexpr int kGradSeeds = 50;
constexpr double kGradSeconds = 30;
constexpr double kOracleTol = 1e-12;
constexpr int kOracleGraphs = 100;
constexpr double kInvarianceTol = 1e-9;
constexpr int kInvarianceGraphs = 100;
constexpr int kSegmentationImages = 200;
constexpr double kSyntheticAccuracy = 0.95;
constexpr double kSyntheticSeconds = 300;
constexpr double kMnistAccuracy = 0.98;
constexpr int kTimingRepeats = 5;
constexpr double kEnsembleSlack = 0.02;
constexpr int kMetricSets = 1000;
constexpr double kAucTol = 1e-12;

enum class Status { Pass, Fail, Skip };

struct Outcome {
  Status status = Status::Fail;
  std::string detail;
};

Outcome pass_if(bool ok, std::string detail) { return {ok ? Status::Pass : Status::Fail, std::move(detail)}; }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string num(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

// ---------------------------------------------------------------------------
// Random inputs

FeatureGraph random_graph(Rng& rng, std::size_t f, std::size_t max_nodes) {
  FeatureGraph g;
  g.node_count = 1 + rng.below(max_nodes);
  for (std::uint32_t u = 0; u < g.node_count; ++u)
    for (std::uint32_t v = u + 1; v < g.node_count; ++v)
      if (rng.below(3) == 0) {
        g.edges.push_back({u, v});
        g.edge_weights.push_back(static_cast<float>(0.5 + rng.uniform() * 20));
      }
  g.feature_dim = f;
  g.features.resize(g.node_count * f);
  for (auto& x : g.features) x = static_cast<float>(rng.uniform() * 2 - 1);
  g.label = static_cast<int>(rng.below(2));
  return g;
}

Tensor random_tensor(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  std::vector<double> v(r * c);
  for (auto& x : v) x = scale * (rng.uniform() * 2 - 1);
  return Tensor::from(r, c, std::move(v));
}

ModelConfig small_config(Arch arch, std::size_t f) {
  ModelConfig c = ModelConfig::defaults(arch, f, 2);
  if (arch == Arch::GCN) c.widths = {5, 4};
  if (arch == Arch::GAT) {
    c.widths = {3, 4};
    c.heads = 2;
  }
  if (arch == Arch::GIN) {
    c.widths = {4, 3};
    c.head_hidden = 5;
  }
  c.dropout = 0;
  return c;
}

// Moves every parameter away from its initial value, including the zero
// output layer, so logits depend on all of them.
void perturb(const Model& m, Rng& rng, double scale) {
  for (const auto& p : m.params)
    for (auto& v : p.tensor.data()) v += scale * (rng.uniform() * 2 - 1);
}

std::vector<std::vector<int>> neighbours(const FeatureGraph& g) {
  std::vector<std::vector<int>> nb(g.node_count);
  for (const auto& e : g.edges) {
    nb[e.u].push_back(static_cast<int>(e.v));
    nb[e.v].push_back(static_cast<int>(e.u));
  }
  return nb;
}

std::vector<std::vector<double>> dense_xw(const FeatureGraph& g, const Tensor& w) {
  std::vector<std::vector<double>> out(g.node_count, std::vector<double>(w.cols(), 0.0));
  for (std::size_t i = 0; i < g.node_count; ++i)
    for (std::size_t k = 0; k < w.cols(); ++k)
      for (std::size_t j = 0; j < g.feature_dim; ++j) out[i][k] += g.features[i * g.feature_dim + j] * w(j, k);
  return out;
}

Tensor eval_logits(const Model& m, const GraphBatch& b) {
  Tape tape(false);
  Rng rng(0);
  return model_forward(tape, m, b, false, rng).logits;
}

// ---------------------------------------------------------------------------
// 1. Gradient fidelity

Outcome gradient_fidelity() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0;
  std::size_t checks = 0, failed = 0;
  std::string first_failure;
  auto check = [&](const std::string& what, const std::function<Tensor(Tape&)>& f, std::vector<Tensor> inputs) {
    const auto r = nd::grad_check(f, std::move(inputs), kGradTol);
    ++checks;
    worst = std::max(worst, r.max_rel_error);
    if (!r.passed) {
      ++failed;
      if (first_failure.empty()) first_failure = what + " rel " + num(r.max_rel_error);
    }
  };
  for (int seed = 0; seed < kGradSeeds; ++seed) {
    Rng rng(1000 + seed);
    std::vector<FeatureGraph> gs;
    for (int i = 0; i < 3; ++i) gs.push_back(random_graph(rng, 3, 6));
    const GraphBatch b = batch_graphs(gs);
    Tensor x = b.x.detach();
    // Weighted sum with fixed random coefficients turns any output into a scalar.
    std::map<std::pair<std::size_t, std::size_t>, Tensor> coeffs;
    auto reduce = [&rng, &coeffs](Tape& tape, const Tensor& out) {
      auto key = std::make_pair(out.rows(), out.cols());
      if (!coeffs.count(key)) coeffs[key] = random_tensor(rng, out.rows(), out.cols());
      return tape.sum(tape.mul(out, coeffs[key]));
    };
    const Adjacency adj = normalized_adjacency(b), wadj = normalized_adjacency(b, true), loops = self_loop_edges(b);

    const Tensor gw = random_tensor(rng, 3, 4), gb = random_tensor(rng, 1, 4);
    check("gcn", [&](Tape& t) { return reduce(t, gcn_layer(t, x, adj, gw, gb)); }, {x, gw, gb});
    check("gcn weighted", [&](Tape& t) { return reduce(t, gcn_layer(t, x, wadj, gw, gb)); }, {x, gw, gb});

    const Tensor aw = random_tensor(rng, 3, 6), as = random_tensor(rng, 2, 3), ad = random_tensor(rng, 2, 3);
    for (HeadMode mode : {HeadMode::Concat, HeadMode::Average})
      check("gat", [&](Tape& t) { return reduce(t, gat_layer(t, x, loops, aw, as, ad, mode)); }, {x, aw, as, ad});

    const Tensor eps = Tensor::scalar(rng.uniform() - 0.5);
    const Tensor w0 = random_tensor(rng, 3, 4), b0 = random_tensor(rng, 1, 4);
    const Tensor w1 = random_tensor(rng, 4, 2), b1 = random_tensor(rng, 1, 2);
    check("gin", [&](Tape& t) { return reduce(t, gin_layer(t, x, b, eps, w0, b0, w1, b1)); }, {x, eps, w0, b0, w1, b1});

    for (Readout r : {Readout::Add, Readout::Mean, Readout::Max})
      check("pool " + readout_name(r),
            [&](Tape& t) { return reduce(t, global_pool(t, x, b.graph_ids, b.num_graphs, r)); }, {x});

    check("dropout off", [&](Tape& t) { return reduce(t, t.dropout(x, 0.5, false, rng)); }, {x});

    const Tensor hw = random_tensor(rng, 3, 2), hb = random_tensor(rng, 1, 2);
    check("head",
          [&](Tape& t) {
            const Tensor pooled = global_pool(t, x, b.graph_ids, b.num_graphs, Readout::Mean);
            return t.nll_loss(t.log_softmax(linear(t, pooled, hw, hb)), b.labels);
          },
          {x, hw, hb});

    std::vector<Model> members;
    for (Arch arch : {Arch::GCN, Arch::GAT, Arch::GIN}) {
      const Model m = init_model(small_config(arch, 3), rng);
      perturb(m, rng, 0.05);
      check("model " + arch_name(arch),
            [&](Tape& t) {
              Rng unused(0);
              return t.nll_loss(t.log_softmax(model_forward(t, m, b, false, unused).logits), b.labels);
            },
            m.tensors());
      members.push_back(m);
    }
    const Ensemble e = make_ensemble(members, 2, rng);
    perturb(e.head, rng, 0.05);
    check("ensemble head",
          [&](Tape& t) {
            Rng unused(0);
            return t.nll_loss(t.log_softmax(ensemble_forward(t, e, b, false, unused)), b.labels);
          },
          e.head.tensors());
  }
  const double secs = seconds_since(t0);
  std::string detail = std::to_string(checks) + " checks over " + std::to_string(kGradSeeds) +
                       " seeds, max rel error " + num(worst) + ", " + num(secs, 3) + " s";
  if (!first_failure.empty()) detail += ", first failure: " + first_failure;
  return pass_if(failed == 0 && worst < kGradTol && secs < kGradSeconds, detail);
}

// ---------------------------------------------------------------------------
// 2. Layer outputs against loop oracles

Outcome oracle_equivalence() {
  Rng rng(2);
  double worst = 0;
  for (int t = 0; t < kOracleGraphs; ++t) {
    const FeatureGraph g = random_graph(rng, 3, 8);
    const std::vector<FeatureGraph> gs = {g};
    const GraphBatch b = batch_graphs(gs);
    const auto nb = neighbours(g);
    Tape tape(false);

    const Tensor w = random_tensor(rng, 3, 4), bias = random_tensor(rng, 1, 4);
    const Tensor gcn = gcn_layer(tape, b.x, normalized_adjacency(b), w, bias);
    const auto xw = dense_xw(g, w);
    for (std::size_t i = 0; i < g.node_count; ++i)
      for (std::size_t k = 0; k < 4; ++k) {
        const double di = 1.0 + nb[i].size();
        double v = xw[i][k] / di + bias(0, k);
        for (int j : nb[i]) v += xw[j][k] / std::sqrt(di * (1.0 + nb[j].size()));
        worst = std::max(worst, std::abs(gcn(i, k) - std::max(0.0, v)));
      }

    const std::size_t heads = 2, d = 3;
    const Tensor aw = random_tensor(rng, 3, heads * d), as = random_tensor(rng, heads, d), ad = random_tensor(rng, heads, d);
    const auto axw = dense_xw(g, aw);
    auto self_nb = nb;
    for (std::size_t i = 0; i < g.node_count; ++i) self_nb[i].push_back(static_cast<int>(i));
    auto elu = [](double v) { return v > 0 ? v : std::expm1(v); };
    for (HeadMode mode : {HeadMode::Concat, HeadMode::Average}) {
      const Tensor gat = gat_layer(tape, b.x, self_loop_edges(b), aw, as, ad, mode);
      for (std::size_t i = 0; i < g.node_count; ++i) {
        std::vector<double> avg(d, 0.0);
        for (std::size_t h = 0; h < heads; ++h) {
          std::vector<double> e;
          for (int j : self_nb[i]) {
            double s = 0;
            for (std::size_t k = 0; k < d; ++k) s += ad(h, k) * axw[i][h * d + k] + as(h, k) * axw[j][h * d + k];
            e.push_back(s > 0 ? s : 0.2 * s);
          }
          const double mx = *std::max_element(e.begin(), e.end());
          double z = 0;
          for (double v : e) z += std::exp(v - mx);
          for (std::size_t k = 0; k < d; ++k) {
            double agg = 0;
            for (std::size_t n = 0; n < self_nb[i].size(); ++n) agg += std::exp(e[n] - mx) / z * axw[self_nb[i][n]][h * d + k];
            if (mode == HeadMode::Concat) worst = std::max(worst, std::abs(gat(i, h * d + k) - elu(agg)));
            else avg[k] += agg / heads;
          }
        }
        if (mode == HeadMode::Average)
          for (std::size_t k = 0; k < d; ++k) worst = std::max(worst, std::abs(gat(i, k) - elu(avg[k])));
      }
    }

    const Tensor eps = Tensor::scalar(rng.uniform() - 0.5);
    const Tensor w0 = random_tensor(rng, 3, 4), b0 = random_tensor(rng, 1, 4);
    const Tensor w1 = random_tensor(rng, 4, 2), b1 = random_tensor(rng, 1, 2);
    const Tensor gin = gin_layer(tape, b.x, b, eps, w0, b0, w1, b1);
    for (std::size_t i = 0; i < g.node_count; ++i) {
      std::vector<double> h(3);
      for (std::size_t j = 0; j < 3; ++j) {
        h[j] = (1 + eps.item()) * g.features[i * 3 + j];
        for (int n : nb[i]) h[j] += g.features[n * 3 + j];
      }
      std::vector<double> hidden(4);
      for (std::size_t k = 0; k < 4; ++k) {
        double v = b0(0, k);
        for (std::size_t j = 0; j < 3; ++j) v += h[j] * w0(j, k);
        hidden[k] = std::max(0.0, v);
      }
      for (std::size_t k = 0; k < 2; ++k) {
        double v = b1(0, k);
        for (std::size_t j = 0; j < 4; ++j) v += hidden[j] * w1(j, k);
        worst = std::max(worst, std::abs(gin(i, k) - v));
      }
    }
  }
  return pass_if(worst <= kOracleTol,
                 std::to_string(kOracleGraphs) + " graphs, max abs difference " + num(worst));
}

// ---------------------------------------------------------------------------
// 3. Permutation and batching invariance

FeatureGraph permute(const FeatureGraph& g, const std::vector<std::uint32_t>& perm) {
  FeatureGraph p = g;
  std::vector<std::pair<GraphEdge, float>> edges;
  for (std::size_t e = 0; e < g.edges.size(); ++e) {
    std::uint32_t u = perm[g.edges[e].u], v = perm[g.edges[e].v];
    if (u > v) std::swap(u, v);
    edges.push_back({{u, v}, g.edge_weights[e]});
  }
  std::sort(edges.begin(), edges.end(),
            [](const auto& a, const auto& b) { return std::tie(a.first.u, a.first.v) < std::tie(b.first.u, b.first.v); });
  p.edges.clear();
  p.edge_weights.clear();
  for (const auto& [e, w] : edges) {
    p.edges.push_back(e);
    p.edge_weights.push_back(w);
  }
  for (std::size_t i = 0; i < g.node_count; ++i)
    for (std::size_t j = 0; j < g.feature_dim; ++j)
      p.features[perm[i] * g.feature_dim + j] = g.features[i * g.feature_dim + j];
  return p;
}

Outcome invariance() {
  Rng rng(3);
  double perm_worst = 0, batch_worst = 0;
  for (Arch arch : {Arch::GCN, Arch::GAT, Arch::GIN}) {
    ModelConfig cfg = small_config(arch, 3);
    cfg.use_edge_weights = arch == Arch::GCN;
    const Model m = init_model(cfg, rng);
    perturb(m, rng, 0.5);
    std::vector<FeatureGraph> gs;
    for (int t = 0; t < kInvarianceGraphs; ++t) gs.push_back(random_graph(rng, 3, 8));
    const Tensor together = eval_logits(m, batch_graphs(gs));
    for (std::size_t i = 0; i < gs.size(); ++i) {
      std::vector<std::uint32_t> perm(gs[i].node_count);
      std::iota(perm.begin(), perm.end(), 0u);
      rng.shuffle(std::span<std::uint32_t>(perm));
      const std::vector<FeatureGraph> one = {gs[i]}, permuted = {permute(gs[i], perm)};
      const Tensor alone = eval_logits(m, batch_graphs(one)), moved = eval_logits(m, batch_graphs(permuted));
      for (std::size_t c = 0; c < 2; ++c) {
        batch_worst = std::max(batch_worst, std::abs(together(i, c) - alone(0, c)));
        perm_worst = std::max(perm_worst, std::abs(moved(0, c) - alone(0, c)));
      }
    }
  }
  return pass_if(perm_worst <= kInvarianceTol && batch_worst <= kInvarianceTol,
                 std::to_string(kInvarianceGraphs) + " graphs per model, permutation " + num(perm_worst) +
                     ", batching " + num(batch_worst));
}

// ---------------------------------------------------------------------------
// 4. IFT and DISF

int components(const std::vector<int>& labels, int w, int h) {
  std::vector<char> seen(labels.size(), 0);
  int count = 0;
  for (std::size_t start = 0; start < labels.size(); ++start) {
    if (seen[start]) continue;
    ++count;
    std::deque<std::size_t> queue{start};
    seen[start] = 1;
    while (!queue.empty()) {
      const std::size_t p = queue.front();
      queue.pop_front();
      const int x = static_cast<int>(p % w), y = static_cast<int>(p / w);
      const int nx[4] = {x - 1, x + 1, x, x}, ny[4] = {y, y, y - 1, y + 1};
      for (int i = 0; i < 4; ++i) {
        if (nx[i] < 0 || ny[i] < 0 || nx[i] >= w || ny[i] >= h) continue;
        const std::size_t q = static_cast<std::size_t>(ny[i]) * w + nx[i];
        if (!seen[q] && labels[q] == labels[p]) {
          seen[q] = 1;
          queue.push_back(q);
        }
      }
    }
  }
  return count;
}

Outcome segmentation_correctness() {
  Rng rng(4);
  std::size_t seed_cost = 0, monotone = 0, count = 0, connected = 0, factor_one = 0;
  for (int t = 0; t < kSegmentationImages; ++t) {
    const int w = 16, h = 16;
    const LabImage img = testing_support::random_lab(rng, w, h, 2 + static_cast<int>(rng.below(6)));

    SeedSet seeds;
    std::set<std::pair<int, int>> used;
    const std::size_t n_seeds = 1 + rng.below(30);
    while (seeds.count() < n_seeds) {
      const int x = static_cast<int>(rng.below(w)), y = static_cast<int>(rng.below(h));
      if (used.insert({x, y}).second) seeds.positions.push_back({x, y});
    }
    const Forest f = ift_forest(img, seeds);
    bool ok = true;
    for (const auto& s : seeds.positions) ok &= f.cost[static_cast<std::size_t>(s.y) * w + s.x] == 0.0;
    seed_cost += !ok;
    ok = true;
    for (std::size_t p = 0; p < f.cost.size(); ++p)
      if (f.pred[p] >= 0) ok &= f.cost[p] >= f.cost[f.pred[p]] && f.labels[p] == f.labels[f.pred[p]];
    monotone += !ok;

    const std::size_t k = 1 + rng.below(40);
    const Segmentation seg = disf_segment(img, k);
    count += seg.region_count != static_cast<int>(k);
    connected += components(seg.labels, w, h) != seg.region_count;

    const Segmentation one = disf_segment(img, k, {1});
    factor_one += one.labels != ift_forest(img, init_grid_seeds(w, h, k)).labels;
  }
  const std::size_t bad = seed_cost + monotone + count + connected + factor_one;
  return pass_if(bad == 0, std::to_string(kSegmentationImages) + " images 16x16; failures: seed cost " +
                               std::to_string(seed_cost) + ", monotone " + std::to_string(monotone) + ", region count " +
                               std::to_string(count) + ", connectivity " + std::to_string(connected) +
                               ", factor-1 equality " + std::to_string(factor_one));
}

// ---------------------------------------------------------------------------
// 5. Region adjacency graphs

Outcome rag_correctness() {
  std::size_t images = 0, mismatches = 0;
  Rng rng(5);
  for (int w = 1; w <= 16; ++w)
    for (int h = 1; h <= 16; ++h) {
      const LabImage img = testing_support::random_lab(rng, w, h);
      std::vector<int> labels(static_cast<std::size_t>(w) * h);
      const std::size_t regions = 1 + rng.below(std::min<std::size_t>(12, labels.size()));
      for (auto& l : labels) l = static_cast<int>(rng.below(regions));
      const Segmentation seg = make_segmentation(labels, w, h, img);
      const FeatureGraph g = build_rag(seg, img);
      std::set<std::pair<int, int>> expect, got;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const int a = seg.at(x, y);
          if (x + 1 < w && a != seg.at(x + 1, y)) expect.insert(std::minmax(a, seg.at(x + 1, y)));
          if (y + 1 < h && a != seg.at(x, y + 1)) expect.insert(std::minmax(a, seg.at(x, y + 1)));
        }
      for (const auto& e : g.edges) got.insert({static_cast<int>(e.u), static_cast<int>(e.v)});
      ++images;
      mismatches += got != expect || got.size() != g.edges.size();
    }
  LabImage two(2, 2);
  two.data = {{0, 0, 0}, {20, 0, 0}, {0, 0, 0}, {20, 0, 0}};
  const FeatureGraph g = build_rag(make_segmentation({0, 1, 0, 1}, 2, 2, two), two);
  const bool example = g.edges.size() == 1 && g.edge_weights[0] == 20.0f;
  return pass_if(mismatches == 0 && example, std::to_string(images) + " images up to 16x16, " +
                                                  std::to_string(mismatches) + " edge-set mismatches; 2x2 weight " +
                                                  (g.edge_weights.empty() ? "none" : num(g.edge_weights[0], 17)));
}

// ---------------------------------------------------------------------------
// 6, 9, 11. End-to-end synthetic runs

struct SyntheticRun {
  fs::path dataset;
  std::vector<fs::path> members;  // gcn, gat, gin train runs
  std::vector<double> accuracy;
  double seconds = 0;
};

pl::PipelineConfig synthetic_config(const fs::path& out) {
  pl::PipelineConfig c;
  c.out = out;
  c.method = "disf";
  c.k = 10;
  c.provider = "builtin";
  c.epochs = 20;
  c.lr = 0.001;
  c.weight_decay = 0.001;
  c.positive_class = "STRIPES";
  return c;
}

SyntheticRun run_synthetic(const fs::path& root) {
  const auto t0 = std::chrono::steady_clock::now();
  pl::SyntheticOptions o;
  o.train = 200;
  o.val = 0;
  o.test = 50;
  const pl::DatasetManifest m = pl::generate_synthetic(root / "images", o);
  pl::PipelineConfig c = synthetic_config(root / "runs");
  std::ostringstream log;
  SyntheticRun r;
  r.dataset = pl::cmd_build(c, m, log).run_dir;
  for (const char* arch : {"gcn", "gat", "gin"}) {
    c.arch = arch;
    r.members.push_back(pl::cmd_train(c, r.dataset, log).run_dir);
    const auto j = nlohmann::json::parse(pl::detail::read_text(r.members.back() / "metrics.json"));
    r.accuracy.push_back(j.at("metrics").at("accuracy").get<double>());
  }
  r.seconds = seconds_since(t0);
  return r;
}

Outcome end_to_end(const SyntheticRun& r) {
  const double lowest = *std::min_element(r.accuracy.begin(), r.accuracy.end());
  return pass_if(lowest >= kSyntheticAccuracy && r.seconds < kSyntheticSeconds,
                 "test accuracy gcn " + num(r.accuracy[0]) + ", gat " + num(r.accuracy[1]) + ", gin " +
                     num(r.accuracy[2]) + "; " + num(r.seconds, 3) + " s");
}

bool same_parameters(const Model& a, const Model& b) {
  if (a.params.size() != b.params.size()) return false;
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    const auto x = a.params[i].tensor.data(), y = b.params[i].tensor.data();
    if (a.params[i].name != b.params[i].name || x.size() != y.size()) return false;
    if (std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) != 0) return false;
  }
  return true;
}

Outcome ensemble_contract(const SyntheticRun& r, const fs::path& out) {
  std::vector<std::string> hashes;
  for (const auto& run : r.members) hashes.push_back(pl::sha256_file(run / "model.igwt"));
  pl::PipelineConfig c = synthetic_config(out);
  std::ostringstream log;
  const fs::path dir = pl::cmd_ensemble(c, r.members, r.dataset, log).run_dir;
  const auto j = nlohmann::json::parse(pl::detail::read_text(dir / "metrics.json"));
  const double acc = j.at("metrics").at("accuracy").get<double>();
  const double best = *std::max_element(r.accuracy.begin(), r.accuracy.end());

  bool frozen = true;
  const Ensemble e = ensemble_from_checkpoint(nd::load_checkpoint(dir / "ensemble.igwt"));
  for (std::size_t i = 0; i < r.members.size(); ++i) {
    frozen &= pl::sha256_file(r.members[i] / "model.igwt") == hashes[i];
    frozen &= i < e.members.size() && same_parameters(e.members[i], load_model(r.members[i] / "model.igwt"));
  }
  return pass_if(acc >= best - kEnsembleSlack && frozen, "ensemble accuracy " + num(acc) + ", best member " +
                                                             num(best) + ", members " +
                                                             (frozen ? "bit-unchanged" : "CHANGED"));
}

// Hashes of every reproducible artifact of a synthetic run, keyed by role.
std::map<std::string, std::string> run_hashes(const SyntheticRun& r) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(r.dataset))
    if (e.is_regular_file()) out["graphs/" + fs::relative(e.path(), r.dataset).generic_string()] = pl::sha256_file(e.path());
  const char* names[] = {"gcn", "gat", "gin"};
  for (std::size_t i = 0; i < r.members.size(); ++i)
    for (const char* f : {"epochs.csv", "metrics.json", "metrics.txt", "model.igwt"})
      out[std::string(names[i]) + "/" + f] = pl::sha256_file(r.members[i] / f);
  return out;
}

Outcome determinism(const SyntheticRun& first, const fs::path& root) {
  const SyntheticRun second = run_synthetic(root);
  const auto a = run_hashes(first), b = run_hashes(second);
  std::size_t differing = 0;
  for (const auto& [name, hash] : a) differing += !b.count(name) || b.at(name) != hash;
  differing += b.size() > a.size() ? b.size() - a.size() : 0;
  return pass_if(differing == 0 && a.size() == b.size(),
                 std::to_string(a.size()) + " artifacts compared, " + std::to_string(differing) + " differ");
}

// ---------------------------------------------------------------------------
// 7. MNIST subset

std::vector<fs::path> digit_files(const fs::path& root, const std::string& digit) {
  std::vector<fs::path> out;
  std::vector<fs::path> dirs;
  if (fs::is_directory(root / digit)) dirs.push_back(root / digit);
  for (const char* split : {"train", "training", "test", "testing"})
    if (fs::is_directory(root / split / digit)) dirs.push_back(root / split / digit);
  for (const auto& d : dirs)
    for (const auto& e : fs::directory_iterator(d))
      if (e.is_regular_file() && pl::is_image_file(e.path())) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

Outcome mnist(const fs::path& work) {
  const char* env = std::getenv("IMAGEGRAPH_MNIST_DIR");
  if (!env || !*env) return {Status::Skip, "IMAGEGRAPH_MNIST_DIR not set"};
  const fs::path root = env;
  pl::DatasetManifest m;
  m.root = root;
  m.class_names = {"0", "1"};
  for (const std::string digit : {"0", "1"}) {
    auto files = digit_files(root, digit);
    if (files.size() < 350)
      return {Status::Fail, "need 350 images of digit " + digit + " under " + root.string() + ", found " +
                                std::to_string(files.size())};
    Rng rng(7);
    rng.shuffle(std::span<fs::path>(files));
    for (std::size_t i = 0; i < 350; ++i)
      m.entries.push_back({std::string(i < 250 ? "train" : "test") + "/" + digit + "/" + std::to_string(i), files[i],
                           digit, i < 250 ? "train" : "test"});
  }
  std::sort(m.entries.begin(), m.entries.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  pl::PipelineConfig c = synthetic_config(work);
  c.method = "slic";
  c.positive_class = "1";
  std::ostringstream log;
  const fs::path dataset = pl::cmd_build(c, m, log).run_dir;
  std::vector<fs::path> members;
  for (const char* arch : {"gcn", "gat", "gin"}) {
    c.arch = arch;
    members.push_back(pl::cmd_train(c, dataset, log).run_dir);
  }
  const fs::path dir = pl::cmd_ensemble(c, members, dataset, log).run_dir;
  const auto j = nlohmann::json::parse(pl::detail::read_text(dir / "metrics.json"));
  const double acc = j.at("metrics").at("accuracy").get<double>();
  return pass_if(acc >= kMnistAccuracy, "500 train / 200 test, ensemble accuracy " + num(acc));
}

// ---------------------------------------------------------------------------
// 8. Segmentation timing trend

Outcome timing_trend(const fs::path& images) {
  std::vector<LabImage> labs;
  for (const auto& e : pl::scan_dataset(images).entries)
    if (e.split == "test") labs.push_back(rgb_to_lab(load_image(e.path)));
  const std::vector<std::size_t> ks = {10, 100, 300};
  std::vector<double> slic(ks.size(), 0), disf(ks.size(), 0);
  for (std::size_t i = 0; i < ks.size(); ++i)
    for (const auto& lab : labs) {
      double best_slic = 1e300, best_disf = 1e300;
      for (int r = 0; r < kTimingRepeats; ++r) {
        auto t0 = std::chrono::steady_clock::now();
        slic_segment(lab, ks[i]);
        best_slic = std::min(best_slic, seconds_since(t0));
        t0 = std::chrono::steady_clock::now();
        disf_segment(lab, ks[i]);
        best_disf = std::min(best_disf, seconds_since(t0));
      }
      slic[i] += best_slic / static_cast<double>(labs.size());
      disf[i] += best_disf / static_cast<double>(labs.size());
    }
  bool ok = !labs.empty();
  std::string detail = std::to_string(labs.size()) + " images, mean ms slic/disf:";
  for (std::size_t i = 0; i < ks.size(); ++i) {
    ok &= disf[i] > slic[i];
    if (i > 0) ok &= slic[i] > slic[i - 1] && disf[i] > disf[i - 1];
    detail += " k=" + std::to_string(ks[i]) + " " + num(slic[i] * 1e3, 3) + "/" + num(disf[i] * 1e3, 3);
  }
  return pass_if(ok, detail);
}

// ---------------------------------------------------------------------------
// 10. Metrics against counting oracles

Outcome metrics_oracle() {
  Rng rng(10);
  std::size_t bad_counts = 0, bad_auc = 0;
  double auc_worst = 0;
  for (int t = 0; t < kMetricSets; ++t) {
    const std::size_t n = 1 + rng.below(40);
    std::vector<int> pred(n), labels(n);
    std::vector<double> scores(n);
    for (std::size_t i = 0; i < n; ++i) {
      pred[i] = static_cast<int>(rng.below(2));
      labels[i] = static_cast<int>(rng.below(2));
      scores[i] = rng.below(3) == 0 ? static_cast<double>(rng.below(4)) / 4 : rng.uniform();
    }
    const Metrics m = compute_metrics(pred, labels, scores, 1);
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (labels[i] == 1) {
        (pred[i] == 1 ? tp : fn)++;
      } else {
        (pred[i] == 1 ? fp : tn)++;
      }
    }
    bool ok = m.tp == tp && m.fp == fp && m.tn == tn && m.fn == fn;
    ok &= m.accuracy == static_cast<double>(tp + tn) / static_cast<double>(n);
    if (tp + fn > 0) ok &= m.sensitivity == static_cast<double>(tp) / static_cast<double>(tp + fn);
    else ok &= std::isnan(m.sensitivity);
    bad_counts += !ok;

    if (tp + fn > 0 && fp + tn > 0) {
      double num_pairs = 0, den = 0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
          if (labels[i] == 1 && labels[j] == 0) {
            den += 1;
            num_pairs += scores[i] > scores[j] ? 1.0 : scores[i] == scores[j] ? 0.5 : 0.0;
          }
      if (!m.auc) {
        ++bad_auc;
      } else {
        const double diff = std::abs(*m.auc - num_pairs / den);
        auc_worst = std::max(auc_worst, diff);
        bad_auc += diff > kAucTol;
      }
    } else {
      bad_auc += m.auc.has_value();
    }
  }
  return pass_if(bad_counts == 0 && bad_auc == 0, std::to_string(kMetricSets) + " prediction sets, count mismatches " +
                                                      std::to_string(bad_counts) + ", AUC mismatches " +
                                                      std::to_string(bad_auc) + " (max diff " + num(auc_worst) + ")");
}

}  // namespace

int main() {
  testing_support::TempDir work("acceptance");
  int failures = 0;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& fn) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {Status::Fail, std::string("exception: ") + e.what()};
    }
    const char* tag = o.status == Status::Pass ? "PASS" : o.status == Status::Skip ? "SKIP" : "FAIL";
    failures += o.status == Status::Fail;
    std::printf("criterion %2d %s  %s: %s\n", id, tag, name, o.detail.c_str());
    std::fflush(stdout);
  };

  report(1, "gradient fidelity", gradient_fidelity);
  report(2, "oracle equivalence", oracle_equivalence);
  report(3, "permutation and batching invariance", invariance);
  report(4, "IFT/DISF correctness", segmentation_correctness);
  report(5, "RAG correctness", rag_correctness);

  std::optional<SyntheticRun> synthetic;
  report(6, "end-to-end synthetic", [&] {
    synthetic = run_synthetic(work.path() / "first");
    return end_to_end(*synthetic);
  });
  report(7, "MNIST subset", [&] { return mnist(work.path() / "mnist"); });
  report(8, "timing trend", [&] { return timing_trend(work.path() / "first" / "images"); });
  report(9, "ensemble contract", [&] {
    if (!synthetic) return Outcome{Status::Fail, "criterion 6 run did not complete"};
    return ensemble_contract(*synthetic, work.path() / "first" / "runs");
  });
  report(10, "metrics oracle", metrics_oracle);
  report(11, "determinism", [&] {
    if (!synthetic) return Outcome{Status::Fail, "criterion 6 run did not complete"};
    return determinism(*synthetic, work.path() / "second");
  });
  return failures == 0 ? 0 : 1;
}
