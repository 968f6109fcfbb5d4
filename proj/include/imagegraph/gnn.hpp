#pragma once

// Graph batches, GCN / GAT / GIN message-passing layers, graph pooling, the
// three classifier architectures and the frozen-member ensemble head.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "imagegraph/error.hpp"
#include "imagegraph/graph.hpp"
#include "imagegraph/rng.hpp"
#include "imagegraph/tape.hpp"

namespace imagegraph {

using nd::Tape;
using nd::Tensor;

// ---------------------------------------------------------------------------
// Batching

/// Disjoint union of graphs. Undirected edges appear once per direction.
struct GraphBatch {
  Tensor x;                          // total_nodes x F
  std::vector<int> src, dst;         // directed edges
  std::vector<double> edge_weight;   // per directed edge, divided by the graph's max weight
  std::vector<int> graph_ids;        // per node
  std::vector<int> labels;           // per graph (-1 when unlabeled)
  std::size_t num_graphs = 0;

  std::size_t num_nodes() const { return graph_ids.size(); }
  std::size_t feature_dim() const { return x.cols(); }
};

inline GraphBatch batch_graphs(std::span<const FeatureGraph* const> graphs) {
  if (graphs.empty()) throw ArgumentError("batch_graphs: no graphs");
  const std::size_t f = graphs[0]->feature_dim;
  std::size_t total = 0;
  for (const auto* g : graphs) {
    if (g->feature_dim != f)
      throw ShapeError("batch_graphs: mixed feature dims " + std::to_string(f) + " and " +
                       std::to_string(g->feature_dim));
    if (g->node_count == 0) throw ArgumentError("batch_graphs: graph with no nodes");
    total += g->node_count;
  }
  GraphBatch b;
  b.num_graphs = graphs.size();
  std::vector<double> x;
  x.reserve(total * f);
  b.graph_ids.reserve(total);
  int offset = 0;
  for (std::size_t gi = 0; gi < graphs.size(); ++gi) {
    const FeatureGraph& g = *graphs[gi];
    x.insert(x.end(), g.features.begin(), g.features.end());
    b.graph_ids.insert(b.graph_ids.end(), g.node_count, static_cast<int>(gi));
    b.labels.push_back(g.label);
    float max_w = 0;
    for (float w : g.edge_weights) max_w = std::max(max_w, w);
    for (std::size_t e = 0; e < g.edges.size(); ++e) {
      const int u = offset + static_cast<int>(g.edges[e].u), v = offset + static_cast<int>(g.edges[e].v);
      const double w = max_w > 0 ? g.edge_weights[e] / static_cast<double>(max_w) : 1.0;
      b.src.push_back(u);
      b.dst.push_back(v);
      b.src.push_back(v);
      b.dst.push_back(u);
      b.edge_weight.push_back(w);
      b.edge_weight.push_back(w);
    }
    offset += static_cast<int>(g.node_count);
  }
  b.x = Tensor::from(total, f, std::move(x));
  return b;
}

inline GraphBatch batch_graphs(std::span<const FeatureGraph> graphs) {
  std::vector<const FeatureGraph*> ptrs;
  for (const auto& g : graphs) ptrs.push_back(&g);
  return batch_graphs(std::span<const FeatureGraph* const>(ptrs));
}

// ---------------------------------------------------------------------------
// Layers

/// Directed message edges with one coefficient each.
struct Adjacency {
  std::vector<int> src, dst;
  std::vector<double> coeff;
};

/// Self-loops first (one per node), then the batch edges; all coefficients 1.
inline Adjacency self_loop_edges(const GraphBatch& b) {
  Adjacency a;
  const auto n = static_cast<int>(b.num_nodes());
  for (int i = 0; i < n; ++i) {
    a.src.push_back(i);
    a.dst.push_back(i);
  }
  a.src.insert(a.src.end(), b.src.begin(), b.src.end());
  a.dst.insert(a.dst.end(), b.dst.begin(), b.dst.end());
  a.coeff.assign(a.src.size(), 1.0);
  return a;
}

/// Symmetric normalisation with self-loops: coefficient 1/sqrt(deg_i deg_j),
/// degrees counted after adding the loops. With `use_edge_weights` each
/// non-loop coefficient is further multiplied by the normalised edge weight.
inline Adjacency normalized_adjacency(const GraphBatch& b, bool use_edge_weights = false) {
  Adjacency a = self_loop_edges(b);
  std::vector<double> deg(b.num_nodes(), 1.0);
  for (int d : b.dst) deg[d] += 1.0;
  const std::size_t n = b.num_nodes();
  for (std::size_t e = 0; e < a.src.size(); ++e) {
    a.coeff[e] = 1.0 / std::sqrt(deg[a.src[e]] * deg[a.dst[e]]);
    if (use_edge_weights && e >= n) a.coeff[e] *= b.edge_weight[e - n];
  }
  return a;
}

inline Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b) {
  return tape.add_row(tape.matmul(x, w), b);
}

/// ReLU(A_hat X W + b). Pass `activate = false` for the pre-activation.
inline Tensor gcn_layer(Tape& tape, const Tensor& x, const Adjacency& adj, const Tensor& w, const Tensor& bias,
                        bool activate = true) {
  if (x.cols() != w.rows()) throw ShapeError("gcn_layer: features " + x.shape_string() + " vs weight " + w.shape_string());
  const Tensor h = tape.matmul(x, w);
  const Tensor msg = tape.scale_rows(tape.gather_rows(h, adj.src), adj.coeff);
  const Tensor out = tape.add_row(tape.scatter_sum(msg, adj.dst, x.rows()), bias);
  return activate ? tape.relu(out) : out;
}

enum class HeadMode { Concat, Average };

/// Multi-head attention over `edges` (normally self_loop_edges). W maps F_in to
/// heads*D; att_src and att_dst are heads x D. For an edge j -> i and head h:
///   e = LeakyReLU_0.2(att_dst[h] . (W x_i)_h + att_src[h] . (W x_j)_h)
///   alpha = softmax of e over the edges entering i
///   out_i = ELU(sum_j alpha (W x_j)_h), heads concatenated or averaged.
/// `alpha_out`, when given, receives the E x heads attention matrix.
inline Tensor gat_layer(Tape& tape, const Tensor& x, const Adjacency& edges, const Tensor& w, const Tensor& att_src,
                        const Tensor& att_dst, HeadMode mode, Tensor* alpha_out = nullptr) {
  const std::size_t heads = att_src.rows();
  if (heads == 0) throw ArgumentError("gat_layer: heads must be >= 1");
  if (x.cols() != w.rows() || w.cols() != heads * att_src.cols() || att_dst.rows() != heads ||
      att_dst.cols() != att_src.cols())
    throw ShapeError("gat_layer: features " + x.shape_string() + ", weight " + w.shape_string() + ", attention " +
                     att_src.shape_string() + "/" + att_dst.shape_string());
  const Tensor wh = tape.matmul(x, w);
  const Tensor s_src = tape.block_dot(wh, att_src);
  const Tensor s_dst = tape.block_dot(wh, att_dst);
  const Tensor logits =
      tape.leaky_relu(tape.add(tape.gather_rows(s_dst, edges.dst), tape.gather_rows(s_src, edges.src)), 0.2);
  const Tensor alpha = tape.segment_softmax(logits, edges.dst, x.rows());
#ifndef NDEBUG
  {
    std::vector<double> sums(x.rows() * heads, 0.0);
    for (std::size_t e = 0; e < edges.dst.size(); ++e)
      for (std::size_t h = 0; h < heads; ++h) sums[edges.dst[e] * heads + h] += alpha(e, h);
    for (double s : sums) assert(s == 0.0 || std::abs(s - 1.0) < 1e-9);
  }
#endif
  if (alpha_out) *alpha_out = alpha;
  const Tensor msg = tape.scale_blocks(tape.gather_rows(wh, edges.src), alpha);
  Tensor agg = tape.scatter_sum(msg, edges.dst, x.rows());
  if (mode == HeadMode::Average) agg = tape.block_mean(agg, heads);
  return tape.elu(agg);
}

/// MLP((1 + eps) x_v + sum of neighbour rows), MLP = Linear, ReLU, Linear.
inline Tensor gin_layer(Tape& tape, const Tensor& x, const GraphBatch& b, const Tensor& eps, const Tensor& w0,
                        const Tensor& b0, const Tensor& w1, const Tensor& b1) {
  if (x.cols() != w0.rows() || w0.cols() != w1.rows())
    throw ShapeError("gin_layer: features " + x.shape_string() + ", weights " + w0.shape_string() + " and " +
                     w1.shape_string());
  Tensor h = tape.add(x, tape.mul_scalar(x, eps));
  if (!b.src.empty()) h = tape.add(h, tape.scatter_sum(tape.gather_rows(x, b.src), b.dst, x.rows()));
  return linear(tape, tape.relu(linear(tape, h, w0, b0)), w1, b1);
}

enum class Readout { Add, Mean, Max };

inline Tensor global_pool(Tape& tape, const Tensor& x, std::span<const int> graph_ids, std::size_t num_graphs,
                          Readout mode) {
  switch (mode) {
    case Readout::Add: return tape.scatter_sum(x, graph_ids, num_graphs);
    case Readout::Mean: return tape.scatter_mean(x, graph_ids, num_graphs);
    case Readout::Max: return tape.scatter_max(x, graph_ids, num_graphs);
  }
  throw ArgumentError("global_pool: unknown readout");
}

// ---------------------------------------------------------------------------
// Model configuration

enum class Arch { GCN, GAT, GIN, Ensemble };

inline std::string arch_name(Arch a) {
  switch (a) {
    case Arch::GCN: return "gcn";
    case Arch::GAT: return "gat";
    case Arch::GIN: return "gin";
    case Arch::Ensemble: return "ensemble";
  }
  return "?";
}

inline Arch parse_arch(std::string_view s, bool allow_ensemble = false) {
  if (s == "gcn") return Arch::GCN;
  if (s == "gat") return Arch::GAT;
  if (s == "gin") return Arch::GIN;
  if (allow_ensemble && s == "ensemble") return Arch::Ensemble;
  throw ArgumentError("unknown architecture '" + std::string(s) + "' (valid: gcn, gat, gin" +
                      (allow_ensemble ? ", ensemble)" : ")"));
}

inline std::string readout_name(Readout r) {
  switch (r) {
    case Readout::Add: return "add";
    case Readout::Mean: return "mean";
    case Readout::Max: return "max";
  }
  return "?";
}

inline Readout parse_readout(std::string_view s) {
  if (s == "add") return Readout::Add;
  if (s == "mean") return Readout::Mean;
  if (s == "max") return Readout::Max;
  throw ArgumentError("unknown readout '" + std::string(s) + "' (valid: add, mean, max)");
}

struct ModelConfig {
  Arch arch = Arch::GCN;
  std::size_t input_dim = 0;
  std::size_t num_classes = 2;
  // GCN: per-layer widths. GAT: per-head width of each layer. GIN: MLP width of each layer.
  std::vector<std::size_t> widths;
  std::size_t heads = 1;
  double dropout = 0.0;
  std::size_t head_hidden = 0;  // GIN classifier hidden width
  Readout readout = Readout::Mean;
  bool use_edge_weights = false;

  /// Default architecture shapes for `arch`.
  static ModelConfig defaults(Arch arch, std::size_t input_dim, std::size_t num_classes) {
    ModelConfig c;
    c.arch = arch;
    c.input_dim = input_dim;
    c.num_classes = num_classes;
    switch (arch) {
      case Arch::GCN:
        c.widths = {128, 128, 128, 128};
        c.readout = Readout::Mean;
        break;
      case Arch::GAT:
        c.widths = {16, 128};
        c.heads = 8;
        c.dropout = 0.3;
        c.readout = Readout::Mean;
        break;
      case Arch::GIN:
        c.widths = {64, 64, 64};
        c.head_hidden = 64;
        c.dropout = 0.5;
        c.readout = Readout::Add;
        break;
      case Arch::Ensemble:
        c.dropout = 0.5;
        c.readout = Readout::Mean;
        break;
    }
    return c;
  }

  void validate() const {
    if (input_dim < 1) throw ArgumentError("model config: input_dim must be >= 1");
    if (num_classes < 2) throw ArgumentError("model config: num_classes must be >= 2");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ArgumentError("model config: dropout must be in [0, 1)");
    for (auto w : widths)
      if (w < 1) throw ArgumentError("model config: widths must be >= 1");
    if (arch != Arch::Ensemble && widths.empty()) throw ArgumentError("model config: at least one layer required");
    if (arch == Arch::GAT && (heads < 1 || widths.size() != 2))
      throw ArgumentError("model config: GAT needs heads >= 1 and exactly two layer widths");
    if (arch == Arch::GIN && head_hidden < 1) throw ArgumentError("model config: GIN head_hidden must be >= 1");
  }

  /// Width of the graph embedding fed to the final classifier.
  std::size_t embedding_dim() const {
    switch (arch) {
      case Arch::GCN:
      case Arch::GAT: return widths.back();
      case Arch::GIN: {
        std::size_t s = 0;
        for (auto w : widths) s += w;
        return s;
      }
      case Arch::Ensemble: return input_dim;
    }
    return 0;
  }

  std::map<std::string, std::string> to_header() const {
    std::string w;
    for (std::size_t i = 0; i < widths.size(); ++i) w += (i ? "," : "") + std::to_string(widths[i]);
    char drop[32];
    std::snprintf(drop, sizeof drop, "%.17g", dropout);
    return {{"arch", arch_name(arch)},
            {"input_dim", std::to_string(input_dim)},
            {"num_classes", std::to_string(num_classes)},
            {"widths", w},
            {"heads", std::to_string(heads)},
            {"dropout", drop},
            {"head_hidden", std::to_string(head_hidden)},
            {"readout", readout_name(readout)},
            {"use_edge_weights", use_edge_weights ? "1" : "0"}};
  }

  static ModelConfig from_header(const std::map<std::string, std::string>& h, const std::string& prefix = "") {
    auto get = [&](const std::string& key) -> const std::string& {
      const auto it = h.find(prefix + key);
      if (it == h.end()) throw FormatError("checkpoint header lacks '" + prefix + key + "'");
      return it->second;
    };
    auto to_size = [&](const std::string& key) {
      const std::string& s = get(key);
      char* end = nullptr;
      const unsigned long long v = std::strtoull(s.c_str(), &end, 10);
      if (s.empty() || *end != '\0') throw FormatError("checkpoint header '" + prefix + key + "' is not an integer");
      return static_cast<std::size_t>(v);
    };
    ModelConfig c;
    try {
      c.arch = parse_arch(get("arch"), true);
      c.readout = parse_readout(get("readout"));
    } catch (const ArgumentError& e) {
      throw FormatError(std::string("checkpoint header: ") + e.what());
    }
    c.input_dim = to_size("input_dim");
    c.num_classes = to_size("num_classes");
    c.heads = to_size("heads");
    c.head_hidden = to_size("head_hidden");
    c.dropout = std::strtod(get("dropout").c_str(), nullptr);
    c.use_edge_weights = get("use_edge_weights") == "1";
    const std::string& w = get("widths");
    std::size_t pos = 0;
    while (pos < w.size()) {
      std::size_t comma = w.find(',', pos);
      if (comma == std::string::npos) comma = w.size();
      c.widths.push_back(static_cast<std::size_t>(std::strtoull(w.substr(pos, comma - pos).c_str(), nullptr, 10)));
      pos = comma + 1;
    }
    try {
      c.validate();
    } catch (const ArgumentError& e) {
      throw FormatError(std::string("checkpoint header: ") + e.what());
    }
    return c;
  }
};

// ---------------------------------------------------------------------------
// Models

struct Model {
  ModelConfig config;
  std::vector<nd::NamedTensor> params;

  const Tensor& param(std::string_view name) const {
    for (const auto& p : params)
      if (p.name == name) return p.tensor;
    throw ArgumentError("model has no parameter '" + std::string(name) + "'");
  }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    for (const auto& p : params) out.push_back(p.tensor);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.tensor.size();
    return n;
  }

  /// Deep copy (parameters are otherwise shared handles).
  Model clone() const {
    Model m{config, {}};
    for (const auto& p : params) {
      const auto d = p.tensor.data();
      m.params.push_back({p.name, Tensor::from(p.tensor.rows(), p.tensor.cols(), {d.begin(), d.end()}, true)});
    }
    return m;
  }
};

namespace detail {

inline void add_linear(Model& m, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
  m.params.push_back({name + ".weight", nd::glorot_uniform(in, out, rng)});
  m.params.push_back({name + ".bias", Tensor::zeros(1, out, true)});
}

// Final classifier layer. Zero weights make every class equally likely at
// initialisation regardless of the embedding scale (sum readouts grow with
// node count).
inline void add_output_layer(Model& m, const std::string& name, std::size_t in, std::size_t out) {
  m.params.push_back({name + ".weight", Tensor::zeros(in, out, true)});
  m.params.push_back({name + ".bias", Tensor::zeros(1, out, true)});
}

}  // namespace detail

/// Fresh parameters: Glorot-uniform weights, zero biases, GIN eps = 0, and a
/// zero final classifier layer.
inline Model init_model(const ModelConfig& config, Rng& rng) {
  config.validate();
  Model m{config, {}};
  const std::size_t c = config.num_classes;
  switch (config.arch) {
    case Arch::GCN: {
      std::size_t in = config.input_dim;
      for (std::size_t i = 0; i < config.widths.size(); ++i) {
        detail::add_linear(m, "conv" + std::to_string(i), in, config.widths[i], rng);
        in = config.widths[i];
      }
      detail::add_output_layer(m, "head", in, c);
      break;
    }
    case Arch::GAT: {
      std::size_t in = config.input_dim;
      const std::size_t h = config.heads;
      for (std::size_t i = 0; i < 2; ++i) {
        const std::string p = "conv" + std::to_string(i);
        const std::size_t d = config.widths[i];
        m.params.push_back({p + ".weight", nd::glorot_uniform(in, h * d, rng)});
        m.params.push_back({p + ".att_src", nd::glorot_uniform(h, d, rng, d, 1)});
        m.params.push_back({p + ".att_dst", nd::glorot_uniform(h, d, rng, d, 1)});
        in = i == 0 ? h * d : d;
      }
      detail::add_output_layer(m, "head", in, c);
      break;
    }
    case Arch::GIN: {
      std::size_t in = config.input_dim;
      for (std::size_t i = 0; i < config.widths.size(); ++i) {
        const std::string p = "conv" + std::to_string(i);
        m.params.push_back({p + ".eps", Tensor::zeros(1, 1, true)});
        detail::add_linear(m, p + ".mlp0", in, config.widths[i], rng);
        detail::add_linear(m, p + ".mlp1", config.widths[i], config.widths[i], rng);
        in = config.widths[i];
      }
      detail::add_linear(m, "head0", config.embedding_dim(), config.head_hidden, rng);
      detail::add_output_layer(m, "head1", config.head_hidden, c);
      break;
    }
    case Arch::Ensemble:
      detail::add_output_layer(m, "head", config.input_dim, c);
      break;
  }
  return m;
}

struct ForwardOutput {
  Tensor logits;     // num_graphs x num_classes
  Tensor embedding;  // num_graphs x embedding_dim, the input of the classifier
};

/// Classifier head of an ensemble: dropout, then one linear layer.
inline Tensor ensemble_head_forward(Tape& tape, const Model& head, const Tensor& embeddings, bool training, Rng& rng) {
  if (embeddings.cols() != head.config.input_dim)
    throw ShapeError("ensemble head expects " + std::to_string(head.config.input_dim) + " inputs, got " +
                     embeddings.shape_string());
  const Tensor h = tape.dropout(embeddings, head.config.dropout, training, rng);
  return linear(tape, h, head.param("head.weight"), head.param("head.bias"));
}

inline ForwardOutput model_forward(Tape& tape, const Model& model, const GraphBatch& batch, bool training, Rng& rng) {
  const ModelConfig& cfg = model.config;
  if (cfg.arch == Arch::Ensemble) throw ArgumentError("model_forward: use ensemble_forward for ensembles");
  if (batch.feature_dim() != cfg.input_dim)
    throw ShapeError("model expects " + std::to_string(cfg.input_dim) + " input features, batch has " +
                     std::to_string(batch.feature_dim()));
  const auto& P = [&](const std::string& name) -> const Tensor& { return model.param(name); };
  ForwardOutput out;
  Tensor x = batch.x;
  switch (cfg.arch) {
    case Arch::GCN: {
      const Adjacency adj = normalized_adjacency(batch, cfg.use_edge_weights);
      for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
        const std::string p = "conv" + std::to_string(i);
        x = gcn_layer(tape, x, adj, P(p + ".weight"), P(p + ".bias"));
        x = tape.dropout(x, cfg.dropout, training, rng);
      }
      out.embedding = global_pool(tape, x, batch.graph_ids, batch.num_graphs, cfg.readout);
      out.logits = linear(tape, out.embedding, P("head.weight"), P("head.bias"));
      break;
    }
    case Arch::GAT: {
      const Adjacency edges = self_loop_edges(batch);
      for (std::size_t i = 0; i < 2; ++i) {
        const std::string p = "conv" + std::to_string(i);
        x = gat_layer(tape, x, edges, P(p + ".weight"), P(p + ".att_src"), P(p + ".att_dst"),
                      i == 0 ? HeadMode::Concat : HeadMode::Average);
        x = tape.dropout(x, cfg.dropout, training, rng);
      }
      out.embedding = global_pool(tape, x, batch.graph_ids, batch.num_graphs, cfg.readout);
      out.logits = linear(tape, out.embedding, P("head.weight"), P("head.bias"));
      break;
    }
    case Arch::GIN: {
      std::vector<Tensor> pooled;
      for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
        const std::string p = "conv" + std::to_string(i);
        x = tape.relu(gin_layer(tape, x, batch, P(p + ".eps"), P(p + ".mlp0.weight"), P(p + ".mlp0.bias"),
                                P(p + ".mlp1.weight"), P(p + ".mlp1.bias")));
        pooled.push_back(global_pool(tape, x, batch.graph_ids, batch.num_graphs, cfg.readout));
      }
      out.embedding = tape.concat(pooled, 1);
      Tensor h = tape.relu(linear(tape, out.embedding, P("head0.weight"), P("head0.bias")));
      h = tape.dropout(h, cfg.dropout, training, rng);
      out.logits = linear(tape, h, P("head1.weight"), P("head1.bias"));
      break;
    }
    case Arch::Ensemble: break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ensemble of frozen members

struct Ensemble {
  std::vector<Model> members;
  Model head;
};

inline Ensemble make_ensemble(std::vector<Model> members, std::size_t num_classes, Rng& rng) {
  if (members.empty()) throw ArgumentError("ensemble: at least one member required");
  const std::size_t f = members[0].config.input_dim;
  std::size_t dim = 0;
  for (const auto& m : members) {
    if (m.config.arch == Arch::Ensemble) throw ArgumentError("ensemble: members cannot be ensembles");
    if (m.config.input_dim != f)
      throw ArgumentError("ensemble: member feature dims differ (" + std::to_string(f) + " vs " +
                          std::to_string(m.config.input_dim) + ")");
    if (m.config.num_classes != num_classes) throw ArgumentError("ensemble: member class counts differ");
    dim += m.config.embedding_dim();
  }
  ModelConfig hc = ModelConfig::defaults(Arch::Ensemble, dim, num_classes);
  return Ensemble{std::move(members), init_model(hc, rng)};
}

/// Concatenated member embeddings, computed in evaluation mode with no
/// gradient recording, so members never receive updates.
inline Tensor ensemble_embed(const Ensemble& ens, const GraphBatch& batch) {
  Tape frozen(false);
  Rng unused(0);
  std::vector<Tensor> parts;
  for (const auto& m : ens.members) parts.push_back(model_forward(frozen, m, batch, false, unused).embedding);
  return frozen.concat(parts, 1).detach();
}

inline Tensor ensemble_forward(Tape& tape, const Ensemble& ens, const GraphBatch& batch, bool training, Rng& rng) {
  return ensemble_head_forward(tape, ens.head, ensemble_embed(ens, batch), training, rng);
}

// ---------------------------------------------------------------------------
// Checkpoints

inline nd::Checkpoint model_checkpoint(const Model& m, const std::optional<nd::AdamState>& opt = std::nullopt) {
  nd::Checkpoint c;
  c.header = m.config.to_header();
  c.header["kind"] = "model";
  c.params = m.params;
  c.optimizer = opt;
  return c;
}

inline Model model_from_checkpoint(const nd::Checkpoint& c) {
  const auto kind = c.header.find("kind");
  if (kind == c.header.end() || kind->second != "model") throw FormatError("checkpoint does not hold a single model");
  Model m{ModelConfig::from_header(c.header), c.params};
  Rng probe(0);
  const Model shape = init_model(m.config, probe);
  if (shape.params.size() != m.params.size()) throw FormatError("checkpoint parameters do not match its config");
  for (std::size_t i = 0; i < shape.params.size(); ++i) {
    const auto& a = shape.params[i];
    const auto& b = m.params[i];
    if (a.name != b.name || a.tensor.rows() != b.tensor.rows() || a.tensor.cols() != b.tensor.cols())
      throw FormatError("checkpoint parameter '" + b.name + "' does not match its config");
  }
  return m;
}

inline void save_model(const std::filesystem::path& path, const Model& m) {
  nd::save_checkpoint(path, model_checkpoint(m));
}

inline Model load_model(const std::filesystem::path& path) {
  try {
    return model_from_checkpoint(nd::load_checkpoint(path));
  } catch (const FormatError& e) {
    const std::string what = e.what();
    if (what.rfind(path.string(), 0) == 0) throw;
    throw FormatError(path.string() + ": " + what);
  }
}

/// Ensemble checkpoint: head under "head/", member i under "m<i>/".
inline nd::Checkpoint ensemble_checkpoint(const Ensemble& e) {
  nd::Checkpoint c;
  c.header["kind"] = "ensemble";
  c.header["members"] = std::to_string(e.members.size());
  for (const auto& [k, v] : e.head.config.to_header()) c.header["head/" + k] = v;
  for (const auto& p : e.head.params) c.params.push_back({"head/" + p.name, p.tensor});
  for (std::size_t i = 0; i < e.members.size(); ++i) {
    const std::string pre = "m" + std::to_string(i) + "/";
    for (const auto& [k, v] : e.members[i].config.to_header()) c.header[pre + k] = v;
    for (const auto& p : e.members[i].params) c.params.push_back({pre + p.name, p.tensor});
  }
  return c;
}

inline Ensemble ensemble_from_checkpoint(const nd::Checkpoint& c) {
  const auto kind = c.header.find("kind");
  if (kind == c.header.end() || kind->second != "ensemble") throw FormatError("checkpoint does not hold an ensemble");
  const auto members = c.header.find("members");
  if (members == c.header.end()) throw FormatError("ensemble checkpoint lacks a member count");
  const auto count = static_cast<std::size_t>(std::strtoull(members->second.c_str(), nullptr, 10));
  auto part = [&](const std::string& pre) {
    nd::Checkpoint sub;
    sub.header["kind"] = "model";
    for (const auto& [k, v] : c.header)
      if (k.rfind(pre, 0) == 0) sub.header[k.substr(pre.size())] = v;
    for (const auto& p : c.params)
      if (p.name.rfind(pre, 0) == 0) sub.params.push_back({p.name.substr(pre.size()), p.tensor});
    return model_from_checkpoint(sub);
  };
  Ensemble e;
  e.head = part("head/");
  for (std::size_t i = 0; i < count; ++i) e.members.push_back(part("m" + std::to_string(i) + "/"));
  return e;
}

}  // namespace imagegraph
