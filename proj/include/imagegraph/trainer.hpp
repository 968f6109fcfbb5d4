#pragma once

// Training loop, evaluation metrics and their text / CSV renderings.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "imagegraph/error.hpp"
#include "imagegraph/gnn.hpp"
#include "imagegraph/graph.hpp"
#include "imagegraph/rng.hpp"
#include "imagegraph/tape.hpp"

namespace imagegraph {

struct DatasetSplit {
  std::vector<std::string> class_names;
  std::vector<FeatureGraph> train, val, test;

  std::size_t feature_dim() const {
    for (const auto* part : {&train, &val, &test})
      if (!part->empty()) return part->front().feature_dim;
    return 0;
  }

  void validate() const {
    if (train.empty()) throw DataError("dataset split: training set is empty");
    if (class_names.size() < 2) throw DataError("dataset split: at least two classes required");
    const std::size_t f = train.front().feature_dim;
    std::vector<bool> seen(class_names.size(), false);
    for (const auto* part : {&train, &val, &test})
      for (const auto& g : *part) {
        if (g.label < 0 || static_cast<std::size_t>(g.label) >= class_names.size())
          throw DataError("dataset split: graph with missing or out-of-range label");
        if (g.feature_dim != f) throw DataError("dataset split: graphs have differing feature dims");
      }
    for (const auto& g : train) seen[g.label] = true;
    for (std::size_t c = 0; c < seen.size(); ++c)
      if (!seen[c]) throw DataError("dataset split: class '" + class_names[c] + "' absent from training set");
  }
};

/// Index of `name` among `class_names`, or 1 when it is absent.
inline int resolve_positive_class(const std::vector<std::string>& class_names, const std::string& name) {
  for (std::size_t i = 0; i < class_names.size(); ++i)
    if (class_names[i] == name) return static_cast<int>(i);
  if (class_names.size() < 2) throw ArgumentError("positive class: fewer than two classes");
  return 1;
}

// ---------------------------------------------------------------------------
// Metrics

/// Area under the ROC curve as the Mann-Whitney statistic: the fraction of
/// (positive, negative) pairs where the positive scores higher, ties count 1/2.
inline double auc(std::span<const double> scores, std::span<const int> is_positive) {
  if (scores.size() != is_positive.size()) throw ArgumentError("auc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos = 0, neg = 0, rank_sum = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t t = i; t < j; ++t) {
      if (is_positive[order[t]]) {
        rank_sum += avg_rank;
        pos += 1;
      } else {
        neg += 1;
      }
    }
    i = j;
  }
  if (pos == 0 || neg == 0) throw UndefinedMetricError("auc: both classes must be present");
  return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

struct Metrics {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  double accuracy = 0;
  double sensitivity = std::numeric_limits<double>::quiet_NaN();  // NaN without positives
  std::optional<double> auc;                                       // empty with a single class

  std::size_t total() const { return tp + fp + tn + fn; }
};

/// Confusion counts are taken with respect to `positive`; accuracy counts
/// exact class matches. `positive_scores` feed the AUC.
inline Metrics compute_metrics(std::span<const int> predicted, std::span<const int> labels,
                               std::span<const double> positive_scores, int positive) {
  if (predicted.size() != labels.size() || positive_scores.size() != labels.size())
    throw ArgumentError("compute_metrics: input lengths differ");
  Metrics m;
  std::size_t correct = 0;
  std::vector<int> is_pos(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) throw ArgumentError("compute_metrics: unlabeled example");
    correct += predicted[i] == labels[i];
    const bool actual = labels[i] == positive, said = predicted[i] == positive;
    is_pos[i] = actual;
    if (actual && said) ++m.tp;
    else if (actual) ++m.fn;
    else if (said) ++m.fp;
    else ++m.tn;
  }
  if (!labels.empty()) m.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  if (m.tp + m.fn > 0) m.sensitivity = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn);
  try {
    m.auc = auc(positive_scores, is_pos);
  } catch (const UndefinedMetricError&) {
    m.auc.reset();
  }
  return m;
}

// ---------------------------------------------------------------------------
// Prediction

namespace detail {

inline std::vector<const FeatureGraph*> pick(std::span<const FeatureGraph> graphs, std::span<const std::size_t> idx) {
  std::vector<const FeatureGraph*> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(&graphs[i]);
  return out;
}

inline std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

/// Graph-level logits for a set of graphs (any classifier).
using LogitFn = std::function<Tensor(Tape&, std::span<const std::size_t>, bool, Rng&)>;

inline Metrics evaluate_with(const LogitFn& logits_of, std::span<const FeatureGraph> graphs, int positive,
                             std::size_t batch_size) {
  if (batch_size == 0) throw ArgumentError("evaluate: batch size must be >= 1");
  std::vector<int> pred, labels;
  std::vector<double> scores;
  Rng unused(0);
  const auto all = iota_indices(graphs.size());
  for (std::size_t s = 0; s < all.size(); s += batch_size) {
    const auto idx = std::span<const std::size_t>(all).subspan(s, std::min(batch_size, all.size() - s));
    Tape tape(false);
    const Tensor lp = tape.log_softmax(logits_of(tape, idx, false, unused));
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const int label = graphs[idx[r]].label;
      if (label < 0) throw ArgumentError("evaluate: unlabeled graph");
      std::size_t best = 0;
      for (std::size_t c = 1; c < lp.cols(); ++c)
        if (lp(r, c) > lp(r, best)) best = c;
      pred.push_back(static_cast<int>(best));
      labels.push_back(label);
      scores.push_back(positive >= 0 && static_cast<std::size_t>(positive) < lp.cols() ? std::exp(lp(r, positive))
                                                                                          : 0.0);
    }
  }
  return compute_metrics(pred, labels, scores, positive);
}

}  // namespace detail

inline Metrics evaluate(const Model& model, std::span<const FeatureGraph> graphs, int positive,
                        std::size_t batch_size = 32) {
  return detail::evaluate_with(
      [&](Tape& tape, std::span<const std::size_t> idx, bool training, Rng& rng) {
        const auto ptrs = detail::pick(graphs, idx);
        return model_forward(tape, model, batch_graphs(ptrs), training, rng).logits;
      },
      graphs, positive, batch_size);
}

inline Metrics evaluate(const Ensemble& ens, std::span<const FeatureGraph> graphs, int positive,
                        std::size_t batch_size = 32) {
  return detail::evaluate_with(
      [&](Tape& tape, std::span<const std::size_t> idx, bool training, Rng& rng) {
        const auto ptrs = detail::pick(graphs, idx);
        return ensemble_forward(tape, ens, batch_graphs(ptrs), training, rng);
      },
      graphs, positive, batch_size);
}

/// Mean cross-entropy of `model` over `graphs` in evaluation mode.
inline double mean_loss(const Model& model, std::span<const FeatureGraph> graphs) {
  if (graphs.empty()) throw ArgumentError("mean_loss: no graphs");
  Tape tape(false);
  Rng unused(0);
  const Tensor lp = tape.log_softmax(model_forward(tape, model, batch_graphs(graphs), false, unused).logits);
  std::vector<int> labels;
  for (const auto& g : graphs) labels.push_back(g.label);
  return tape.nll_loss(lp, labels).item();
}

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  double lr = 1e-3;
  double weight_decay = 1e-3;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  bool class_weights = false;  // inverse-frequency weighting of the loss
  std::function<void(std::size_t epoch, double train_loss, double val_accuracy)> on_epoch;
};

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0;
  double val_accuracy = 0;
  double seconds = 0;
};

struct TrainResult {
  Model model;  // parameters from the best validation epoch
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  nd::AdamState optimizer;  // state after the final epoch
};

struct EnsembleTrainResult {
  Ensemble ensemble;
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
};

namespace detail {

/// Shared loop: minibatch Adam on `params`, best-by-validation retention via
/// `snapshot`. Validation falls back to the training set when it is empty.
inline std::vector<EpochLog> train_loop(std::vector<Tensor> params, const LogitFn& logits_of,
                                        std::span<const FeatureGraph> train, std::span<const FeatureGraph> val,
                                        std::size_t num_classes, const TrainOptions& opt, Rng& shuffle_rng,
                                        Rng& dropout_rng, const std::function<Metrics(std::span<const FeatureGraph>)>& eval,
                                        const std::function<void()>& snapshot, std::size_t& best_epoch,
                                        nd::AdamState& adam) {
  if (train.empty()) throw DataError("train: training set is empty");
  if (opt.batch_size == 0) throw ArgumentError("train: batch size must be >= 1");
  std::vector<double> weights;
  if (opt.class_weights) {
    std::vector<double> counts(num_classes, 0.0);
    for (const auto& g : train) counts.at(static_cast<std::size_t>(g.label)) += 1;
    for (auto c : counts) weights.push_back(c > 0 ? static_cast<double>(train.size()) / (num_classes * c) : 0.0);
  }
  adam = nd::AdamState{};
  adam.lr = opt.lr;
  adam.weight_decay = opt.weight_decay;
  std::vector<EpochLog> log;
  double best_acc = -1;
  std::vector<std::size_t> order = iota_indices(train.size());
  for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0;
    for (std::size_t s = 0; s < order.size(); s += opt.batch_size) {
      const auto idx = std::span<const std::size_t>(order).subspan(s, std::min(opt.batch_size, order.size() - s));
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(train[i].label);
      for (auto& p : params) p.zero_grad();
      Tape tape;
      const Tensor loss = tape.nll_loss(tape.log_softmax(logits_of(tape, idx, true, dropout_rng)), labels, weights);
      tape.backward(loss);
      nd::adam_step(params, adam);
      loss_sum += loss.item() * static_cast<double>(idx.size());
    }
    const double val_acc = eval(val.empty() ? train : val).accuracy;
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log.push_back({epoch, loss_sum / static_cast<double>(train.size()), val_acc, seconds});
    if (val_acc > best_acc) {
      best_acc = val_acc;
      best_epoch = epoch;
      snapshot();
    }
    if (opt.on_epoch) opt.on_epoch(epoch, log.back().train_loss, val_acc);
  }
  if (opt.epochs == 0) snapshot();
  return log;
}

}  // namespace detail

/// Trains `initial` in place of a fresh model (the argument is not modified).
inline TrainResult train_model(const Model& initial, const DatasetSplit& split, const TrainOptions& opt) {
  split.validate();
  if (split.feature_dim() != initial.config.input_dim)
    throw ShapeError("train: dataset has " + std::to_string(split.feature_dim()) + " features, model expects " +
                     std::to_string(initial.config.input_dim));
  if (split.class_names.size() != initial.config.num_classes)
    throw ShapeError("train: dataset has " + std::to_string(split.class_names.size()) + " classes, model expects " +
                     std::to_string(initial.config.num_classes));
  Rng root(opt.seed);
  Rng shuffle_rng = root.split();
  Rng dropout_rng = root.split();
  TrainResult result;
  Model model = initial.clone();
  const std::span<const FeatureGraph> train = split.train;
  auto logits_of = [&](Tape& tape, std::span<const std::size_t> idx, bool training, Rng& rng) {
    return model_forward(tape, model, batch_graphs(detail::pick(train, idx)), training, rng).logits;
  };
  auto eval = [&](std::span<const FeatureGraph> graphs) { return evaluate(model, graphs, 1, opt.batch_size); };
  auto snapshot = [&] { result.model = model.clone(); };
  result.log = detail::train_loop(model.tensors(), logits_of, train, split.val, model.config.num_classes, opt,
                                  shuffle_rng, dropout_rng, eval, snapshot, result.best_epoch, result.optimizer);
  return result;
}

/// Initialises a model from `config` with the seed in `opt`, then trains it.
inline TrainResult train_model(const ModelConfig& config, const DatasetSplit& split, const TrainOptions& opt) {
  Rng init_rng(opt.seed ^ 0x1a2b3c4d5e6f7081ULL);
  return train_model(init_model(config, init_rng), split, opt);
}

/// Trains only the ensemble head; member embeddings are computed once.
inline EnsembleTrainResult train_ensemble(std::vector<Model> members, const DatasetSplit& split,
                                          const TrainOptions& opt) {
  split.validate();
  for (const auto& m : members)
    if (m.config.input_dim != split.feature_dim())
      throw ShapeError("ensemble: member expects " + std::to_string(m.config.input_dim) + " features, dataset has " +
                       std::to_string(split.feature_dim()));
  Rng root(opt.seed);
  Rng shuffle_rng = root.split();
  Rng dropout_rng = root.split();
  Rng init_rng = root.split();
  EnsembleTrainResult result;
  Ensemble ens = make_ensemble(std::move(members), split.class_names.size(), init_rng);

  auto embed_all = [&](std::span<const FeatureGraph> graphs) {
    std::vector<Tensor> parts;
    for (std::size_t s = 0; s < graphs.size(); s += 64)
      parts.push_back(ensemble_embed(ens, batch_graphs(graphs.subspan(s, std::min<std::size_t>(64, graphs.size() - s)))));
    Tape t(false);
    return parts.empty() ? Tensor() : t.concat(parts, 0);
  };
  const Tensor train_emb = embed_all(split.train);
  const Tensor val_emb = embed_all(split.val);

  auto logits_of = [&](Tape& tape, std::span<const std::size_t> idx, bool training, Rng& rng) {
    std::vector<int> rows(idx.begin(), idx.end());
    return ensemble_head_forward(tape, ens.head, tape.gather_rows(train_emb, rows), training, rng);
  };
  auto eval = [&](std::span<const FeatureGraph> graphs) {
    const Tensor& emb = graphs.data() == split.val.data() && !split.val.empty() ? val_emb : train_emb;
    return detail::evaluate_with(
        [&](Tape& tape, std::span<const std::size_t> idx, bool training, Rng& rng) {
          std::vector<int> rows(idx.begin(), idx.end());
          return ensemble_head_forward(tape, ens.head, tape.gather_rows(emb, rows), training, rng);
        },
        graphs, 1, opt.batch_size);
  };
  auto snapshot = [&] { result.ensemble = Ensemble{ens.members, ens.head.clone()}; };
  nd::AdamState adam;
  result.log = detail::train_loop(ens.head.tensors(), logits_of, split.train, split.val, split.class_names.size(), opt,
                                  shuffle_rng, dropout_rng, eval, snapshot, result.best_epoch, adam);
  return result;
}

// ---------------------------------------------------------------------------
// Reports

inline std::string format_real(double v, int digits = 4) {
  if (std::isnan(v)) return "\xE2\x80\x94";  // U+2014 marks an undefined value
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

/// CSV with header epoch,train_loss,val_acc, plus a seconds column when
/// `with_seconds` is set. Without it the output is reproducible byte for byte.
inline void write_epoch_csv(std::ostream& out, const std::vector<EpochLog>& log, bool with_seconds = false) {
  out << (with_seconds ? "epoch,train_loss,val_acc,seconds\n" : "epoch,train_loss,val_acc\n");
  char buf[128];
  for (const auto& e : log) {
    if (with_seconds)
      std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.6f\n", e.epoch, e.train_loss, e.val_accuracy, e.seconds);
    else
      std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", e.epoch, e.train_loss, e.val_accuracy);
    out << buf;
  }
}

/// Aligned table with one row per model: Model, Accuracy, AUC, Sensitivity.
inline std::string format_metrics_table(const std::vector<std::pair<std::string, Metrics>>& rows) {
  std::vector<std::vector<std::string>> cells = {{"Model", "Accuracy", "AUC", "Sensitivity"}};
  for (const auto& [name, m] : rows)
    cells.push_back({name, format_real(m.accuracy), m.auc ? format_real(*m.auc) : format_real(NAN),
                     format_real(m.sensitivity)});
  std::vector<std::size_t> width(4, 0);
  auto display_len = [](const std::string& s) {
    std::size_t n = 0;
    for (unsigned char c : s) n += (c & 0xC0) != 0x80;
    return n;
  };
  for (const auto& r : cells)
    for (std::size_t i = 0; i < 4; ++i) width[i] = std::max(width[i], display_len(r[i]));
  std::string out;
  for (const auto& r : cells) {
    for (std::size_t i = 0; i < 4; ++i) {
      out += r[i];
      if (i + 1 < 4) out += std::string(width[i] - display_len(r[i]) + 2, ' ');
    }
    out += '\n';
  }
  return out;
}

}  // namespace imagegraph
