#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "imagegraph/tape.hpp"
#include "test_support.hpp"

using namespace imagegraph;
using namespace imagegraph::nd;

namespace {

Tensor random_tensor(Rng& rng, std::size_t r, std::size_t c, double lo = -1, double hi = 1) {
  std::vector<double> v(r * c);
  for (auto& x : v) x = lo + (hi - lo) * rng.uniform();
  return Tensor::from(r, c, std::move(v));
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Reduces an op output to a scalar with fixed random weights so that every
// entry receives a distinct upstream gradient.
Tensor project(Tape& tape, const Tensor& out, const Tensor& weights) { return tape.sum(tape.mul(out, weights)); }

struct OpCase {
  const char* name;
  std::vector<Tensor> inputs;
  std::function<Tensor(Tape&)> op;
};

std::vector<OpCase> op_cases(Rng& rng) {
  std::vector<OpCase> cases;
  auto add_case = [&](const char* name, std::vector<Tensor> inputs, std::function<Tensor(Tape&)> op) {
    // Probe the output shape once to build the projection weights.
    Tape probe(false);
    const Tensor shape = op(probe);
    const Tensor w = random_tensor(rng, shape.rows(), shape.cols());
    cases.push_back({name, inputs, [op, w](Tape& t) { return project(t, op(t), w); }});
  };

  const Tensor a = random_tensor(rng, 3, 4), b = random_tensor(rng, 4, 2), c = random_tensor(rng, 3, 4);
  const Tensor bias = random_tensor(rng, 1, 4), s = random_tensor(rng, 1, 1);
  add_case("matmul", {a, b}, [=](Tape& t) { return t.matmul(a, b); });
  add_case("add", {a, c}, [=](Tape& t) { return t.add(a, c); });
  add_case("add_row", {a, bias}, [=](Tape& t) { return t.add_row(a, bias); });
  add_case("mul", {a, c}, [=](Tape& t) { return t.mul(a, c); });
  add_case("scale", {a}, [=](Tape& t) { return t.scale(a, -1.7); });
  add_case("mul_scalar", {a, s}, [=](Tape& t) { return t.mul_scalar(a, s); });
  const std::vector<double> coeffs = {0.5, -2.0, 3.0};
  add_case("scale_rows", {a}, [=](Tape& t) { return t.scale_rows(a, coeffs); });
  const Tensor a2 = random_tensor(rng, 2, 4), c2 = random_tensor(rng, 3, 1);
  add_case("concat_rows", {a, a2}, [=](Tape& t) { return t.concat({a, a2}, 0); });
  add_case("concat_cols", {a, c2}, [=](Tape& t) { return t.concat({a, c2}, 1); });
  add_case("relu", {a}, [=](Tape& t) { return t.relu(a); });
  add_case("leaky_relu", {a}, [=](Tape& t) { return t.leaky_relu(a, 0.2); });
  add_case("elu", {a}, [=](Tape& t) { return t.elu(a, 1.0); });
  add_case("dropout", {a}, [=](Tape& t) {
    Rng mask_rng(77);
    return t.dropout(a, 0.4, true, mask_rng);
  });
  add_case("log_softmax", {a}, [=](Tape& t) { return t.log_softmax(a); });
  const std::vector<int> gather = {2, 0, 2, 1};
  add_case("gather_rows", {a}, [=](Tape& t) { return t.gather_rows(a, gather); });
  const Tensor v = random_tensor(rng, 5, 3);
  const std::vector<int> ids = {0, 2, 0, 1, 2};
  add_case("scatter_sum", {v}, [=](Tape& t) { return t.scatter_sum(v, ids, 3); });
  add_case("scatter_mean", {v}, [=](Tape& t) { return t.scatter_mean(v, ids, 4); });
  add_case("scatter_max", {v}, [=](Tape& t) { return t.scatter_max(v, ids, 3); });
  const Tensor logits = random_tensor(rng, 5, 2, -3, 3);
  add_case("segment_softmax", {logits}, [=](Tape& t) { return t.segment_softmax(logits, ids, 3); });
  const Tensor x = random_tensor(rng, 4, 6), att = random_tensor(rng, 2, 3), hw = random_tensor(rng, 4, 2);
  add_case("block_dot", {x, att}, [=](Tape& t) { return t.block_dot(x, att); });
  add_case("scale_blocks", {x, hw}, [=](Tape& t) { return t.scale_blocks(x, hw); });
  add_case("block_mean", {x}, [=](Tape& t) { return t.block_mean(x, 2); });
  const std::vector<int> targets = {1, 0, 3};
  const std::vector<double> weights = {1.0, 2.0, 0.5, 3.0};
  cases.push_back({"nll_loss", {a}, [=](Tape& t) { return t.nll_loss(t.log_softmax(a), targets, weights); }});
  cases.push_back({"sum", {a}, [=](Tape& t) { return t.sum(t.mul(a, a)); }});
  return cases;
}

}  // namespace

// ---------------------------------------------------------------------------
// Forward values

TEST(TapeForward, MatmulWithIdentity) {
  Rng rng(1);
  const Tensor a = random_tensor(rng, 3, 3);
  const Tensor eye = Tensor::from(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tape tape;
  EXPECT_EQ(values(tape.matmul(a, eye)), values(a));
  EXPECT_EQ(values(tape.matmul(eye, a)), values(a));
}

TEST(TapeForward, MatmulSmallExample) {
  Tape tape;
  const Tensor a = Tensor::from(2, 3, {1, 2, 3, 4, 5, 6});
  const Tensor b = Tensor::from(3, 1, {1, 0, -1});
  EXPECT_EQ(values(tape.matmul(a, b)), (std::vector<double>{-2, -2}));
  EXPECT_THROW(tape.matmul(a, a), ShapeError);
}

TEST(TapeForward, Relu) {
  Tape tape;
  EXPECT_EQ(values(tape.relu(Tensor::from(1, 3, {-1, 0, 2}))), (std::vector<double>{0, 0, 2}));
}

TEST(TapeForward, LogSoftmaxOfZeros) {
  Tape tape;
  const Tensor out = tape.log_softmax(Tensor::from(1, 2, {0, 0}));
  EXPECT_NEAR(out(0, 0), -std::log(2.0), 1e-15);
  EXPECT_NEAR(out(0, 1), -std::log(2.0), 1e-15);
}

TEST(TapeForward, LogSoftmaxIsStableForLargeLogits) {
  Tape tape;
  const Tensor out = tape.log_softmax(Tensor::from(1, 2, {1000, 0}));
  EXPECT_NEAR(out(0, 0), 0.0, 1e-12);
  EXPECT_NEAR(out(0, 1), -1000.0, 1e-9);
}

TEST(TapeForward, ScatterSumExample) {
  Tape tape;
  const std::vector<int> ids = {0, 1, 0};
  const Tensor out = tape.scatter_sum(Tensor::from(3, 1, {1, 2, 3}), ids, 2);
  EXPECT_EQ(values(out), (std::vector<double>{4, 2}));
}

TEST(TapeForward, ScatterOpsMatchLoops) {
  Rng rng(2);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 1 + rng.below(20), c = 1 + rng.below(4), segs = 1 + rng.below(6);
    const Tensor v = random_tensor(rng, n, c);
    std::vector<int> ids(n);
    for (auto& i : ids) i = static_cast<int>(rng.below(segs));
    Tape tape;
    const Tensor sum = tape.scatter_sum(v, ids, segs);
    const Tensor mean = tape.scatter_mean(v, ids, segs);
    const Tensor max = tape.scatter_max(v, ids, segs);
    for (std::size_t s = 0; s < segs; ++s)
      for (std::size_t j = 0; j < c; ++j) {
        double total = 0, best = -INFINITY;
        int count = 0;
        for (std::size_t i = 0; i < n; ++i)
          if (ids[i] == static_cast<int>(s)) {
            total += v(i, j);
            best = std::max(best, v(i, j));
            ++count;
          }
        EXPECT_NEAR(sum(s, j), total, 1e-12);
        EXPECT_NEAR(mean(s, j), count ? total / count : 0.0, 1e-12);
        EXPECT_EQ(max(s, j), count ? best : 0.0);
      }
  }
}

TEST(TapeForward, ScatterRejectsBadIds) {
  Tape tape;
  const Tensor v = Tensor::from(2, 1, {1, 2});
  const std::vector<int> bad = {0, 3};
  const std::vector<int> short_ids = {0};
  EXPECT_THROW(tape.scatter_sum(v, bad, 2), ArgumentError);
  EXPECT_THROW(tape.scatter_sum(v, short_ids, 2), ShapeError);
}

TEST(TapeForward, SegmentSoftmaxExample) {
  Tape tape;
  const std::vector<int> ids = {0, 0};
  const Tensor out = tape.segment_softmax(Tensor::from(2, 1, {std::log(2.0), 0}), ids, 1);
  EXPECT_NEAR(out(0, 0), 2.0 / 3, 1e-15);
  EXPECT_NEAR(out(1, 0), 1.0 / 3, 1e-15);
}

TEST(TapeForward, SegmentSoftmaxSumsToOnePerSegment) {
  Rng rng(3);
  const std::size_t n = 30, segs = 7;
  const Tensor logits = random_tensor(rng, n, 3, -50, 50);
  std::vector<int> ids(n);
  for (auto& i : ids) i = static_cast<int>(rng.below(segs));
  Tape tape;
  const Tensor out = tape.segment_softmax(logits, ids, segs);
  const Tensor totals = tape.scatter_sum(out, ids, segs);
  for (std::size_t s = 0; s < segs; ++s) {
    const bool present = std::find(ids.begin(), ids.end(), static_cast<int>(s)) != ids.end();
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(totals(s, j), present ? 1.0 : 0.0, 1e-12);
  }
}

TEST(TapeForward, BlockOps) {
  Tape tape;
  // Two heads of width 2.
  const Tensor x = Tensor::from(1, 4, {1, 2, 3, 4});
  const Tensor a = Tensor::from(2, 2, {1, 1, 0, 2});
  EXPECT_EQ(values(tape.block_dot(x, a)), (std::vector<double>{3, 8}));
  EXPECT_EQ(values(tape.scale_blocks(x, Tensor::from(1, 2, {10, -1}))), (std::vector<double>{10, 20, -3, -4}));
  EXPECT_EQ(values(tape.block_mean(x, 2)), (std::vector<double>{2, 3}));
}

TEST(TapeForward, DropoutIsIdentityWhenNotTraining) {
  Tape tape;
  Rng rng(4);
  const Tensor x = random_tensor(rng, 4, 4);
  EXPECT_TRUE(tape.dropout(x, 0.5, false, rng).same(x));
  const Tensor y = tape.dropout(x, 0.5, true, rng);
  for (std::size_t i = 0; i < x.size(); ++i)
    EXPECT_TRUE(y.data()[i] == 0.0 || std::abs(y.data()[i] - 2 * x.data()[i]) < 1e-15);
  EXPECT_THROW(tape.dropout(x, 1.0, true, rng), ArgumentError);
}

TEST(TapeForward, NllLossWeightedMean) {
  Tape tape;
  const Tensor lp = Tensor::from(2, 2, {std::log(0.25), std::log(0.75), std::log(0.5), std::log(0.5)});
  const std::vector<int> targets = {1, 0};
  EXPECT_NEAR(tape.nll_loss(lp, targets).item(), -(std::log(0.75) + std::log(0.5)) / 2, 1e-15);
  const std::vector<double> w = {3.0, 1.0};
  EXPECT_NEAR(tape.nll_loss(lp, targets, w).item(), -(std::log(0.75) + 3 * std::log(0.5)) / 4, 1e-15);
}

// ---------------------------------------------------------------------------
// Backward

TEST(TapeBackward, ProductExample) {
  const Tensor x = Tensor::scalar(3, true), y = Tensor::scalar(4, true);
  Tape tape;
  tape.backward(tape.mul(x, y));
  EXPECT_EQ(x.grad()[0], 4.0);
  EXPECT_EQ(y.grad()[0], 3.0);
  EXPECT_EQ(tape.size(), 0u);
}

TEST(TapeBackward, ReluExample) {
  const Tensor x = Tensor::from(1, 2, {-1, 2}, true);
  Tape tape;
  tape.backward(tape.sum(tape.relu(x)));
  EXPECT_EQ(values(Tensor::from(1, 2, {x.grad()[0], x.grad()[1]})), (std::vector<double>{0, 1}));
}

TEST(TapeBackward, GradientsAccumulateUntilZeroed) {
  const Tensor x = Tensor::scalar(2, true);
  for (int i = 0; i < 2; ++i) {
    Tape tape;
    tape.backward(tape.mul(x, x));
  }
  EXPECT_EQ(x.grad()[0], 8.0);
  x.zero_grad();
  EXPECT_EQ(x.grad()[0], 0.0);
}

TEST(TapeBackward, SharedInputReceivesBothPaths) {
  const Tensor x = Tensor::scalar(1.5, true);
  Tape tape;
  const Tensor y = tape.add(tape.mul(x, x), tape.scale(x, 3));
  tape.backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 2 * 1.5 + 3);
}

TEST(TapeBackward, NonScalarLossThrows) {
  const Tensor x = Tensor::from(1, 2, {1, 2}, true);
  Tape tape;
  EXPECT_THROW(tape.backward(tape.relu(x)), ArgumentError);
}

TEST(TapeBackward, LossWithoutGradientsThrows) {
  const Tensor x = Tensor::from(1, 2, {1, 2});
  Tape tape;
  EXPECT_THROW(tape.backward(tape.sum(x)), ArgumentError);
}

TEST(TapeBackward, NonRecordingTapeStaysEmpty) {
  const Tensor x = Tensor::from(2, 2, {1, 2, 3, 4}, true);
  Tape tape(false);
  const Tensor y = tape.sum(tape.relu(tape.matmul(x, x)));
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_FALSE(y.requires_grad());
}

TEST(TapeBackward, DetachCutsHistory) {
  const Tensor x = Tensor::scalar(2, true);
  Tape tape;
  const Tensor d = tape.mul(x, x).detach();
  EXPECT_FALSE(d.requires_grad());
  EXPECT_EQ(d.item(), 4.0);
}

// ---------------------------------------------------------------------------
// Finite-difference checks

TEST(GradCheck, EveryOpOverFiftySeeds) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    for (const auto& c : op_cases(rng)) {
      const GradCheckReport r = grad_check(c.op, c.inputs, 1e-5);
      EXPECT_TRUE(r.passed) << c.name << " seed " << seed << " rel " << r.max_rel_error << " at input "
                            << r.worst_input << "[" << r.worst_index << "]";
    }
  }
}

TEST(GradCheck, ComposedNetwork) {
  Rng rng(9);
  const Tensor x = random_tensor(rng, 5, 3), w1 = random_tensor(rng, 3, 4), b1 = random_tensor(rng, 1, 4);
  const Tensor w2 = random_tensor(rng, 4, 2);
  const std::vector<int> ids = {0, 1, 1, 0, 1};
  const std::vector<int> targets = {1, 0};
  auto f = [&](Tape& t) {
    const Tensor h = t.elu(t.add_row(t.matmul(x, w1), b1));
    const Tensor pooled = t.scatter_mean(h, ids, 2);
    return t.nll_loss(t.log_softmax(t.matmul(pooled, w2)), targets);
  };
  const auto r = grad_check(f, {x, w1, b1, w2}, 1e-5);
  EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(GradCheck, BrokenRuleIsDetected) {
  // Square with a deliberately wrong backward rule (x instead of 2x).
  auto broken_square = [](Tape& t, const Tensor& x) {
    Tensor out = t.result(x.rows(), x.cols(), {x});
    for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] * x.data()[i];
    if (out.requires_grad()) {
      t.record([x, out] {
        for (std::size_t i = 0; i < x.size(); ++i) x.grad()[i] += out.grad()[i] * x.data()[i];
      });
    }
    return t.sum(out);
  };
  Rng rng(10);
  const auto r = grad_check(broken_square, random_tensor(rng, 2, 3, 0.5, 1.5), 1e-5);
  EXPECT_FALSE(r.passed);
  EXPECT_GT(r.max_rel_error, 0.4);
}

TEST(GradCheck, QuadraticPassesTightTolerance) {
  Rng rng(11);
  const auto r = grad_check([](Tape& t, const Tensor& x) { return t.sum(t.mul(x, x)); },
                            random_tensor(rng, 3, 3), 1e-7);
  EXPECT_TRUE(r.passed) << r.max_rel_error;
}

// ---------------------------------------------------------------------------
// Adam

TEST(Adam, FirstTwoStepsMoveByLearningRate) {
  const Tensor p = Tensor::scalar(1.0, true);
  AdamState st;
  st.lr = 0.1;
  st.weight_decay = 0.0;
  std::vector<Tensor> params = {p};
  p.grad()[0] = 0.5;
  adam_step(params, st);
  EXPECT_NEAR(p.item(), 0.9, 1e-7);
  adam_step(params, st);
  EXPECT_NEAR(p.item(), 0.8, 1e-7);
  EXPECT_EQ(st.step, 2u);
}

TEST(Adam, DecoupledWeightDecayAppliesFirst) {
  const Tensor p = Tensor::scalar(1.0, true);
  AdamState st;
  st.lr = 0.1;
  st.weight_decay = 0.01;
  std::vector<Tensor> params = {p};
  p.grad()[0] = 0.5;
  adam_step(params, st);
  EXPECT_NEAR(p.item(), 1.0 - 0.1 * 0.01 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-12);
}

TEST(Adam, ZeroGradientOnlyDecays) {
  const Tensor p = Tensor::from(1, 2, {2.0, -4.0}, true);
  AdamState st;
  st.lr = 0.5;
  st.weight_decay = 0.1;
  std::vector<Tensor> params = {p};
  adam_step(params, st);
  EXPECT_DOUBLE_EQ(p.data()[0], 2.0 * 0.95);
  EXPECT_DOUBLE_EQ(p.data()[1], -4.0 * 0.95);
}

TEST(Adam, ShapeMismatchThrows) {
  AdamState st;
  std::vector<Tensor> params = {Tensor::zeros(2, 2, true)};
  adam_step(params, st);
  std::vector<Tensor> other = {Tensor::zeros(3, 2, true)};
  EXPECT_THROW(adam_step(other, st), ShapeError);
  std::vector<Tensor> more = {Tensor::zeros(2, 2, true), Tensor::zeros(1, 1, true)};
  EXPECT_THROW(adam_step(more, st), ShapeError);
}

TEST(Adam, MinimisesQuadratic) {
  const Tensor p = Tensor::from(1, 3, {3, -2, 1}, true);
  AdamState st;
  st.lr = 0.05;
  st.weight_decay = 0;
  std::vector<Tensor> params = {p};
  for (int i = 0; i < 2000; ++i) {
    p.zero_grad();
    Tape tape;
    tape.backward(tape.sum(tape.mul(p, p)));
    adam_step(params, st);
  }
  for (double v : p.data()) EXPECT_NEAR(v, 0.0, 1e-2);
}

TEST(GlorotUniform, RespectsBound) {
  Rng rng(12);
  const Tensor w = glorot_uniform(30, 20, rng);
  const double bound = std::sqrt(6.0 / 50);
  double sum = 0;
  for (double v : w.data()) {
    EXPECT_LE(std::abs(v), bound);
    sum += v;
  }
  EXPECT_NEAR(sum / 600, 0.0, 0.05);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

Checkpoint sample_checkpoint(bool with_optimizer) {
  Rng rng(13);
  Checkpoint c;
  c.header = {{"arch", "gcn"}, {"k", "100"}};
  c.params.push_back({"conv0.weight", random_tensor(rng, 3, 4)});
  c.params.push_back({"conv0.bias", random_tensor(rng, 1, 4)});
  if (with_optimizer) {
    AdamState st;
    st.lr = 0.01;
    st.step = 7;
    for (const auto& p : c.params) {
      st.m.push_back(values(random_tensor(rng, p.tensor.rows(), p.tensor.cols())));
      st.v.push_back(values(random_tensor(rng, p.tensor.rows(), p.tensor.cols(), 0, 1)));
    }
    c.optimizer = st;
  }
  return c;
}

}  // namespace

TEST(CheckpointFormat, RoundTripIsExact) {
  for (bool opt : {false, true}) {
    const Checkpoint c = sample_checkpoint(opt);
    const Checkpoint d = decode_checkpoint(encode_checkpoint(c));
    EXPECT_EQ(d.header, c.header);
    ASSERT_EQ(d.params.size(), c.params.size());
    for (std::size_t i = 0; i < c.params.size(); ++i) {
      EXPECT_EQ(d.params[i].name, c.params[i].name);
      EXPECT_EQ(d.params[i].tensor.rows(), c.params[i].tensor.rows());
      EXPECT_EQ(values(d.params[i].tensor), values(c.params[i].tensor));
    }
    ASSERT_EQ(d.optimizer.has_value(), opt);
    if (opt) {
      EXPECT_EQ(d.optimizer->step, 7u);
      EXPECT_EQ(d.optimizer->lr, 0.01);
      EXPECT_EQ(d.optimizer->m, c.optimizer->m);
      EXPECT_EQ(d.optimizer->v, c.optimizer->v);
    }
  }
}

TEST(CheckpointFormat, EncodingIsDeterministic) {
  EXPECT_EQ(encode_checkpoint(sample_checkpoint(true)), encode_checkpoint(sample_checkpoint(true)));
}

TEST(CheckpointFormat, CorruptInputIsFormatError) {
  const auto bytes = encode_checkpoint(sample_checkpoint(true));
  auto bad_magic = bytes;
  bad_magic[1] = 'X';
  EXPECT_THROW(decode_checkpoint(bad_magic), FormatError);
  auto trailing = bytes;
  trailing.push_back(1);
  EXPECT_THROW(decode_checkpoint(trailing), FormatError);
  for (std::size_t n = 0; n < bytes.size(); n += 7) {
    const std::span<const std::uint8_t> prefix(bytes.data(), n);
    EXPECT_THROW(decode_checkpoint(prefix), FormatError) << n;
  }
}

TEST(CheckpointFormat, FileRoundTrip) {
  testing_support::TempDir dir("ckpt");
  const Checkpoint c = sample_checkpoint(false);
  save_checkpoint(dir.path() / "m.igwt", c);
  EXPECT_EQ(encode_checkpoint(load_checkpoint(dir.path() / "m.igwt")), encode_checkpoint(c));
  EXPECT_THROW(load_checkpoint(dir.path() / "missing.igwt"), IoError);
}
