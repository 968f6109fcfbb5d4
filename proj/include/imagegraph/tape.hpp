#pragma once

// Dense 2-D tensors with tape-based reverse-mode differentiation, the
// segment operations that message passing needs, and the Adam optimiser.
//
// Every tensor is rows x cols (scalars are 1x1). Operations are members of
// Tape; when the tape is recording and an input requires gradients, the op
// appends its backward rule. Tape::backward replays the rules in reverse
// order and clears the tape.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "imagegraph/binary_io.hpp"
#include "imagegraph/error.hpp"
#include "imagegraph/imageio.hpp"
#include "imagegraph/rng.hpp"

namespace imagegraph::nd {

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::size_t rows, std::size_t cols, bool requires_grad = false) {
    return Tensor(rows, cols, std::vector<double>(rows * cols, 0.0), requires_grad);
  }
  static Tensor from(std::size_t rows, std::size_t cols, std::vector<double> values, bool requires_grad = false) {
    if (values.size() != rows * cols)
      throw ShapeError("Tensor: " + std::to_string(values.size()) + " values for shape " + shape_str(rows, cols));
    return Tensor(rows, cols, std::move(values), requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) { return from(1, 1, {v}, requires_grad); }

  bool defined() const { return impl_ != nullptr; }
  std::size_t rows() const { return impl_->rows; }
  std::size_t cols() const { return impl_->cols; }
  std::size_t size() const { return impl_->value.size(); }
  std::string shape_string() const { return shape_str(rows(), cols()); }

  // Tensors are shared handles: copies alias the same buffers.
  std::span<double> data() const { return impl_->value; }
  double& operator()(std::size_t r, std::size_t c) const { return impl_->value[r * impl_->cols + c]; }
  double item() const {
    if (size() != 1) throw ShapeError("Tensor::item on shape " + shape_string());
    return impl_->value[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) const {
    impl_->requires_grad = on;
    if (on) ensure_grad();
  }
  /// Gradient buffer (zeros until a backward pass reaches this tensor).
  std::span<double> grad() const {
    ensure_grad();
    return impl_->grad;
  }
  void zero_grad() const {
    ensure_grad();
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }

  /// Copy of the values with no gradient history.
  Tensor detach() const { return from(rows(), cols(), impl_->value, false); }
  bool same(const Tensor& o) const { return impl_ == o.impl_; }

  static std::string shape_str(std::size_t r, std::size_t c) {
    return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
  }

 private:
  friend class Tape;
  struct Impl {
    std::size_t rows = 0, cols = 0;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
  };

  Tensor(std::size_t rows, std::size_t cols, std::vector<double> values, bool requires_grad)
      : impl_(std::make_shared<Impl>()) {
    impl_->rows = rows;
    impl_->cols = cols;
    impl_->value = std::move(values);
    impl_->requires_grad = requires_grad;
    if (requires_grad) ensure_grad();
  }

  void ensure_grad() const {
    if (impl_->grad.size() != impl_->value.size()) impl_->grad.assign(impl_->value.size(), 0.0);
  }

  std::shared_ptr<Impl> impl_;
};

class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return steps_.size(); }

  // --- linear algebra ---------------------------------------------------------

  Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows()) throw ShapeError("matmul: " + a.shape_string() + " x " + b.shape_string());
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    Tensor out = result(n, m, {a, b});
    gemm(a.data().data(), b.data().data(), out.data().data(), n, k, m);
    if (out.requires_grad()) {
      record([a, b, out]() mutable {
        const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
        const double* g = out.impl_->grad.data();
        if (a.requires_grad()) {
          double* ga = a.grad().data();
          const double* bv = b.data().data();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0;
              for (std::size_t j = 0; j < m; ++j) s += g[i * m + j] * bv[p * m + j];
              ga[i * k + p] += s;
            }
        }
        if (b.requires_grad()) {
          double* gb = b.grad().data();
          const double* av = a.data().data();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double aip = av[i * k + p];
              if (aip == 0.0) continue;
              for (std::size_t j = 0; j < m; ++j) gb[p * m + j] += aip * g[i * m + j];
            }
        }
      });
    }
    return out;
  }

  Tensor add(const Tensor& a, const Tensor& b) {
    same_shape("add", a, b);
    Tensor out = result(a.rows(), a.cols(), {a, b});
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] + b.data()[i];
    if (out.requires_grad()) {
      record([a, b, out]() mutable {
        accumulate(a, out.impl_->grad);
        accumulate(b, out.impl_->grad);
      });
    }
    return out;
  }

  /// a + bias, where bias is 1 x cols and is added to every row.
  Tensor add_row(const Tensor& a, const Tensor& bias) {
    if (bias.rows() != 1 || bias.cols() != a.cols())
      throw ShapeError("add_row: " + a.shape_string() + " + " + bias.shape_string());
    Tensor out = result(a.rows(), a.cols(), {a, bias});
    const std::size_t c = a.cols();
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] + bias.data()[i % c];
    if (out.requires_grad()) {
      record([a, bias, out]() mutable {
        accumulate(a, out.impl_->grad);
        if (bias.requires_grad()) {
          auto gb = bias.grad();
          const std::size_t c = bias.cols();
          for (std::size_t i = 0; i < out.size(); ++i) gb[i % c] += out.impl_->grad[i];
        }
      });
    }
    return out;
  }

  /// Elementwise product.
  Tensor mul(const Tensor& a, const Tensor& b) {
    same_shape("mul", a, b);
    Tensor out = result(a.rows(), a.cols(), {a, b});
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (out.requires_grad()) {
      record([a, b, out]() mutable {
        const auto& g = out.impl_->grad;
        if (a.requires_grad()) {
          auto ga = a.grad();
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.data()[i];
        }
        if (b.requires_grad()) {
          auto gb = b.grad();
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.data()[i];
        }
      });
    }
    return out;
  }

  Tensor scale(const Tensor& a, double factor) {
    Tensor out = result(a.rows(), a.cols(), {a});
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] * factor;
    if (out.requires_grad()) {
      record([a, out, factor]() mutable {
        if (!a.requires_grad()) return;
        auto ga = a.grad();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += out.impl_->grad[i] * factor;
      });
    }
    return out;
  }

  /// a * s for a 1x1 tensor s.
  Tensor mul_scalar(const Tensor& a, const Tensor& s) {
    if (s.size() != 1) throw ShapeError("mul_scalar: scalar operand has shape " + s.shape_string());
    Tensor out = result(a.rows(), a.cols(), {a, s});
    const double sv = s.data()[0];
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] * sv;
    if (out.requires_grad()) {
      record([a, s, out]() mutable {
        const auto& g = out.impl_->grad;
        if (a.requires_grad()) {
          auto ga = a.grad();
          const double sv = s.data()[0];
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * sv;
        }
        if (s.requires_grad()) {
          double acc = 0;
          for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * a.data()[i];
          s.grad()[0] += acc;
        }
      });
    }
    return out;
  }

  /// Multiplies row i by the constant coeffs[i].
  Tensor scale_rows(const Tensor& a, std::span<const double> coeffs) {
    if (coeffs.size() != a.rows()) throw ShapeError("scale_rows: coefficient count differs from rows of " + a.shape_string());
    Tensor out = result(a.rows(), a.cols(), {a});
    const std::size_t c = a.cols();
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] * coeffs[i / c];
    if (out.requires_grad()) {
      record([a, out, coeffs = std::vector<double>(coeffs.begin(), coeffs.end())]() mutable {
        if (!a.requires_grad()) return;
        auto ga = a.grad();
        const std::size_t c = a.cols();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += out.impl_->grad[i] * coeffs[i / c];
      });
    }
    return out;
  }

  /// Concatenation along axis 0 (stack rows) or axis 1 (side by side).
  Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no operands");
    if (axis != 0 && axis != 1) throw ShapeError("concat: axis must be 0 or 1");
    std::size_t rows = 0, cols = 0;
    for (const auto& p : parts) {
      if (axis == 1) {
        if (p.rows() != parts[0].rows())
          throw ShapeError("concat: " + parts[0].shape_string() + " vs " + p.shape_string());
        cols += p.cols();
      } else {
        if (p.cols() != parts[0].cols())
          throw ShapeError("concat: " + parts[0].shape_string() + " vs " + p.shape_string());
        rows += p.rows();
      }
    }
    if (axis == 1) rows = parts[0].rows();
    else cols = parts[0].cols();
    Tensor out = result(rows, cols, parts);
    std::size_t offset = 0;
    for (const auto& p : parts) {
      for (std::size_t r = 0; r < p.rows(); ++r)
        for (std::size_t c = 0; c < p.cols(); ++c) {
          if (axis == 1) out(r, offset + c) = p(r, c);
          else out(offset + r, c) = p(r, c);
        }
      offset += axis == 1 ? p.cols() : p.rows();
    }
    if (out.requires_grad()) {
      record([parts, out, axis]() mutable {
        std::size_t offset = 0;
        const std::size_t oc = out.cols();
        for (auto& p : parts) {
          if (p.requires_grad()) {
            auto gp = p.grad();
            for (std::size_t r = 0; r < p.rows(); ++r)
              for (std::size_t c = 0; c < p.cols(); ++c) {
                const std::size_t src = axis == 1 ? r * oc + offset + c : (offset + r) * oc + c;
                gp[r * p.cols() + c] += out.impl_->grad[src];
              }
          }
          offset += axis == 1 ? p.cols() : p.rows();
        }
      });
    }
    return out;
  }

  // --- activations -------------------------------------------------------------

  Tensor relu(const Tensor& a) { return leaky_relu(a, 0.0); }

  Tensor leaky_relu(const Tensor& a, double slope) {
    Tensor out = result(a.rows(), a.cols(), {a});
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double v = a.data()[i];
      out.data()[i] = v > 0 ? v : slope * v;
    }
    if (out.requires_grad()) {
      record([a, out, slope]() mutable {
        if (!a.requires_grad()) return;
        auto ga = a.grad();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += out.impl_->grad[i] * (a.data()[i] > 0 ? 1.0 : slope);
      });
    }
    return out;
  }

  Tensor elu(const Tensor& a, double alpha = 1.0) {
    Tensor out = result(a.rows(), a.cols(), {a});
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double v = a.data()[i];
      out.data()[i] = v > 0 ? v : alpha * std::expm1(v);
    }
    if (out.requires_grad()) {
      record([a, out, alpha]() mutable {
        if (!a.requires_grad()) return;
        auto ga = a.grad();
        for (std::size_t i = 0; i < ga.size(); ++i) {
          const double d = a.data()[i] > 0 ? 1.0 : out.data()[i] + alpha;
          ga[i] += out.impl_->grad[i] * d;
        }
      });
    }
    return out;
  }

  /// Inverted dropout: kept entries are scaled by 1/(1-p). Identity when not training.
  Tensor dropout(const Tensor& a, double p, bool training, Rng& rng) {
    if (!(p >= 0.0 && p < 1.0)) throw ArgumentError("dropout: p must be in [0, 1)");
    if (!training || p == 0.0) return a;
    std::vector<double> mask(a.size());
    const double keep_scale = 1.0 / (1.0 - p);
    for (auto& m : mask) m = rng.uniform() >= p ? keep_scale : 0.0;
    Tensor out = result(a.rows(), a.cols(), {a});
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] * mask[i];
    if (out.requires_grad()) {
      record([a, out, mask = std::move(mask)]() mutable {
        if (!a.requires_grad()) return;
        auto ga = a.grad();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += out.impl_->grad[i] * mask[i];
      });
    }
    return out;
  }

  /// Row-wise log-softmax (axis 1).
  Tensor log_softmax(const Tensor& a) {
    Tensor out = result(a.rows(), a.cols(), {a});
    const std::size_t c = a.cols();
    for (std::size_t r = 0; r < a.rows(); ++r) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, a(r, j));
      double s = 0;
      for (std::size_t j = 0; j < c; ++j) s += std::exp(a(r, j) - mx);
      const double lse = mx + std::log(s);
      for (std::size_t j = 0; j < c; ++j) out(r, j) = a(r, j) - lse;
    }
    if (out.requires_grad()) {
      record([a, out]() mutable {
        if (!a.requires_grad()) return;
        auto ga = a.grad();
        const auto& g = out.impl_->grad;
        const std::size_t c = a.cols();
        for (std::size_t r = 0; r < a.rows(); ++r) {
          double gs = 0;
          for (std::size_t j = 0; j < c; ++j) gs += g[r * c + j];
          for (std::size_t j = 0; j < c; ++j) ga[r * c + j] += g[r * c + j] - std::exp(out(r, j)) * gs;
        }
      });
    }
    return out;
  }

  // --- gather / scatter ----------------------------------------------------------

  /// Row i of the result is row index[i] of a.
  Tensor gather_rows(const Tensor& a, std::span<const int> index) {
    const std::size_t c = a.cols();
    for (int i : index)
      if (i < 0 || static_cast<std::size_t>(i) >= a.rows())
        throw ArgumentError("gather_rows: index " + std::to_string(i) + " out of range for " + a.shape_string());
    Tensor out = result(index.size(), c, {a});
    for (std::size_t r = 0; r < index.size(); ++r)
      std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(index[r] * c), c,
                  out.data().begin() + static_cast<std::ptrdiff_t>(r * c));
    if (out.requires_grad()) {
      record([a, out, index = std::vector<int>(index.begin(), index.end())]() mutable {
        if (!a.requires_grad()) return;
        auto ga = a.grad();
        const std::size_t c = a.cols();
        for (std::size_t r = 0; r < index.size(); ++r)
          for (std::size_t j = 0; j < c; ++j) ga[index[r] * c + j] += out.impl_->grad[r * c + j];
      });
    }
    return out;
  }

  /// Row s of the result is the sum of rows of `values` whose id is s.
  Tensor scatter_sum(const Tensor& values, std::span<const int> ids, std::size_t num_segments) {
    check_ids("scatter_sum", values, ids, num_segments);
    const std::size_t c = values.cols();
    Tensor out = result(num_segments, c, {values});
    for (std::size_t r = 0; r < ids.size(); ++r)
      for (std::size_t j = 0; j < c; ++j) out.data()[ids[r] * c + j] += values.data()[r * c + j];
    if (out.requires_grad()) {
      record([values, out, ids = std::vector<int>(ids.begin(), ids.end())]() mutable {
        if (!values.requires_grad()) return;
        auto gv = values.grad();
        const std::size_t c = values.cols();
        for (std::size_t r = 0; r < ids.size(); ++r)
          for (std::size_t j = 0; j < c; ++j) gv[r * c + j] += out.impl_->grad[ids[r] * c + j];
      });
    }
    return out;
  }

  /// Per-segment mean; empty segments give zero rows.
  Tensor scatter_mean(const Tensor& values, std::span<const int> ids, std::size_t num_segments) {
    check_ids("scatter_mean", values, ids, num_segments);
    std::vector<double> counts(num_segments, 0.0);
    for (int id : ids) counts[id] += 1.0;
    for (auto& c : counts) c = c > 0 ? 1.0 / c : 0.0;
    return scale_rows(scatter_sum(values, ids, num_segments), counts);
  }

  /// Per-segment column-wise maximum; empty segments give zero rows. The
  /// gradient flows to the first row attaining the maximum.
  Tensor scatter_max(const Tensor& values, std::span<const int> ids, std::size_t num_segments) {
    check_ids("scatter_max", values, ids, num_segments);
    const std::size_t c = values.cols();
    std::vector<int> argmax(num_segments * c, -1);
    for (std::size_t r = 0; r < ids.size(); ++r)
      for (std::size_t j = 0; j < c; ++j) {
        int& best = argmax[ids[r] * c + j];
        if (best < 0 || values.data()[r * c + j] > values.data()[best * c + j]) best = static_cast<int>(r);
      }
    Tensor out = result(num_segments, c, {values});
    for (std::size_t i = 0; i < argmax.size(); ++i)
      out.data()[i] = argmax[i] < 0 ? 0.0 : values.data()[argmax[i] * c + i % c];
    if (out.requires_grad()) {
      record([values, out, argmax = std::move(argmax)]() mutable {
        if (!values.requires_grad()) return;
        auto gv = values.grad();
        const std::size_t c = values.cols();
        for (std::size_t i = 0; i < argmax.size(); ++i)
          if (argmax[i] >= 0) gv[argmax[i] * c + i % c] += out.impl_->grad[i];
      });
    }
    return out;
  }

  /// Softmax over the rows sharing a segment id, independently per column.
  Tensor segment_softmax(const Tensor& logits, std::span<const int> ids, std::size_t num_segments) {
    check_ids("segment_softmax", logits, ids, num_segments);
    const std::size_t c = logits.cols();
    std::vector<double> mx(num_segments * c, -std::numeric_limits<double>::infinity());
    for (std::size_t r = 0; r < ids.size(); ++r)
      for (std::size_t j = 0; j < c; ++j) mx[ids[r] * c + j] = std::max(mx[ids[r] * c + j], logits(r, j));
    std::vector<double> denom(num_segments * c, 0.0);
    Tensor out = result(logits.rows(), c, {logits});
    for (std::size_t r = 0; r < ids.size(); ++r)
      for (std::size_t j = 0; j < c; ++j) {
        const double e = std::exp(logits(r, j) - mx[ids[r] * c + j]);
        out(r, j) = e;
        denom[ids[r] * c + j] += e;
      }
    for (std::size_t r = 0; r < ids.size(); ++r)
      for (std::size_t j = 0; j < c; ++j) out(r, j) /= denom[ids[r] * c + j];
    if (out.requires_grad()) {
      record([logits, out, num_segments, ids = std::vector<int>(ids.begin(), ids.end())]() mutable {
        if (!logits.requires_grad()) return;
        const std::size_t c = logits.cols();
        const auto& g = out.impl_->grad;
        std::vector<double> dot(num_segments * c, 0.0);
        for (std::size_t r = 0; r < ids.size(); ++r)
          for (std::size_t j = 0; j < c; ++j) dot[ids[r] * c + j] += g[r * c + j] * out(r, j);
        auto gl = logits.grad();
        for (std::size_t r = 0; r < ids.size(); ++r)
          for (std::size_t j = 0; j < c; ++j) gl[r * c + j] += out(r, j) * (g[r * c + j] - dot[ids[r] * c + j]);
      });
    }
    return out;
  }

  // --- multi-head helpers ------------------------------------------------------

  /// For x = [N x heads*D] and a = [heads x D]: out[n, h] = <x[n, h*D:(h+1)*D], a[h]>.
  Tensor block_dot(const Tensor& x, const Tensor& a) {
    const std::size_t heads = a.rows(), d = a.cols();
    if (x.cols() != heads * d) throw ShapeError("block_dot: " + x.shape_string() + " with " + a.shape_string());
    Tensor out = result(x.rows(), heads, {x, a});
    for (std::size_t n = 0; n < x.rows(); ++n)
      for (std::size_t h = 0; h < heads; ++h) {
        double s = 0;
        for (std::size_t k = 0; k < d; ++k) s += x(n, h * d + k) * a(h, k);
        out(n, h) = s;
      }
    if (out.requires_grad()) {
      record([x, a, out]() mutable {
        const std::size_t heads = a.rows(), d = a.cols();
        const auto& g = out.impl_->grad;
        std::span<double> gx, ga;
        if (x.requires_grad()) gx = x.grad();
        if (a.requires_grad()) ga = a.grad();
        for (std::size_t n = 0; n < x.rows(); ++n)
          for (std::size_t h = 0; h < heads; ++h) {
            const double gn = g[n * heads + h];
            for (std::size_t k = 0; k < d; ++k) {
              if (!gx.empty()) gx[n * heads * d + h * d + k] += gn * a(h, k);
              if (!ga.empty()) ga[h * d + k] += gn * x(n, h * d + k);
            }
          }
      });
    }
    return out;
  }

  /// For x = [E x heads*D] and w = [E x heads]: scales each head block of row e by w[e, h].
  Tensor scale_blocks(const Tensor& x, const Tensor& w) {
    const std::size_t heads = w.cols();
    if (x.rows() != w.rows() || heads == 0 || x.cols() % heads != 0)
      throw ShapeError("scale_blocks: " + x.shape_string() + " with " + w.shape_string());
    const std::size_t d = x.cols() / heads;
    Tensor out = result(x.rows(), x.cols(), {x, w});
    for (std::size_t e = 0; e < x.rows(); ++e)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t k = 0; k < d; ++k) out(e, h * d + k) = x(e, h * d + k) * w(e, h);
    if (out.requires_grad()) {
      record([x, w, out, d]() mutable {
        const std::size_t heads = w.cols();
        const auto& g = out.impl_->grad;
        std::span<double> gx, gw;
        if (x.requires_grad()) gx = x.grad();
        if (w.requires_grad()) gw = w.grad();
        for (std::size_t e = 0; e < x.rows(); ++e)
          for (std::size_t h = 0; h < heads; ++h) {
            double acc = 0;
            for (std::size_t k = 0; k < d; ++k) {
              const std::size_t i = e * heads * d + h * d + k;
              if (!gx.empty()) gx[i] += g[i] * w(e, h);
              acc += g[i] * x(e, h * d + k);
            }
            if (!gw.empty()) gw[e * heads + h] += acc;
          }
      });
    }
    return out;
  }

  /// Averages the `heads` column blocks of x: [N x heads*D] -> [N x D].
  Tensor block_mean(const Tensor& x, std::size_t heads) {
    if (heads == 0 || x.cols() % heads != 0) throw ShapeError("block_mean: " + x.shape_string());
    const std::size_t d = x.cols() / heads;
    Tensor out = result(x.rows(), d, {x});
    for (std::size_t n = 0; n < x.rows(); ++n)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t k = 0; k < d; ++k) out(n, k) += x(n, h * d + k) / static_cast<double>(heads);
    if (out.requires_grad()) {
      record([x, out, heads, d]() mutable {
        if (!x.requires_grad()) return;
        auto gx = x.grad();
        for (std::size_t n = 0; n < x.rows(); ++n)
          for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t k = 0; k < d; ++k)
              gx[n * heads * d + h * d + k] += out.impl_->grad[n * d + k] / static_cast<double>(heads);
      });
    }
    return out;
  }

  // --- reductions and losses --------------------------------------------------

  Tensor sum(const Tensor& a) {
    Tensor out = result(1, 1, {a});
    double s = 0;
    for (double v : a.data()) s += v;
    out.data()[0] = s;
    if (out.requires_grad()) {
      record([a, out]() mutable {
        if (!a.requires_grad()) return;
        for (auto& g : a.grad()) g += out.impl_->grad[0];
      });
    }
    return out;
  }

  /// Mean negative log-likelihood of `targets` under row-wise log-probabilities.
  /// With class weights the mean is weighted (sum w_t * nll / sum w_t).
  Tensor nll_loss(const Tensor& log_probs, std::span<const int> targets, std::span<const double> class_weights = {}) {
    if (targets.size() != log_probs.rows())
      throw ShapeError("nll_loss: " + std::to_string(targets.size()) + " targets for " + log_probs.shape_string());
    const std::size_t c = log_probs.cols();
    std::vector<double> w(targets.size());
    double total = 0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= c)
        throw ArgumentError("nll_loss: target " + std::to_string(targets[i]) + " out of range");
      w[i] = class_weights.empty() ? 1.0 : class_weights[targets[i]];
      total += w[i];
    }
    Tensor out = result(1, 1, {log_probs});
    double loss = 0;
    for (std::size_t i = 0; i < targets.size(); ++i) loss -= w[i] * log_probs(i, targets[i]);
    out.data()[0] = loss / total;
    if (out.requires_grad()) {
      record([log_probs, out, w = std::move(w), total,
              targets = std::vector<int>(targets.begin(), targets.end())]() mutable {
        if (!log_probs.requires_grad()) return;
        auto g = log_probs.grad();
        const std::size_t c = log_probs.cols();
        for (std::size_t i = 0; i < targets.size(); ++i) g[i * c + targets[i]] -= out.impl_->grad[0] * w[i] / total;
      });
    }
    return out;
  }

  // --- differentiation ---------------------------------------------------------

  /// Populates gradients of every tensor that requires them and clears the tape.
  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1)
      throw ArgumentError("backward: loss must be a scalar, got " + (loss.defined() ? loss.shape_string() : "undefined"));
    if (!loss.requires_grad()) {
      steps_.clear();
      throw ArgumentError("backward: loss does not depend on any tensor that requires gradients");
    }
    loss.grad()[0] += 1.0;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    steps_.clear();
  }

  void clear() { steps_.clear(); }

  /// Appends a custom backward rule. Used by tests to inject broken rules.
  void record(std::function<void()> fn) { steps_.push_back(std::move(fn)); }

  /// Output tensor for a custom op with the given inputs.
  Tensor result(std::size_t rows, std::size_t cols, std::initializer_list<Tensor> inputs) {
    bool needs = false;
    for (const auto& t : inputs) needs = needs || t.requires_grad();
    return Tensor::zeros(rows, cols, recording_ && needs);
  }
  Tensor result(std::size_t rows, std::size_t cols, const std::vector<Tensor>& inputs) {
    bool needs = false;
    for (const auto& t : inputs) needs = needs || t.requires_grad();
    return Tensor::zeros(rows, cols, recording_ && needs);
  }

 private:
  static void gemm(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = a[i * k + p];
        if (aip == 0.0) continue;
        const double* brow = b + p * m;
        double* crow = c + i * m;
        for (std::size_t j = 0; j < m; ++j) crow[j] += aip * brow[j];
      }
  }

  static void accumulate(const Tensor& t, const std::vector<double>& g) {
    if (!t.requires_grad()) return;
    auto gt = t.grad();
    for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
  }

  static void same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
      throw ShapeError(std::string(op) + ": shapes " + a.shape_string() + " and " + b.shape_string() + " differ");
  }

  static void check_ids(const char* op, const Tensor& values, std::span<const int> ids, std::size_t num_segments) {
    if (ids.size() != values.rows())
      throw ShapeError(std::string(op) + ": " + std::to_string(ids.size()) + " ids for " + values.shape_string());
    for (int id : ids)
      if (id < 0 || static_cast<std::size_t>(id) >= num_segments)
        throw ArgumentError(std::string(op) + ": segment id " + std::to_string(id) + " out of range [0, " +
                            std::to_string(num_segments) + ")");
  }

  bool recording_;
  std::vector<std::function<void()>> steps_;
};

// ---------------------------------------------------------------------------
// Initialisation

/// Glorot/Xavier uniform: U(-b, b) with b = sqrt(6 / (fan_in + fan_out)).
inline Tensor glorot_uniform(std::size_t rows, std::size_t cols, Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from(rows, cols, std::move(v), true);
}

inline Tensor glorot_uniform(std::size_t rows, std::size_t cols, Rng& rng) {
  return glorot_uniform(rows, cols, rng, rows, cols);
}

// ---------------------------------------------------------------------------
// Adam with decoupled weight decay

struct AdamState {
  double lr = 1e-3;
  double weight_decay = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m, v;
};

/// One optimisation step using the gradients stored on `params`:
/// p <- p - lr*wd*p, then the bias-corrected Adam update.
inline void adam_step(std::span<Tensor> params, AdamState& state) {
  if (state.m.empty() && state.step == 0) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), 0.0);
      state.v.emplace_back(p.size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: parameter count differs from optimiser state");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (state.m[i].size() != params[i].size() || state.v[i].size() != params[i].size())
      throw ShapeError("adam_step: moment shape differs from parameter " + std::to_string(i) + " " +
                       params[i].shape_string());
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].data();
    auto g = params[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      p[j] -= state.lr * state.weight_decay * p[j];
      m[j] = state.beta1 * m[j] + (1 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1 - state.beta2) * g[j] * g[j];
      const double mhat = m[j] / c1, vhat = v[j] / c2;
      p[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradCheckReport {
  bool passed = false;
  double max_rel_error = 0;
  double max_abs_error = 0;
  std::size_t worst_input = 0, worst_index = 0;
};

/// Compares backward() gradients of the scalar `f` with respect to every
/// tensor in `inputs` against central differences (step h). The relative
/// error of one entry is |analytic - numeric| / max(|analytic|, |numeric|, 1e-3).
inline GradCheckReport grad_check(const std::function<Tensor(Tape&)>& f, std::vector<Tensor> inputs, double tol,
                                  double h = 1e-5) {
  for (auto& x : inputs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }
  {
    Tape tape;
    Tensor loss = f(tape);
    tape.backward(loss);
  }
  GradCheckReport report;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto& x = inputs[t];
    const std::vector<double> analytic(x.grad().begin(), x.grad().end());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double orig = x.data()[i];
      x.data()[i] = orig + h;
      double up, down;
      {
        Tape tape(false);
        up = f(tape).item();
      }
      x.data()[i] = orig - h;
      {
        Tape tape(false);
        down = f(tape).item();
      }
      x.data()[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double abs_err = std::abs(analytic[i] - numeric);
      const double rel_err = abs_err / std::max({std::abs(analytic[i]), std::abs(numeric), 1e-3});
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      if (rel_err > report.max_rel_error) {
        report.max_rel_error = rel_err;
        report.worst_input = t;
        report.worst_index = i;
      }
    }
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

inline GradCheckReport grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f, const Tensor& x, double tol,
                                  double h = 1e-5) {
  Tensor input = x;
  return grad_check([&](Tape& tape) { return f(tape, input); }, {input}, tol, h);
}

// ---------------------------------------------------------------------------
// Checkpoint format
//
//   "IGWT" | u16 version=1 | u32 header_count | (str key, str value)...
//   | u32 param_count | (str name, u32 rows, u32 cols, f64[rows*cols])...
//   | u8 has_optimizer | [f64 lr, wd, beta1, beta2, eps | u64 step | per param f64 m[], f64 v[]]
// Strings are u32 length + UTF-8 bytes; all integers little-endian.

inline constexpr char kCheckpointMagic[4] = {'I', 'G', 'W', 'T'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Checkpoint {
  std::map<std::string, std::string> header;
  std::vector<NamedTensor> params;
  std::optional<AdamState> optimizer;
};

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, 4);
  w.u16(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ckpt.header.size()));
  for (const auto& [k, v] : ckpt.header) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& p : ckpt.params) {
    w.str(p.name);
    w.u32(static_cast<std::uint32_t>(p.tensor.rows()));
    w.u32(static_cast<std::uint32_t>(p.tensor.cols()));
    for (double x : p.tensor.data()) w.f64(x);
  }
  w.u8(ckpt.optimizer ? 1 : 0);
  if (ckpt.optimizer) {
    const auto& s = *ckpt.optimizer;
    w.f64(s.lr);
    w.f64(s.weight_decay);
    w.f64(s.beta1);
    w.f64(s.beta2);
    w.f64(s.eps);
    w.u64(s.step);
    if (s.m.size() != ckpt.params.size() && !(s.m.empty() && s.step == 0))
      throw ShapeError("checkpoint: optimiser state does not match parameters");
    for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
      const std::size_t n = ckpt.params[i].tensor.size();
      for (std::size_t j = 0; j < n; ++j) w.f64(s.m.empty() ? 0.0 : s.m[i][j]);
      for (std::size_t j = 0; j < n; ++j) w.f64(s.v.empty() ? 0.0 : s.v[i][j]);
    }
  }
  return std::move(w.bytes());
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "checkpoint");
  char magic[4];
  r.raw(magic, 4);
  if (!std::equal(magic, magic + 4, kCheckpointMagic)) throw FormatError("checkpoint: bad magic");
  const std::uint16_t version = r.u16();
  if (version != kCheckpointVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint ckpt;
  const std::uint32_t header_count = r.u32();
  for (std::uint32_t i = 0; i < header_count; ++i) {
    std::string k = r.str();
    ckpt.header[std::move(k)] = r.str();
  }
  const std::uint32_t param_count = r.u32();
  for (std::uint32_t i = 0; i < param_count; ++i) {
    NamedTensor p;
    p.name = r.str();
    const std::uint32_t rows = r.u32(), cols = r.u32();
    r.need(8ULL * rows * cols);
    std::vector<double> v(static_cast<std::size_t>(rows) * cols);
    for (auto& x : v) x = r.f64();
    p.tensor = Tensor::from(rows, cols, std::move(v), true);
    ckpt.params.push_back(std::move(p));
  }
  if (r.u8() != 0) {
    AdamState s;
    s.lr = r.f64();
    s.weight_decay = r.f64();
    s.beta1 = r.f64();
    s.beta2 = r.f64();
    s.eps = r.f64();
    s.step = r.u64();
    for (const auto& p : ckpt.params) {
      std::vector<double> m(p.tensor.size()), v(p.tensor.size());
      for (auto& x : m) x = r.f64();
      for (auto& x : v) x = r.f64();
      s.m.push_back(std::move(m));
      s.v.push_back(std::move(v));
    }
    ckpt.optimizer = std::move(s);
  }
  if (r.remaining() != 0) throw FormatError("checkpoint: trailing bytes");
  return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  imagegraph::detail::write_file_bytes(path, encode_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = imagegraph::detail::read_file_bytes(path);
  try {
    return decode_checkpoint(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace imagegraph::nd
