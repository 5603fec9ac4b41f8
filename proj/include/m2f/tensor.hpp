/*
 * Copyright (c) 2026, the m2former authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "m2f/rng.hpp"

namespace m2f {

using Shape = std::vector<std::size_t>;

namespace detail {

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// RAII scope that suspends tape recording (evaluation, clustering, finite
/// differences). Forward values are computed as usual.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// One node of the computation graph. Leaves (parameters, inputs) have no
/// parents; interior nodes keep their inputs alive through `parents` and
/// know how to push gradients back through `backprop`.
struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized lazily; same length as value once present
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

/// Dense n-dimensional array of doubles, row-major, with reverse-mode
/// autodiff. Copying a Tensor copies a handle to the same node; `detach`
/// makes an independent value copy off the tape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (detail::numel(shape) != data.size()) {
      throw std::invalid_argument("Tensor: shape " + detail::shape_str(shape) + " wants " +
                                  std::to_string(detail::numel(shape)) + " values, got " +
                                  std::to_string(data.size()));
    }
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> data(detail::numel(shape), 0.0);
    return from_data(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor full(Shape shape, double v) {
    std::vector<double> data(detail::numel(shape), v);
    return from_data(std::move(shape), std::move(data));
  }

  static Tensor scalar(double v) { return from_data({1}, {v}); }

  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = false) {
    std::vector<double> data(detail::numel(shape));
    for (double& x : data) x = rng.uniform(lo, hi);
    return from_data(std::move(shape), std::move(data), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }

  const std::vector<double>& values() const { return node_->value; }

  /// Mutable access to the raw buffer. Only meaningful on leaves
  /// (initialization, optimizer updates, finite-difference probes);
  /// mutating an interior node would desynchronize it from its tape entry.
  std::vector<double>& values_mut() {
    if (node_->backprop) {
      throw std::logic_error("Tensor: refusing to mutate a non-leaf tape node");
    }
    return node_->value;
  }

  double scalar_value() const {
    if (size() != 1) {
      throw std::invalid_argument("Tensor: scalar_value on shape " + detail::shape_str(shape()));
    }
    return node_->value[0];
  }

  double at(std::size_t i) const { return node_->value.at(i); }
  double at(std::size_t i, std::size_t j) const {
    return node_->value.at(i * node_->shape.at(1) + j);
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return node_->value.at((i * node_->shape.at(1) + j) * node_->shape.at(2) + k);
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    node_->requires_grad = rg;
    return *this;
  }

  bool has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }
  const std::vector<double>& grad() const {
    if (!has_grad()) throw std::logic_error("Tensor: gradient not populated");
    return node_->grad;
  }
  /// Mutable gradient access, for optimizer-side rescaling (clipping).
  /// Leaf-only for the same reason as values_mut.
  std::vector<double>& grad_mut() {
    if (node_->backprop) {
      throw std::logic_error("Tensor: refusing to mutate a non-leaf gradient");
    }
    if (!has_grad()) throw std::logic_error("Tensor: gradient not populated");
    return node_->grad;
  }
  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

  /// Value copy with no tape attachment and no gradient requirement.
  Tensor detach() const { return from_data(node_->shape, node_->value, false); }

  const std::shared_ptr<TensorNode>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

/// Named trainable tensor. Names are slash-free dotted paths ("decoder.3.ffn.w1")
/// and must be unique within a model; the checkpoint format keys on them.
struct Parameter {
  std::string name;
  Tensor value;

  Parameter() = default;
  Parameter(std::string n, Tensor t) : name(std::move(n)), value(std::move(t)) {
    value.set_requires_grad(true);
  }
};

/// Fan-in scaled uniform init, U(-sqrt(1/fan_in), +sqrt(1/fan_in)).
inline Tensor fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  return Tensor::uniform(std::move(shape), rng, -bound, bound);
}

namespace detail {

inline void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw std::runtime_error(std::string(op) + ": produced a non-finite value");
    }
  }
}

/// Wires up a new graph node. `backprop` may capture the input Tensors by
/// value; both the closure and the parent edges are dropped once backward()
/// has consumed them.
inline Tensor make_op(Shape shape, std::vector<double> value, std::initializer_list<Tensor> inputs,
                      std::function<void(TensorNode&)> backprop, const char* op) {
  check_finite(value, op);
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool rg = false;
  if (grad_mode()) {
    for (const Tensor& t : inputs) rg = rg || t.requires_grad();
  }
  node->requires_grad = rg;
  if (rg) {
    for (const Tensor& t : inputs) node->parents.push_back(t.node());
    node->backprop = std::move(backprop);
  }
  return Tensor(std::move(node));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

/// Decomposes `shape` around `axis` into (outer, len, inner) so that element
/// (o, j, i) lives at ((o * len) + j) * inner + i.
inline void axis_split(const Shape& shape, std::size_t axis, std::size_t& outer, std::size_t& len,
                       std::size_t& inner, const char* op) {
  if (axis >= shape.size()) {
    throw std::invalid_argument(std::string(op) + ": axis " + std::to_string(axis) +
                                " out of range for " + shape_str(shape));
  }
  len = shape[axis];
  if (len == 0) throw std::invalid_argument(std::string(op) + ": empty axis");
  outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  inner = 1;
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast arithmetic
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  const auto &av = a.values(), &bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return detail::make_op(
      a.shape(), std::move(out), {a, b},
      [a, b](TensorNode& self) {
        if (a.requires_grad()) {
          a.node()->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i) a.node()->grad[i] += self.grad[i];
        }
        if (b.requires_grad()) {
          b.node()->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i) b.node()->grad[i] += self.grad[i];
        }
      },
      "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  const auto &av = a.values(), &bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return detail::make_op(
      a.shape(), std::move(out), {a, b},
      [a, b](TensorNode& self) {
        if (a.requires_grad()) {
          a.node()->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i) a.node()->grad[i] += self.grad[i];
        }
        if (b.requires_grad()) {
          b.node()->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i) b.node()->grad[i] -= self.grad[i];
        }
      },
      "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  const auto &av = a.values(), &bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return detail::make_op(
      a.shape(), std::move(out), {a, b},
      [a, b](TensorNode& self) {
        if (a.requires_grad()) {
          a.node()->ensure_grad();
          const auto& bv = b.values();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            a.node()->grad[i] += self.grad[i] * bv[i];
        }
        if (b.requires_grad()) {
          b.node()->ensure_grad();
          const auto& av = a.values();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            b.node()->grad[i] += self.grad[i] * av[i];
        }
      },
      "mul");
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  const auto& av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  return detail::make_op(
      a.shape(), std::move(out), {a},
      [a, s](TensorNode& self) {
        if (!a.requires_grad()) return;
        a.node()->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) a.node()->grad[i] += self.grad[i] * s;
      },
      "scale");
}

/// mat[r x c] + row[c], broadcast over rows (bias add).
inline Tensor add_rowwise(const Tensor& mat, const Tensor& row) {
  if (mat.ndim() != 2 || row.ndim() != 1 || mat.dim(1) != row.dim(0)) {
    throw std::invalid_argument("add_rowwise: shape mismatch " + detail::shape_str(mat.shape()) +
                                " vs " + detail::shape_str(row.shape()));
  }
  const std::size_t r = mat.dim(0), c = mat.dim(1);
  std::vector<double> out(mat.size());
  const auto &mv = mat.values(), &rv = row.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = mv[i * c + j] + rv[j];
  return detail::make_op(
      mat.shape(), std::move(out), {mat, row},
      [mat, row, r, c](TensorNode& self) {
        if (mat.requires_grad()) {
          mat.node()->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i) mat.node()->grad[i] += self.grad[i];
        }
        if (row.requires_grad()) {
          row.node()->ensure_grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) row.node()->grad[j] += self.grad[i * c + j];
        }
      },
      "add_rowwise");
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  const auto& av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  return detail::make_op(
      a.shape(), std::move(out), {a},
      [a](TensorNode& self) {
        if (!a.requires_grad()) return;
        a.node()->ensure_grad();
        const auto& av = a.values();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          if (av[i] > 0.0) a.node()->grad[i] += self.grad[i];
      },
      "relu");
}

/// Elementwise log(exp(a) + exp(b)), computed stably. The CTC forward
/// recursion is built from this on scalar cells.
inline Tensor logaddexp(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "logaddexp");
  std::vector<double> out(a.size());
  const auto &av = a.values(), &bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double m = std::max(av[i], bv[i]);
    out[i] = m + std::log1p(std::exp(std::min(av[i], bv[i]) - m));
  }
  return detail::make_op(
      a.shape(), std::move(out), {a, b},
      [a, b](TensorNode& self) {
        const auto &av = a.values(), &bv = b.values();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          const double g = self.grad[i];
          if (a.requires_grad()) {
            a.node()->ensure_grad();
            a.node()->grad[i] += g * std::exp(av[i] - self.value[i]);
          }
          if (b.requires_grad()) {
            b.node()->ensure_grad();
            b.node()->grad[i] += g * std::exp(bv[i] - self.value[i]);
          }
        }
      },
      "logaddexp");
}

/// Multiplies by a fixed 0/1 keep mask scaled by 1/(1-rate). rate == 0 is the
/// identity. The mask is drawn from `rng` at call time, so training runs are
/// reproducible; evaluation simply does not call this.
inline Tensor dropout(const Tensor& a, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0, 1)");
  if (rate == 0.0) return a;
  auto mask = std::make_shared<std::vector<double>>(a.size());
  const double keep_scale = 1.0 / (1.0 - rate);
  for (double& m : *mask) m = rng.next_double() >= rate ? keep_scale : 0.0;
  std::vector<double> out(a.size());
  const auto& av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * (*mask)[i];
  return detail::make_op(
      a.shape(), std::move(out), {a},
      [a, mask](TensorNode& self) {
        if (!a.requires_grad()) return;
        a.node()->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          a.node()->grad[i] += self.grad[i] * (*mask)[i];
      },
      "dropout");
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul: incompatible shapes " + detail::shape_str(a.shape()) +
                                " vs " + detail::shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using EMap = Eigen::Map<EMat>;
  using ECMap = Eigen::Map<const EMat>;
  const auto em = static_cast<Eigen::Index>(m);
  const auto ek = static_cast<Eigen::Index>(k);
  const auto en = static_cast<Eigen::Index>(n);
  std::vector<double> out(m * n);
  EMap(out.data(), em, en).noalias() =
      ECMap(a.values().data(), em, ek) * ECMap(b.values().data(), ek, en);
  return detail::make_op(
      {m, n}, std::move(out), {a, b},
      [a, b, em, ek, en](TensorNode& self) {
        ECMap g(self.grad.data(), em, en);
        if (a.requires_grad()) {
          a.node()->ensure_grad();
          // dA = dC * B^T
          EMap(a.node()->grad.data(), em, ek).noalias() +=
              g * ECMap(b.values().data(), ek, en).transpose();
        }
        if (b.requires_grad()) {
          b.node()->ensure_grad();
          // dB = A^T * dC
          EMap(b.node()->grad.data(), ek, en).noalias() +=
              ECMap(a.values().data(), em, ek).transpose() * g;
        }
      },
      "matmul");
}

inline Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2) {
    throw std::invalid_argument("transpose: expected 2-d, got " + detail::shape_str(a.shape()));
  }
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(a.size());
  const auto& av = a.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  return detail::make_op(
      {c, r}, std::move(out), {a},
      [a, r, c](TensorNode& self) {
        if (!a.requires_grad()) return;
        a.node()->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) a.node()->grad[i * c + j] += self.grad[j * r + i];
      },
      "transpose");
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (detail::numel(shape) != a.size()) {
    throw std::invalid_argument("reshape: cannot view " + detail::shape_str(a.shape()) + " as " +
                                detail::shape_str(shape));
  }
  std::vector<double> out = a.values();
  return detail::make_op(
      std::move(shape), std::move(out), {a},
      [a](TensorNode& self) {
        if (!a.requires_grad()) return;
        a.node()->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) a.node()->grad[i] += self.grad[i];
      },
      "reshape");
}

inline Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
  if (a.ndim() != 2 || c0 >= c1 || c1 > a.dim(1)) {
    throw std::invalid_argument("slice_cols: bad range [" + std::to_string(c0) + ", " +
                                std::to_string(c1) + ") for " + detail::shape_str(a.shape()));
  }
  const std::size_t r = a.dim(0), c = a.dim(1), w = c1 - c0;
  std::vector<double> out(r * w);
  const auto& av = a.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = av[i * c + c0 + j];
  return detail::make_op(
      {r, w}, std::move(out), {a},
      [a, r, c, c0, w](TensorNode& self) {
        if (!a.requires_grad()) return;
        a.node()->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < w; ++j)
            a.node()->grad[i * c + c0 + j] += self.grad[i * w + j];
      },
      "slice_cols");
}

inline Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::size_t r = parts[0].dim(0);
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.ndim() != 2 || p.dim(0) != r) {
      throw std::invalid_argument("concat_cols: row mismatch " +
                                  detail::shape_str(parts[0].shape()) + " vs " +
                                  detail::shape_str(p.shape()));
    }
    total += p.dim(1);
  }
  std::vector<double> out(r * total);
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    const std::size_t w = p.dim(1);
    const auto& pv = p.values();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * total + off + j] = pv[i * w + j];
    off += w;
  }
  std::vector<Tensor> owned(parts.begin(), parts.end());
  auto node = std::make_shared<TensorNode>();
  node->shape = {r, total};
  node->value = std::move(out);
  detail::check_finite(node->value, "concat_cols");
  bool rg = false;
  if (grad_enabled())
    for (const Tensor& p : owned) rg = rg || p.requires_grad();
  node->requires_grad = rg;
  if (rg) {
    for (const Tensor& p : owned) node->parents.push_back(p.node());
    node->backprop = [owned, r, total](TensorNode& self) {
      std::size_t off = 0;
      for (const Tensor& p : owned) {
        const std::size_t w = p.dim(1);
        if (p.requires_grad()) {
          p.node()->ensure_grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < w; ++j)
              p.node()->grad[i * w + j] += self.grad[i * total + off + j];
        }
        off += w;
      }
    };
  }
  return Tensor(std::move(node));
}

inline Tensor concat_cols(std::initializer_list<Tensor> parts) {
  std::vector<Tensor> v(parts);
  return concat_cols(std::span<const Tensor>(v));
}

/// 3-d tensor -> its i-th axis-0 plane (copying view with gradient routing).
inline Tensor slice_plane(const Tensor& a, std::size_t i) {
  if (a.ndim() != 3 || i >= a.dim(0)) {
    throw std::invalid_argument("slice_plane: index " + std::to_string(i) + " for " +
                                detail::shape_str(a.shape()));
  }
  const std::size_t plane = a.dim(1) * a.dim(2);
  std::vector<double> out(a.values().begin() + i * plane, a.values().begin() + (i + 1) * plane);
  return detail::make_op(
      {a.dim(1), a.dim(2)}, std::move(out), {a},
      [a, i, plane](TensorNode& self) {
        if (!a.requires_grad()) return;
        a.node()->ensure_grad();
        for (std::size_t j = 0; j < plane; ++j) a.node()->grad[i * plane + j] += self.grad[j];
      },
      "slice_plane");
}

/// Stack equally shaped 2-d tensors into a 3-d tensor along a new axis 0.
inline Tensor stack_planes(std::span<const Tensor> planes) {
  if (planes.empty()) throw std::invalid_argument("stack_planes: no inputs");
  const Shape base = planes[0].shape();
  for (const Tensor& p : planes) {
    if (p.ndim() != 2 || p.shape() != base) {
      throw std::invalid_argument("stack_planes: shape mismatch " + detail::shape_str(base) +
                                  " vs " + detail::shape_str(p.shape()));
    }
  }
  const std::size_t plane = detail::numel(base);
  std::vector<double> out;
  out.reserve(planes.size() * plane);
  for (const Tensor& p : planes) out.insert(out.end(), p.values().begin(), p.values().end());
  std::vector<Tensor> owned(planes.begin(), planes.end());
  auto node = std::make_shared<TensorNode>();
  node->shape = {owned.size(), base[0], base[1]};
  node->value = std::move(out);
  detail::check_finite(node->value, "stack_planes");
  bool rg = false;
  if (grad_enabled())
    for (const Tensor& p : owned) rg = rg || p.requires_grad();
  node->requires_grad = rg;
  if (rg) {
    for (const Tensor& p : owned) node->parents.push_back(p.node());
    node->backprop = [owned, plane](TensorNode& self) {
      for (std::size_t c = 0; c < owned.size(); ++c) {
        const Tensor& p = owned[c];
        if (!p.requires_grad()) continue;
        p.node()->ensure_grad();
        for (std::size_t j = 0; j < plane; ++j) p.node()->grad[j] += self.grad[c * plane + j];
      }
    };
  }
  return Tensor(std::move(node));
}

inline Tensor stack_planes(std::initializer_list<Tensor> planes) {
  std::vector<Tensor> v(planes);
  return stack_planes(std::span<const Tensor>(v));
}

/// Single element as a scalar tensor, row-major flat index.
inline Tensor pick(const Tensor& a, std::size_t flat) {
  if (flat >= a.size()) {
    throw std::invalid_argument("pick: index " + std::to_string(flat) + " out of range for " +
                                detail::shape_str(a.shape()));
  }
  return detail::make_op(
      {1}, {a.values()[flat]}, {a},
      [a, flat](TensorNode& self) {
        if (!a.requires_grad()) return;
        a.node()->ensure_grad();
        a.node()->grad[flat] += self.grad[0];
      },
      "pick");
}

inline Tensor pick(const Tensor& a, std::size_t i, std::size_t j) {
  if (a.ndim() != 2) throw std::invalid_argument("pick: 2-d index on " + detail::shape_str(a.shape()));
  return pick(a, i * a.dim(1) + j);
}

/// Rows of `table` selected by index, with scatter-add gradients. Used for
/// token embedding lookup.
inline Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  if (table.ndim() != 2) {
    throw std::invalid_argument("gather_rows: table must be 2-d, got " +
                                detail::shape_str(table.shape()));
  }
  const std::size_t rows = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  const auto& tv = table.values();
  for (std::size_t l = 0; l < ids.size(); ++l) {
    if (ids[l] < 0 || static_cast<std::size_t>(ids[l]) >= rows) {
      throw std::invalid_argument("gather_rows: id " + std::to_string(ids[l]) +
                                  " out of range for " + detail::shape_str(table.shape()));
    }
    std::copy_n(tv.begin() + static_cast<std::size_t>(ids[l]) * d, d, out.begin() + l * d);
  }
  return detail::make_op(
      {ids.size(), d}, std::move(out), {table},
      [table, ids, d](TensorNode& self) {
        if (!table.requires_grad()) return;
        table.node()->ensure_grad();
        for (std::size_t l = 0; l < ids.size(); ++l)
          for (std::size_t j = 0; j < d; ++j)
            table.node()->grad[static_cast<std::size_t>(ids[l]) * d + j] +=
                self.grad[l * d + j];
      },
      "gather_rows");
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  return detail::make_op(
      {1}, {s}, {a},
      [a](TensorNode& self) {
        if (!a.requires_grad()) return;
        a.node()->ensure_grad();
        for (double& g : a.node()->grad) g += self.grad[0];
      },
      "sum");
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

inline Tensor sum_rows(const Tensor& a) {
  if (a.ndim() != 2) throw std::invalid_argument("sum_rows: expected 2-d");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r, 0.0);
  const auto& av = a.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += av[i * c + j];
  return detail::make_op(
      {r}, std::move(out), {a},
      [a, r, c](TensorNode& self) {
        if (!a.requires_grad()) return;
        a.node()->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) a.node()->grad[i * c + j] += self.grad[i];
      },
      "sum_rows");
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

/// Softmax along `axis`, with max subtraction per slice for stability.
inline Tensor softmax(const Tensor& a, std::size_t axis) {
  std::size_t outer, len, inner;
  detail::axis_split(a.shape(), axis, outer, len, inner, "softmax");
  std::vector<double> out(a.size());
  const auto& av = a.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, av[base + j * inner]);
      double denom = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(av[base + j * inner] - mx);
        out[base + j * inner] = e;
        denom += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= denom;
    }
  return detail::make_op(
      a.shape(), std::move(out), {a},
      [a, outer, len, inner](TensorNode& self) {
        if (!a.requires_grad()) return;
        a.node()->ensure_grad();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double dot = 0.0;
            for (std::size_t j = 0; j < len; ++j)
              dot += self.grad[base + j * inner] * self.value[base + j * inner];
            for (std::size_t j = 0; j < len; ++j) {
              const std::size_t idx = base + j * inner;
              a.node()->grad[idx] += self.value[idx] * (self.grad[idx] - dot);
            }
          }
      },
      "softmax");
}

inline Tensor log_softmax(const Tensor& a, std::size_t axis) {
  std::size_t outer, len, inner;
  detail::axis_split(a.shape(), axis, outer, len, inner, "log_softmax");
  std::vector<double> out(a.size());
  const auto& av = a.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, av[base + j * inner]);
      double denom = 0.0;
      for (std::size_t j = 0; j < len; ++j) denom += std::exp(av[base + j * inner] - mx);
      const double lse = mx + std::log(denom);
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] = av[base + j * inner] - lse;
    }
  return detail::make_op(
      a.shape(), std::move(out), {a},
      [a, outer, len, inner](TensorNode& self) {
        if (!a.requires_grad()) return;
        a.node()->ensure_grad();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double gsum = 0.0;
            for (std::size_t j = 0; j < len; ++j) gsum += self.grad[base + j * inner];
            for (std::size_t j = 0; j < len; ++j) {
              const std::size_t idx = base + j * inner;
              a.node()->grad[idx] += self.grad[idx] - std::exp(self.value[idx]) * gsum;
            }
          }
      },
      "log_softmax");
}

/// Rows rescaled to sum to one (plain sum, not softmax). Callers guarantee
/// strictly positive rows; used to renormalize masked mixing weights.
inline Tensor normalize_rows(const Tensor& a) {
  if (a.ndim() != 2) throw std::invalid_argument("normalize_rows: expected 2-d");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(a.size());
  const auto& av = a.values();
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += av[i * c + j];
    if (!(s > 0.0)) {
      throw std::runtime_error("normalize_rows: row " + std::to_string(i) +
                               " has non-positive sum");
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = av[i * c + j] / s;
  }
  return detail::make_op(
      a.shape(), std::move(out), {a},
      [a, r, c](TensorNode& self) {
        if (!a.requires_grad()) return;
        a.node()->ensure_grad();
        const auto& av = a.values();
        for (std::size_t i = 0; i < r; ++i) {
          double s = 0.0, dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) s += av[i * c + j];
          for (std::size_t j = 0; j < c; ++j)
            dot += self.grad[i * c + j] * self.value[i * c + j];
          for (std::size_t j = 0; j < c; ++j)
            a.node()->grad[i * c + j] += (self.grad[i * c + j] - dot) / s;
        }
      },
      "normalize_rows");
}

// ---------------------------------------------------------------------------
// Layer norm
// ---------------------------------------------------------------------------

/// Normalizes each length-d vector along the last axis to zero mean and unit
/// variance (epsilon-stabilized), then applies the affine gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  if (x.ndim() == 0) throw std::invalid_argument("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  if (gain.ndim() != 1 || gain.dim(0) != d || bias.ndim() != 1 || bias.dim(0) != d) {
    throw std::invalid_argument("layer_norm: gain/bias must be [" + std::to_string(d) + "]");
  }
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size());
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const auto &xv = x.values(), &gv = gain.values(), &bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (row[j] - mu) * is;
      (*xhat)[r * d + j] = xh;
      out[r * d + j] = gv[j] * xh + bv[j];
    }
  }
  return detail::make_op(
      x.shape(), std::move(out), {x, gain, bias},
      [x, gain, bias, xhat, inv_std, rows, d](TensorNode& self) {
        const auto& gv = gain.values();
        for (std::size_t r = 0; r < rows; ++r) {
          const double* g = self.grad.data() + r * d;
          const double* xh = xhat->data() + r * d;
          if (gain.requires_grad()) {
            gain.node()->ensure_grad();
            for (std::size_t j = 0; j < d; ++j) gain.node()->grad[j] += g[j] * xh[j];
          }
          if (bias.requires_grad()) {
            bias.node()->ensure_grad();
            for (std::size_t j = 0; j < d; ++j) bias.node()->grad[j] += g[j];
          }
          if (x.requires_grad()) {
            x.node()->ensure_grad();
            double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dxh = g[j] * gv[j];
              mean_dxhat += dxh;
              mean_dxhat_xhat += dxh * xh[j];
            }
            mean_dxhat /= static_cast<double>(d);
            mean_dxhat_xhat /= static_cast<double>(d);
            const double is = (*inv_std)[r];
            for (std::size_t j = 0; j < d; ++j) {
              const double dxh = g[j] * gv[j];
              x.node()->grad[r * d + j] += is * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
            }
          }
        }
      },
      "layer_norm");
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// 2-d cross-correlation (no kernel flip): input [Cin x H x W], kernels
/// [Cout x Cin x kh x kw], zero padding. Output height is
/// floor((H + 2*ph - kh) / sh) + 1, same formula for width.
inline Tensor conv2d(const Tensor& input, const Tensor& kernels,
                     std::pair<std::size_t, std::size_t> stride = {1, 1},
                     std::pair<std::size_t, std::size_t> padding = {0, 0}) {
  if (input.ndim() != 3 || kernels.ndim() != 4) {
    throw std::invalid_argument("conv2d: expected input [Cin x H x W] and kernels "
                                "[Cout x Cin x kh x kw], got " +
                                detail::shape_str(input.shape()) + " and " +
                                detail::shape_str(kernels.shape()));
  }
  const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t cout = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
  if (kernels.dim(1) != cin) {
    throw std::invalid_argument("conv2d: kernel input channels " +
                                std::to_string(kernels.dim(1)) + " != input channels " +
                                std::to_string(cin));
  }
  const auto [sh, sw] = stride;
  const auto [ph, pw] = padding;
  if (sh == 0 || sw == 0) throw std::invalid_argument("conv2d: stride must be positive");
  if (kh > h + 2 * ph || kw > w + 2 * pw) {
    throw std::invalid_argument("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                                " larger than padded input " + std::to_string(h + 2 * ph) + "x" +
                                std::to_string(w + 2 * pw));
  }
  const std::size_t oh = (h + 2 * ph - kh) / sh + 1;
  const std::size_t ow = (w + 2 * pw - kw) / sw + 1;
  std::vector<double> out(cout * oh * ow, 0.0);
  const auto &iv = input.values(), &kv = kernels.values();
  for (std::size_t co = 0; co < cout; ++co)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        double acc = 0.0;
        for (std::size_t ci = 0; ci < cin; ++ci)
          for (std::size_t i = 0; i < kh; ++i) {
            const std::ptrdiff_t src_y =
                static_cast<std::ptrdiff_t>(y * sh + i) - static_cast<std::ptrdiff_t>(ph);
            if (src_y < 0 || src_y >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t j = 0; j < kw; ++j) {
              const std::ptrdiff_t src_x =
                  static_cast<std::ptrdiff_t>(x * sw + j) - static_cast<std::ptrdiff_t>(pw);
              if (src_x < 0 || src_x >= static_cast<std::ptrdiff_t>(w)) continue;
              acc += iv[(ci * h + src_y) * w + src_x] * kv[((co * cin + ci) * kh + i) * kw + j];
            }
          }
        out[(co * oh + y) * ow + x] = acc;
      }
  return detail::make_op(
      {cout, oh, ow}, std::move(out), {input, kernels},
      [input, kernels, cin, h, w, cout, kh, kw, sh, sw, ph, pw, oh, ow](TensorNode& self) {
        const auto &iv = input.values(), &kv = kernels.values();
        const bool gi = input.requires_grad(), gk = kernels.requires_grad();
        if (gi) input.node()->ensure_grad();
        if (gk) kernels.node()->ensure_grad();
        for (std::size_t co = 0; co < cout; ++co)
          for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t x = 0; x < ow; ++x) {
              const double g = self.grad[(co * oh + y) * ow + x];
              if (g == 0.0) continue;
              for (std::size_t ci = 0; ci < cin; ++ci)
                for (std::size_t i = 0; i < kh; ++i) {
                  const std::ptrdiff_t src_y =
                      static_cast<std::ptrdiff_t>(y * sh + i) - static_cast<std::ptrdiff_t>(ph);
                  if (src_y < 0 || src_y >= static_cast<std::ptrdiff_t>(h)) continue;
                  for (std::size_t j = 0; j < kw; ++j) {
                    const std::ptrdiff_t src_x =
                        static_cast<std::ptrdiff_t>(x * sw + j) - static_cast<std::ptrdiff_t>(pw);
                    if (src_x < 0 || src_x >= static_cast<std::ptrdiff_t>(w)) continue;
                    const std::size_t in_idx = (ci * h + src_y) * w + src_x;
                    const std::size_t k_idx = ((co * cin + ci) * kh + i) * kw + j;
                    if (gi) input.node()->grad[in_idx] += g * kv[k_idx];
                    if (gk) kernels.node()->grad[k_idx] += g * iv[in_idx];
                  }
                }
            }
      },
      "conv2d");
}

/// x[C x H x W] + b[C], broadcast per channel plane.
inline Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
  if (x.ndim() != 3 || b.ndim() != 1 || b.dim(0) != x.dim(0)) {
    throw std::invalid_argument("add_channel_bias: shape mismatch " +
                                detail::shape_str(x.shape()) + " vs " +
                                detail::shape_str(b.shape()));
  }
  const std::size_t c = x.dim(0), plane = x.dim(1) * x.dim(2);
  std::vector<double> out(x.size());
  const auto &xv = x.values(), &bv = b.values();
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t j = 0; j < plane; ++j) out[ci * plane + j] = xv[ci * plane + j] + bv[ci];
  return detail::make_op(
      x.shape(), std::move(out), {x, b},
      [x, b, c, plane](TensorNode& self) {
        if (x.requires_grad()) {
          x.node()->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i) x.node()->grad[i] += self.grad[i];
        }
        if (b.requires_grad()) {
          b.node()->ensure_grad();
          for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t j = 0; j < plane; ++j)
              b.node()->grad[ci] += self.grad[ci * plane + j];
        }
      },
      "add_channel_bias");
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// Reverse-mode sweep from a scalar loss. Populates .grad on every reachable
/// tensor that requires gradients (accumulating, so per-sample losses in a
/// batch can be backpropagated one after another), then clears the tape:
/// interior nodes drop their parent edges and closures.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be a defined scalar");
  }
  if (!loss.node()->requires_grad) {
    throw std::invalid_argument("backward: loss is not connected to any tracked parameter");
  }
  // Iterative post-order DFS for a topological order.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* node = *it;
    if (node->backprop) {
      node->ensure_grad();
      node->backprop(*node);
    }
  }
  for (TensorNode* node : order) {
    node->backprop = nullptr;
    node->parents.clear();
  }
}

}  // namespace m2f
