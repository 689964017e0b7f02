// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations over Tensor. Every op validates shapes and
// throws DimensionError naming the offending shapes. Backward closures
// capture their inputs by handle, never the output (the output owns the
// node, so capturing it would form a cycle).
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "attnocr/blas.hpp"
#include "attnocr/tensor.hpp"

namespace attnocr {

using detail::grad_buffer;
using detail::make_result;

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, const char* op, Fwd fwd, Deriv deriv) {
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
  return make_result(x.shape(), std::move(out), {x}, op, [x, deriv](TensorImpl& self) {
    auto gx = grad_buffer(x);
    const auto xin = x.data();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * deriv(xin[i], self.data[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result(a.shape(), std::move(out), {a, b}, "add", [a, b](detail::TensorImpl& self) {
    for (const Tensor* t : {&a, &b}) {
      if (!t->requires_grad()) continue;
      auto g = grad_buffer(*t);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result(a.shape(), std::move(out), {a, b}, "sub", [a, b](detail::TensorImpl& self) {
    if (a.requires_grad()) {
      auto g = grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (b.requires_grad()) {
      auto g = grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

/// Hadamard product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result(a.shape(), std::move(out), {a, b}, "mul", [a, b](detail::TensorImpl& self) {
    if (a.requires_grad()) {
      auto g = grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * b[i];
    }
    if (b.requires_grad()) {
      auto g = grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * a[i];
    }
  });
}

inline Tensor scale(const Tensor& x, double factor) {
  return detail::unary(
      x, "scale", [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary(
      x, "tanh", [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      x, "sigmoid",
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      x, "relu", [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double s, const Tensor& x) { return scale(x, s); }

/**
 * Adds `y` to every slice of `x` along `axis`; y's shape is x's shape with
 * that axis removed. Used to add the per-step query projection to every
 * encoder position in additive attention.
 */
inline Tensor broadcast_add(const Tensor& x, const Tensor& y, std::size_t axis) {
  if (axis >= x.rank()) throw DimensionError("broadcast_add: axis out of range for " + to_string(x.shape()));
  Shape expect = x.shape();
  expect.erase(expect.begin() + static_cast<std::ptrdiff_t>(axis));
  if (expect.empty()) expect = {1};
  if (y.shape() != expect) {
    throw DimensionError("broadcast_add: cannot broadcast " + to_string(y.shape()) + " over axis " +
                         std::to_string(axis) + " of " + to_string(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t mid = x.dim(axis);
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t m = 0; m < mid; ++m)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t idx = (o * mid + m) * inner + i;
        out[idx] = x[idx] + y[o * inner + i];
      }
  return make_result(x.shape(), std::move(out), {x, y}, "broadcast_add",
                     [x, y, outer, mid, inner](detail::TensorImpl& self) {
                       if (x.requires_grad()) {
                         auto g = grad_buffer(x);
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                       }
                       if (y.requires_grad()) {
                         auto g = grad_buffer(y);
                         for (std::size_t o = 0; o < outer; ++o)
                           for (std::size_t m = 0; m < mid; ++m)
                             for (std::size_t i = 0; i < inner; ++i)
                               g[o * inner + i] += self.grad[(o * mid + m) * inner + i];
                       }
                     });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return make_result({1}, {total}, {x}, "sum", [x](detail::TensorImpl& self) {
    auto g = grad_buffer(x);
    for (auto& v : g) v += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  return make_result(std::move(shape), x.values(), {x}, "reshape", [x](detail::TensorImpl& self) {
    auto g = grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + to_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) throw DimensionError("concat: incompatible shapes " + to_string(first) + " and " + to_string(s));
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  const std::size_t row = out_shape[axis] * inner;

  std::vector<double> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t chunk = p.dim(axis) * inner;
    const auto src = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * chunk), chunk,
                  out.begin() + static_cast<std::ptrdiff_t>(o * row + offset));
    offset += chunk;
  }
  return make_result(std::move(out_shape), std::move(out), parts, "concat",
                     [parts, offsets, outer, inner, row, axis](detail::TensorImpl& self) {
                       for (std::size_t k = 0; k < parts.size(); ++k) {
                         if (!parts[k].requires_grad()) continue;
                         auto g = grad_buffer(parts[k]);
                         const std::size_t chunk = parts[k].dim(axis) * inner;
                         for (std::size_t o = 0; o < outer; ++o)
                           for (std::size_t i = 0; i < chunk; ++i) g[o * chunk + i] += self.grad[o * row + offsets[k] + i];
                       }
                     });
}

/// Inserts a new axis of size 1 at `axis` on every part and concatenates there.
inline Tensor stack(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("stack: no inputs");
  std::vector<Tensor> expanded;
  expanded.reserve(parts.size());
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (axis > s.size()) throw DimensionError("stack: axis out of range for " + to_string(s));
    s.insert(s.begin() + static_cast<std::ptrdiff_t>(axis), 1);
    expanded.push_back(reshape(p, std::move(s)));
  }
  return concat(expanded, axis);
}

/// Slice [start, start+length) along `axis`.
inline Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= x.rank() || length == 0 || start + length > x.dim(axis)) {
    throw DimensionError("narrow: range [" + std::to_string(start) + "," + std::to_string(start + length) +
                         ") invalid for axis " + std::to_string(axis) + " of " + to_string(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t src_row = x.dim(axis) * inner, dst_row = length * inner, skip = start * inner;
  Shape shape = x.shape();
  shape[axis] = length;
  std::vector<double> out(outer * dst_row);
  const auto src = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * src_row + skip), dst_row,
                out.begin() + static_cast<std::ptrdiff_t>(o * dst_row));
  return make_result(std::move(shape), std::move(out), {x}, "narrow",
                     [x, outer, src_row, dst_row, skip](detail::TensorImpl& self) {
                       auto g = grad_buffer(x);
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t i = 0; i < dst_row; ++i) g[o * src_row + skip + i] += self.grad[o * dst_row + i];
                     });
}

/// Axis permutation: output axis i is input axis `axes[i]`.
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const std::size_t r = x.rank();
  std::vector<bool> seen(r, false);
  bool valid = axes.size() == r;
  for (std::size_t i = 0; valid && i < r; ++i) {
    valid = axes[i] < r && !seen[axes[i]];
    if (valid) seen[axes[i]] = true;
  }
  if (!valid) throw DimensionError("permute: invalid axes for " + to_string(x.shape()));
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.dim(i);
  Shape shape(r);
  std::vector<std::size_t> strides(r);
  for (std::size_t i = 0; i < r; ++i) {
    shape[i] = x.dim(axes[i]);
    strides[i] = in_strides[axes[i]];
  }
  // map[i] = flat input index of flat output element i
  std::vector<std::size_t> map(x.numel());
  std::vector<std::size_t> counter(r, 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < map.size(); ++i) {
    map[i] = src;
    for (std::size_t d = r; d-- > 0;) {
      src += strides[d];
      if (++counter[d] < shape[d]) break;
      src -= strides[d] * shape[d];
      counter[d] = 0;
    }
  }
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[map[i]];
  return make_result(std::move(shape), std::move(out), {x}, "permute",
                     [x, map = std::move(map)](detail::TensorImpl& self) {
                       auto g = grad_buffer(x);
                       for (std::size_t i = 0; i < map.size(); ++i) g[map[i]] += self.grad[i];
                     });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + to_string(a.shape()) + " by " + to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  blas::gemm(false, false, m, n, k, 1.0, a.data().data(), k, b.data().data(), n, 0.0, out.data(), n);
  return make_result({m, n}, std::move(out), {a, b}, "matmul", [a, b, m, k, n](detail::TensorImpl& self) {
    if (a.requires_grad())
      blas::gemm(false, true, m, k, n, 1.0, self.grad.data(), n, b.data().data(), n, 1.0, grad_buffer(a).data(), k);
    if (b.requires_grad())
      blas::gemm(true, false, k, n, m, 1.0, a.data().data(), k, self.grad.data(), n, 1.0, grad_buffer(b).data(), n);
  });
}

/**
 * y = x Wᵀ + b for x of shape [N, in] (or [in]), W [out, in], b [out].
 * `bias` may be an undefined Tensor.
 */
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const bool vec = x.rank() == 1;
  if ((x.rank() != 1 && x.rank() != 2) || weight.rank() != 2 || x.shape().back() != weight.dim(1) ||
      (bias.defined() && bias.shape() != Shape{weight.dim(0)})) {
    throw DimensionError("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                         to_string(weight.shape()) +
                         (bias.defined() ? " and bias " + to_string(bias.shape()) : std::string()));
  }
  const std::size_t rows = vec ? 1 : x.dim(0), in = weight.dim(1), outd = weight.dim(0);
  std::vector<double> out(rows * outd, 0.0);
  if (bias.defined())
    for (std::size_t r = 0; r < rows; ++r) std::copy(bias.data().begin(), bias.data().end(), out.begin() + r * outd);
  blas::gemm(false, true, rows, outd, in, 1.0, x.data().data(), in, weight.data().data(), in, bias.defined() ? 1.0 : 0.0,
             out.data(), outd);
  Shape shape = vec ? Shape{outd} : Shape{rows, outd};
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result(std::move(shape), std::move(out), std::move(inputs), "linear",
                     [x, weight, bias, rows, in, outd](detail::TensorImpl& self) {
                       if (x.requires_grad())
                         blas::gemm(false, false, rows, in, outd, 1.0, self.grad.data(), outd, weight.data().data(), in,
                                    1.0, grad_buffer(x).data(), in);
                       if (weight.requires_grad())
                         blas::gemm(true, false, outd, in, rows, 1.0, self.grad.data(), outd, x.data().data(), in, 1.0,
                                    grad_buffer(weight).data(), in);
                       if (bias.defined() && bias.requires_grad()) {
                         auto g = grad_buffer(bias);
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t o = 0; o < outd; ++o) g[o] += self.grad[r * outd + o];
                       }
                     });
}

// ---------------------------------------------------------------------------
// Normalizers and losses
// ---------------------------------------------------------------------------

/**
 * Softmax over the last axis. Positions with mask value 0 are excluded
 * (treated as −∞ logits) and receive exactly zero probability and gradient.
 * An empty mask means "all positions valid". A row with no valid position
 * is a contract error.
 */
inline Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> mask) {
  if (!mask.empty() && mask.size() != x.numel()) {
    throw DimensionError("masked_softmax: mask of " + std::to_string(mask.size()) + " entries for tensor " +
                         to_string(x.shape()));
  }
  const std::size_t n = x.shape().back(), rows = x.numel() / n;
  std::vector<double> out(x.numel(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * n;
    double mx = -std::numeric_limits<double>::infinity();
    std::size_t valid = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (mask.empty() || mask[base + j]) {
        ++valid;
        // NaN propagates into the output.
        mx = std::isnan(x[base + j]) ? x[base + j] : std::max(mx, x[base + j]);
        if (std::isnan(mx)) break;
      }
    if (valid == 0) throw ContractError("softmax: every position is masked");
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!mask.empty() && !mask[base + j]) continue;
      out[base + j] = std::exp(x[base + j] - mx);
      total += out[base + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[base + j] /= total;
  }
  return make_result(x.shape(), std::move(out), {x}, "softmax", [x, n, rows](detail::TensorImpl& self) {
    auto g = grad_buffer(x);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += self.grad[base + j] * self.data[base + j];
      for (std::size_t j = 0; j < n; ++j) g[base + j] += self.data[base + j] * (self.grad[base + j] - dot);
    }
  });
}

inline Tensor softmax(const Tensor& x) { return masked_softmax(x, {}); }

/**
 * Mean token cross-entropy of logits [R, V] against `targets` (length R).
 * Rows whose target equals `ignore_id` contribute neither loss nor gradient;
 * when every row is ignored the loss is 0.
 */
inline Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets, std::int64_t ignore_id) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw DimensionError("cross_entropy: logits " + to_string(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  }
  const std::size_t rows = logits.dim(0), v = logits.dim(1);
  std::vector<double> probs(logits.numel(), 0.0);
  std::vector<std::int64_t> tgt(targets.begin(), targets.end());
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (tgt[r] == ignore_id) continue;
    if (tgt[r] < 0 || static_cast<std::size_t>(tgt[r]) >= v) {
      throw IndexError("cross_entropy: target " + std::to_string(tgt[r]) + " at row " + std::to_string(r) +
                       " outside [0," + std::to_string(v) + ")");
    }
    const double* row = logits.data().data() + r * v;
    const double mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
    const double log_z = mx + std::log(z);
    for (std::size_t j = 0; j < v; ++j) probs[r * v + j] = std::exp(row[j] - log_z);
    total += log_z - row[tgt[r]];
    ++count;
  }
  const double loss = count ? total / static_cast<double>(count) : 0.0;
  return make_result({1}, {loss}, {logits}, "cross_entropy",
                     [logits, probs = std::move(probs), tgt = std::move(tgt), ignore_id, rows, v,
                      count](detail::TensorImpl& self) {
                       auto g = grad_buffer(logits);
                       if (count == 0) return;
                       const double s = self.grad[0] / static_cast<double>(count);
                       for (std::size_t r = 0; r < rows; ++r) {
                         if (tgt[r] == ignore_id) continue;
                         for (std::size_t j = 0; j < v; ++j) g[r * v + j] += s * probs[r * v + j];
                         g[r * v + static_cast<std::size_t>(tgt[r])] -= s;
                       }
                     });
}

/// Batched attention read-out: out[n] = Σ_t weights[n,t] · values[n,t,:].
inline Tensor weighted_sum(const Tensor& weights, const Tensor& values) {
  if (weights.rank() != 2 || values.rank() != 3 || weights.dim(0) != values.dim(0) ||
      weights.dim(1) != values.dim(1)) {
    throw DimensionError("weighted_sum: weights " + to_string(weights.shape()) + " vs values " +
                         to_string(values.shape()));
  }
  const std::size_t n = values.dim(0), t = values.dim(1), d = values.dim(2);
  std::vector<double> out(n * d, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t j = 0; j < t; ++j) {
      const double w = weights[b * t + j];
      const double* row = values.data().data() + (b * t + j) * d;
      for (std::size_t k = 0; k < d; ++k) out[b * d + k] += w * row[k];
    }
  return make_result({n, d}, std::move(out), {weights, values}, "weighted_sum",
                     [weights, values, n, t, d](detail::TensorImpl& self) {
                       if (weights.requires_grad()) {
                         auto g = grad_buffer(weights);
                         for (std::size_t b = 0; b < n; ++b)
                           for (std::size_t j = 0; j < t; ++j) {
                             double acc = 0.0;
                             const double* row = values.data().data() + (b * t + j) * d;
                             for (std::size_t k = 0; k < d; ++k) acc += self.grad[b * d + k] * row[k];
                             g[b * t + j] += acc;
                           }
                       }
                       if (values.requires_grad()) {
                         auto g = grad_buffer(values);
                         for (std::size_t b = 0; b < n; ++b)
                           for (std::size_t j = 0; j < t; ++j) {
                             const double w = weights[b * t + j];
                             for (std::size_t k = 0; k < d; ++k) g[(b * t + j) * d + k] += w * self.grad[b * d + k];
                           }
                       }
                     });
}

/// Index of the largest entry in each row of the last axis; ties go to the lowest index.
inline std::vector<std::size_t> argmax_rows(const Tensor& x) {
  const std::size_t n = x.shape().back(), rows = x.numel() / n;
  std::vector<std::size_t> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < n; ++j)
      if (x[r * n + j] > x[r * n + best]) best = j;
    out[r] = best;
  }
  return out;
}

}  // namespace attnocr
