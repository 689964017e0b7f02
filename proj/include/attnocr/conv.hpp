// SPDX-License-Identifier: Apache-2.0
//
// Spatial ops over [C,H,W] or batched [N,C,H,W] tensors: convolution
// (cross-correlation, zero padding), average pooling and batch normalization.
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "attnocr/ops.hpp"

namespace attnocr {

struct Hw {
  std::size_t h = 1;
  std::size_t w = 1;
};

namespace detail {

struct SpatialDims {
  bool batched;
  std::size_t n, c, h, w;
};

inline SpatialDims spatial_dims(const Tensor& x, const char* op) {
  if (x.rank() == 3) return {false, 1, x.dim(0), x.dim(1), x.dim(2)};
  if (x.rank() == 4) return {true, x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
  throw DimensionError(std::string(op) + ": expected [C,H,W] or [N,C,H,W], got " + to_string(x.shape()));
}

inline Shape spatial_shape(const SpatialDims& d, std::size_t c, std::size_t h, std::size_t w) {
  return d.batched ? Shape{d.n, c, h, w} : Shape{c, h, w};
}

struct ConvGeometry {
  std::size_t c_in, h, w, kh, kw, sh, sw, ph, pw, ho, wo;
  std::size_t rows() const { return c_in * kh * kw; }
  std::size_t cols() const { return ho * wo; }
};

// Output columns [lo, hi) whose input column ox*sw+j-pw lies inside [0, w).
inline std::pair<std::size_t, std::size_t> valid_columns(const ConvGeometry& g, std::size_t j) {
  const std::size_t lo = g.pw > j ? (g.pw - j + g.sw - 1) / g.sw : 0;
  const std::size_t hi = g.w + g.pw > j ? std::min(g.wo, (g.w + g.pw - j - 1) / g.sw + 1) : 0;
  return {std::min(lo, hi), hi};
}

// col[(c*kh+i)*kw+j, oy*wo+ox] = x[c, oy*sh+i-ph, ox*sw+j-pw] (0 outside).
inline void im2col(const double* x, const ConvGeometry& g, double* col) {
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const auto [lo, hi] = valid_columns(g, j);
        double* dst = col + ((c * g.kh + i) * g.kw + j) * g.cols();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.sh + i) - static_cast<std::ptrdiff_t>(g.ph);
          double* out = dst + oy * g.wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(out, out + g.wo, 0.0);
            continue;
          }
          // Column ox reads row offset ox*sw + j - pw, in range for ox in [lo, hi).
          const double* row = x + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          std::fill(out, out + lo, 0.0);
          if (lo < hi) {
            const std::size_t first = lo * g.sw + j - g.pw;
            if (g.sw == 1) {
              std::copy(row + first, row + first + (hi - lo), out + lo);
            } else {
              for (std::size_t ox = lo; ox < hi; ++ox) out[ox] = row[first + (ox - lo) * g.sw];
            }
          }
          std::fill(out + hi, out + g.wo, 0.0);
        }
      }
}

inline void col2im_add(const double* col, const ConvGeometry& g, double* x) {
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const auto [lo, hi] = valid_columns(g, j);
        const double* src = col + ((c * g.kh + i) * g.kw + j) * g.cols();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.sh + i) - static_cast<std::ptrdiff_t>(g.ph);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          if (lo >= hi) continue;
          double* row = x + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          const std::size_t first = lo * g.sw + j - g.pw;
          const double* in = src + oy * g.wo;
          for (std::size_t ox = lo; ox < hi; ++ox) row[first + (ox - lo) * g.sw] += in[ox];
        }
      }
}

}  // namespace detail

/**
 * 2-D cross-correlation of `input` ([C_in,H,W] or [N,C_in,H,W]) with
 * `kernels` [C_out,C_in,kh,kw]; no bias. Output spatial size is
 * floor((H+2ph-kh)/sh)+1 by floor((W+2pw-kw)/sw)+1.
 */
inline Tensor conv2d(const Tensor& input, const Tensor& kernels, Hw stride = {1, 1}, Hw padding = {0, 0}) {
  const auto d = detail::spatial_dims(input, "conv2d");
  if (kernels.rank() != 4 || kernels.dim(1) != d.c) {
    throw DimensionError("conv2d: kernels " + to_string(kernels.shape()) + " do not match input " +
                         to_string(input.shape()));
  }
  if (stride.h == 0 || stride.w == 0) throw ContractError("conv2d: stride must be positive");
  const std::size_t c_out = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
  if (kh > d.h + 2 * padding.h || kw > d.w + 2 * padding.w) {
    throw DimensionError("conv2d: kernel " + to_string(kernels.shape()) + " larger than padded input " +
                         to_string(input.shape()));
  }
  detail::ConvGeometry g{d.c,       d.h,       d.w,       kh, kw, stride.h, stride.w, padding.h, padding.w,
                         (d.h + 2 * padding.h - kh) / stride.h + 1, (d.w + 2 * padding.w - kw) / stride.w + 1};
  const std::size_t in_size = d.c * d.h * d.w, out_size = c_out * g.cols();
  std::vector<double> out(d.n * out_size, 0.0);
  std::vector<double> col(g.rows() * g.cols());
  for (std::size_t b = 0; b < d.n; ++b) {
    detail::im2col(input.data().data() + b * in_size, g, col.data());
    blas::gemm(false, false, c_out, g.cols(), g.rows(), 1.0, kernels.data().data(), g.rows(), col.data(), g.cols(),
               0.0, out.data() + b * out_size, g.cols());
  }
  return make_result(detail::spatial_shape(d, c_out, g.ho, g.wo), std::move(out), {input, kernels}, "conv2d",
                     [input, kernels, g, d, c_out, in_size, out_size](detail::TensorImpl& self) {
                       std::vector<double> col(g.rows() * g.cols());
                       std::vector<double> dcol;
                       if (input.requires_grad()) dcol.resize(col.size());
                       for (std::size_t b = 0; b < d.n; ++b) {
                         const double* dy = self.grad.data() + b * out_size;
                         if (kernels.requires_grad()) {
                           detail::im2col(input.data().data() + b * in_size, g, col.data());
                           blas::gemm(false, true, c_out, g.rows(), g.cols(), 1.0, dy, g.cols(), col.data(), g.cols(),
                                      1.0, grad_buffer(kernels).data(), g.rows());
                         }
                         if (input.requires_grad()) {
                           blas::gemm(true, false, g.rows(), g.cols(), c_out, 1.0, kernels.data().data(), g.rows(), dy,
                                      g.cols(), 0.0, dcol.data(), g.cols());
                           detail::col2im_add(dcol.data(), g, grad_buffer(input).data() + b * in_size);
                         }
                       }
                     });
}

/// Mean over each window; no padding.
inline Tensor avg_pool2d(const Tensor& input, Hw window, Hw stride) {
  const auto d = detail::spatial_dims(input, "avg_pool2d");
  if (window.h == 0 || window.w == 0 || stride.h == 0 || stride.w == 0) {
    throw ContractError("avg_pool2d: window and stride must be positive");
  }
  if (window.h > d.h || window.w > d.w) {
    throw DimensionError("avg_pool2d: window " + std::to_string(window.h) + "x" + std::to_string(window.w) +
                         " exceeds input " + to_string(input.shape()));
  }
  const std::size_t ho = (d.h - window.h) / stride.h + 1, wo = (d.w - window.w) / stride.w + 1;
  const double inv = 1.0 / static_cast<double>(window.h * window.w);
  const std::size_t planes = d.n * d.c;
  std::vector<double> out(planes * ho * wo, 0.0);
  const auto x = input.data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double acc = 0.0;
        for (std::size_t i = 0; i < window.h; ++i)
          for (std::size_t j = 0; j < window.w; ++j)
            acc += x[(p * d.h + oy * stride.h + i) * d.w + ox * stride.w + j];
        out[(p * ho + oy) * wo + ox] = acc * inv;
      }
  return make_result(detail::spatial_shape(d, d.c, ho, wo), std::move(out), {input}, "avg_pool2d",
                     [input, d, window, stride, ho, wo, inv, planes](detail::TensorImpl& self) {
                       auto g = grad_buffer(input);
                       for (std::size_t p = 0; p < planes; ++p)
                         for (std::size_t oy = 0; oy < ho; ++oy)
                           for (std::size_t ox = 0; ox < wo; ++ox) {
                             const double share = self.grad[(p * ho + oy) * wo + ox] * inv;
                             for (std::size_t i = 0; i < window.h; ++i)
                               for (std::size_t j = 0; j < window.w; ++j)
                                 g[(p * d.h + oy * stride.h + i) * d.w + ox * stride.w + j] += share;
                           }
                     });
}

struct BatchNormOptions {
  bool training = true;
  double momentum = 0.1;
  double epsilon = 1e-5;
};

/**
 * Per-channel batch normalization. In training mode the statistics are the
 * biased mean/variance over (N,H,W) and the running buffers are updated with
 * the unbiased variance; in eval mode the running buffers are used as
 * constants. `running_mean` and `running_var` are mutated in place.
 */
inline Tensor batch_norm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                           Tensor& running_var, const BatchNormOptions& opt) {
  const auto d = detail::spatial_dims(input, "batch_norm2d");
  const Shape cshape{d.c};
  if (gamma.shape() != cshape || beta.shape() != cshape || running_mean.shape() != cshape ||
      running_var.shape() != cshape) {
    throw DimensionError("batch_norm2d: channel parameters do not match input " + to_string(input.shape()));
  }
  const std::size_t hw = d.h * d.w, m = d.n * hw;
  const auto x = input.data();
  std::vector<double> mean(d.c, 0.0), invstd(d.c, 0.0);
  if (opt.training) {
    for (std::size_t c = 0; c < d.c; ++c) {
      double acc = 0.0;
      for (std::size_t b = 0; b < d.n; ++b)
        for (std::size_t i = 0; i < hw; ++i) acc += x[(b * d.c + c) * hw + i];
      mean[c] = acc / static_cast<double>(m);
      double var = 0.0;
      for (std::size_t b = 0; b < d.n; ++b)
        for (std::size_t i = 0; i < hw; ++i) {
          const double diff = x[(b * d.c + c) * hw + i] - mean[c];
          var += diff * diff;
        }
      var /= static_cast<double>(m);
      invstd[c] = 1.0 / std::sqrt(var + opt.epsilon);
      const double unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
      auto rm = running_mean.mutable_data();
      auto rv = running_var.mutable_data();
      rm[c] = (1.0 - opt.momentum) * rm[c] + opt.momentum * mean[c];
      rv[c] = (1.0 - opt.momentum) * rv[c] + opt.momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < d.c; ++c) {
      mean[c] = running_mean[c];
      invstd[c] = 1.0 / std::sqrt(running_var[c] + opt.epsilon);
    }
  }
  std::vector<double> xhat(input.numel()), out(input.numel());
  for (std::size_t b = 0; b < d.n; ++b)
    for (std::size_t c = 0; c < d.c; ++c)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t idx = (b * d.c + c) * hw + i;
        xhat[idx] = (x[idx] - mean[c]) * invstd[c];
        out[idx] = gamma[c] * xhat[idx] + beta[c];
      }
  return make_result(input.shape(), std::move(out), {input, gamma, beta}, "batch_norm2d",
                     [input, gamma, beta, d, hw, m, training = opt.training, invstd = std::move(invstd),
                      xhat = std::move(xhat)](detail::TensorImpl& self) {
                       const auto& dy = self.grad;
                       std::vector<double> sum_dy(d.c, 0.0), sum_dy_xhat(d.c, 0.0);
                       for (std::size_t b = 0; b < d.n; ++b)
                         for (std::size_t c = 0; c < d.c; ++c)
                           for (std::size_t i = 0; i < hw; ++i) {
                             const std::size_t idx = (b * d.c + c) * hw + i;
                             sum_dy[c] += dy[idx];
                             sum_dy_xhat[c] += dy[idx] * xhat[idx];
                           }
                       if (gamma.requires_grad()) {
                         auto g = grad_buffer(gamma);
                         for (std::size_t c = 0; c < d.c; ++c) g[c] += sum_dy_xhat[c];
                       }
                       if (beta.requires_grad()) {
                         auto g = grad_buffer(beta);
                         for (std::size_t c = 0; c < d.c; ++c) g[c] += sum_dy[c];
                       }
                       if (!input.requires_grad()) return;
                       auto g = grad_buffer(input);
                       const double inv_m = 1.0 / static_cast<double>(m);
                       for (std::size_t b = 0; b < d.n; ++b)
                         for (std::size_t c = 0; c < d.c; ++c) {
                           const double k = gamma[c] * invstd[c];
                           for (std::size_t i = 0; i < hw; ++i) {
                             const std::size_t idx = (b * d.c + c) * hw + i;
                             if (training) {
                               g[idx] += k * (dy[idx] - inv_m * sum_dy[c] - xhat[idx] * inv_m * sum_dy_xhat[c]);
                             } else {
                               g[idx] += k * dy[idx];
                             }
                           }
                         }
                     });
}

}  // namespace attnocr
