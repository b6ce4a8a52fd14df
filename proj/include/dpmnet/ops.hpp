/* Copyright 2026 The dpmnet Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License. */

#pragma once

// Dense kernels shared by every numeric module.
//
// Convolution convention: all "convolutions" in dpmnet are valid-mode
// cross-correlations (the kernel is not flipped):
//
//   out[o, i, j] = sum_{c, u, v} in[c, i*stride + u, j*stride + v] * w[o, c, u, v]
//
// Max tie-break: the first maximum in row-major scan order of the window
// wins. Pooling, the deformation layer and the OR layer all use it.

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "dpmnet/tensor.hpp"

namespace dpmnet {

inline std::size_t valid_extent(std::size_t in, std::size_t k,
                                 std::size_t stride) {
  return (in - k) / stride + 1;
}

inline void require_chw(const Tensor& t, const char* what) {
  if (t.rank() != 3) {
    throw ShapeError(std::string(what) + ": expected [C,H,W] input, got " +
                     shape_str(t.shape()));
  }
}

/// Valid-mode strided cross-correlation of [C,H,W] with [O,C,kh,kw].
inline Tensor correlate2d(const Tensor& input, const Tensor& filters,
                          int stride) {
  require_chw(input, "correlate2d");
  if (filters.rank() != 4) {
    throw ShapeError("correlate2d: expected [O,C,kh,kw] filters, got " +
                     shape_str(filters.shape()));
  }
  if (stride <= 0) throw ShapeError("correlate2d: stride must be positive");
  const std::size_t C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const std::size_t O = filters.dim(0), kh = filters.dim(2),
                    kw = filters.dim(3);
  if (filters.dim(1) != C) {
    throw ShapeError("correlate2d: filter channels " +
                     std::to_string(filters.dim(1)) + " != input channels " +
                     std::to_string(C));
  }
  if (kh > H || kw > W) {
    throw ShapeError("correlate2d: kernel " + std::to_string(kh) + "x" +
                     std::to_string(kw) + " larger than input " +
                     std::to_string(H) + "x" + std::to_string(W));
  }
  const std::size_t s = static_cast<std::size_t>(stride);
  const std::size_t Ho = valid_extent(H, kh, s), Wo = valid_extent(W, kw, s);
  Tensor out(Shape{O, Ho, Wo});
  double* y = out.ptr();
  const double* x = input.ptr();
  const double* w = filters.ptr();
  for (std::size_t o = 0; o < O; ++o) {
    double* yo = y + o * Ho * Wo;
    for (std::size_t c = 0; c < C; ++c) {
      const double* xc = x + c * H * W;
      for (std::size_t u = 0; u < kh; ++u) {
        for (std::size_t v = 0; v < kw; ++v) {
          const double wt = w[((o * C + c) * kh + u) * kw + v];
          for (std::size_t i = 0; i < Ho; ++i) {
            const double* xr = xc + (i * s + u) * W + v;
            double* yr = yo + i * Wo;
            if (s == 1) {
              for (std::size_t j = 0; j < Wo; ++j) yr[j] += wt * xr[j];
            } else {
              for (std::size_t j = 0; j < Wo; ++j) yr[j] += wt * xr[j * s];
            }
          }
        }
      }
    }
  }
  return out;
}

/// Accumulates input and/or filter gradients of correlate2d. Either output
/// pointer may be null; non-null outputs must already have the right shape.
inline void correlate2d_backward(const Tensor& input, const Tensor& filters,
                                 int stride, const Tensor& grad_out,
                                 Tensor* grad_input, Tensor* grad_filters) {
  const std::size_t C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const std::size_t O = filters.dim(0), kh = filters.dim(2),
                    kw = filters.dim(3);
  const std::size_t s = static_cast<std::size_t>(stride);
  const std::size_t Ho = grad_out.dim(1), Wo = grad_out.dim(2);
  const double* x = input.ptr();
  const double* w = filters.ptr();
  const double* dy = grad_out.ptr();
  double* dx = grad_input ? grad_input->ptr() : nullptr;
  double* dw = grad_filters ? grad_filters->ptr() : nullptr;
  for (std::size_t o = 0; o < O; ++o) {
    const double* dyo = dy + o * Ho * Wo;
    for (std::size_t c = 0; c < C; ++c) {
      const double* xc = x + c * H * W;
      double* dxc = dx ? dx + c * H * W : nullptr;
      for (std::size_t u = 0; u < kh; ++u) {
        for (std::size_t v = 0; v < kw; ++v) {
          const std::size_t widx = ((o * C + c) * kh + u) * kw + v;
          const double wt = w[widx];
          double acc = 0.0;
          for (std::size_t i = 0; i < Ho; ++i) {
            const std::size_t row = (i * s + u) * W + v;
            const double* dyr = dyo + i * Wo;
            if (dw) {
              const double* xr = xc + row;
              for (std::size_t j = 0; j < Wo; ++j) acc += dyr[j] * xr[j * s];
            }
            if (dxc) {
              double* dxr = dxc + row;
              for (std::size_t j = 0; j < Wo; ++j) dxr[j * s] += wt * dyr[j];
            }
          }
          if (dw) dw[widx] += acc;
        }
      }
    }
  }
}

struct PoolResult {
  Tensor output;
  /// Flat input index of the selected maximum for every output element.
  std::vector<std::size_t> argmax;
};

inline PoolResult maxpool2d(const Tensor& input, int k, int stride) {
  require_chw(input, "maxpool2d");
  if (k <= 0 || stride <= 0) {
    throw ShapeError("maxpool2d: kernel and stride must be positive (k=" +
                     std::to_string(k) + ", stride=" + std::to_string(stride) +
                     ")");
  }
  const std::size_t C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const std::size_t kk = static_cast<std::size_t>(k);
  const std::size_t s = static_cast<std::size_t>(stride);
  if (kk > H || kk > W) {
    throw ShapeError("maxpool2d: window " + std::to_string(k) +
                     " larger than input " + std::to_string(H) + "x" +
                     std::to_string(W));
  }
  const std::size_t Ho = valid_extent(H, kk, s), Wo = valid_extent(W, kk, s);
  PoolResult res{Tensor(Shape{C, Ho, Wo}), std::vector<std::size_t>(C * Ho * Wo)};
  const double* x = input.ptr();
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < Ho; ++i) {
      for (std::size_t j = 0; j < Wo; ++j) {
        std::size_t best = (c * H + i * s) * W + j * s;
        double bv = x[best];
        for (std::size_t u = 0; u < kk; ++u) {
          for (std::size_t v = 0; v < kk; ++v) {
            const std::size_t idx = (c * H + i * s + u) * W + j * s + v;
            if (x[idx] > bv) {
              bv = x[idx];
              best = idx;
            }
          }
        }
        const std::size_t o = (c * Ho + i) * Wo + j;
        res.output[o] = bv;
        res.argmax[o] = best;
      }
    }
  }
  return res;
}

/// Routes each output gradient to its saved argmax position.
inline void maxpool2d_backward(const Tensor& grad_out,
                               const std::vector<std::size_t>& argmax,
                               Tensor& grad_input) {
  for (std::size_t o = 0; o < grad_out.size(); ++o) {
    grad_input[argmax[o]] += grad_out[o];
  }
}

inline Tensor relu(const Tensor& x) {
  Tensor out = x;
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return out;
}

inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_chw(x, "add_bias");
  if (bias.size() != x.dim(0)) {
    throw ShapeError("add_bias: bias length " + std::to_string(bias.size()) +
                     " != channels " + std::to_string(x.dim(0)));
  }
  Tensor out = x;
  const std::size_t plane = x.dim(1) * x.dim(2);
  for (std::size_t c = 0; c < x.dim(0); ++c) {
    for (std::size_t p = 0; p < plane; ++p) out[c * plane + p] += bias[c];
  }
  return out;
}

/// Bilinear resampling of a [C,H,W] image with half-pixel centers, so that
/// continuous edge coordinates scale exactly by in/out.
inline Tensor resize_bilinear(const Tensor& img, std::size_t out_h,
                              std::size_t out_w) {
  require_chw(img, "resize_bilinear");
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  Tensor out(Shape{C, out_h, out_w});
  const double sy = static_cast<double>(H) / static_cast<double>(out_h);
  const double sx = static_cast<double>(W) / static_cast<double>(out_w);
  for (std::size_t i = 0; i < out_h; ++i) {
    double fy = (static_cast<double>(i) + 0.5) * sy - 0.5;
    fy = std::clamp(fy, 0.0, static_cast<double>(H - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, H - 1);
    const double ay = fy - static_cast<double>(y0);
    for (std::size_t j = 0; j < out_w; ++j) {
      double fx = (static_cast<double>(j) + 0.5) * sx - 0.5;
      fx = std::clamp(fx, 0.0, static_cast<double>(W - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, W - 1);
      const double ax = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < C; ++c) {
        const double top = img.at(c, y0, x0) * (1 - ax) + img.at(c, y0, x1) * ax;
        const double bot = img.at(c, y1, x0) * (1 - ax) + img.at(c, y1, x1) * ax;
        out.at(c, i, j) = top * (1 - ay) + bot * ay;
      }
    }
  }
  return out;
}

}  // namespace dpmnet
