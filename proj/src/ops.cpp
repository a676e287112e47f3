/*
 *  Copyright 2026 The MSEDenseNet Authors
 *
 *  Licensed under the Apache License, Version 2.0 (the "License");
 *  you may not use this file except in compliance with the License.
 *  You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 *  Unless required by applicable law or agreed to in writing, software
 *  distributed under the License is distributed on an "AS IS" BASIS,
 *  WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 *  See the License for the specific language governing permissions and
 *  limitations under the License.
 */

#include "msed/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace msed {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

template <typename T>
void accumulate(detail::Node<T>& in, const std::vector<T>& g) {
  if (!in.requires_grad) return;
  auto& dst = in.ensure_grad();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

struct ConvGeometry {
  std::size_t n, c, h, w, f, kh, kw, stride;
  std::size_t out_h, out_w;
  std::size_t pad_top, pad_left;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t plane() const { return out_h * out_w; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad_top == 0 && pad_left == 0; }
};

std::size_t same_padding_total(std::size_t in, std::size_t k, std::size_t stride) {
  std::size_t out = (in + stride - 1) / stride;
  std::ptrdiff_t total = static_cast<std::ptrdiff_t>((out - 1) * stride + k) - static_cast<std::ptrdiff_t>(in);
  return total > 0 ? static_cast<std::size_t>(total) : 0;
}

// Output columns [lo, hi) of one kernel tap read inside the image row.
inline void valid_span(const ConvGeometry& g, std::size_t kx, std::size_t& lo, std::size_t& hi) {
  const auto pad = static_cast<std::ptrdiff_t>(g.pad_left), k = static_cast<std::ptrdiff_t>(kx);
  const auto s = static_cast<std::ptrdiff_t>(g.stride), w = static_cast<std::ptrdiff_t>(g.w);
  std::ptrdiff_t first = pad - k > 0 ? (pad - k + s - 1) / s : 0;          // smallest ox with ix >= 0
  std::ptrdiff_t last = w - 1 + pad - k >= 0 ? (w - 1 + pad - k) / s + 1 : 0;  // one past largest ox with ix < w
  lo = static_cast<std::size_t>(std::min<std::ptrdiff_t>(first, static_cast<std::ptrdiff_t>(g.out_w)));
  hi = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(last, static_cast<std::ptrdiff_t>(lo),
                                                           static_cast<std::ptrdiff_t>(g.out_w)));
}

template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
  const std::size_t plane = g.plane();
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        T* row = col + ((c * g.kh + ky) * g.kw + kx) * plane;
        const T* src = img + c * g.h * g.w;
        std::size_t lo = 0, hi = 0;
        valid_span(g, kx, lo, hi);
        const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(g.pad_left);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          T* out = row + oy * g.out_w;
          std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad_top);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(out, out + g.out_w, T(0));
            continue;
          }
          const T* in = src + static_cast<std::size_t>(iy) * g.w;
          std::fill(out, out + lo, T(0));
          if (g.stride == 1) {
            std::copy(in + (static_cast<std::ptrdiff_t>(lo) + x0), in + (static_cast<std::ptrdiff_t>(hi) + x0), out + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) out[ox] = in[static_cast<std::ptrdiff_t>(ox * g.stride) + x0];
          }
          std::fill(out + hi, out + g.out_w, T(0));
        }
      }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* img) {
  const std::size_t plane = g.plane();
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const T* row = col + ((c * g.kh + ky) * g.kw + kx) * plane;
        T* dst = img + c * g.h * g.w;
        std::size_t lo = 0, hi = 0;
        valid_span(g, kx, lo, hi);
        const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(g.pad_left);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad_top);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          T* out = dst + static_cast<std::size_t>(iy) * g.w;
          const T* in = row + oy * g.out_w;
          if (g.stride == 1) {
            T* o = out + x0;
            for (std::size_t ox = lo; ox < hi; ++ox) o[ox] += in[ox];
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) out[static_cast<std::ptrdiff_t>(ox * g.stride) + x0] += in[ox];
          }
        }
      }
}

template <typename T>
std::size_t feature_axis_inner(const Tensor<T>& x) {
  std::size_t inner = 1;
  for (std::size_t i = 2; i < x.rank(); ++i) inner *= x.dim(i);
  return inner;
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias, std::size_t stride,
                 Padding padding) {
  require(input.rank() == 4, "conv2d: input must be [N,C,H,W], got " + shape_str(input.shape()));
  require(weights.rank() == 4, "conv2d: weights must be [F,C,kh,kw], got " + shape_str(weights.shape()));
  require(stride > 0, "conv2d: stride must be positive");
  require(weights.dim(1) == input.dim(1), "conv2d: channel mismatch, input has " + std::to_string(input.dim(1)) +
                                              " channels but weights expect " + std::to_string(weights.dim(1)));
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), weights.dim(0), weights.dim(2),
                 weights.dim(3), stride, 0, 0, 0, 0};
  std::size_t pad_h = 0, pad_w = 0;
  if (padding == Padding::kSame) {
    pad_h = same_padding_total(g.h, g.kh, stride);
    pad_w = same_padding_total(g.w, g.kw, stride);
  }
  require(g.kh <= g.h + pad_h && g.kw <= g.w + pad_w, "conv2d: kernel larger than padded input");
  g.pad_top = pad_h / 2;
  g.pad_left = pad_w / 2;
  g.out_h = (g.h + pad_h - g.kh) / stride + 1;
  g.out_w = (g.w + pad_w - g.kw) / stride + 1;
  if (bias.defined()) require(bias.numel() == g.f, "conv2d: bias length must equal filter count");

  const std::size_t patch = g.patch(), plane = g.plane();
  const std::size_t in_sample = g.c * g.h * g.w, out_sample = g.f * plane;
  std::vector<T> out(g.n * out_sample);
  // Columns are rebuilt per sample in backward rather than kept for the whole
  // batch; the copy is cheap next to the GEMM and saves most of the memory.
  std::vector<T> scratch(g.pointwise() ? 0 : patch * plane);
  CMapMat<T> w(weights.raw(), g.f, patch);
  for (std::size_t n = 0; n < g.n; ++n) {
    const T* colp;
    if (g.pointwise()) {
      colp = input.raw() + n * in_sample;
    } else {
      im2col(input.raw() + n * in_sample, g, scratch.data());
      colp = scratch.data();
    }
    MapMat<T> o(out.data() + n * out_sample, g.f, plane);
    o.noalias() = w * CMapMat<T>(colp, patch, plane);
    if (bias.defined())
      for (std::size_t f = 0; f < g.f; ++f) o.row(f).array() += bias[f];
  }

  Shape shape{g.n, g.f, g.out_h, g.out_w};
  return make_result<T>(
      std::move(shape), std::move(out), "conv2d", {input, weights, bias},
      [g](detail::Node<T>& node) {
        auto& x = *node.inputs[0];
        auto& wt = *node.inputs[1];
        detail::Node<T>* b = node.inputs.size() > 2 ? node.inputs[2].get() : nullptr;
        const std::size_t patch = g.patch(), plane = g.plane();
        const std::size_t in_sample = g.c * g.h * g.w, out_sample = g.f * plane;
        CMapMat<T> w(wt.data.data(), g.f, patch);
        std::vector<T> dcol(g.pointwise() ? 0 : patch * plane);
        std::vector<T> col(g.pointwise() || !wt.requires_grad ? 0 : patch * plane);
        for (std::size_t n = 0; n < g.n; ++n) {
          CMapMat<T> dout(node.grad.data() + n * out_sample, g.f, plane);
          const T* colp = x.data.data() + n * in_sample;
          if (!col.empty()) {
            im2col(colp, g, col.data());
            colp = col.data();
          }
          if (wt.requires_grad) {
            MapMat<T> dw(wt.ensure_grad().data(), g.f, patch);
            dw.noalias() += dout * CMapMat<T>(colp, patch, plane).transpose();
          }
          if (b && b->requires_grad) {
            auto& db = b->ensure_grad();
            for (std::size_t f = 0; f < g.f; ++f) db[f] += dout.row(f).sum();
          }
          if (x.requires_grad) {
            T* dx = x.ensure_grad().data() + n * in_sample;
            if (g.pointwise()) {
              MapMat<T>(dx, patch, plane).noalias() += w.transpose() * dout;
            } else {
              MapMat<T>(dcol.data(), patch, plane).noalias() = w.transpose() * dout;
              col2im(dcol.data(), g, dx);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormStats<T>& stats,
                     double momentum, bool training, double epsilon) {
  require(input.rank() == 2 || input.rank() == 4, "batch_norm: input must be [N,C] or [N,C,H,W], got " +
                                                      shape_str(input.shape()));
  const std::size_t n = input.dim(0), c = input.dim(1), inner = feature_axis_inner(input);
  require(gamma.numel() == c && beta.numel() == c, "batch_norm: gamma/beta length must equal channel count");
  require(stats.mean.size() == c && stats.var.size() == c, "batch_norm: running stats sized for a different layer");
  const std::size_t m = n * inner;
  const T* x = input.raw();
  std::vector<T> out(input.numel()), xhat(input.numel());
  std::vector<T> invstd(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    T mu, var;
    if (training) {
      double s = 0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < inner; ++i) s += x[(b * c + ch) * inner + i];
      mu = static_cast<T>(s / static_cast<double>(m));
      double v = 0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < inner; ++i) {
          double d = x[(b * c + ch) * inner + i] - mu;
          v += d * d;
        }
      var = static_cast<T>(v / static_cast<double>(m));
      stats.mean[ch] = static_cast<T>(momentum * stats.mean[ch] + (1.0 - momentum) * mu);
      stats.var[ch] = static_cast<T>(momentum * stats.var[ch] + (1.0 - momentum) * var);
    } else {
      mu = stats.mean[ch];
      var = stats.var[ch];
    }
    invstd[ch] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var) + epsilon));
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < inner; ++i) {
        std::size_t k = (b * c + ch) * inner + i;
        xhat[k] = (x[k] - mu) * invstd[ch];
        out[k] = gamma[ch] * xhat[k] + beta[ch];
      }
  }
  return make_result<T>(
      input.shape(), std::move(out), "batch_norm", {input, gamma, beta},
      [n, c, inner, m, training, xhat = std::move(xhat), invstd = std::move(invstd)](detail::Node<T>& node) {
        auto& x = *node.inputs[0];
        auto& ga = *node.inputs[1];
        auto& be = *node.inputs[2];
        const auto& dy = node.grad;
        for (std::size_t ch = 0; ch < c; ++ch) {
          T sum_dy = 0, sum_dy_xhat = 0;
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < inner; ++i) {
              std::size_t k = (b * c + ch) * inner + i;
              sum_dy += dy[k];
              sum_dy_xhat += dy[k] * xhat[k];
            }
          if (ga.requires_grad) ga.ensure_grad()[ch] += sum_dy_xhat;
          if (be.requires_grad) be.ensure_grad()[ch] += sum_dy;
          if (!x.requires_grad) continue;
          auto& dx = x.ensure_grad();
          const T g = ga.data[ch];
          const T scale = g * invstd[ch];
          const T mm = static_cast<T>(m);
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < inner; ++i) {
              std::size_t k = (b * c + ch) * inner + i;
              if (training)
                dx[k] += scale / mm * (mm * dy[k] - sum_dy - xhat[k] * sum_dy_xhat);
              else
                dx[k] += scale * dy[k];
            }
        }
      });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] < T(0) ? T(0) : x[i];  // NaN passes through
  return make_result<T>(x.shape(), std::move(out), "relu", {x}, [](detail::Node<T>& node) {
    auto& in = *node.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (in.data[i] > T(0)) g[i] += node.grad[i];
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    T v = x[i];
    if (v >= T(0)) {
      out[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      T e = std::exp(v);
      out[i] = e / (T(1) + e);
    }
  }
  return make_result<T>(x.shape(), std::move(out), "sigmoid", {x}, [](detail::Node<T>& node) {
    auto& in = *node.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      T s = node.data[i];
      g[i] += node.grad[i] * s * (T(1) - s);
    }
  });
}

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& input, std::size_t window, std::size_t stride) {
  require(input.rank() == 4, "avg_pool2d: input must be [N,C,H,W]");
  require(window > 0 && stride > 0, "avg_pool2d: window and stride must be positive");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  require(window <= h && window <= w, "avg_pool2d: window " + std::to_string(window) + " larger than input " +
                                          std::to_string(h) + "x" + std::to_string(w));
  const std::size_t oh = (h - window) / stride + 1, ow = (w - window) / stride + 1;
  const T inv = T(1) / static_cast<T>(window * window);
  std::vector<T> out(n * c * oh * ow);
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = input.raw() + p * h * w;
    T* dst = out.data() + p * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T s = 0;
        for (std::size_t ky = 0; ky < window; ++ky)
          for (std::size_t kx = 0; kx < window; ++kx) s += src[(oy * stride + ky) * w + ox * stride + kx];
        dst[oy * ow + ox] = s * inv;
      }
  }
  return make_result<T>({n, c, oh, ow}, std::move(out), "avg_pool2d", {input},
                        [n, c, h, w, oh, ow, window, stride, inv](detail::Node<T>& node) {
                          auto& in = *node.inputs[0];
                          if (!in.requires_grad) return;
                          auto& g = in.ensure_grad();
                          for (std::size_t p = 0; p < n * c; ++p) {
                            T* dst = g.data() + p * h * w;
                            const T* dy = node.grad.data() + p * oh * ow;
                            for (std::size_t oy = 0; oy < oh; ++oy)
                              for (std::size_t ox = 0; ox < ow; ++ox) {
                                T v = dy[oy * ow + ox] * inv;
                                for (std::size_t ky = 0; ky < window; ++ky)
                                  for (std::size_t kx = 0; kx < window; ++kx)
                                    dst[(oy * stride + ky) * w + ox * stride + kx] += v;
                              }
                          }
                        });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  require(input.rank() == 4, "global_avg_pool: input must be [N,C,H,W]");
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  std::vector<T> out(n * c);
  for (std::size_t p = 0; p < n * c; ++p) {
    T s = 0;
    const T* src = input.raw() + p * hw;
    for (std::size_t i = 0; i < hw; ++i) s += src[i];
    out[p] = s / static_cast<T>(hw);
  }
  return make_result<T>({n, c}, std::move(out), "global_avg_pool", {input}, [n, c, hw](detail::Node<T>& node) {
    auto& in = *node.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.ensure_grad();
    for (std::size_t p = 0; p < n * c; ++p) {
      T v = node.grad[p] / static_cast<T>(hw);
      for (std::size_t i = 0; i < hw; ++i) g[p * hw + i] += v;
    }
  });
}

template <typename T>
Tensor<T> dense(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias) {
  require(input.rank() == 2 && weights.rank() == 2, "dense: expects input [N,D] and weights [D,U]");
  const std::size_t n = input.dim(0), d = input.dim(1), u = weights.dim(1);
  require(weights.dim(0) == d, "dense: inner dimension mismatch, input has " + std::to_string(d) +
                                   " features but weights expect " + std::to_string(weights.dim(0)));
  require(bias.defined() && bias.numel() == u, "dense: bias length must equal unit count");
  std::vector<T> out(n * u);
  MapMat<T> o(out.data(), n, u);
  o.noalias() = CMapMat<T>(input.raw(), n, d) * CMapMat<T>(weights.raw(), d, u);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < u; ++j) o(r, j) += bias[j];
  return make_result<T>({n, u}, std::move(out), "dense", {input, weights, bias}, [n, d, u](detail::Node<T>& node) {
    auto& x = *node.inputs[0];
    auto& w = *node.inputs[1];
    auto& b = *node.inputs[2];
    CMapMat<T> dy(node.grad.data(), n, u);
    if (x.requires_grad)
      MapMat<T>(x.ensure_grad().data(), n, d).noalias() += dy * CMapMat<T>(w.data.data(), d, u).transpose();
    if (w.requires_grad)
      MapMat<T>(w.ensure_grad().data(), d, u).noalias() += CMapMat<T>(x.data.data(), n, d).transpose() * dy;
    if (b.requires_grad) {
      auto& db = b.ensure_grad();
      for (std::size_t j = 0; j < u; ++j) db[j] += dy.col(j).sum();
    }
  });
}

template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rank() >= 2 && a.rank() == b.rank(), "concat: tensors must share rank >= 2");
  require(a.dim(0) == b.dim(0), "concat: batch mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  for (std::size_t i = 2; i < a.rank(); ++i)
    require(a.dim(i) == b.dim(i), "concat: non-feature dims differ " + shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
  const std::size_t n = a.dim(0), inner = feature_axis_inner(a);
  const std::size_t ca = a.dim(1) * inner, cb = b.dim(1) * inner;
  std::vector<T> out(n * (ca + cb));
  for (std::size_t r = 0; r < n; ++r) {
    std::copy_n(a.raw() + r * ca, ca, out.data() + r * (ca + cb));
    std::copy_n(b.raw() + r * cb, cb, out.data() + r * (ca + cb) + ca);
  }
  Shape shape = a.shape();
  shape[1] = a.dim(1) + b.dim(1);
  return make_result<T>(std::move(shape), std::move(out), "concat", {a, b}, [n, ca, cb](detail::Node<T>& node) {
    auto& x = *node.inputs[0];
    auto& y = *node.inputs[1];
    for (std::size_t r = 0; r < n; ++r) {
      const T* src = node.grad.data() + r * (ca + cb);
      if (x.requires_grad) {
        T* dst = x.ensure_grad().data() + r * ca;
        for (std::size_t i = 0; i < ca; ++i) dst[i] += src[i];
      }
      if (y.requires_grad) {
        T* dst = y.ensure_grad().data() + r * cb;
        for (std::size_t i = 0; i < cb; ++i) dst[i] += src[ca + i];
      }
    }
  });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& input, std::size_t begin, std::size_t end) {
  require(input.rank() >= 2 && begin < end && end <= input.dim(1), "slice: invalid channel range");
  const std::size_t n = input.dim(0), inner = feature_axis_inner(input);
  const std::size_t full = input.dim(1) * inner, part = (end - begin) * inner, off = begin * inner;
  std::vector<T> out(n * part);
  for (std::size_t r = 0; r < n; ++r) std::copy_n(input.raw() + r * full + off, part, out.data() + r * part);
  Shape shape = input.shape();
  shape[1] = end - begin;
  return make_result<T>(std::move(shape), std::move(out), "slice", {input}, [n, full, part, off](detail::Node<T>& node) {
    auto& in = *node.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.ensure_grad();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t i = 0; i < part; ++i) g[r * full + off + i] += node.grad[r * part + i];
  });
}

template <typename T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& s) {
  require(x.rank() == 4 && s.rank() == 2 && s.dim(0) == x.dim(0) && s.dim(1) == x.dim(1),
          "scale_channels: expects x [N,C,H,W] and s [N,C], got " + shape_str(x.shape()) + " and " +
              shape_str(s.shape()));
  const std::size_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(x.numel());
  for (std::size_t p = 0; p < nc; ++p)
    for (std::size_t i = 0; i < hw; ++i) out[p * hw + i] = x[p * hw + i] * s[p];
  return make_result<T>(x.shape(), std::move(out), "scale_channels", {x, s}, [nc, hw](detail::Node<T>& node) {
    auto& xin = *node.inputs[0];
    auto& sin = *node.inputs[1];
    for (std::size_t p = 0; p < nc; ++p) {
      T ds = 0;
      for (std::size_t i = 0; i < hw; ++i) ds += node.grad[p * hw + i] * xin.data[p * hw + i];
      if (sin.requires_grad) sin.ensure_grad()[p] += ds;
      if (xin.requires_grad) {
        auto& g = xin.ensure_grad();
        for (std::size_t i = 0; i < hw; ++i) g[p * hw + i] += node.grad[p * hw + i] * sin.data[p];
      }
    }
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result<T>(a.shape(), std::move(out), "add", {a, b}, [](detail::Node<T>& node) {
    accumulate(*node.inputs[0], node.grad);
    accumulate(*node.inputs[1], node.grad);
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result<T>(a.shape(), std::move(out), "mul", {a, b}, [](detail::Node<T>& node) {
    auto& x = *node.inputs[0];
    auto& y = *node.inputs[1];
    if (x.requires_grad) {
      auto& g = x.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i] * y.data[i];
    }
    if (y.requires_grad) {
      auto& g = y.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i] * x.data[i];
    }
  });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * x[i];
  return make_result<T>(x.shape(), std::move(out), "square", {x}, [](detail::Node<T>& node) {
    auto& in = *node.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += T(2) * in.data[i] * node.grad[i];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  return make_result<T>({1}, {s}, "sum", {x}, [](detail::Node<T>& node) {
    auto& in = *node.inputs[0];
    if (!in.requires_grad) return;
    for (auto& g : in.ensure_grad()) g += node.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  const T count = static_cast<T>(x.numel());
  return make_result<T>({1}, {s / count}, "mean", {x}, [count](detail::Node<T>& node) {
    auto& in = *node.inputs[0];
    if (!in.requires_grad) return;
    for (auto& g : in.ensure_grad()) g += node.grad[0] / count;
  });
}

template <typename T>
bool all_finite(const Tensor<T>& x) {
  return std::all_of(x.data().begin(), x.data().end(), [](T v) { return std::isfinite(v); });
}

#define MSED_INSTANTIATE_OPS(T)                                                                                    \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, Padding);          \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, BatchNormStats<T>&, double, \
                                bool, double);                                                                     \
  template Tensor<T> relu(const Tensor<T>&);                                                                       \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                                    \
  template Tensor<T> avg_pool2d(const Tensor<T>&, std::size_t, std::size_t);                                       \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                                            \
  template Tensor<T> dense(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> concat(const Tensor<T>&, const Tensor<T>&);                                                   \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t);                                            \
  template Tensor<T> scale_channels(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                      \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                      \
  template Tensor<T> square(const Tensor<T>&);                                                                     \
  template Tensor<T> sum(const Tensor<T>&);                                                                        \
  template Tensor<T> mean(const Tensor<T>&);                                                                       \
  template bool all_finite(const Tensor<T>&);

MSED_INSTANTIATE_OPS(float)
MSED_INSTANTIATE_OPS(double)

#undef MSED_INSTANTIATE_OPS

}  // namespace msed
