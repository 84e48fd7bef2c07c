#pragma once

// Channel-first spatial operations on [C, H, W] tensors.

#include <cmath>
#include <limits>
#include <memory>
#include <vector>

#include "hsiseg/ops.hpp"

namespace hsiseg {

enum class ConvMode { depthwise, pointwise, dense };
enum class PoolKind { average, max };

namespace detail {

inline void require_chw(const Shape& s, const char* op) {
  if (s.size() != 3) throw DimensionError(std::string(op) + " expects [C,H,W], got " + shape_str(s));
}

// Taps of one output coordinate under align-corners-false bilinear sampling.
struct LinearTap {
  std::size_t i0, i1;
  double w0, w1;
};

inline std::vector<LinearTap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<LinearTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    auto i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    const double w1 = src - static_cast<double>(i0);
    taps[o] = {i0, i1, 1.0 - w1, w1};
  }
  return taps;
}

struct Bin {
  std::size_t begin, end;
};

inline std::vector<Bin> adaptive_bins(std::size_t in, std::size_t out) {
  std::vector<Bin> bins(out);
  for (std::size_t i = 0; i < out; ++i) {
    bins[i].begin = (i * in) / out;
    bins[i].end = ((i + 1) * in + out - 1) / out;
  }
  return bins;
}

}  // namespace detail

/// 2-D convolution with zero `same` padding.
///   depthwise: kernel [C, k, k], one filter per channel
///   pointwise: kernel [C_out, C_in]
///   dense:     kernel [C_out, C_in, k, k]
/// Bias is applied separately with add_bias(..., 0).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, ConvMode mode) {
  detail::require_chw(x.shape(), "conv2d");
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2), hw = h * w;
  if (mode == ConvMode::pointwise) {
    if (kernel.rank() != 2 || kernel.dim(1) != cin)
      throw DimensionError("conv2d pointwise: kernel " + shape_str(kernel.shape()) +
                           " does not map " + std::to_string(cin) + " channels");
    const std::size_t cout = kernel.dim(0);
    std::vector<T> out(cout * hw, T(0));
    detail::gemm_nn(kernel.data().data(), x.data().data(), out.data(), cout, cin, hw);
    return detail::finish<T>(Tensor<T>(Shape{cout, h, w}, std::move(out)), {&x, &kernel},
                             [x, kernel, cin, cout, hw](detail::Node<T>& o) {
                               if (T* gk = detail::grad_sink(kernel))
                                 detail::gemm_nt(o.grad.data(), x.data().data(), gk, cout, cin, hw);
                               if (T* gx = detail::grad_sink(x))
                                 detail::gemm_tn(kernel.data().data(), o.grad.data(), gx, cout, cin,
                                                 hw);
                             });
  }

  const bool depthwise = mode == ConvMode::depthwise;
  if (kernel.rank() < 3 || kernel.dim(kernel.rank() - 1) % 2 == 0)
    throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) + " is not an odd square");
  const std::size_t k = kernel.dim(kernel.rank() - 1);
  std::size_t cout;
  if (depthwise) {
    if (kernel.rank() != 3 || kernel.dim(0) != cin || kernel.dim(1) != k)
      throw DimensionError("conv2d depthwise: kernel " + shape_str(kernel.shape()) + " vs input " +
                           shape_str(x.shape()));
    cout = cin;
  } else {
    if (kernel.rank() != 4 || kernel.dim(1) != cin || kernel.dim(2) != k || kernel.dim(3) != k)
      throw DimensionError("conv2d dense: kernel " + shape_str(kernel.shape()) + " vs input " +
                           shape_str(x.shape()));
    cout = kernel.dim(0);
  }
  const long rad = static_cast<long>(k / 2);
  const long H = static_cast<long>(h), W = static_cast<long>(w);

  // Visits (out channel, in channel, kernel offset) triples with valid taps.
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t co = 0; co < cout; ++co) {
      const std::size_t ci_begin = depthwise ? co : 0, ci_end = depthwise ? co + 1 : cin;
      for (std::size_t ci = ci_begin; ci < ci_end; ++ci)
        for (long a = 0; a < static_cast<long>(k); ++a)
          for (long b = 0; b < static_cast<long>(k); ++b) {
            const std::size_t kidx = depthwise ? (co * k + a) * k + b
                                               : ((co * cin + ci) * k + a) * k + b;
            const long di = a - rad, dj = b - rad;
            const long i_lo = std::max(0L, -di), i_hi = std::min(H, H - di);
            const long j_lo = std::max(0L, -dj), j_hi = std::min(W, W - dj);
            fn(co, ci, kidx, di, dj, i_lo, i_hi, j_lo, j_hi);
          }
    }
  };

  std::vector<T> out(cout * hw, T(0));
  {
    const T* xs = x.data().data();
    const T* ks = kernel.data().data();
    for_each_tap([&](std::size_t co, std::size_t ci, std::size_t kidx, long di, long dj, long i_lo,
                     long i_hi, long j_lo, long j_hi) {
      const T kv = ks[kidx];
      for (long i = i_lo; i < i_hi; ++i) {
        T* orow = out.data() + co * hw + i * W;
        const T* xrow = xs + ci * hw + (i + di) * W + dj;
        for (long j = j_lo; j < j_hi; ++j) orow[j] += kv * xrow[j];
      }
    });
  }
  return detail::finish<T>(
      Tensor<T>(Shape{cout, h, w}, std::move(out)), {&x, &kernel},
      [x, kernel, for_each_tap, hw, W](detail::Node<T>& o) {
        T* gx = detail::grad_sink(x);
        T* gk = detail::grad_sink(kernel);
        const T* xs = x.data().data();
        const T* ks = kernel.data().data();
        for_each_tap([&](std::size_t co, std::size_t ci, std::size_t kidx, long di, long dj,
                         long i_lo, long i_hi, long j_lo, long j_hi) {
          const T kv = ks[kidx];
          T acc = 0;
          for (long i = i_lo; i < i_hi; ++i) {
            const T* grow = o.grad.data() + co * hw + i * W;
            const std::size_t xoff = ci * hw + (i + di) * W + dj;
            for (long j = j_lo; j < j_hi; ++j) {
              acc += grow[j] * xs[xoff + j];
              if (gx) gx[xoff + j] += grow[j] * kv;
            }
          }
          if (gk) gk[kidx] += acc;
        });
      });
}

/// Adaptive pooling with bins [floor(i*H/out), ceil((i+1)*H/out)).
template <typename T>
Tensor<T> pool_adaptive(const Tensor<T>& x, std::size_t out_h, std::size_t out_w, PoolKind kind) {
  detail::require_chw(x.shape(), "pool_adaptive");
  if (out_h == 0 || out_w == 0) throw ArgumentError("pool_adaptive: zero output extent");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (out_h > h || out_w > w)
    throw ArgumentError("pool_adaptive: output " + std::to_string(out_h) + "x" +
                        std::to_string(out_w) + " exceeds input " + shape_str(x.shape()));
  if (out_h == h && out_w == w) {
    // every bin is a single cell
    return reshape(x, x.shape());
  }
  const auto rows = detail::adaptive_bins(h, out_h);
  const auto cols = detail::adaptive_bins(w, out_w);
  std::vector<T> out(c * out_h * out_w);
  auto arg = std::make_shared<std::vector<std::size_t>>(kind == PoolKind::max ? out.size() : 0);
  auto xs = x.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oi = 0; oi < out_h; ++oi)
      for (std::size_t oj = 0; oj < out_w; ++oj) {
        const std::size_t oidx = (ch * out_h + oi) * out_w + oj;
        if (kind == PoolKind::average) {
          T acc = 0;
          for (std::size_t i = rows[oi].begin; i < rows[oi].end; ++i)
            for (std::size_t j = cols[oj].begin; j < cols[oj].end; ++j) acc += xs[(ch * h + i) * w + j];
          out[oidx] = acc / static_cast<T>((rows[oi].end - rows[oi].begin) *
                                           (cols[oj].end - cols[oj].begin));
        } else {
          std::size_t best = (ch * h + rows[oi].begin) * w + cols[oj].begin;
          for (std::size_t i = rows[oi].begin; i < rows[oi].end; ++i)
            for (std::size_t j = cols[oj].begin; j < cols[oj].end; ++j)
              if (xs[(ch * h + i) * w + j] > xs[best]) best = (ch * h + i) * w + j;
          out[oidx] = xs[best];
          (*arg)[oidx] = best;
        }
      }
  return detail::finish<T>(
      Tensor<T>(Shape{c, out_h, out_w}, std::move(out)), {&x},
      [x, kind, arg, rows, cols, c, h, w, out_h, out_w](detail::Node<T>& o) {
        T* g = detail::grad_sink(x);
        if (kind == PoolKind::max) {
          for (std::size_t i = 0; i < o.grad.size(); ++i) g[(*arg)[i]] += o.grad[i];
          return;
        }
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t oi = 0; oi < out_h; ++oi)
            for (std::size_t oj = 0; oj < out_w; ++oj) {
              const T share = o.grad[(ch * out_h + oi) * out_w + oj] /
                              static_cast<T>((rows[oi].end - rows[oi].begin) *
                                             (cols[oj].end - cols[oj].begin));
              for (std::size_t i = rows[oi].begin; i < rows[oi].end; ++i)
                for (std::size_t j = cols[oj].begin; j < cols[oj].end; ++j)
                  g[(ch * h + i) * w + j] += share;
            }
      });
}

/// Bilinear resampling, align-corners-false convention.
template <typename T>
Tensor<T> interpolate_bilinear(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  detail::require_chw(x.shape(), "interpolate_bilinear");
  if (out_h == 0 || out_w == 0) throw ArgumentError("interpolate_bilinear: zero output extent");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (out_h == h && out_w == w) return reshape(x, x.shape());
  const auto ty = detail::bilinear_taps(h, out_h);
  const auto tx = detail::bilinear_taps(w, out_w);
  std::vector<T> out(c * out_h * out_w);
  auto xs = x.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* plane = xs.data() + ch * h * w;
    for (std::size_t i = 0; i < out_h; ++i)
      for (std::size_t j = 0; j < out_w; ++j) {
        const auto& a = ty[i];
        const auto& b = tx[j];
        out[(ch * out_h + i) * out_w + j] = static_cast<T>(
            a.w0 * (b.w0 * plane[a.i0 * w + b.i0] + b.w1 * plane[a.i0 * w + b.i1]) +
            a.w1 * (b.w0 * plane[a.i1 * w + b.i0] + b.w1 * plane[a.i1 * w + b.i1]));
      }
  }
  return detail::finish<T>(Tensor<T>(Shape{c, out_h, out_w}, std::move(out)), {&x},
                           [x, ty, tx, c, h, w, out_h, out_w](detail::Node<T>& o) {
                             T* g = detail::grad_sink(x);
                             for (std::size_t ch = 0; ch < c; ++ch) {
                               T* plane = g + ch * h * w;
                               for (std::size_t i = 0; i < out_h; ++i)
                                 for (std::size_t j = 0; j < out_w; ++j) {
                                   const double go = o.grad[(ch * out_h + i) * out_w + j];
                                   const auto& a = ty[i];
                                   const auto& b = tx[j];
                                   plane[a.i0 * w + b.i0] += static_cast<T>(go * a.w0 * b.w0);
                                   plane[a.i0 * w + b.i1] += static_cast<T>(go * a.w0 * b.w1);
                                   plane[a.i1 * w + b.i0] += static_cast<T>(go * a.w1 * b.w0);
                                   plane[a.i1 * w + b.i1] += static_cast<T>(go * a.w1 * b.w1);
                                 }
                             }
                           });
}

/// Per-channel spatial mean: [C,H,W] -> [C].
template <typename T>
Tensor<T> mean_spatial(const Tensor<T>& x) {
  detail::require_chw(x.shape(), "mean_spatial");
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  std::vector<T> out(c, T(0));
  auto xs = x.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    T acc = 0;
    for (std::size_t i = 0; i < hw; ++i) acc += xs[ch * hw + i];
    out[ch] = acc / static_cast<T>(hw);
  }
  return detail::finish<T>(Tensor<T>(Shape{c}, std::move(out)), {&x},
                           [x, c, hw](detail::Node<T>& o) {
                             T* g = detail::grad_sink(x);
                             for (std::size_t ch = 0; ch < c; ++ch) {
                               const T share = o.grad[ch] / static_cast<T>(hw);
                               for (std::size_t i = 0; i < hw; ++i) g[ch * hw + i] += share;
                             }
                           });
}

/// Mean over every k x k window fully inside the plane: [C,H,W] -> [C,H-k+1,W-k+1].
template <typename T>
Tensor<T> box_filter_valid(const Tensor<T>& x, std::size_t k) {
  detail::require_chw(x.shape(), "box_filter_valid");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (k == 0 || k > h || k > w)
    throw ArgumentError("box_filter_valid: window " + std::to_string(k) + " vs " +
                        shape_str(x.shape()));
  const std::size_t oh = h - k + 1, ow = w - k + 1;
  const T inv = T(1) / static_cast<T>(k * k);
  std::vector<T> out(c * oh * ow);
  auto xs = x.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        T acc = 0;
        for (std::size_t a = 0; a < k; ++a)
          for (std::size_t b = 0; b < k; ++b) acc += xs[(ch * h + i + a) * w + j + b];
        out[(ch * oh + i) * ow + j] = acc * inv;
      }
  return detail::finish<T>(Tensor<T>(Shape{c, oh, ow}, std::move(out)), {&x},
                           [x, c, h, w, oh, ow, k, inv](detail::Node<T>& o) {
                             T* g = detail::grad_sink(x);
                             for (std::size_t ch = 0; ch < c; ++ch)
                               for (std::size_t i = 0; i < oh; ++i)
                                 for (std::size_t j = 0; j < ow; ++j) {
                                   const T share = o.grad[(ch * oh + i) * ow + j] * inv;
                                   for (std::size_t a = 0; a < k; ++a)
                                     for (std::size_t b = 0; b < k; ++b)
                                       g[(ch * h + i + a) * w + j + b] += share;
                                 }
                           });
}

}  // namespace hsiseg
