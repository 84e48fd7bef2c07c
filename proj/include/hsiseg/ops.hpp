#pragma once

// Elementwise, shape, reduction, and matrix operations on Tensor.

#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <random>
#include <vector>

#include "hsiseg/tensor.hpp"

namespace hsiseg {

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b)
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                         shape_str(b));
}

// Views a shape as outer x n x inner around `axis`.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size())
    throw ArgumentError("axis " + std::to_string(axis) + " out of range for shape " +
                        shape_str(shape));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename T, typename F, typename D>
Tensor<T> unary(const Tensor<T>& x, F f, D dfdx) {
  std::vector<T> out(x.numel());
  auto xs = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xs[i]);
  return finish<T>(Tensor<T>(x.shape(), std::move(out)), {&x}, [x, dfdx](Node<T>& o) {
    T* gx = grad_sink(x);
    auto xs = x.data();
    for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i] * dfdx(xs[i], o.data[i]);
  });
}

// C[m,n] += A[m,k] B[k,n]
template <typename T>
void gemm_nn(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t m,
             std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// A[m,k] += C[m,n] B[k,n]^T
template <typename T>
void gemm_nt(const T* __restrict c, const T* __restrict b, T* __restrict a, std::size_t m,
             std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ci = c + i * n;
    T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T* bp = b + p * n;
      T acc = 0;
      for (std::size_t j = 0; j < n; ++j) acc += ci[j] * bp[j];
      ai[p] += acc;
    }
  }
}

// B[k,n] += A[m,k]^T C[m,n]
template <typename T>
void gemm_tn(const T* __restrict a, const T* __restrict c, T* __restrict b, std::size_t m,
             std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    const T* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) bp[j] += av * ci[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.numel());
  auto as = a.data(), bs = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = as[i] + bs[i];
  return detail::finish<T>(Tensor<T>(a.shape(), std::move(out)), {&a, &b},
                           [a, b](detail::Node<T>& o) {
                             if (T* g = detail::grad_sink(a))
                               for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
                             if (T* g = detail::grad_sink(b))
                               for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
                           });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.numel());
  auto as = a.data(), bs = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = as[i] - bs[i];
  return detail::finish<T>(Tensor<T>(a.shape(), std::move(out)), {&a, &b},
                           [a, b](detail::Node<T>& o) {
                             if (T* g = detail::grad_sink(a))
                               for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
                             if (T* g = detail::grad_sink(b))
                               for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i];
                           });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.numel());
  auto as = a.data(), bs = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = as[i] * bs[i];
  return detail::finish<T>(Tensor<T>(a.shape(), std::move(out)), {&a, &b},
                           [a, b](detail::Node<T>& o) {
                             auto as = a.data(), bs = b.data();
                             if (T* g = detail::grad_sink(a))
                               for (std::size_t i = 0; i < o.grad.size(); ++i)
                                 g[i] += o.grad[i] * bs[i];
                             if (T* g = detail::grad_sink(b))
                               for (std::size_t i = 0; i < o.grad.size(); ++i)
                                 g[i] += o.grad[i] * as[i];
                           });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "div");
  std::vector<T> out(a.numel());
  auto as = a.data(), bs = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = as[i] / bs[i];
  detail::require_finite<T>(out, "div");
  return detail::finish<T>(Tensor<T>(a.shape(), std::move(out)), {&a, &b},
                           [a, b](detail::Node<T>& o) {
                             auto bs = b.data();
                             if (T* g = detail::grad_sink(a))
                               for (std::size_t i = 0; i < o.grad.size(); ++i)
                                 g[i] += o.grad[i] / bs[i];
                             if (T* g = detail::grad_sink(b))
                               for (std::size_t i = 0; i < o.grad.size(); ++i)
                                 g[i] -= o.grad[i] * o.data[i] / bs[i];
                           });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return detail::unary(x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T s) {
  return detail::unary(x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

/// x * s where s is a one-element tensor (gradients flow to both).
template <typename T>
Tensor<T> scale_by(const Tensor<T>& x, const Tensor<T>& s) {
  if (s.numel() != 1) throw DimensionError("scale_by: scale must hold one value, got " +
                                           shape_str(s.shape()));
  const T sv = s[0];
  std::vector<T> out(x.numel());
  auto xs = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xs[i] * sv;
  return detail::finish<T>(Tensor<T>(x.shape(), std::move(out)), {&x, &s},
                           [x, s](detail::Node<T>& o) {
                             const T sv = s[0];
                             auto xs = x.data();
                             if (T* g = detail::grad_sink(x))
                               for (std::size_t i = 0; i < o.grad.size(); ++i)
                                 g[i] += o.grad[i] * sv;
                             if (T* g = detail::grad_sink(s)) {
                               T acc = 0;
                               for (std::size_t i = 0; i < o.grad.size(); ++i)
                                 acc += o.grad[i] * xs[i];
                               g[0] += acc;
                             }
                           });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return v > T(0) ? v : T(0); },
                       [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

/// Exact-erf GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>)); },
      [](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
        const T pdf = std::exp(T(-0.5) * v * v) * std::numbers::inv_sqrtpi_v<T> /
                      std::numbers::sqrt2_v<T>;
        return cdf + v * pdf;
      });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  auto out = detail::unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
  detail::require_finite<T>(out.data(), "exp");
  return out;
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  auto out = detail::unary(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
  detail::require_finite<T>(out.data(), "log");
  return out;
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

// ----------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  return detail::finish<T>(Tensor<T>::scalar(acc), {&x}, [x](detail::Node<T>& o) {
    T* g = detail::grad_sink(x);
    for (std::size_t i = 0; i < x.numel(); ++i) g[i] += o.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return mul_scalar(sum(x), T(1) / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------------- shape

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " cannot become " +
                         shape_str(shape));
  std::vector<T> out(x.data().begin(), x.data().end());
  return detail::finish<T>(Tensor<T>(std::move(shape), std::move(out)), {&x},
                           [x](detail::Node<T>& o) {
                             T* g = detail::grad_sink(x);
                             for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
                           });
}

/// Axis permutation: out.shape[i] = x.shape[axes[i]].
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  const auto& in = x.shape();
  const std::size_t r = in.size();
  if (axes.size() != r) throw ArgumentError("permute: axes rank mismatch");
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
  Shape out_shape(r);
  std::vector<std::size_t> src_stride(r);
  std::vector<bool> seen(r, false);
  for (std::size_t i = 0; i < r; ++i) {
    if (axes[i] >= r || seen[axes[i]]) throw ArgumentError("permute: invalid axes");
    seen[axes[i]] = true;
    out_shape[i] = in[axes[i]];
    src_stride[i] = in_stride[axes[i]];
  }
  // src index of every output element
  auto index = std::make_shared<std::vector<std::size_t>>(x.numel());
  std::vector<std::size_t> counter(r, 0);
  std::size_t src = 0;
  for (std::size_t flat = 0; flat < x.numel(); ++flat) {
    (*index)[flat] = src;
    for (std::size_t d = r; d-- > 0;) {
      ++counter[d];
      src += src_stride[d];
      if (counter[d] < out_shape[d]) break;
      src -= src_stride[d] * counter[d];
      counter[d] = 0;
    }
  }
  std::vector<T> out(x.numel());
  auto xs = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xs[(*index)[i]];
  return detail::finish<T>(Tensor<T>(std::move(out_shape), std::move(out)), {&x},
                           [x, index](detail::Node<T>& o) {
                             T* g = detail::grad_sink(x);
                             for (std::size_t i = 0; i < o.grad.size(); ++i)
                               g[(*index)[i]] += o.grad[i];
                           });
}

/// Swaps the last two axes.
template <typename T>
Tensor<T> transpose_last(const Tensor<T>& x) {
  if (x.rank() < 2) throw DimensionError("transpose_last needs rank >= 2");
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[x.rank() - 1], axes[x.rank() - 2]);
  return permute(x, axes);
}

/// Concatenation along axis 0; trailing extents must agree.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ArgumentError("concat of nothing");
  Shape shape = parts[0].shape();
  std::size_t lead = 0;
  for (const auto& p : parts) {
    Shape tail_a(shape.begin() + 1, shape.end()), tail_b(p.shape().begin() + 1, p.shape().end());
    if (p.rank() != shape.size() || tail_a != tail_b)
      throw DimensionError("concat: " + shape_str(shape) + " vs " + shape_str(p.shape()));
    lead += p.dim(0);
  }
  shape[0] = lead;
  std::vector<T> out;
  out.reserve(shape_numel(shape));
  bool grad = false;
  for (const auto& p : parts) {
    out.insert(out.end(), p.data().begin(), p.data().end());
    grad = grad || p.requires_grad();
  }
  Tensor<T> result(std::move(shape), std::move(out));
  if (grad && grad_mode()) {
    result.node()->requires_grad = true;
    auto on = result.node();
    Tape<T>::current().record(on, [on, parts]() {
      std::size_t offset = 0;
      for (const auto& p : parts) {
        if (T* g = detail::grad_sink(p))
          for (std::size_t i = 0; i < p.numel(); ++i) g[i] += on->grad[offset + i];
        offset += p.numel();
      }
    });
  }
  return result;
}

/// Rows [start, start+len) along axis 0.
template <typename T>
Tensor<T> narrow(const Tensor<T>& x, std::size_t start, std::size_t len) {
  if (len == 0 || start + len > x.dim(0))
    throw DimensionError("narrow: range [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") outside " + shape_str(x.shape()));
  Shape shape = x.shape();
  const std::size_t stride = x.numel() / shape[0];
  shape[0] = len;
  std::vector<T> out(x.data().begin() + start * stride, x.data().begin() + (start + len) * stride);
  return detail::finish<T>(Tensor<T>(std::move(shape), std::move(out)), {&x},
                           [x, start, stride](detail::Node<T>& o) {
                             T* g = detail::grad_sink(x) + start * stride;
                             for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
                           });
}

// ------------------------------------------------------------------- softmax

/// Numerically stable softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const auto s = detail::split_at(x.shape(), axis);
  std::vector<T> out(x.numel());
  auto xs = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      T mx = xs[base];
      for (std::size_t k = 1; k < s.n; ++k) mx = std::max(mx, xs[base + k * s.inner]);
      T z = 0;
      for (std::size_t k = 0; k < s.n; ++k) {
        const T e = std::exp(xs[base + k * s.inner] - mx);
        out[base + k * s.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < s.n; ++k) out[base + k * s.inner] /= z;
    }
  return detail::finish<T>(Tensor<T>(x.shape(), std::move(out)), {&x}, [x, s](detail::Node<T>& o) {
    T* g = detail::grad_sink(x);
    for (std::size_t ou = 0; ou < s.outer; ++ou)
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = ou * s.n * s.inner + in;
        T dot = 0;
        for (std::size_t k = 0; k < s.n; ++k)
          dot += o.grad[base + k * s.inner] * o.data[base + k * s.inner];
        for (std::size_t k = 0; k < s.n; ++k) {
          const std::size_t i = base + k * s.inner;
          g[i] += o.data[i] * (o.grad[i] - dot);
        }
      }
  });
}

// -------------------------------------------------------------------- matmul

/// Batched matrix product [..., m, k] x [..., k, n] with broadcast batch axes.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw DimensionError("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const std::size_t k2 = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
  if (k != k2)
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  const std::size_t ra = a.rank() - 2, rb = b.rank() - 2, rbatch = std::max(ra, rb);
  Shape batch(rbatch);
  std::vector<std::size_t> ea(rbatch, 1), eb(rbatch, 1);
  for (std::size_t i = 0; i < rbatch; ++i) {
    if (i + ra >= rbatch) ea[i] = a.dim(i + ra - rbatch);
    if (i + rb >= rbatch) eb[i] = b.dim(i + rb - rbatch);
    if (ea[i] != eb[i] && ea[i] != 1 && eb[i] != 1)
      throw DimensionError("matmul: batch extents not broadcastable, " + shape_str(a.shape()) +
                           " x " + shape_str(b.shape()));
    batch[i] = std::max(ea[i], eb[i]);
  }
  const std::size_t nbatch = shape_numel(batch);
  // per-batch source matrix indices
  auto pairs = std::make_shared<std::vector<std::pair<std::size_t, std::size_t>>>(nbatch);
  {
    std::vector<std::size_t> idx(rbatch, 0);
    for (std::size_t f = 0; f < nbatch; ++f) {
      std::size_t ia = 0, ib = 0;
      for (std::size_t d = 0; d < rbatch; ++d) {
        ia = ia * ea[d] + (ea[d] == 1 ? 0 : idx[d]);
        ib = ib * eb[d] + (eb[d] == 1 ? 0 : idx[d]);
      }
      (*pairs)[f] = {ia, ib};
      for (std::size_t d = rbatch; d-- > 0;) {
        if (++idx[d] < batch[d]) break;
        idx[d] = 0;
      }
    }
  }
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<T> out(nbatch * m * n, T(0));
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  for (std::size_t f = 0; f < nbatch; ++f) {
    auto [ia, ib] = (*pairs)[f];
    detail::gemm_nn(ap + ia * m * k, bp + ib * k * n, out.data() + f * m * n, m, k, n);
  }
  return detail::finish<T>(
      Tensor<T>(std::move(out_shape), std::move(out)), {&a, &b},
      [a, b, pairs, m, k, n](detail::Node<T>& o) {
        T* ga = detail::grad_sink(a);
        T* gb = detail::grad_sink(b);
        const T* ap = a.data().data();
        const T* bp = b.data().data();
        for (std::size_t f = 0; f < pairs->size(); ++f) {
          auto [ia, ib] = (*pairs)[f];
          const T* go = o.grad.data() + f * m * n;
          if (ga) detail::gemm_nt(go, bp + ib * k * n, ga + ia * m * k, m, k, n);
          if (gb) detail::gemm_tn(ap + ia * m * k, go, gb + ib * k * n, m, k, n);
        }
      });
}

// ---------------------------------------------------------------- broadcasts

/// x + b with b[x.dim(axis)] broadcast over every other axis.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b, std::size_t axis) {
  const auto s = detail::split_at(x.shape(), axis);
  if (b.numel() != s.n)
    throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " vs axis " +
                         std::to_string(axis) + " of " + shape_str(x.shape()));
  std::vector<T> out(x.data().begin(), x.data().end());
  auto bs = b.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.n; ++k) {
      T* row = out.data() + (o * s.n + k) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) row[i] += bs[k];
    }
  return detail::finish<T>(Tensor<T>(x.shape(), std::move(out)), {&x, &b},
                           [x, b, s](detail::Node<T>& o) {
                             if (T* g = detail::grad_sink(x))
                               for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
                             if (T* g = detail::grad_sink(b))
                               for (std::size_t ou = 0; ou < s.outer; ++ou)
                                 for (std::size_t k = 0; k < s.n; ++k) {
                                   const T* row = o.grad.data() + (ou * s.n + k) * s.inner;
                                   T acc = 0;
                                   for (std::size_t i = 0; i < s.inner; ++i) acc += row[i];
                                   g[k] += acc;
                                 }
                           });
}

/// x * g with g[x.dim(axis)] broadcast over every other axis.
template <typename T>
Tensor<T> scale_along(const Tensor<T>& x, const Tensor<T>& gate, std::size_t axis) {
  const auto s = detail::split_at(x.shape(), axis);
  if (gate.numel() != s.n)
    throw DimensionError("scale_along: gate " + shape_str(gate.shape()) + " vs axis " +
                         std::to_string(axis) + " of " + shape_str(x.shape()));
  std::vector<T> out(x.numel());
  auto xs = x.data();
  auto gs = gate.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.n; ++k) {
      const std::size_t base = (o * s.n + k) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) out[base + i] = xs[base + i] * gs[k];
    }
  return detail::finish<T>(Tensor<T>(x.shape(), std::move(out)), {&x, &gate},
                           [x, gate, s](detail::Node<T>& o) {
                             auto xs = x.data();
                             auto gs = gate.data();
                             T* gx = detail::grad_sink(x);
                             T* gg = detail::grad_sink(gate);
                             for (std::size_t ou = 0; ou < s.outer; ++ou)
                               for (std::size_t k = 0; k < s.n; ++k) {
                                 const std::size_t base = (ou * s.n + k) * s.inner;
                                 T acc = 0;
                                 for (std::size_t i = 0; i < s.inner; ++i) {
                                   if (gx) gx[base + i] += o.grad[base + i] * gs[k];
                                   acc += o.grad[base + i] * xs[base + i];
                                 }
                                 if (gg) gg[k] += acc;
                               }
                           });
}

/// x[c, p] * mask[p] for a constant mask over the trailing positions.
template <typename T>
Tensor<T> mask_positions(const Tensor<T>& x, std::shared_ptr<const std::vector<T>> mask) {
  const std::size_t positions = mask->size();
  if (positions == 0 || x.numel() % positions != 0)
    throw DimensionError("mask_positions: mask of " + std::to_string(positions) +
                         " positions vs " + shape_str(x.shape()));
  std::vector<T> out(x.numel());
  auto xs = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xs[i] * (*mask)[i % positions];
  return detail::finish<T>(Tensor<T>(x.shape(), std::move(out)), {&x},
                           [x, mask, positions](detail::Node<T>& o) {
                             T* g = detail::grad_sink(x);
                             for (std::size_t i = 0; i < o.grad.size(); ++i)
                               g[i] += o.grad[i] * (*mask)[i % positions];
                           });
}

// --------------------------------------------------------------------- gather

using IndexList = std::shared_ptr<const std::vector<std::int64_t>>;

/// out[i] = x[idx[i]] row-wise for x of shape [N, D]; idx -1 yields a zero row.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, IndexList idx) {
  if (x.rank() != 2) throw DimensionError("gather_rows needs [N,D], got " + shape_str(x.shape()));
  const std::size_t rows = x.dim(0), d = x.dim(1);
  std::vector<T> out(idx->size() * d, T(0));
  auto xs = x.data();
  for (std::size_t i = 0; i < idx->size(); ++i) {
    const auto r = (*idx)[i];
    if (r < 0) continue;
    if (static_cast<std::size_t>(r) >= rows)
      throw DimensionError("gather_rows: index " + std::to_string(r) + " outside " +
                           shape_str(x.shape()));
    std::copy_n(xs.begin() + r * d, d, out.begin() + i * d);
  }
  return detail::finish<T>(Tensor<T>(Shape{idx->size(), d}, std::move(out)), {&x},
                           [x, idx, d](detail::Node<T>& o) {
                             T* g = detail::grad_sink(x);
                             for (std::size_t i = 0; i < idx->size(); ++i) {
                               const auto r = (*idx)[i];
                               if (r < 0) continue;
                               T* gr = g + r * d;
                               const T* go = o.grad.data() + i * d;
                               for (std::size_t j = 0; j < d; ++j) gr[j] += go[j];
                             }
                           });
}

/// out[t] = sum_k x[idx[t*m + k]] for x of shape [N, D]; -1 entries are skipped.
template <typename T>
Tensor<T> gather_sum_rows(const Tensor<T>& x, IndexList idx, std::size_t m) {
  if (x.rank() != 2) throw DimensionError("gather_sum_rows needs [N,D], got " + shape_str(x.shape()));
  if (m == 0 || idx->size() % m != 0)
    throw DimensionError("gather_sum_rows: index count " + std::to_string(idx->size()) +
                         " is not a multiple of " + std::to_string(m));
  const std::size_t rows = x.dim(0), d = x.dim(1), n = idx->size() / m;
  for (auto r : *idx)
    if (r >= static_cast<std::int64_t>(rows))
      throw DimensionError("gather_sum_rows: index " + std::to_string(r) + " outside " +
                           shape_str(x.shape()));
  std::vector<T> out(n * d, T(0));
  const T* xs = x.data().data();
  for (std::size_t t = 0; t < n; ++t) {
    T* orow = out.data() + t * d;
    for (std::size_t k = 0; k < m; ++k) {
      const auto r = (*idx)[t * m + k];
      if (r < 0) continue;
      const T* xr = xs + r * d;
      for (std::size_t j = 0; j < d; ++j) orow[j] += xr[j];
    }
  }
  return detail::finish<T>(Tensor<T>(Shape{n, d}, std::move(out)), {&x},
                           [x, idx, m, n, d](detail::Node<T>& o) {
                             T* g = detail::grad_sink(x);
                             for (std::size_t t = 0; t < n; ++t) {
                               const T* go = o.grad.data() + t * d;
                               for (std::size_t k = 0; k < m; ++k) {
                                 const auto r = (*idx)[t * m + k];
                                 if (r < 0) continue;
                                 T* gr = g + r * d;
                                 for (std::size_t j = 0; j < d; ++j) gr[j] += go[j];
                               }
                             }
                           });
}

// -------------------------------------------------------------------- dropout

/// Inverted dropout; identity when rate is zero.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, std::mt19937_64& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ArgumentError("dropout rate must be in [0,1)");
  if (rate == 0.0) return x;
  auto keep = std::make_shared<std::vector<T>>(x.numel());
  std::bernoulli_distribution draw(1.0 - rate);
  const T scale = T(1) / static_cast<T>(1.0 - rate);
  for (auto& k : *keep) k = draw(rng) ? scale : T(0);
  return mask_positions<T>(x, keep);
}

// ----------------------------------------------------------------- layer norm

/// Normalizes along `axis` (population variance), then applies gamma/beta
/// indexed by the normalized axis.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     std::size_t axis, T eps = T(1e-5)) {
  const auto s = detail::split_at(x.shape(), axis);
  if (gamma.numel() != s.n || beta.numel() != s.n)
    throw DimensionError("layer_norm: affine extents " + shape_str(gamma.shape()) + " vs axis " +
                         std::to_string(axis) + " of " + shape_str(x.shape()));
  const std::size_t groups = s.outer * s.inner;
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(groups);
  std::vector<T> out(x.numel());
  auto xs = x.data();
  auto gs = gamma.data();
  auto bs = beta.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      T mu = 0;
      for (std::size_t k = 0; k < s.n; ++k) mu += xs[base + k * s.inner];
      mu /= static_cast<T>(s.n);
      T var = 0;
      for (std::size_t k = 0; k < s.n; ++k) {
        const T dlt = xs[base + k * s.inner] - mu;
        var += dlt * dlt;
      }
      var /= static_cast<T>(s.n);
      const T is = T(1) / std::sqrt(var + eps);
      (*inv_std)[o * s.inner + in] = is;
      for (std::size_t k = 0; k < s.n; ++k) {
        const std::size_t i = base + k * s.inner;
        (*xhat)[i] = (xs[i] - mu) * is;
        out[i] = (*xhat)[i] * gs[k] + bs[k];
      }
    }
  return detail::finish<T>(
      Tensor<T>(x.shape(), std::move(out)), {&x, &gamma, &beta},
      [x, gamma, beta, s, xhat, inv_std](detail::Node<T>& o) {
        T* gx = detail::grad_sink(x);
        T* gg = detail::grad_sink(gamma);
        T* gb = detail::grad_sink(beta);
        auto gs = gamma.data();
        std::vector<T> dxhat(s.n);
        for (std::size_t ou = 0; ou < s.outer; ++ou)
          for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = ou * s.n * s.inner + in;
            T sum_d = 0, sum_dx = 0;
            for (std::size_t k = 0; k < s.n; ++k) {
              const std::size_t i = base + k * s.inner;
              const T go = o.grad[i];
              if (gg) gg[k] += go * (*xhat)[i];
              if (gb) gb[k] += go;
              dxhat[k] = go * gs[k];
              sum_d += dxhat[k];
              sum_dx += dxhat[k] * (*xhat)[i];
            }
            if (!gx) continue;
            const T is = (*inv_std)[ou * s.inner + in];
            const T inv_n = T(1) / static_cast<T>(s.n);
            for (std::size_t k = 0; k < s.n; ++k) {
              const std::size_t i = base + k * s.inner;
              gx[i] += is * (dxhat[k] - inv_n * sum_d - (*xhat)[i] * inv_n * sum_dx);
            }
          }
      });
}

}  // namespace hsiseg
