#pragma once

#include <cmath>
#include <limits>
#include <memory>
#include <vector>

#include "hsiseg/ops.hpp"

namespace hsiseg {

using OffsetList = std::shared_ptr<const std::vector<std::size_t>>;

/// Single-query attention over variable-length segments.
///
/// Segment s owns key/value rows [offsets[s], offsets[s+1]) and one query
/// row q[s]. Output row s is sum_t softmax_t(scale * q[s].k[t]) v[t].
/// When `weights` is non-null it receives the attention weight of every
/// key row (same length as k).
template <typename T>
Tensor<T> segment_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                            OffsetList offsets, T scale, std::vector<T>* weights = nullptr) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
    throw DimensionError("segment_attention expects rank-2 q, k, v");
  const std::size_t segs = q.dim(0), d = q.dim(1), rows = k.dim(0);
  if (k.dim(1) != d || v.dim(1) != d || v.dim(0) != rows)
    throw DimensionError("segment_attention: q " + shape_str(q.shape()) + ", k " +
                         shape_str(k.shape()) + ", v " + shape_str(v.shape()));
  if (offsets->size() != segs + 1 || offsets->front() != 0 || offsets->back() != rows)
    throw DimensionError("segment_attention: offsets do not tile " + std::to_string(rows) +
                         " key rows into " + std::to_string(segs) + " segments");

  auto attn = std::make_shared<std::vector<T>>(rows);
  std::vector<T> out(segs * d, T(0));
  const T* qs = q.data().data();
  const T* ks = k.data().data();
  const T* vs = v.data().data();
  for (std::size_t s = 0; s < segs; ++s) {
    const std::size_t b = (*offsets)[s], e = (*offsets)[s + 1];
    if (b >= e) throw DimensionError("segment_attention: empty segment");
    const T* qr = qs + s * d;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t t = b; t < e; ++t) {
      T dot = 0;
      const T* kr = ks + t * d;
      for (std::size_t j = 0; j < d; ++j) dot += qr[j] * kr[j];
      (*attn)[t] = dot * scale;
      mx = std::max(mx, (*attn)[t]);
    }
    T z = 0;
    for (std::size_t t = b; t < e; ++t) {
      (*attn)[t] = std::exp((*attn)[t] - mx);
      z += (*attn)[t];
    }
    T* orow = out.data() + s * d;
    for (std::size_t t = b; t < e; ++t) {
      (*attn)[t] /= z;
      const T a = (*attn)[t];
      const T* vr = vs + t * d;
      for (std::size_t j = 0; j < d; ++j) orow[j] += a * vr[j];
    }
  }
  if (weights) *weights = *attn;
  detail::require_finite<T>(out, "segment_attention");
  return detail::finish<T>(
      Tensor<T>(Shape{segs, d}, std::move(out)), {&q, &k, &v},
      [q, k, v, offsets, scale, attn, segs, d](detail::Node<T>& o) {
        T* gq = detail::grad_sink(q);
        T* gk = detail::grad_sink(k);
        T* gv = detail::grad_sink(v);
        const T* qs = q.data().data();
        const T* ks = k.data().data();
        const T* vs = v.data().data();
        std::vector<T> da;
        for (std::size_t s = 0; s < segs; ++s) {
          const std::size_t b = (*offsets)[s], e = (*offsets)[s + 1];
          const T* go = o.grad.data() + s * d;
          da.assign(e - b, T(0));
          T dot = 0;
          for (std::size_t t = b; t < e; ++t) {
            const T a = (*attn)[t];
            const T* vr = vs + t * d;
            T acc = 0;
            for (std::size_t j = 0; j < d; ++j) acc += go[j] * vr[j];
            da[t - b] = acc;
            dot += a * acc;
            if (gv) {
              T* gvr = gv + t * d;
              for (std::size_t j = 0; j < d; ++j) gvr[j] += a * go[j];
            }
          }
          const T* qr = qs + s * d;
          for (std::size_t t = b; t < e; ++t) {
            const T ds = (*attn)[t] * (da[t - b] - dot) * scale;
            const T* kr = ks + t * d;
            if (gq) {
              T* gqr = gq + s * d;
              for (std::size_t j = 0; j < d; ++j) gqr[j] += ds * kr[j];
            }
            if (gk) {
              T* gkr = gk + t * d;
              for (std::size_t j = 0; j < d; ++j) gkr[j] += ds * qr[j];
            }
          }
        }
      });
}

}  // namespace hsiseg
