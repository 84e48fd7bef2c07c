#pragma once

// Network stages: squeeze-excitation gating, encoder and decoder stages,
// symmetric cross-attention (CFI), and discriminative feature selection (DFS)
// with its adaptive confidence threshold.

#include <cmath>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hsiseg/dsrt.hpp"
#include "hsiseg/init.hpp"
#include "hsiseg/ops.hpp"
#include "hsiseg/ops_spatial.hpp"

namespace hsiseg {

/// Per-forward settings and side channels.
template <typename T>
struct ForwardContext {
  bool training = false;
  double dropout = 0.0;
  std::mt19937_64* rng = nullptr;
  // When non-null, DFS masks are recorded on first use and replayed on
  // later forwards (keeps the thresholding fixed for finite differences).
  struct MaskMemo {
    std::vector<std::shared_ptr<const std::vector<T>>> masks;
    std::size_t cursor = 0;
  }* mask_memo = nullptr;
  std::vector<double> mask_density;  // fraction of selected pixels per DFS scale
  std::vector<double> thresholds;    // effective threshold per DFS scale
};

template <typename T>
Tensor<T> stage_dropout(const Tensor<T>& x, ForwardContext<T>& ctx) {
  if (!ctx.training || ctx.dropout <= 0.0) return x;
  if (!ctx.rng) throw ArgumentError("training forward needs a random generator for dropout");
  return dropout(x, ctx.dropout, *ctx.rng);
}

/// 1x1 convolution with bias; w [Co, Ci], b [Co].
template <typename T>
Tensor<T> pointwise(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add_bias(conv2d(x, w, ConvMode::pointwise), b, 0);
}

template <typename T>
Tensor<T> channel_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  return layer_norm(x, gamma, beta, 0);
}

// ------------------------------------------------------------------------ SE

template <typename T>
struct SeParams {
  Tensor<T> reduce_w, reduce_b, expand_w, expand_b;  // [C,C/r] [C/r] [C/r,C] [C]

  static SeParams create(ParamStore<T>& store, const std::string& prefix, std::size_t channels,
                         std::size_t ratio, std::mt19937_64& rng) {
    if (ratio == 0 || channels % ratio != 0)
      throw ArgumentError("se: reduction ratio " + std::to_string(ratio) + " does not divide " +
                          std::to_string(channels) + " channels");
    const std::size_t hidden = channels / ratio;
    SeParams p;
    p.reduce_w = param_glorot(store, prefix + ".reduce_w", {channels, hidden}, channels, hidden, rng);
    p.reduce_b = param_const(store, prefix + ".reduce_b", {hidden}, T(0));
    p.expand_w = param_glorot(store, prefix + ".expand_w", {hidden, channels}, hidden, channels, rng);
    p.expand_b = param_const(store, prefix + ".expand_b", {channels}, T(0));
    return p;
  }
};

template <typename T>
Tensor<T> se_forward(const Tensor<T>& x, const SeParams<T>& p) {
  const std::size_t c = x.dim(0);
  if (p.reduce_w.dim(0) != c)
    throw DimensionError("se: parameters for " + std::to_string(p.reduce_w.dim(0)) +
                         " channels, input " + shape_str(x.shape()));
  auto squeezed = reshape(mean_spatial(x), {1, c});
  auto hidden = relu(add_bias(matmul(squeezed, p.reduce_w), p.reduce_b, 1));
  auto gate = sigmoid(add_bias(matmul(hidden, p.expand_w), p.expand_b, 1));
  return scale_along(x, reshape(gate, {c}), 0);
}

// ------------------------------------------------------------ conv + stages

/// Depthwise 3x3 followed by pointwise mixing, both with bias.
template <typename T>
struct ConvParams {
  Tensor<T> dw, dw_b, pw, pw_b;

  static ConvParams create(ParamStore<T>& store, const std::string& prefix, std::size_t c,
                           std::mt19937_64& rng) {
    ConvParams p;
    p.dw = param_glorot(store, prefix + ".dw", {c, 3, 3}, 9, 9, rng);
    p.dw_b = param_const(store, prefix + ".dw_b", {c}, T(0));
    p.pw = param_glorot(store, prefix + ".pw", {c, c}, c, c, rng);
    p.pw_b = param_const(store, prefix + ".pw_b", {c}, T(0));
    return p;
  }
};

template <typename T>
Tensor<T> conv_forward(const Tensor<T>& x, const ConvParams<T>& p) {
  return pointwise(add_bias(conv2d(x, p.dw, ConvMode::depthwise), p.dw_b, 0), p.pw, p.pw_b);
}

/// Shared body of encoder and decoder stages:
/// Norm(SE(DSRT(ReLU(CNN(x)))) + x).
template <typename T>
struct ResidualBody {
  ConvParams<T> conv;
  DsrtParams<T> dsrt;
  SeParams<T> se;
  Tensor<T> norm_g, norm_b;

  static ResidualBody create(ParamStore<T>& store, const std::string& prefix, std::size_t d,
                             std::size_t heads, std::size_t grid, std::mt19937_64& rng) {
    ResidualBody b;
    b.conv = ConvParams<T>::create(store, prefix + ".conv", d, rng);
    b.dsrt = DsrtParams<T>::create(store, prefix + ".dsrt", {heads, d, grid, grid}, rng);
    b.se = SeParams<T>::create(store, prefix + ".se", d, d % 4 == 0 ? 4 : 1, rng);
    b.norm_g = param_const(store, prefix + ".norm_g", {d}, T(1));
    b.norm_b = param_const(store, prefix + ".norm_b", {d}, T(0));
    return b;
  }
};

template <typename T>
Tensor<T> residual_body_forward(const Tensor<T>& x, const ResidualBody<T>& p) {
  auto branch = se_forward(dsrt_forward(relu(conv_forward(x, p.conv)), p.dsrt), p.se);
  return channel_norm(add(branch, x), p.norm_g, p.norm_b);
}

template <typename T>
struct EncoderParams {
  std::size_t grid_in = 0, grid_out = 0;
  ResidualBody<T> body;

  static EncoderParams create(ParamStore<T>& store, const std::string& prefix, std::size_t d,
                              std::size_t heads, std::size_t grid_in, std::size_t grid_out,
                              std::mt19937_64& rng) {
    if (grid_out > grid_in || grid_out == 0)
      throw ArgumentError("encoder stage cannot grow the grid " + std::to_string(grid_in) + " -> " +
                          std::to_string(grid_out));
    EncoderParams p;
    p.grid_in = grid_in;
    p.grid_out = grid_out;
    p.body = ResidualBody<T>::create(store, prefix, d, heads, grid_out, rng);
    return p;
  }
};

/// e_prev [d, g_in, g_in] -> [d, g_out, g_out]; down-scaling by adaptive
/// average pooling shared by branch and residual.
template <typename T>
Tensor<T> encoder_stage_forward(const Tensor<T>& e_prev, const EncoderParams<T>& p,
                                ForwardContext<T>& ctx) {
  if (e_prev.rank() != 3 || e_prev.dim(1) != p.grid_in || e_prev.dim(2) != p.grid_in)
    throw DimensionError("encoder stage expects a " + std::to_string(p.grid_in) + "x" +
                         std::to_string(p.grid_in) + " grid, got " + shape_str(e_prev.shape()));
  auto pooled = pool_adaptive(e_prev, p.grid_out, p.grid_out, PoolKind::average);
  return stage_dropout(residual_body_forward(pooled, p.body), ctx);
}

// ----------------------------------------------------------------------- CFI

template <typename T>
struct CfiParams {
  std::size_t heads = 1;
  Tensor<T> q_e, k_e, v_e, q_d, k_d, v_d;  // pointwise kernels [d, d]

  static CfiParams create(ParamStore<T>& store, const std::string& prefix, std::size_t d,
                          std::size_t heads, std::mt19937_64& rng) {
    if (heads == 0 || d % heads != 0)
      throw ArgumentError("cfi: " + std::to_string(d) + " channels not divisible by " +
                          std::to_string(heads) + " heads");
    CfiParams p;
    p.heads = heads;
    Tensor<T>* slots[6] = {&p.q_e, &p.k_e, &p.v_e, &p.q_d, &p.k_d, &p.v_d};
    const char* names[6] = {"q_e", "k_e", "v_e", "q_d", "k_d", "v_d"};
    for (int i = 0; i < 6; ++i) *slots[i] = param_glorot(store, prefix + "." + names[i], {d, d}, d, d, rng);
    return p;
  }
};

template <typename T>
struct CfiTrace {
  Tensor<T> attn_e, attn_d;  // [heads, M, M]
};

/// Symmetric cross-attention between a finer map e_hi and a coarser (or
/// equal) map d_lo. Returns (e_hi + up(GELU(A_e V_e)), d_lo + up(GELU(A_d V_d)))
/// with A_e = softmax(Q_e K_d^T / sqrt(d_k)) computed on d_lo's grid.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> cfi_forward(const Tensor<T>& e_hi, const Tensor<T>& d_lo,
                                            const CfiParams<T>& p, CfiTrace<T>* trace = nullptr) {
  if (e_hi.rank() != 3 || d_lo.rank() != 3 || e_hi.dim(0) != d_lo.dim(0))
    throw DimensionError("cfi: channel mismatch between " + shape_str(e_hi.shape()) + " and " +
                         shape_str(d_lo.shape()));
  const std::size_t d = e_hi.dim(0), h2 = d_lo.dim(1), w2 = d_lo.dim(2);
  if (h2 > e_hi.dim(1) || w2 > e_hi.dim(2))
    throw DimensionError("cfi: low-resolution side " + shape_str(d_lo.shape()) +
                         " is finer than " + shape_str(e_hi.shape()));
  const std::size_t m = h2 * w2, heads = p.heads, dk = d / heads;
  auto e_pool = pool_adaptive(e_hi, h2, w2, PoolKind::max);
  auto d_pool = pool_adaptive(d_lo, h2, w2, PoolKind::average);
  // [d,h,w] -> rows [heads, M, dk] or columns [heads, dk, M]
  auto rows = [&](const Tensor<T>& x, const Tensor<T>& w) {
    return transpose_last(reshape(conv2d(x, w, ConvMode::pointwise), {heads, dk, m}));
  };
  auto cols = [&](const Tensor<T>& x, const Tensor<T>& w) {
    return reshape(conv2d(x, w, ConvMode::pointwise), {heads, dk, m});
  };
  const T scale = T(1) / std::sqrt(static_cast<T>(dk));
  auto attn_e = softmax(mul_scalar(matmul(rows(e_pool, p.q_e), cols(d_pool, p.k_d)), scale), 2);
  auto attn_d = softmax(mul_scalar(matmul(rows(d_pool, p.q_d), cols(e_pool, p.k_e)), scale), 2);
  if (trace) {
    trace->attn_e = attn_e;
    trace->attn_d = attn_d;
  }
  auto back = [&](const Tensor<T>& a, const Tensor<T>& v) {
    return reshape(transpose_last(matmul(a, v)), {d, h2, w2});
  };
  auto e_bar = gelu(back(attn_e, rows(e_pool, p.v_e)));
  auto d_bar = gelu(back(attn_d, rows(d_pool, p.v_d)));
  return {add(e_hi, interpolate_bilinear(e_bar, e_hi.dim(1), e_hi.dim(2))),
          add(d_lo, interpolate_bilinear(d_bar, h2, w2))};
}

// ------------------------------------------------------------------- decoder

template <typename T>
struct DecoderParams {
  std::size_t grid_out = 0;
  Tensor<T> align_w, align_b;    // [d,d] [d]
  Tensor<T> reduce_w, reduce_b;  // [d,2d] [d]
  ResidualBody<T> body;

  static DecoderParams create(ParamStore<T>& store, const std::string& prefix, std::size_t d,
                              std::size_t heads, std::size_t grid_out, std::mt19937_64& rng) {
    DecoderParams p;
    p.grid_out = grid_out;
    p.align_w = param_glorot(store, prefix + ".align_w", {d, d}, d, d, rng);
    p.align_b = param_const(store, prefix + ".align_b", {d}, T(0));
    p.reduce_w = param_glorot(store, prefix + ".reduce_w", {d, 2 * d}, 2 * d, d, rng);
    p.reduce_b = param_const(store, prefix + ".reduce_b", {d}, T(0));
    p.body = ResidualBody<T>::create(store, prefix, d, heads, grid_out, rng);
    return p;
  }
};

/// Upsample d_lo onto e_skip's grid, fuse with the aligned skip, then the
/// residual body.
template <typename T>
Tensor<T> decoder_stage_forward(const Tensor<T>& d_lo, const Tensor<T>& e_skip,
                                const DecoderParams<T>& p, ForwardContext<T>& ctx) {
  if (d_lo.rank() != 3 || e_skip.rank() != 3 || e_skip.dim(1) <= d_lo.dim(1) ||
      e_skip.dim(2) <= d_lo.dim(2))
    throw DimensionError("decoder stage needs a skip grid finer than the input, got skip " +
                         shape_str(e_skip.shape()) + " and input " + shape_str(d_lo.shape()));
  if (e_skip.dim(1) != p.grid_out || e_skip.dim(2) != p.grid_out)
    throw DimensionError("decoder stage built for a " + std::to_string(p.grid_out) +
                         " grid, skip is " + shape_str(e_skip.shape()));
  auto up = interpolate_bilinear(d_lo, e_skip.dim(1), e_skip.dim(2));
  auto skip = pointwise(e_skip, p.align_w, p.align_b);
  auto fused = pointwise(concat(std::vector<Tensor<T>>{up, skip}), p.reduce_w, p.reduce_b);
  return stage_dropout(residual_body_forward(fused, p.body), ctx);
}

// ------------------------------------------------------ threshold and DFS

struct ThresholdResult {
  std::vector<std::uint8_t> mask;
  double threshold = 0;
  double mean = 0, stddev = 0;
};

/// T = max(tau, mean + population std); mask = {p >= T}.
template <typename V>
ThresholdResult adaptive_threshold_mask(std::span<const V> prob, double tau) {
  if (prob.empty()) throw ArgumentError("adaptive threshold of an empty probability map");
  ThresholdResult r;
  // Shifted by the minimum so a constant field gives exactly its value and
  // a zero deviation.
  const double lo = static_cast<double>(*std::min_element(prob.begin(), prob.end()));
  double s = 0;
  for (V v : prob) s += static_cast<double>(v) - lo;
  r.mean = lo + s / static_cast<double>(prob.size());
  double ss = 0;
  for (V v : prob) ss += (static_cast<double>(v) - r.mean) * (static_cast<double>(v) - r.mean);
  r.stddev = std::sqrt(ss / static_cast<double>(prob.size()));
  r.threshold = std::max(tau, r.mean + r.stddev);
  r.mask.resize(prob.size());
  for (std::size_t i = 0; i < prob.size(); ++i) r.mask[i] = static_cast<double>(prob[i]) >= r.threshold;
  return r;
}

template <typename V>
ThresholdResult adaptive_threshold_mask(const std::vector<V>& prob, double tau) {
  return adaptive_threshold_mask(std::span<const V>(prob), tau);
}

/// Pool -> pointwise -> Norm -> interpolate, added onto the (resized) input.
template <typename T>
struct PyramidParams {
  Tensor<T> w, b, norm_g, norm_b;

  static PyramidParams create(ParamStore<T>& store, const std::string& prefix, std::size_t d,
                              std::mt19937_64& rng) {
    PyramidParams p;
    p.w = param_glorot(store, prefix + ".w", {d, d}, d, d, rng);
    p.b = param_const(store, prefix + ".b", {d}, T(0));
    p.norm_g = param_const(store, prefix + ".norm_g", {d}, T(1));
    p.norm_b = param_const(store, prefix + ".norm_b", {d}, T(0));
    return p;
  }
};

inline std::size_t pyramid_grid(std::size_t g) { return std::max<std::size_t>(1, g / 2); }

template <typename T>
Tensor<T> pyramid_forward(const Tensor<T>& x, const PyramidParams<T>& p, std::size_t out_grid) {
  const std::size_t pg = pyramid_grid(x.dim(1));
  auto pooled = pool_adaptive(x, pg, std::max<std::size_t>(1, x.dim(2) / 2), PoolKind::average);
  auto context = channel_norm(pointwise(pooled, p.w, p.b), p.norm_g, p.norm_b);
  return add(interpolate_bilinear(context, out_grid, out_grid),
             interpolate_bilinear(x, out_grid, out_grid));
}

template <typename T>
struct DfsParams {
  std::size_t grid = 0, next_grid = 0;  // next_grid 0: last scale
  double tau = 0.8;
  PyramidParams<T> refine, advance;
  Tensor<T> cls_w, cls_b;  // [K, d] [K]

  static DfsParams create(ParamStore<T>& store, const std::string& prefix, std::size_t d,
                          std::size_t classes, std::size_t grid, std::size_t next_grid, double tau,
                          std::mt19937_64& rng) {
    DfsParams p;
    p.grid = grid;
    p.next_grid = next_grid;
    p.tau = tau;
    p.refine = PyramidParams<T>::create(store, prefix + ".refine", d, rng);
    if (next_grid) p.advance = PyramidParams<T>::create(store, prefix + ".advance", d, rng);
    p.cls_w = param_glorot(store, prefix + ".cls_w", {classes, d}, d, classes, rng);
    p.cls_b = param_const(store, prefix + ".cls_b", {classes}, T(0));
    return p;
  }
};

template <typename T>
struct DfsOutput {
  Tensor<T> o_next;  // empty at the last scale
  Tensor<T> masked_d;
  Tensor<T> class_map;  // [K, g, g] softmax probabilities
  ThresholdResult threshold;
};

template <typename T>
DfsOutput<T> dfs_stage_forward(const Tensor<T>& o_in, const Tensor<T>& d_same, const DfsParams<T>& p,
                               ForwardContext<T>& ctx) {
  if (o_in.rank() != 3 || d_same.rank() != 3 || o_in.dim(1) != p.grid || o_in.dim(2) != p.grid ||
      d_same.dim(1) != p.grid || d_same.dim(2) != p.grid)
    throw DimensionError("dfs scale " + std::to_string(p.grid) + " got o " +
                         shape_str(o_in.shape()) + " and d " + shape_str(d_same.shape()));
  DfsOutput<T> out;
  auto o_mid = pyramid_forward(o_in, p.refine, p.grid);
  out.class_map = softmax(pointwise(o_mid, p.cls_w, p.cls_b), 0);

  const std::size_t k = out.class_map.dim(0), pixels = p.grid * p.grid;
  std::vector<T> maxprob(pixels, T(0));
  auto cm = out.class_map.data();
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t i = 0; i < pixels; ++i) maxprob[i] = std::max(maxprob[i], cm[c * pixels + i]);
  out.threshold = adaptive_threshold_mask(maxprob, p.tau);

  std::shared_ptr<const std::vector<T>> mask;
  auto* memo = ctx.mask_memo;
  if (memo && memo->cursor < memo->masks.size()) {
    mask = memo->masks[memo->cursor];
  } else {
    auto m = std::make_shared<std::vector<T>>(d_same.numel());
    const std::size_t channels = d_same.dim(0);
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < pixels; ++i) (*m)[c * pixels + i] = out.threshold.mask[i] ? T(1) : T(0);
    mask = m;
    if (memo) memo->masks.push_back(mask);
  }
  if (memo) ++memo->cursor;
  out.masked_d = mask_positions(d_same, mask);

  double selected = 0;
  for (auto b : out.threshold.mask) selected += b;
  ctx.mask_density.push_back(selected / static_cast<double>(pixels));
  ctx.thresholds.push_back(out.threshold.threshold);

  if (p.next_grid) out.o_next = pyramid_forward(o_mid, p.advance, p.next_grid);
  return out;
}

}  // namespace hsiseg
