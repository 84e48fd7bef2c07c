#pragma once

// Query-anchored regional transformer. Every grid cell splits the grid into
// four rectangles that meet at the cell; each rectangle is summarized by a
// class token through one pre-norm attention block, and the cell then
// attends over its four summaries.

#include <array>
#include <cmath>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "hsiseg/init.hpp"
#include "hsiseg/ops.hpp"
#include "hsiseg/ops_attention.hpp"

namespace hsiseg {

struct DsrtConfig {
  std::size_t heads = 1;
  std::size_t dim = 4;  // total channel width, split evenly over heads
  std::size_t grid_h = 1;
  std::size_t grid_w = 1;
  static constexpr std::size_t region_count = 4;

  std::size_t head_dim() const { return dim / heads; }
  std::size_t cells() const { return grid_h * grid_w; }

  void validate() const {
    if (heads == 0 || dim == 0 || dim % heads != 0)
      throw ArgumentError("dsrt: dim " + std::to_string(dim) + " not divisible by " +
                          std::to_string(heads) + " heads");
    if (grid_h == 0 || grid_w == 0) throw ArgumentError("dsrt: grid extents must be >= 1");
  }
};

/// Inclusive index rectangle.
struct Rect {
  std::size_t row0, row1, col0, col1;
  std::size_t rows() const { return row1 - row0 + 1; }
  std::size_t cols() const { return col1 - col0 + 1; }
  std::size_t size() const { return rows() * cols(); }
  bool contains(std::size_t r, std::size_t c) const {
    return r >= row0 && r <= row1 && c >= col0 && c <= col1;
  }
};

struct RegionPartition {
  std::size_t query_row = 0, query_col = 0;
  std::array<Rect, 4> regions{};  // top-left, top-right, bottom-left, bottom-right
};

inline RegionPartition partition_regions(std::size_t h, std::size_t w, std::size_t grid_h,
                                         std::size_t grid_w) {
  if (h >= grid_h || w >= grid_w)
    throw ArgumentError("query (" + std::to_string(h) + "," + std::to_string(w) +
                        ") outside a " + std::to_string(grid_h) + "x" + std::to_string(grid_w) +
                        " grid");
  RegionPartition p;
  p.query_row = h;
  p.query_col = w;
  p.regions[0] = {0, h, 0, w};
  p.regions[1] = {0, h, w, grid_w - 1};
  p.regions[2] = {h, grid_h - 1, 0, w};
  p.regions[3] = {h, grid_h - 1, w, grid_w - 1};
  return p;
}

template <typename T>
struct DsrtParams {
  DsrtConfig cfg;
  Tensor<T> cls;                                 // [4, dh]
  Tensor<T> pos;                                 // [cells + 1, dh]
  std::array<Tensor<T>, 3> conv;                 // taps prev/self/next, [dh, dh]
  Tensor<T> conv_bias;                           // [dh]
  Tensor<T> ln1_gamma, ln1_beta;                 // [dh]
  Tensor<T> wq, wk, wv, wo;                      // [dh, dh]
  Tensor<T> ln2_gamma, ln2_beta;                 // [dh]
  Tensor<T> ff1, ff1_bias, ff2, ff2_bias;        // [dh,2dh] [2dh] [2dh,dh] [dh]
  Tensor<T> agg_q, agg_k, agg_v;                 // [dh, dh]
  Tensor<T> head_mix;                            // [dim, dim]

  static DsrtParams create(ParamStore<T>& store, const std::string& prefix, const DsrtConfig& cfg,
                           std::mt19937_64& rng) {
    cfg.validate();
    const std::size_t dh = cfg.head_dim(), d = cfg.dim;
    auto name = [&](const char* s) { return prefix + "." + s; };
    DsrtParams p;
    p.cfg = cfg;
    p.cls = param_uniform(store, name("cls"), {4, dh}, 1.0, rng);
    p.pos = param_const(store, name("pos"), {cfg.cells() + 1, dh}, T(0));
    const char* taps[3] = {"conv_prev", "conv_self", "conv_next"};
    for (int j = 0; j < 3; ++j) p.conv[j] = param_glorot(store, name(taps[j]), {dh, dh}, 3 * dh, dh, rng);
    p.conv_bias = param_const(store, name("conv_bias"), {dh}, T(0));
    p.ln1_gamma = param_const(store, name("ln1_gamma"), {dh}, T(1));
    p.ln1_beta = param_const(store, name("ln1_beta"), {dh}, T(0));
    p.wq = param_glorot(store, name("wq"), {dh, dh}, dh, dh, rng);
    p.wk = param_glorot(store, name("wk"), {dh, dh}, dh, dh, rng);
    p.wv = param_glorot(store, name("wv"), {dh, dh}, dh, dh, rng);
    // zero so that at initialization a region token ignores region content
    p.wo = param_const(store, name("wo"), {dh, dh}, T(0));
    p.ln2_gamma = param_const(store, name("ln2_gamma"), {dh}, T(1));
    p.ln2_beta = param_const(store, name("ln2_beta"), {dh}, T(0));
    p.ff1 = param_glorot(store, name("ff1"), {dh, 2 * dh}, dh, 2 * dh, rng);
    p.ff1_bias = param_const(store, name("ff1_bias"), {2 * dh}, T(0));
    p.ff2 = param_glorot(store, name("ff2"), {2 * dh, dh}, 2 * dh, dh, rng);
    p.ff2_bias = param_const(store, name("ff2_bias"), {dh}, T(0));
    p.agg_q = param_glorot(store, name("agg_q"), {dh, dh}, dh, dh, rng);
    p.agg_k = param_glorot(store, name("agg_k"), {dh, dh}, dh, dh, rng);
    p.agg_v = param_glorot(store, name("agg_v"), {dh, dh}, dh, dh, rng);
    p.head_mix = param_glorot(store, name("head_mix"), {d, d}, d, d, rng);
    return p;
  }
};

/// Precomputed token layout for one (grid, heads) combination.
///
/// Source rows: cells (cell*heads + head), then the 4 class tokens, then the
/// cells+1 positional slots. The convolution taps are stacked, so tap j of
/// source row r lives at j*source_rows + r. Each token lists 6 rows (content
/// and position for each tap, -1 outside the sequence).
struct DsrtPlan {
  std::size_t source_rows = 0;
  std::size_t tokens = 0;
  std::size_t segments = 0;  // (cell*heads + head)*4 + region
  IndexList token_rows;
  IndexList class_slots;  // token index of every segment's class slot
  OffsetList window_offsets;
  OffsetList region_offsets;  // groups of 4 region tokens per (cell, head)
};

inline std::shared_ptr<const DsrtPlan> build_dsrt_plan(std::size_t grid_h, std::size_t grid_w,
                                                       std::size_t heads) {
  const std::size_t n = grid_h * grid_w;
  const std::size_t cls_base = n * heads, pos_base = cls_base + 4;
  auto plan = std::make_shared<DsrtPlan>();
  plan->source_rows = pos_base + n + 1;
  plan->segments = n * heads * 4;
  std::vector<std::int64_t> rows, slots;
  std::vector<std::size_t> offsets{0}, groups{0};
  std::vector<std::int64_t> items;
  for (std::size_t cell = 0; cell < n; ++cell) {
    const auto part = partition_regions(cell / grid_w, cell % grid_w, grid_h, grid_w);
    for (std::size_t hd = 0; hd < heads; ++hd) {
      for (std::size_t g = 0; g < 4; ++g) {
        const Rect& r = part.regions[g];
        items.assign(1, static_cast<std::int64_t>(cls_base + g));
        for (std::size_t i = r.row0; i <= r.row1; ++i)
          for (std::size_t j = r.col0; j <= r.col1; ++j)
            items.push_back(static_cast<std::int64_t>((i * grid_w + j) * heads + hd));
        slots.push_back(static_cast<std::int64_t>(offsets.back()));
        const auto len = static_cast<std::int64_t>(items.size());
        for (std::int64_t k = 0; k < len; ++k)
          for (std::int64_t tap = 0; tap < 3; ++tap) {
            const std::int64_t p = k + tap - 1;
            const auto base = tap * static_cast<std::int64_t>(plan->source_rows);
            if (p < 0 || p >= len) {
              rows.push_back(-1);
              rows.push_back(-1);
            } else {
              rows.push_back(base + items[p]);
              rows.push_back(base + static_cast<std::int64_t>(pos_base) + p);
            }
          }
        offsets.push_back(offsets.back() + items.size());
      }
      groups.push_back(groups.back() + 4);
    }
  }
  plan->tokens = offsets.back();
  plan->token_rows = std::make_shared<const std::vector<std::int64_t>>(std::move(rows));
  plan->class_slots = std::make_shared<const std::vector<std::int64_t>>(std::move(slots));
  plan->window_offsets = std::make_shared<const std::vector<std::size_t>>(std::move(offsets));
  plan->region_offsets = std::make_shared<const std::vector<std::size_t>>(std::move(groups));
  return plan;
}

inline std::shared_ptr<const DsrtPlan> dsrt_plan(std::size_t grid_h, std::size_t grid_w,
                                                 std::size_t heads) {
  thread_local std::map<std::tuple<std::size_t, std::size_t, std::size_t>,
                        std::shared_ptr<const DsrtPlan>>
      cache;
  auto key = std::make_tuple(grid_h, grid_w, heads);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  return cache[key] = build_dsrt_plan(grid_h, grid_w, heads);
}

/// Attention weights captured during a forward pass.
template <typename T>
struct DsrtTrace {
  std::vector<T> window;      // class-slot weights over each region sequence
  std::vector<T> aggregator;  // weights over the 4 region tokens
  std::shared_ptr<const DsrtPlan> plan;
};

/// Softmax over each group of 4 region tokens with keys = values = tokens.
/// queries [M, dh], tokens [4M, dh] -> [M, dh].
template <typename T>
Tensor<T> region_aggregate(const Tensor<T>& queries, const Tensor<T>& tokens,
                           std::vector<T>* weights = nullptr) {
  if (queries.rank() != 2 || tokens.rank() != 2 || tokens.dim(0) != 4 * queries.dim(0) ||
      tokens.dim(1) != queries.dim(1))
    throw DimensionError("region_aggregate: queries " + shape_str(queries.shape()) + ", tokens " +
                         shape_str(tokens.shape()));
  std::vector<std::size_t> off(queries.dim(0) + 1);
  for (std::size_t i = 0; i < off.size(); ++i) off[i] = 4 * i;
  return segment_attention(queries, tokens, tokens,
                           std::make_shared<const std::vector<std::size_t>>(std::move(off)),
                           T(1) / std::sqrt(static_cast<T>(queries.dim(1))), weights);
}

/// Region token for one sequence of region cells [L, dh] and region index g.
/// Evaluates the full self-attention matrix (returned row-major in
/// `weights` when requested) even though only the class slot is kept.
template <typename T>
Tensor<T> region_window_attention(const Tensor<T>& region_cells, std::size_t g,
                                  const DsrtParams<T>& p, std::vector<T>* weights = nullptr) {
  const std::size_t dh = p.cfg.head_dim();
  if (region_cells.rank() != 2 || region_cells.dim(1) != dh || g >= 4)
    throw DimensionError("region_window_attention: cells " + shape_str(region_cells.shape()) +
                         ", region " + std::to_string(g));
  const std::size_t len = region_cells.dim(0) + 1;
  if (len > p.pos.dim(0)) throw DimensionError("region_window_attention: region exceeds the grid");
  auto seq = add(concat(std::vector<Tensor<T>>{narrow(p.cls, g, 1), region_cells}),
                 narrow(p.pos, 0, len));
  std::vector<std::int64_t> prev(len), next(len);
  for (std::size_t k = 0; k < len; ++k) {
    prev[k] = static_cast<std::int64_t>(k) - 1;
    next[k] = k + 1 < len ? static_cast<std::int64_t>(k + 1) : -1;
  }
  auto shifted_prev = gather_rows(seq, std::make_shared<const std::vector<std::int64_t>>(prev));
  auto shifted_next = gather_rows(seq, std::make_shared<const std::vector<std::int64_t>>(next));
  auto embedded = add_bias(add(add(matmul(shifted_prev, p.conv[0]), matmul(seq, p.conv[1])),
                               matmul(shifted_next, p.conv[2])),
                           p.conv_bias, 1);
  auto u = layer_norm(embedded, p.ln1_gamma, p.ln1_beta, 1);
  auto scores = mul_scalar(matmul(matmul(u, p.wq), transpose_last(matmul(u, p.wk))),
                           T(1) / std::sqrt(static_cast<T>(dh)));
  auto attn = softmax(scores, 1);
  if (weights) weights->assign(attn.data().begin(), attn.data().end());
  auto out = matmul(matmul(attn, matmul(u, p.wv)), p.wo);
  auto attended = add(narrow(embedded, 0, 1), narrow(out, 0, 1));
  auto hidden = gelu(add_bias(matmul(layer_norm(attended, p.ln2_gamma, p.ln2_beta, 1), p.ff1),
                              p.ff1_bias, 1));
  return add(attended, add_bias(matmul(hidden, p.ff2), p.ff2_bias, 1));
}

/// x [C,H,W] -> [C,H,W].
template <typename T>
Tensor<T> dsrt_forward(const Tensor<T>& x, const DsrtParams<T>& p, DsrtTrace<T>* trace = nullptr) {
  const DsrtConfig& cfg = p.cfg;
  if (x.rank() != 3 || x.dim(0) != cfg.dim || x.dim(1) != cfg.grid_h || x.dim(2) != cfg.grid_w)
    throw DimensionError("dsrt expects [" + std::to_string(cfg.dim) + "," +
                         std::to_string(cfg.grid_h) + "," + std::to_string(cfg.grid_w) + "], got " +
                         shape_str(x.shape()));
  const std::size_t n = cfg.cells(), heads = cfg.heads, dh = cfg.head_dim();
  auto plan = dsrt_plan(cfg.grid_h, cfg.grid_w, heads);
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  // [C,H,W] -> [N, C] -> [N*heads, dh]
  auto cells = reshape(transpose_last(reshape(x, {cfg.dim, n})), {n * heads, dh});

  // kernel-3 token convolution: every embedded token is a sum of projected
  // neighbour contents and neighbour positions
  auto source = concat(std::vector<Tensor<T>>{cells, p.cls, p.pos});
  auto stacked = concat(std::vector<Tensor<T>>{matmul(source, p.conv[0]), matmul(source, p.conv[1]),
                                               matmul(source, p.conv[2])});
  auto embedded = add_bias(gather_sum_rows(stacked, plan->token_rows, 6), p.conv_bias, 1);

  auto normed = layer_norm(embedded, p.ln1_gamma, p.ln1_beta, 1);
  auto cls_embedded = gather_rows(embedded, plan->class_slots);
  auto cls_normed = gather_rows(normed, plan->class_slots);
  // (u0 Wq).(u Wk) = (u0 Wq Wk^T).u and sum a (u Wv) = (sum a u) Wv
  auto query = matmul(matmul(cls_normed, p.wq), transpose_last(p.wk));
  auto context = segment_attention(query, normed, normed, plan->window_offsets, scale,
                                   trace ? &trace->window : nullptr);
  auto attended = add(cls_embedded, matmul(matmul(context, p.wv), p.wo));
  auto hidden = gelu(add_bias(matmul(layer_norm(attended, p.ln2_gamma, p.ln2_beta, 1), p.ff1),
                              p.ff1_bias, 1));
  auto region_tokens = add(attended, add_bias(matmul(hidden, p.ff2), p.ff2_bias, 1));

  auto agg = segment_attention(matmul(cells, p.agg_q), matmul(region_tokens, p.agg_k),
                               matmul(region_tokens, p.agg_v), plan->region_offsets, scale,
                               trace ? &trace->aggregator : nullptr);
  if (trace) trace->plan = plan;
  auto mixed = matmul(reshape(agg, {n, cfg.dim}), p.head_mix);
  return reshape(transpose_last(mixed), {cfg.dim, cfg.grid_h, cfg.grid_w});
}

}  // namespace hsiseg
