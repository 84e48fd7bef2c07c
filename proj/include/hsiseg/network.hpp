#pragma once

// Single- and multi-branch segmentation networks, their losses, the learnable
// loss balance, and the HSW1 checkpoint format.

#include <cmath>
#include <cstring>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hsiseg/blocks.hpp"
#include "hsiseg/dataio.hpp"

namespace hsiseg {

struct ModelConfig {
  std::size_t in_bands = 8;
  std::size_t aux_bands = 0;      // K2, also the reconstruction width
  std::size_t classes = 4;        // K
  std::vector<std::size_t> ladder{12, 10, 8};  // encoder grids; ladder[0] is the model size r
  std::size_t d = 16;
  std::size_t heads = 2;
  double tau1 = 0.8;
  double dropout = 0.1;
  bool multibranch = false;
  std::uint64_t seed = 1;

  std::size_t stages() const { return ladder.size(); }
  std::size_t model_size() const { return ladder.front(); }

  /// Encoder grids followed by the mirrored decoder grids.
  std::vector<std::size_t> full_ladder() const {
    std::vector<std::size_t> out = ladder;
    for (std::size_t s = ladder.size() - 1; s-- > 0;) out.push_back(ladder[s]);
    return out;
  }

  void validate() const {
    if (ladder.size() < 2 || ladder.size() > 5)
      throw ValidationError("model: stage count " + std::to_string(ladder.size()) +
                            " outside [2,5]");
    for (std::size_t i = 1; i < ladder.size(); ++i)
      if (ladder[i] >= ladder[i - 1] || ladder[i] == 0)
        throw ValidationError("model: ladder must be strictly decreasing and positive");
    if (d == 0 || heads == 0 || d % heads != 0)
      throw ValidationError("model: feature width " + std::to_string(d) +
                            " not divisible by " + std::to_string(heads) + " heads");
    if (classes == 0 || in_bands == 0) throw ValidationError("model: classes and bands must be >= 1");
    if (multibranch && aux_bands == 0)
      throw ValidationError("model: the multi-branch network needs auxiliary bands");
    if (tau1 < 0 || tau1 > 1) throw ValidationError("model: tau1 outside [0,1]");
    if (dropout < 0 || dropout >= 1) throw ValidationError("model: dropout outside [0,1)");
  }
};

inline nlohmann::ordered_json to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["in_bands"] = c.in_bands;
  j["aux_bands"] = c.aux_bands;
  j["classes"] = c.classes;
  j["ladder"] = c.ladder;
  j["d"] = c.d;
  j["heads"] = c.heads;
  j["tau1"] = c.tau1;
  j["dropout"] = c.dropout;
  j["multibranch"] = c.multibranch;
  j["seed"] = c.seed;
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::ordered_json& j) {
  ModelConfig c;
  c.in_bands = j.at("in_bands").get<std::size_t>();
  c.aux_bands = j.at("aux_bands").get<std::size_t>();
  c.classes = j.at("classes").get<std::size_t>();
  c.ladder = j.at("ladder").get<std::vector<std::size_t>>();
  c.d = j.at("d").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.tau1 = j.at("tau1").get<double>();
  c.dropout = j.at("dropout").get<double>();
  c.multibranch = j.at("multibranch").get<bool>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

/// Independent generator per parameter group so that adding a group never
/// shifts the values drawn for another.
inline std::mt19937_64 stream_rng(std::uint64_t seed, std::uint32_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), tag};
  return std::mt19937_64(seq);
}

template <typename T>
struct BranchParams {
  Tensor<T> init_w, init_b;  // [d, in] [d]
  std::vector<EncoderParams<T>> encoders;
  std::vector<CfiParams<T>> skip_cfi;    // index s fuses encoder s with the decoder input from s+1
  std::vector<DecoderParams<T>> decoders;  // index s produces grid ladder[s]
  std::vector<DfsParams<T>> dfs;         // index s works at ladder[s]; empty without DFS
  Tensor<T> head_w, head_b;              // [out, d] [out]

  static BranchParams create(ParamStore<T>& store, const std::string& prefix,
                             const ModelConfig& cfg, std::size_t in, std::size_t out, bool with_dfs,
                             std::mt19937_64& rng) {
    BranchParams b;
    const std::size_t d = cfg.d, s_count = cfg.stages();
    const auto& lad = cfg.ladder;
    b.init_w = param_glorot(store, prefix + ".init_w", {d, in}, in, d, rng);
    b.init_b = param_const(store, prefix + ".init_b", {d}, T(0));
    for (std::size_t s = 0; s < s_count; ++s)
      b.encoders.push_back(EncoderParams<T>::create(store, prefix + ".enc" + std::to_string(s), d,
                                                    cfg.heads, s == 0 ? lad[0] : lad[s - 1], lad[s], rng));
    for (std::size_t s = 0; s + 1 < s_count; ++s) {
      b.skip_cfi.push_back(CfiParams<T>::create(store, prefix + ".skip" + std::to_string(s), d, cfg.heads, rng));
      b.decoders.push_back(
          DecoderParams<T>::create(store, prefix + ".dec" + std::to_string(s), d, cfg.heads, lad[s], rng));
    }
    if (with_dfs)
      for (std::size_t s = 0; s < s_count; ++s)
        b.dfs.push_back(DfsParams<T>::create(store, prefix + ".dfs" + std::to_string(s), d, cfg.classes,
                                             lad[s], s == 0 ? 0 : lad[s - 1], cfg.tau1, rng));
    b.head_w = param_glorot(store, prefix + ".head_w", {out, d}, d, out, rng);
    b.head_b = param_const(store, prefix + ".head_b", {out}, T(0));
    return b;
  }
};

template <typename T>
struct ForwardOutput {
  Tensor<T> seg_logits;      // [K, r, r]
  Tensor<T> class_map;       // [K, r, r], full-resolution DFS probabilities
  Tensor<T> reconstruction;  // [K2, r, r], multi-branch only
  std::vector<double> mask_density;
  std::vector<double> thresholds;
};

template <typename T>
class HsiSegModel {
 public:
  explicit HsiSegModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    auto rng_hsi = stream_rng(cfg_.seed, 1);
    hsi_ = BranchParams<T>::create(store_, "hsi", cfg_, cfg_.in_bands, cfg_.classes, true, rng_hsi);
    if (cfg_.multibranch) {
      auto rng_aux = stream_rng(cfg_.seed, 2);
      aux_ = BranchParams<T>::create(store_, "aux", cfg_, cfg_.aux_bands, cfg_.aux_bands, false, rng_aux);
      auto rng_cross = stream_rng(cfg_.seed, 3);
      for (std::size_t s = 0; s < cfg_.stages(); ++s)
        cross_enc_.push_back(
            CfiParams<T>::create(store_, "cross.enc" + std::to_string(s), cfg_.d, cfg_.heads, rng_cross));
      for (std::size_t s = 0; s + 1 < cfg_.stages(); ++s)
        cross_dec_.push_back(
            CfiParams<T>::create(store_, "cross.dec" + std::to_string(s), cfg_.d, cfg_.heads, rng_cross));
    }
    loss_raw_ = param_const(store_, "loss.raw", {cfg_.multibranch ? std::size_t{4} : std::size_t{2}}, T(0));
  }

  HsiSegModel(const HsiSegModel&) = delete;
  HsiSegModel& operator=(const HsiSegModel&) = delete;
  HsiSegModel(HsiSegModel&&) = default;
  HsiSegModel& operator=(HsiSegModel&&) = default;

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }
  const Tensor<T>& loss_raw() const { return loss_raw_; }
  BranchParams<T>& hsi_branch() { return hsi_; }
  BranchParams<T>& aux_branch() { return aux_; }
  std::vector<CfiParams<T>>& cross_encoder() { return cross_enc_; }
  std::vector<CfiParams<T>>& cross_decoder() { return cross_dec_; }

  ForwardOutput<T> forward(const Tensor<T>& hsi, const Tensor<T>* aux, ForwardContext<T>& ctx) const {
    const std::size_t r = cfg_.model_size(), s_count = cfg_.stages();
    if (hsi.rank() != 3 || hsi.dim(0) != cfg_.in_bands || hsi.dim(1) != r || hsi.dim(2) != r)
      throw DimensionError("model expects [" + std::to_string(cfg_.in_bands) + "," + std::to_string(r) +
                           "," + std::to_string(r) + "] input, got " + shape_str(hsi.shape()));
    const bool multi = cfg_.multibranch;
    if (multi && !aux) throw ArgumentError("the multi-branch network needs an auxiliary patch");
    if (multi && (aux->rank() != 3 || aux->dim(0) != cfg_.aux_bands || aux->dim(1) != r || aux->dim(2) != r))
      throw DimensionError("auxiliary patch " + shape_str(aux->shape()) + " does not match the model");

    std::vector<Tensor<T>> eh(s_count), ea(s_count);
    Tensor<T> xh = pointwise(hsi, hsi_.init_w, hsi_.init_b);
    Tensor<T> xa = multi ? pointwise(*aux, aux_.init_w, aux_.init_b) : Tensor<T>();
    for (std::size_t s = 0; s < s_count; ++s) {
      xh = encoder_stage_forward(xh, hsi_.encoders[s], ctx);
      if (multi) {
        xa = encoder_stage_forward(xa, aux_.encoders[s], ctx);
        std::tie(xh, xa) = cfi_forward(xh, xa, cross_enc_[s]);
      }
      eh[s] = xh;
      ea[s] = xa;
    }

    ForwardOutput<T> out;
    Tensor<T> o = eh[s_count - 1], dh = eh[s_count - 1], da = ea[s_count - 1];
    for (std::size_t s = s_count; s-- > 0;) {
      auto sel = dfs_stage_forward(o, dh, hsi_.dfs[s], ctx);
      if (s == 0) {
        out.class_map = sel.class_map;
        break;
      }
      auto [skip_h, lo_h] = cfi_forward(eh[s - 1], sel.masked_d, hsi_.skip_cfi[s - 1]);
      dh = decoder_stage_forward(lo_h, skip_h, hsi_.decoders[s - 1], ctx);
      if (multi) {
        auto [skip_a, lo_a] = cfi_forward(ea[s - 1], da, aux_.skip_cfi[s - 1]);
        da = decoder_stage_forward(lo_a, skip_a, aux_.decoders[s - 1], ctx);
        std::tie(dh, da) = cfi_forward(dh, da, cross_dec_[s - 1]);
      }
      o = sel.o_next;
    }
    out.seg_logits = pointwise(dh, hsi_.head_w, hsi_.head_b);
    if (multi) out.reconstruction = pointwise(da, aux_.head_w, aux_.head_b);
    out.mask_density = ctx.mask_density;
    out.thresholds = ctx.thresholds;
    return out;
  }

 private:
  ModelConfig cfg_;
  ParamStore<T> store_;
  BranchParams<T> hsi_, aux_;
  std::vector<CfiParams<T>> cross_enc_, cross_dec_;
  Tensor<T> loss_raw_;
};

/// Model inputs from a resized patch.
template <typename T>
std::pair<Tensor<T>, std::optional<Tensor<T>>> patch_tensors(const PatchSample& p) {
  const std::size_t r = p.model_size;
  Tensor<T> hsi({p.channels, r, r}, std::vector<T>(p.spectral.begin(), p.spectral.end()));
  std::optional<Tensor<T>> aux;
  if (p.has_aux()) aux = Tensor<T>({p.aux_channels, r, r}, std::vector<T>(p.aux.begin(), p.aux.end()));
  return {hsi, aux};
}

// -------------------------------------------------------------------- losses

/// Mean negative log-likelihood over labeled positions; labels 1..K, 0 ignored.
template <typename T>
Tensor<T> seg_cross_entropy(const Tensor<T>& logits, std::span<const std::uint16_t> labels) {
  if (logits.rank() != 3 || labels.size() != logits.dim(1) * logits.dim(2))
    throw DimensionError("cross entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  const std::size_t k = logits.dim(0), n = labels.size();
  auto probs = std::make_shared<std::vector<T>>(k * n, T(0));
  auto lab = std::make_shared<std::vector<std::uint16_t>>(labels.begin(), labels.end());
  std::size_t count = 0;
  double total = 0;
  const T* z = logits.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = labels[i];
    if (y > k) throw ValidationError("label " + std::to_string(y) + " exceeds " + std::to_string(k) + " classes");
    if (y == 0) continue;
    ++count;
    T mx = z[i];
    for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, z[c * n + i]);
    T s = 0;
    for (std::size_t c = 0; c < k; ++c) s += (*probs)[c * n + i] = std::exp(z[c * n + i] - mx);
    for (std::size_t c = 0; c < k; ++c) (*probs)[c * n + i] /= s;
    total += static_cast<double>(mx + std::log(s) - z[(y - 1) * n + i]);
  }
  const T value = count ? static_cast<T>(total / static_cast<double>(count)) : T(0);
  return detail::finish<T>(Tensor<T>::scalar(value), {&logits},
                           [logits, probs, lab, k, n, count](detail::Node<T>& o) {
                             if (!count) return;
                             T* g = detail::grad_sink(logits);
                             const T scale = o.grad[0] / static_cast<T>(count);
                             for (std::size_t i = 0; i < n; ++i) {
                               const auto y = (*lab)[i];
                               if (!y) continue;
                               for (std::size_t c = 0; c < k; ++c)
                                 g[c * n + i] += scale * ((*probs)[c * n + i] - (c + 1 == y ? T(1) : T(0)));
                             }
                           });
}

inline constexpr double kDiceEps = 1e-6;

/// Soft Dice over labeled positions, averaged over the classes present.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& class_map, std::span<const std::uint16_t> labels) {
  if (class_map.rank() != 3 || labels.size() != class_map.dim(1) * class_map.dim(2))
    throw DimensionError("dice: class map " + shape_str(class_map.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  const std::size_t k = class_map.dim(0), n = labels.size();
  auto lab = std::make_shared<std::vector<std::uint16_t>>(labels.begin(), labels.end());
  std::vector<double> inter(k, 0), psq(k, 0), ysq(k, 0);
  const T* p = class_map.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = labels[i];
    if (y > k) throw ValidationError("label " + std::to_string(y) + " exceeds " + std::to_string(k) + " classes");
    if (!y) continue;
    ysq[y - 1] += 1;
    for (std::size_t c = 0; c < k; ++c) {
      const double v = p[c * n + i];
      psq[c] += v * v;
      if (c + 1 == y) inter[c] += v;
    }
  }
  auto coef = std::make_shared<std::vector<std::pair<double, double>>>(k);  // (num, den); den 0 = absent
  std::size_t present = 0;
  double total = 0;
  for (std::size_t c = 0; c < k; ++c) {
    if (ysq[c] == 0) continue;
    ++present;
    const double num = 2 * inter[c] + kDiceEps, den = psq[c] + ysq[c] + kDiceEps;
    (*coef)[c] = {num, den};
    total += 1 - num / den;
  }
  const T value = present ? static_cast<T>(total / static_cast<double>(present)) : T(0);
  return detail::finish<T>(Tensor<T>::scalar(value), {&class_map},
                           [class_map, lab, coef, k, n, present](detail::Node<T>& o) {
                             if (!present) return;
                             T* g = detail::grad_sink(class_map);
                             const T* p = class_map.data().data();
                             const double scale = static_cast<double>(o.grad[0]) / static_cast<double>(present);
                             for (std::size_t i = 0; i < n; ++i) {
                               const auto y = (*lab)[i];
                               if (!y) continue;
                               for (std::size_t c = 0; c < k; ++c) {
                                 auto [num, den] = (*coef)[c];
                                 if (den == 0) continue;
                                 const double yi = c + 1 == y ? 1.0 : 0.0;
                                 const double pi = p[c * n + i];
                                 g[c * n + i] += static_cast<T>(-scale * (2 * yi * den - num * 2 * pi) / (den * den));
                               }
                             }
                           });
}

inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;
inline constexpr std::size_t kSsimWindow = 7;

template <typename T>
struct ReconstructionLosses {
  Tensor<T> mse, ssim_loss;
};

/// MSE and 1 - mean SSIM (uniform window of min(7, H, W), valid positions).
template <typename T>
ReconstructionLosses<T> reconstruction_losses(const Tensor<T>& recon, const Tensor<T>& target) {
  if (recon.shape() != target.shape() || recon.rank() != 3)
    throw DimensionError("reconstruction: " + shape_str(recon.shape()) + " vs " + shape_str(target.shape()));
  ReconstructionLosses<T> out;
  auto diff = sub(recon, target);
  out.mse = mean(square(diff));
  const std::size_t win = std::min({kSsimWindow, recon.dim(1), recon.dim(2)});
  auto mx = box_filter_valid(recon, win), my = box_filter_valid(target, win);
  auto sxx = sub(box_filter_valid(square(recon), win), square(mx));
  auto syy = sub(box_filter_valid(square(target), win), square(my));
  auto sxy = sub(box_filter_valid(mul(recon, target), win), mul(mx, my));
  const T c1 = static_cast<T>(kSsimC1), c2 = static_cast<T>(kSsimC2);
  auto num = mul(add_scalar(mul_scalar(mul(mx, my), T(2)), c1), add_scalar(mul_scalar(sxy, T(2)), c2));
  auto den = mul(add_scalar(add(square(mx), square(my)), c1), add_scalar(add(sxx, syy), c2));
  out.ssim_loss = add_scalar(mul_scalar(mean(div(num, den)), T(-1)), T(1));
  return out;
}

struct LossReport {
  double total = 0, seg = 0, dice = 0, mse = 0, ssim = 0;
  double alpha = 0, beta = 0, gamma = 0, delta = 0;
};

/// Balance weights: softmax over the learnable raw scalars (two in
/// single-branch mode, four otherwise).
/// The last weight is reported as the complement of the others, so the four
/// reported values add to exactly 1 in double arithmetic.
template <typename T>
std::vector<double> loss_weights(const Tensor<T>& raw) {
  const auto& r = raw.data();
  double mx = -INFINITY;
  for (T v : r) mx = std::max(mx, static_cast<double>(v));
  std::vector<double> out;
  double z = 0;
  for (T v : r) z += out.emplace_back(std::exp(static_cast<double>(v) - mx));
  double head = 0;
  for (std::size_t i = 0; i + 1 < out.size(); ++i) head += (out[i] /= z);
  out.back() = 1.0 - head;
  if (out.size() == 2) {
    out.push_back(0.0);
    out.push_back(0.0);
  }
  return out;
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& seg, const Tensor<T>& dice, const Tensor<T>* mse,
                     const Tensor<T>* ssim, const Tensor<T>& raw, LossReport* report = nullptr) {
  const bool multi = raw.numel() == 4;
  if (multi != (mse && ssim))
    throw ArgumentError("loss weights for " + std::to_string(raw.numel()) +
                        " terms do not match the supplied losses");
  auto w = softmax(raw, 0);
  std::vector<Tensor<T>> terms{seg, dice};
  if (multi) {
    terms.push_back(*mse);
    terms.push_back(*ssim);
  }
  auto stacked = reshape(concat(std::vector<Tensor<T>>{reshape(terms[0], {1}), reshape(terms[1], {1})}), {2});
  if (multi)
    stacked = concat(std::vector<Tensor<T>>{stacked, reshape(terms[2], {1}), reshape(terms[3], {1})});
  auto total = sum(mul(w, stacked));
  if (report) {
    auto wv = loss_weights(raw);
    report->total = total.item();
    report->seg = seg.item();
    report->dice = dice.item();
    report->alpha = wv[0];
    report->beta = wv[1];
    if (multi) {
      report->mse = mse->item();
      report->ssim = ssim->item();
      report->gamma = wv[2];
      report->delta = wv[3];
    } else {
      report->mse = report->ssim = report->gamma = report->delta = 0;
    }
  }
  return total;
}

/// Single-branch form: segmentation and Dice terms only.
template <typename T>
Tensor<T> total_loss(const Tensor<T>& seg, const Tensor<T>& dice, const Tensor<T>& raw,
                     LossReport* report = nullptr) {
  return total_loss<T>(seg, dice, nullptr, nullptr, raw, report);
}

// ---------------------------------------------------------------- checkpoint

template <typename T>
std::vector<char> encode_checkpoint(const HsiSegModel<T>& model) {
  nlohmann::ordered_json header;
  header["config"] = to_json(model.config());
  auto manifest = nlohmann::ordered_json::array();
  for (const auto& p : model.params().params())
    manifest.push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
  header["manifest"] = manifest;
  const std::string h = header.dump();
  std::vector<char> out{'H', 'S', 'W', '1'};
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(h.size()));
  out.insert(out.end(), h.begin(), h.end());
  for (const auto& p : model.params().params())
    for (T v : p.tensor.data()) detail::put_le<float>(out, static_cast<float>(v));
  return out;
}

template <typename T>
HsiSegModel<T> decode_checkpoint(const std::vector<char>& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), "HSW1", 4) != 0)
    throw FormatError("checkpoint: bad magic", 0);
  const std::size_t hlen = detail::get_le<std::uint32_t>(bytes, 4);
  if (8 + hlen > bytes.size()) throw FormatError("checkpoint: header runs past the end of the file", bytes.size());
  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: header is not JSON: ") + e.what(), 8);
  }
  HsiSegModel<T> model(model_config_from_json(header.at("config")));
  const auto& manifest = header.at("manifest");
  auto& params = model.params().params();
  if (manifest.size() != params.size())
    throw FormatError("checkpoint: manifest lists " + std::to_string(manifest.size()) +
                      " tensors, configuration implies " + std::to_string(params.size()), 8);
  std::size_t offset = 8 + hlen;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (manifest[i].at("name").get<std::string>() != p.name ||
        manifest[i].at("shape").get<Shape>() != p.tensor.shape())
      throw FormatError("checkpoint: manifest entry " + std::to_string(i) + " does not match '" + p.name + "'", 8);
    const std::size_t need = p.tensor.numel() * 4;
    if (offset + need > bytes.size()) throw FormatError("checkpoint: payload truncated in '" + p.name + "'", bytes.size());
    auto dst = p.tensor.mutable_data();
    for (std::size_t k = 0; k < p.tensor.numel(); ++k) dst[k] = static_cast<T>(detail::get_le<float>(bytes, offset + 4 * k));
    offset += need;
  }
  if (offset != bytes.size()) throw FormatError("checkpoint: trailing bytes", offset);
  return model;
}

template <typename T>
void save_checkpoint(const HsiSegModel<T>& model, const std::filesystem::path& path) {
  detail::write_file(path, encode_checkpoint(model));
}

template <typename T>
HsiSegModel<T> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<T>(detail::read_file(path));
}

}  // namespace hsiseg
