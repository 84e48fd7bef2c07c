#pragma once

// Optimisation loop, tiled full-scene inference, pseudo-labelling and the
// progressive self-training controller.

#include <algorithm>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <thread>
#include <vector>

#include <json.hpp>

#include "hsiseg/eval.hpp"
#include "hsiseg/network.hpp"

namespace hsiseg {

struct TrainConfig {
  std::size_t epochs = 60;
  std::size_t batch = 8;
  double lr = 1e-3;
  std::uint64_t seed = 1;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::size_t patch = 13;  // odd crop size p, resized to the model grid

  /// A learning rate of exactly 0 is accepted (a frozen run); negative or
  /// non-finite rates are not.
  void validate() const {
    if (epochs == 0) throw ValidationError("train: epochs must be >= 1");
    if (batch == 0) throw ValidationError("train: batch size must be >= 1");
    if (!(lr >= 0) || !std::isfinite(lr)) throw ValidationError("train: learning rate must be finite and >= 0");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
      throw ValidationError("train: moment decays must lie in [0,1)");
    if (!(eps > 0)) throw ValidationError("train: epsilon must be positive");
    if (patch == 0 || patch % 2 == 0) throw ValidationError("train: patch size must be odd");
  }
};

/// Adaptive-moment optimiser with bias correction. Moments are kept in
/// double whatever the parameter precision.
template <typename T>
class Adam {
 public:
  Adam(ParamStore<T>& store, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : store_(store), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto& p : store_.params()) {
      m_.emplace_back(p.tensor.numel(), 0.0);
      v_.emplace_back(p.tensor.numel(), 0.0);
    }
  }

  void step() {
    ++t_;
    if (lr_ == 0.0) return;
    const double c1 = 1 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1 - std::pow(b2_, static_cast<double>(t_));
    auto& params = store_.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& t = params[i].tensor;
      if (!t.has_grad()) continue;
      auto g = t.grad();
      auto x = t.mutable_data();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < x.size(); ++k) {
        const double gk = static_cast<double>(g[k]);
        m[k] = b1_ * m[k] + (1 - b1_) * gk;
        v[k] = b2_ * v[k] + (1 - b2_) * gk * gk;
        x[k] = static_cast<T>(static_cast<double>(x[k]) - lr_ * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_));
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  ParamStore<T>& store_;
  double lr_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// One row of the loss curve.
struct EpochLog {
  std::size_t iteration = 0;
  std::size_t epoch = 0;
  double total = 0;
  double alpha = 0, beta = 0, gamma = 0, delta = 0;
};

template <typename T>
struct TrainHooks {
  // Called after every optimiser step.
  std::function<void(const HsiSegModel<T>&, std::size_t step)> on_step;
  // Coordinates that must never reach a batch (held-out pixels).
  const std::vector<Coord>* forbidden = nullptr;
  std::size_t iteration = 0;  // tag for the loss log
  // When nonzero, each epoch visits at most this many centres, drawn
  // uniformly without replacement.
  std::size_t samples_per_epoch = 0;
};

namespace detail {

inline std::uint64_t coord_key(const Coord& c) { return (std::uint64_t{c.row} << 32) | c.col; }

}  // namespace detail

/// Trains on patches centred on `centers`, labelled from `label_map`.
template <typename T>
std::vector<EpochLog> train(HsiSegModel<T>& model, const HsiScene& scene, std::span<const std::uint16_t> label_map,
                            const std::vector<Coord>& centers, const TrainConfig& cfg, const TrainHooks<T>& hooks = {}) {
  cfg.validate();
  if (centers.empty()) throw ArgumentError("train: no training centres");
  const auto& mc = model.config();
  if (scene.bands != mc.in_bands)
    throw DimensionError("train: scene has " + std::to_string(scene.bands) + " bands, model expects " +
                         std::to_string(mc.in_bands));
  if (mc.multibranch && !scene.aux) throw ArgumentError("train: the multi-branch model needs an auxiliary raster");
  if (label_map.size() != scene.pixels()) throw DimensionError("train: label map does not match scene");

  std::set<std::uint64_t> forbidden;
  if (hooks.forbidden) {
    for (const auto& c : *hooks.forbidden) {
      forbidden.insert(detail::coord_key(c));
      if (label_map[c.row * scene.width + c.col] != 0)
        throw TrainingError("leakage: held-out pixel (" + std::to_string(c.row) + "," + std::to_string(c.col) +
                            ") carries a training label");
    }
  }

  std::vector<PatchSample> samples;
  samples.reserve(centers.size());
  for (const auto& c : centers)
    samples.push_back(resize_patch(extract_patch(scene, label_map, c.row, c.col, cfg.patch), mc.model_size()));

  auto rng = stream_rng(cfg.seed, 16 + static_cast<std::uint32_t>(hooks.iteration));
  Adam<T> opt(model.params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
  std::vector<std::size_t> order(samples.size());
  std::vector<EpochLog> log;
  const T inv_batch_full = T(1) / static_cast<T>(cfg.batch);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t n = hooks.samples_per_epoch ? std::min(hooks.samples_per_epoch, order.size()) : order.size();
    if (!forbidden.empty())
      for (std::size_t i = 0; i < n; ++i)
        if (forbidden.count(detail::coord_key(samples[order[i]].center)))
          throw TrainingError("leakage: held-out pixel selected as a batch centre in epoch " + std::to_string(epoch));

    double epoch_total = 0;
    for (std::size_t start = 0, b = 0; start < n; start += cfg.batch, ++b) {
      const std::size_t end = std::min(n, start + cfg.batch);
      const T scale = end - start == cfg.batch ? inv_batch_full : T(1) / static_cast<T>(end - start);
      model.params().zero_grad();
      for (std::size_t i = start; i < end; ++i) {
        const auto& s = samples[order[i]];
        try {
          auto [hsi, aux] = patch_tensors<T>(s);
          ForwardContext<T> ctx;
          ctx.training = true;
          ctx.dropout = mc.dropout;
          ctx.rng = &rng;
          auto out = model.forward(hsi, aux ? &*aux : nullptr, ctx);
          auto ce = seg_cross_entropy(out.seg_logits, s.labels);
          auto dc = dice_loss(out.class_map, s.labels);
          Tensor<T> loss;
          if (mc.multibranch) {
            auto rec = reconstruction_losses(out.reconstruction, *aux);
            loss = total_loss(ce, dc, &rec.mse, &rec.ssim_loss, model.loss_raw());
          } else {
            loss = total_loss(ce, dc, model.loss_raw());
          }
          if (!std::isfinite(static_cast<double>(loss.item()))) throw NumericError("loss is not finite");
          epoch_total += static_cast<double>(loss.item());
          backward(mul_scalar(loss, scale));
        } catch (const NumericError& e) {
          Tape<T>::current().clear();
          throw TrainingError("non-finite loss in epoch " + std::to_string(epoch) + ", batch " + std::to_string(b) +
                              " (centre " + std::to_string(s.center.row) + "," + std::to_string(s.center.col) +
                              "): " + e.what());
        }
      }
      opt.step();
      if (hooks.on_step) hooks.on_step(model, opt.steps());
    }
    model.params().zero_grad();
    const auto w = loss_weights(model.loss_raw());
    log.push_back({hooks.iteration, epoch, epoch_total / static_cast<double>(n), w[0], w[1], w[2], w[3]});
  }
  return log;
}

// --------------------------------------------------------------- inference

/// Per-pixel class probabilities, pixel-major: data[(row*width+col)*classes+k].
struct ProbVolume {
  std::size_t height = 0, width = 0, classes = 0;
  std::vector<double> data;

  std::span<const double> at(std::size_t row, std::size_t col) const {
    return std::span<const double>(data).subspan((row * width + col) * classes, classes);
  }
};

/// Tile centres along one axis of extent n so that p-wide windows spaced at
/// most `stride` apart cover every index.
inline std::vector<std::size_t> tile_centers(std::size_t n, std::size_t p, std::size_t stride) {
  if (stride == 0) throw ArgumentError("inference stride must be positive");
  if (stride > p) throw ArgumentError("inference stride " + std::to_string(stride) + " exceeds patch size " + std::to_string(p));
  const std::size_t half = p / 2;
  std::size_t c = std::min(half, n - 1);
  std::vector<std::size_t> out{c};
  while (c + half < n - 1) {
    c = std::min(c + stride, n - 1 - half);
    out.push_back(c);
  }
  return out;
}

/// Softmax probabilities of the p x p window centred on (row, col),
/// channel-first [K, p, p].
template <typename T>
std::vector<double> tile_probabilities(const HsiSegModel<T>& model, const HsiScene& scene, std::size_t row,
                                       std::size_t col, std::size_t p) {
  NoGradGuard guard;
  const std::size_t r = model.config().model_size(), k = model.config().classes;
  auto sample = resize_patch(extract_patch(scene, row, col, p), r);
  auto [hsi, aux] = patch_tensors<T>(sample);
  ForwardContext<T> ctx;
  auto out = model.forward(hsi, aux ? &*aux : nullptr, ctx);
  auto prob = softmax(out.seg_logits, 0);
  std::vector<double> planes(prob.data().begin(), prob.data().end());
  return detail::resize_planes(planes, k, r, p);
}

/// Overlapping-tile inference with visit-count averaging. Tiles are
/// evaluated on `workers` threads and merged in tile order, so the result
/// does not depend on the worker count.
template <typename T>
ProbVolume infer_full_scene(const HsiSegModel<T>& model, const HsiScene& scene, std::size_t p, std::size_t stride,
                            std::size_t workers = 1) {
  if (p == 0 || p % 2 == 0) throw ArgumentError("inference patch size must be odd");
  const auto rows = tile_centers(scene.height, p, stride), cols = tile_centers(scene.width, p, stride);
  std::vector<Coord> tiles;
  for (auto r : rows)
    for (auto c : cols) tiles.push_back({static_cast<std::uint32_t>(r), static_cast<std::uint32_t>(c)});

  std::vector<std::vector<double>> results(tiles.size());
  workers = std::clamp<std::size_t>(workers, 1, tiles.size());
  auto run = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) results[i] = tile_probabilities(model, scene, tiles[i].row, tiles[i].col, p);
  };
  if (workers == 1) {
    run(0, tiles.size());
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t lo = tiles.size() * w / workers, hi = tiles.size() * (w + 1) / workers;
      pool.emplace_back([&, w, lo, hi] {
        try {
          run(lo, hi);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  const std::size_t k = model.config().classes;
  ProbVolume vol{scene.height, scene.width, k, std::vector<double>(scene.pixels() * k, 0.0)};
  std::vector<std::uint32_t> visits(scene.pixels(), 0);
  const long half = static_cast<long>(p / 2);
  for (std::size_t t = 0; t < tiles.size(); ++t) {
    const auto& probs = results[t];
    for (std::size_t a = 0; a < p; ++a) {
      const long row = static_cast<long>(tiles[t].row) + static_cast<long>(a) - half;
      if (row < 0 || row >= static_cast<long>(scene.height)) continue;
      for (std::size_t b = 0; b < p; ++b) {
        const long col = static_cast<long>(tiles[t].col) + static_cast<long>(b) - half;
        if (col < 0 || col >= static_cast<long>(scene.width)) continue;
        const std::size_t px = static_cast<std::size_t>(row) * scene.width + static_cast<std::size_t>(col);
        ++visits[px];
        for (std::size_t c = 0; c < k; ++c) vol.data[px * k + c] += probs[(c * p + a) * p + b];
      }
    }
  }
  for (std::size_t px = 0; px < scene.pixels(); ++px) {
    if (!visits[px]) throw NumericError("inference left pixel " + std::to_string(px) + " uncovered");
    for (std::size_t c = 0; c < k; ++c) vol.data[px * k + c] /= visits[px];
  }
  return vol;
}

/// Argmax class per pixel, stored 1..K.
inline std::vector<std::uint16_t> predict_labels(const ProbVolume& vol) {
  std::vector<std::uint16_t> out(vol.height * vol.width);
  for (std::size_t px = 0; px < out.size(); ++px) {
    auto p = std::span<const double>(vol.data).subspan(px * vol.classes, vol.classes);
    out[px] = static_cast<std::uint16_t>(std::max_element(p.begin(), p.end()) - p.begin() + 1);
  }
  return out;
}

/// Scores full-scene predictions against the scene's labels at `coords`.
template <typename T>
MetricsReport evaluate(const HsiSegModel<T>& model, const HsiScene& scene, const std::vector<Coord>& coords,
                       std::size_t p, std::size_t stride, std::size_t workers = 1) {
  auto pred = predict_labels(infer_full_scene(model, scene, p, stride, workers));
  return metrics(confusion(pred, scene.labels, scene.width, coords, scene.class_count));
}

// ------------------------------------------------------------ pseudo labels

struct PseudoLabels {
  std::vector<std::uint16_t> labels;  // 0 = unlabelled
  std::vector<double> max_prob;
  double threshold = 0, mean = 0, stddev = 0;
  std::size_t selected = 0;  // pixels chosen by the threshold, before preservation
};

/// Thresholds the per-pixel max probability at max(tau2, mean + std) and
/// labels the selected pixels with their argmax class. With `preserve`, the
/// nonzero entries of `y0_train` overwrite the result.
inline PseudoLabels generate_pseudo_labels(const ProbVolume& vol, double tau2, std::span<const std::uint16_t> y0_train,
                                           bool preserve = true) {
  const std::size_t n = vol.height * vol.width;
  if (y0_train.size() != n) throw DimensionError("pseudo labels: training map does not match the volume");
  PseudoLabels out;
  out.max_prob.resize(n);
  std::vector<std::uint16_t> arg(n);
  for (std::size_t px = 0; px < n; ++px) {
    auto p = std::span<const double>(vol.data).subspan(px * vol.classes, vol.classes);
    auto it = std::max_element(p.begin(), p.end());
    out.max_prob[px] = *it;
    arg[px] = static_cast<std::uint16_t>(it - p.begin() + 1);
  }
  auto th = adaptive_threshold_mask(out.max_prob, tau2);
  out.threshold = th.threshold;
  out.mean = th.mean;
  out.stddev = th.stddev;
  out.labels.assign(n, 0);
  for (std::size_t px = 0; px < n; ++px)
    if (th.mask[px]) {
      out.labels[px] = arg[px];
      ++out.selected;
    }
  if (preserve)
    for (std::size_t px = 0; px < n; ++px)
      if (y0_train[px]) out.labels[px] = y0_train[px];
  return out;
}

/// Bound used at 0-based iteration t: tau2_0 + t*zeta, clamped to 1.
inline double tau2_schedule(double tau2_0, double zeta, std::size_t t) {
  return std::min(1.0, tau2_0 + static_cast<double>(t) * zeta);
}

// ------------------------------------------------------------- progressive

struct ProgressiveConfig {
  std::size_t iterations = 3;
  double tau2 = 0.7;
  double zeta = 0.005;
  bool preserve = true;
  std::size_t stride = 0;   // 0 selects patch/2 (at least 1)
  std::size_t workers = 1;
  std::size_t finetune_samples = 64;  // centres per fine-tuning epoch; 0 = all eligible
  std::filesystem::path run_dir;      // empty: no artifacts

  void validate() const {
    if (iterations == 0) throw ValidationError("progressive: iterations must be >= 1");
    if (!(tau2 >= 0 && tau2 <= 1)) throw ValidationError("progressive: tau2 outside [0,1]");
    if (!(zeta >= 0) || !std::isfinite(zeta)) throw ValidationError("progressive: zeta must be finite and >= 0");
  }
};

struct IterationRecord {
  std::size_t iteration = 0;
  double tau2 = 0;
  double threshold = 0, mean = 0, stddev = 0;
  std::size_t selected = 0;
  double coverage = 0;  // labelled fraction of y_temp
  MetricsReport metrics;
};

/// What the controller saw at one assignment, for auditing.
struct IterationView {
  std::size_t iteration;
  const ProbVolume& prob;
  const PseudoLabels& pseudo;
};

struct ProgressiveResult {
  std::vector<IterationRecord> iterations;
  std::vector<EpochLog> loss_log;
  std::vector<std::uint16_t> y_temp;
  double tau2_last = 0;  // bound used by the final iteration
  double tau2_next = 0;  // bound after the final increment
  MetricsReport final_metrics;
};

inline nlohmann::ordered_json to_json(const IterationRecord& r) {
  nlohmann::ordered_json j;
  j["iteration"] = r.iteration;
  j["tau2"] = r.tau2;
  j["threshold"] = r.threshold;
  j["mean"] = r.mean;
  j["stddev"] = r.stddev;
  j["selected"] = r.selected;
  j["coverage"] = r.coverage;
  j["metrics"] = to_json(r.metrics);
  return j;
}

inline void write_loss_csv(const std::vector<EpochLog>& log, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "iteration,epoch,total,alpha,beta,gamma,delta\n";
  char buf[256];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%.9g,%.9g,%.9g,%.9g\n", e.iteration, e.epoch, e.total, e.alpha, e.beta,
                  e.gamma, e.delta);
    out << buf;
  }
}

/// Self-training loop: infer, pseudo-label, fine-tune on the temporal labels,
/// then score against the held-out pixels. Held-out pixels are removed from
/// the fine-tuning label map and from the eligible centres.
template <typename T>
ProgressiveResult progressive_learn(HsiSegModel<T>& model, const HsiScene& scene, const Split& split,
                                    const TrainConfig& train_cfg, const ProgressiveConfig& cfg,
                                    const std::function<void(const IterationView&)>& observe = {}) {
  cfg.validate();
  train_cfg.validate();
  if (split.train.empty()) throw ArgumentError("progressive: empty training split");
  const std::size_t p = train_cfg.patch;
  const std::size_t stride = cfg.stride ? cfg.stride : std::max<std::size_t>(1, p / 2);
  const auto y0_train = restrict_labels(scene, split.train);
  std::vector<std::uint8_t> held_out(scene.pixels(), 0);
  for (const auto& c : split.test) held_out[c.row * scene.width + c.col] = 1;

  TrainConfig ft = train_cfg;
  ft.epochs = std::max<std::size_t>(1, train_cfg.epochs / 4);

  if (!cfg.run_dir.empty()) std::filesystem::create_directories(cfg.run_dir);
  ProgressiveResult res;
  for (std::size_t t = 0; t < cfg.iterations; ++t) {
    const double tau2 = tau2_schedule(cfg.tau2, cfg.zeta, t);
    auto vol = infer_full_scene(model, scene, p, stride, cfg.workers);
    auto pseudo = generate_pseudo_labels(vol, tau2, y0_train, cfg.preserve);
    if (observe) observe({t + 1, vol, pseudo});

    std::vector<std::uint16_t> ft_labels = pseudo.labels;
    std::vector<Coord> centers;
    std::size_t labelled = 0;
    for (std::size_t px = 0; px < scene.pixels(); ++px) {
      if (pseudo.labels[px]) ++labelled;
      if (held_out[px]) ft_labels[px] = 0;
      if (ft_labels[px])
        centers.push_back({static_cast<std::uint32_t>(px / scene.width), static_cast<std::uint32_t>(px % scene.width)});
    }
    if (centers.empty()) centers = split.train;

    TrainHooks<T> hooks;
    hooks.forbidden = &split.test;
    hooks.iteration = t + 1;
    hooks.samples_per_epoch = cfg.finetune_samples;
    ft.seed = train_cfg.seed + t + 1;
    auto log = train(model, scene, ft_labels, centers, ft, hooks);
    res.loss_log.insert(res.loss_log.end(), log.begin(), log.end());

    IterationRecord rec;
    rec.iteration = t + 1;
    rec.tau2 = tau2;
    rec.threshold = pseudo.threshold;
    rec.mean = pseudo.mean;
    rec.stddev = pseudo.stddev;
    rec.selected = pseudo.selected;
    rec.coverage = static_cast<double>(labelled) / static_cast<double>(scene.pixels());
    rec.metrics = evaluate(model, scene, split.test, p, stride, cfg.workers);
    res.iterations.push_back(rec);
    res.y_temp = std::move(pseudo.labels);
    res.tau2_last = tau2;

    if (!cfg.run_dir.empty()) {
      const std::string tag = "iter" + std::to_string(t + 1);
      HsiScene labelled_scene = scene;
      labelled_scene.labels = res.y_temp;
      save_scene(labelled_scene, cfg.run_dir / ("y_temp_" + tag + ".hsc"));
      std::ofstream(cfg.run_dir / ("metrics_" + tag + ".json"), std::ios::binary) << to_json(rec).dump(2) << "\n";
      write_loss_csv(res.loss_log, cfg.run_dir / "loss.csv");
    }
  }
  res.tau2_next = tau2_schedule(cfg.tau2, cfg.zeta, cfg.iterations);
  res.final_metrics = res.iterations.back().metrics;
  return res;
}

}  // namespace hsiseg
