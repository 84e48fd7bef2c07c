#pragma once

// Confusion matrices, OA / AA / Kappa, and PPM rendering of class maps.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hsiseg/dataio.hpp"

namespace hsiseg {

/// Rows are true classes 1..K, columns predicted classes 1..K (stored at
/// index class-1). Predictions of 0 (no class) land in `rejected[true-1]`.
struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::uint64_t> counts;  // classes x classes
  std::vector<std::uint64_t> rejected;

  explicit ConfusionMatrix(std::size_t k = 0) : classes(k), counts(k * k, 0), rejected(k, 0) {}

  std::uint64_t& at(std::size_t truth, std::size_t pred) { return counts[truth * classes + pred]; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts[truth * classes + pred]; }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts) t += c;
    for (auto r : rejected) t += r;
    return t;
  }
};

inline ConfusionMatrix confusion(std::span<const std::uint16_t> pred, std::span<const std::uint16_t> labels,
                                 std::size_t width, std::span<const Coord> coords, std::size_t classes) {
  if (pred.size() != labels.size())
    throw DimensionError("confusion: prediction and label maps differ in size");
  ConfusionMatrix cm(classes);
  for (const auto& c : coords) {
    const std::size_t i = c.row * width + c.col;
    if (i >= labels.size()) throw ArgumentError("confusion: coordinate outside the map");
    const auto t = labels[i], p = pred[i];
    if (t == 0 || t > classes)
      throw ArgumentError("confusion: coordinate (" + std::to_string(c.row) + "," + std::to_string(c.col) +
                          ") has no valid ground-truth class");
    if (p > classes) throw ArgumentError("confusion: predicted class " + std::to_string(p) + " out of range");
    if (p == 0)
      ++cm.rejected[t - 1];
    else
      ++cm.at(t - 1, p - 1);
  }
  return cm;
}

struct MetricsReport {
  double oa = 0, aa = 0, kappa = 0;
  std::vector<std::optional<double>> per_class;  // empty optional: no support
  std::vector<std::uint64_t> support;
  std::uint64_t rejected = 0;
};

inline MetricsReport metrics(const ConfusionMatrix& cm) {
  const double total = static_cast<double>(cm.total());
  if (total == 0) throw ArgumentError("metrics of an empty confusion matrix");
  const std::size_t k = cm.classes;
  MetricsReport r;
  r.per_class.resize(k);
  r.support.assign(k, 0);
  std::vector<double> col(k, 0);
  double trace = 0, aa_sum = 0;
  std::size_t aa_n = 0;
  for (std::size_t t = 0; t < k; ++t) {
    std::uint64_t row = cm.rejected[t];
    for (std::size_t p = 0; p < k; ++p) {
      row += cm.at(t, p);
      col[p] += static_cast<double>(cm.at(t, p));
    }
    r.support[t] = row;
    r.rejected += cm.rejected[t];
    trace += static_cast<double>(cm.at(t, t));
    if (row) {
      const double acc = static_cast<double>(cm.at(t, t)) / static_cast<double>(row);
      r.per_class[t] = acc;
      aa_sum += acc;
      ++aa_n;
    }
  }
  r.oa = trace / total;
  r.aa = aa_n ? aa_sum / static_cast<double>(aa_n) : 0.0;
  double pe = 0;
  for (std::size_t t = 0; t < k; ++t) pe += static_cast<double>(r.support[t]) * col[t];
  pe /= total * total;
  r.kappa = pe == 1.0 ? (r.oa == 1.0 ? 1.0 : 0.0) : (r.oa - pe) / (1 - pe);
  return r;
}

inline nlohmann::ordered_json to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["oa"] = r.oa;
  j["aa"] = r.aa;
  j["kappa"] = r.kappa;
  auto pc = nlohmann::ordered_json::array();
  for (const auto& v : r.per_class) pc.push_back(v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json());
  j["per_class"] = pc;
  j["support"] = r.support;
  j["rejected"] = r.rejected;
  return j;
}

// -------------------------------------------------------------------- render

using Rgb = std::array<std::uint8_t, 3>;

/// Class 0 is black; classes 1..16 follow.
inline const std::vector<Rgb>& default_palette() {
  static const std::vector<Rgb> p{
      {0, 0, 0},       {230, 25, 75},  {60, 180, 75},   {255, 225, 25}, {0, 130, 200},  {245, 130, 48},
      {145, 30, 180},  {70, 240, 240}, {240, 50, 230},  {210, 245, 60}, {250, 190, 212}, {0, 128, 128},
      {220, 190, 255}, {170, 110, 40}, {255, 250, 200}, {128, 0, 0},    {170, 255, 195}};
  return p;
}

inline std::vector<char> render_map(std::span<const std::uint16_t> classes, std::size_t height, std::size_t width,
                                    const std::vector<Rgb>& palette = default_palette()) {
  if (classes.size() != height * width) throw DimensionError("render: map size does not match extents");
  const std::string header = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  std::vector<char> out(header.begin(), header.end());
  out.reserve(header.size() + 3 * classes.size());
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i] >= palette.size())
      throw ArgumentError("render: class " + std::to_string(classes[i]) + " beyond the " +
                          std::to_string(palette.size()) + "-colour palette");
    for (auto v : palette[classes[i]]) out.push_back(static_cast<char>(v));
  }
  return out;
}

}  // namespace hsiseg
