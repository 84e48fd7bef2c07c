#pragma once

// Scene containers, the HSC1 on-disk format, synthetic scenes, PCA,
// patch extraction, and train/test splitting.

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "hsiseg/errors.hpp"

namespace hsiseg {

/// Hyperspectral cube (band-interleaved-by-pixel), label map, optional
/// co-registered auxiliary raster.
struct HsiScene {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t bands = 0;
  std::size_t class_count = 0;
  std::size_t aux_bands = 0;
  std::vector<float> cube;             // height*width*bands
  std::vector<std::uint16_t> labels;   // height*width, 0 = unlabeled
  std::optional<std::vector<float>> aux;  // height*width*aux_bands

  std::size_t pixels() const { return height * width; }
  float value(std::size_t row, std::size_t col, std::size_t band) const {
    return cube[(row * width + col) * bands + band];
  }
  std::uint16_t label(std::size_t row, std::size_t col) const { return labels[row * width + col]; }
};

struct Coord {
  std::uint32_t row = 0;
  std::uint32_t col = 0;
  friend bool operator==(const Coord&, const Coord&) = default;
  friend auto operator<=>(const Coord&, const Coord&) = default;
};

/// Checks the scene invariants; throws ValidationError naming the culprit.
inline void validate_scene(const HsiScene& s) {
  if (s.height == 0 || s.width == 0) throw ValidationError("scene has zero extent");
  if (s.cube.size() != s.pixels() * s.bands)
    throw ValidationError("cube holds " + std::to_string(s.cube.size()) + " values, expected " +
                          std::to_string(s.pixels() * s.bands));
  if (s.labels.size() != s.pixels()) throw ValidationError("label map size disagrees with extents");
  for (std::size_t i = 0; i < s.cube.size(); ++i)
    if (!std::isfinite(s.cube[i]))
      throw ValidationError("non-finite cube value at pixel (" +
                            std::to_string(i / s.bands / s.width) + "," +
                            std::to_string(i / s.bands % s.width) + ")");
  for (std::size_t p = 0; p < s.pixels(); ++p)
    if (s.labels[p] > s.class_count)
      throw ValidationError("label " + std::to_string(s.labels[p]) + " at pixel (" +
                            std::to_string(p / s.width) + "," + std::to_string(p % s.width) +
                            ") exceeds class count " + std::to_string(s.class_count));
  if (s.aux) {
    if (s.aux_bands == 0 || s.aux->size() != s.pixels() * s.aux_bands)
      throw ValidationError("auxiliary raster is not co-registered with the cube");
    for (float v : *s.aux)
      if (!std::isfinite(v)) throw ValidationError("non-finite auxiliary value");
  }
}

// ------------------------------------------------------------------ HSC1 I/O

namespace detail {

template <typename V>
void put_le(std::vector<char>& out, V value) {
  static_assert(std::is_trivially_copyable_v<V>);
  std::array<char, sizeof(V)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(V));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.insert(out.end(), bytes.begin(), bytes.end());
}

template <typename V>
V get_le(const std::vector<char>& in, std::size_t offset) {
  std::array<char, sizeof(V)> bytes;
  std::memcpy(bytes.data(), in.data() + offset, sizeof(V));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  V value;
  std::memcpy(&value, bytes.data(), sizeof(V));
  return value;
}

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArgumentError("cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ArgumentError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ArgumentError("short write to " + path.string());
}

}  // namespace detail

inline std::vector<char> encode_scene(const HsiScene& scene) {
  validate_scene(scene);
  nlohmann::ordered_json header;
  header["h"] = scene.height;
  header["w"] = scene.width;
  header["c"] = scene.bands;
  header["k"] = scene.class_count;
  header["k2"] = scene.aux_bands;
  header["has_aux"] = scene.aux.has_value();
  const std::string text = header.dump();

  std::vector<char> out{'H', 'S', 'C', '1'};
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  for (float v : scene.cube) detail::put_le(out, v);
  for (std::uint16_t v : scene.labels) detail::put_le(out, v);
  if (scene.aux)
    for (float v : *scene.aux) detail::put_le(out, v);
  return out;
}

inline HsiScene decode_scene(const std::vector<char>& bytes) {
  if (bytes.size() < 8) throw FormatError("file shorter than the HSC1 preamble", bytes.size());
  if (std::memcmp(bytes.data(), "HSC1", 4) != 0) throw FormatError("bad magic, expected HSC1", 0);
  const auto header_len = detail::get_le<std::uint32_t>(bytes, 4);
  if (8 + static_cast<std::size_t>(header_len) > bytes.size())
    throw FormatError("header length " + std::to_string(header_len) + " runs past end of file", 4);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + header_len);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("header is not valid JSON: ") + e.what(), 8);
  }
  static const std::array<const char*, 6> keys{"h", "w", "c", "k", "k2", "has_aux"};
  if (!header.is_object() || header.size() != keys.size())
    throw FormatError("header must be an object with exactly h,w,c,k,k2,has_aux", 8);
  for (auto* k : keys)
    if (!header.contains(k)) throw FormatError(std::string("header lacks key '") + k + "'", 8);
  for (auto* k : {"h", "w", "c", "k", "k2"})
    if (!header[k].is_number_unsigned())
      throw FormatError(std::string("header key '") + k + "' must be a non-negative integer", 8);
  if (!header["has_aux"].is_boolean()) throw FormatError("header key 'has_aux' must be boolean", 8);

  HsiScene s;
  s.height = header["h"];
  s.width = header["w"];
  s.bands = header["c"];
  s.class_count = header["k"];
  s.aux_bands = header["k2"];
  const bool has_aux = header["has_aux"];
  if (s.height == 0 || s.width == 0 || s.bands == 0)
    throw FormatError("header declares an empty cube", 8);
  if (has_aux && s.aux_bands == 0) throw FormatError("has_aux set but k2 is 0", 8);

  const std::size_t px = s.height * s.width;
  std::size_t offset = 8 + header_len;
  const std::size_t expected = offset + px * s.bands * 4 + px * 2 + (has_aux ? px * s.aux_bands * 4 : 0);
  if (bytes.size() < expected)
    throw FormatError("payload truncated: header implies " + std::to_string(expected) +
                          " bytes, file has " + std::to_string(bytes.size()),
                      bytes.size());
  if (bytes.size() > expected)
    throw FormatError("trailing bytes after payload", expected);

  s.cube.resize(px * s.bands);
  for (auto& v : s.cube) {
    v = detail::get_le<float>(bytes, offset);
    offset += 4;
  }
  s.labels.resize(px);
  for (auto& v : s.labels) {
    v = detail::get_le<std::uint16_t>(bytes, offset);
    offset += 2;
  }
  if (has_aux) {
    s.aux.emplace(px * s.aux_bands);
    for (auto& v : *s.aux) {
      v = detail::get_le<float>(bytes, offset);
      offset += 4;
    }
  }
  validate_scene(s);
  return s;
}

inline void save_scene(const HsiScene& scene, const std::filesystem::path& path) {
  detail::write_file(path, encode_scene(scene));
}

inline HsiScene load_scene(const std::filesystem::path& path) {
  return decode_scene(detail::read_file(path));
}

// ------------------------------------------------------------ synthetic scene

struct SynthParams {
  std::size_t height = 48;
  std::size_t width = 48;
  std::size_t bands = 16;
  std::size_t classes = 4;
  double noise_sigma = 0.05;
  std::uint64_t seed = 1;
};

/// Smooth per-class spectral prototypes (classes x bands), pairwise distinct.
inline std::vector<std::vector<float>> synth_prototypes(std::size_t classes, std::size_t bands,
                                                        std::mt19937_64& rng) {
  std::uniform_real_distribution<double> amp(-0.25, 0.25), phase(0.0, 6.283185307179586),
      base(0.3, 0.7);
  std::vector<std::vector<float>> protos;
  while (protos.size() < classes) {
    const double b0 = base(rng);
    std::array<double, 3> a{amp(rng), amp(rng), amp(rng)}, ph{phase(rng), phase(rng), phase(rng)};
    std::vector<float> curve(bands);
    for (std::size_t b = 0; b < bands; ++b) {
      const double t = bands > 1 ? static_cast<double>(b) / static_cast<double>(bands - 1) : 0.0;
      double v = b0;
      for (int m = 0; m < 3; ++m) v += a[m] * std::sin(3.141592653589793 * (m + 1) * t + ph[m]);
      curve[b] = static_cast<float>(v);
    }
    bool distinct = true;
    for (const auto& other : protos) {
      double d2 = 0;
      for (std::size_t b = 0; b < bands; ++b) d2 += (curve[b] - other[b]) * (curve[b] - other[b]);
      if (std::sqrt(d2 / static_cast<double>(bands)) < 0.08) distinct = false;
    }
    if (distinct) protos.push_back(std::move(curve));
  }
  return protos;
}

/// Voronoi mosaic of class regions with per-class smooth spectra plus
/// Gaussian noise, a 1-band elevation raster, and an unlabeled border frame
/// covering roughly 10% of the pixels.
inline HsiScene synth_scene(const SynthParams& p) {
  if (p.height < 3 || p.width < 3 || p.bands == 0)
    throw ArgumentError("synth_scene: degenerate extents");
  if (p.classes < 2) throw ArgumentError("synth_scene: need at least 2 classes");
  if (p.bands < p.classes) throw ArgumentError("synth_scene: bands must be >= classes");
  if (p.classes > 65535) throw ArgumentError("synth_scene: too many classes");
  if (!(p.noise_sigma >= 0.0)) throw ArgumentError("synth_scene: noise_sigma must be >= 0");

  std::mt19937_64 rng(p.seed);
  const auto protos = synth_prototypes(p.classes, p.bands, rng);

  HsiScene s;
  s.height = p.height;
  s.width = p.width;
  s.bands = p.bands;
  s.class_count = p.classes;
  s.aux_bands = 1;
  s.labels.assign(s.pixels(), 0);

  // unlabeled frame thickness closest to a 10% share
  std::size_t frame = 1;
  double best = 1e9;
  for (std::size_t t = 1; 2 * t < std::min(p.height, p.width); ++t) {
    const double share =
        1.0 - static_cast<double>((p.height - 2 * t) * (p.width - 2 * t)) / static_cast<double>(s.pixels());
    if (std::abs(share - 0.1) < best) {
      best = std::abs(share - 0.1);
      frame = t;
    }
  }
  auto in_frame = [&](std::size_t r, std::size_t c) {
    return r < frame || c < frame || r >= p.height - frame || c >= p.width - frame;
  };

  std::vector<std::uint16_t> region(s.pixels());
  std::uniform_real_distribution<double> ur(0.0, static_cast<double>(p.height)),
      uc(0.0, static_cast<double>(p.width));
  const std::size_t nseeds = 2 * p.classes;
  for (int attempt = 0;; ++attempt) {
    std::vector<std::array<double, 2>> seeds(nseeds);
    for (auto& sd : seeds) sd = {ur(rng), uc(rng)};
    std::vector<std::size_t> counts(p.classes + 1, 0);
    for (std::size_t r = 0; r < p.height; ++r)
      for (std::size_t c = 0; c < p.width; ++c) {
        std::size_t nearest = 0;
        double bestd = 1e300;
        for (std::size_t i = 0; i < nseeds; ++i) {
          const double dr = seeds[i][0] - (r + 0.5), dc = seeds[i][1] - (c + 0.5);
          const double d = dr * dr + dc * dc;
          if (d < bestd) {
            bestd = d;
            nearest = i;
          }
        }
        const auto cls = static_cast<std::uint16_t>(nearest % p.classes + 1);
        region[r * p.width + c] = cls;
        if (!in_frame(r, c)) ++counts[cls];
      }
    if (std::all_of(counts.begin() + 1, counts.end(), [](std::size_t n) { return n > 0; })) break;
    if (attempt > 1000) throw ArgumentError("synth_scene: cannot place every class on this grid");
  }

  std::normal_distribution<double> noise(0.0, 1.0);
  s.cube.resize(s.pixels() * p.bands);
  s.aux.emplace(s.pixels());
  for (std::size_t px = 0; px < s.pixels(); ++px) {
    const std::size_t cls = region[px];
    for (std::size_t b = 0; b < p.bands; ++b)
      s.cube[px * p.bands + b] =
          static_cast<float>(protos[cls - 1][b] + (p.noise_sigma > 0 ? p.noise_sigma * noise(rng) : 0.0));
    const double elevation = static_cast<double>(cls) / static_cast<double>(p.classes);
    (*s.aux)[px] =
        static_cast<float>(elevation + (p.noise_sigma > 0 ? p.noise_sigma * noise(rng) : 0.0));
    if (!in_frame(px / p.width, px % p.width)) s.labels[px] = static_cast<std::uint16_t>(cls);
  }
  return s;
}

// ------------------------------------------------------------------------ PCA

struct PcaModel {
  std::vector<double> mean;          // C0
  std::vector<double> eigenvalues;   // C1, descending
  Eigen::MatrixXd components;        // C0 x C1, orthonormal columns
};

/// Scene-level PCA over all pixels (population covariance). Each eigenvector
/// is signed so its largest-magnitude entry is positive.
inline PcaModel fit_pca(const HsiScene& scene, std::size_t components) {
  const std::size_t c0 = scene.bands, n = scene.pixels();
  if (components == 0 || components > c0)
    throw ArgumentError("pca: " + std::to_string(components) + " components requested from " +
                        std::to_string(c0) + " bands");
  Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> raw(
      scene.cube.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(c0));
  Eigen::MatrixXd x = raw.cast<double>();
  Eigen::RowVectorXd mu = x.colwise().mean();
  x.rowwise() -= mu;
  Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw NumericError("pca: eigendecomposition failed");

  PcaModel m;
  m.mean.assign(mu.data(), mu.data() + c0);
  m.components.resize(static_cast<Eigen::Index>(c0), static_cast<Eigen::Index>(components));
  for (std::size_t j = 0; j < components; ++j) {
    const auto src = static_cast<Eigen::Index>(c0 - 1 - j);  // ascending -> descending
    Eigen::VectorXd v = eig.eigenvectors().col(src);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    m.components.col(static_cast<Eigen::Index>(j)) = v;
    m.eigenvalues.push_back(std::max(0.0, eig.eigenvalues()(src)));
  }
  return m;
}

inline HsiScene apply_pca(const HsiScene& scene, const PcaModel& model) {
  const auto c0 = static_cast<Eigen::Index>(scene.bands);
  const auto c1 = model.components.cols();
  if (model.components.rows() != c0) throw DimensionError("pca model does not match scene bands");
  HsiScene out = scene;
  out.bands = static_cast<std::size_t>(c1);
  out.cube.assign(scene.pixels() * out.bands, 0.0f);
  Eigen::VectorXd px(c0);
  for (std::size_t p = 0; p < scene.pixels(); ++p) {
    for (Eigen::Index b = 0; b < c0; ++b) px(b) = scene.cube[p * scene.bands + b] - model.mean[b];
    Eigen::VectorXd proj = model.components.transpose() * px;
    for (Eigen::Index j = 0; j < c1; ++j) out.cube[p * out.bands + j] = static_cast<float>(proj(j));
  }
  return out;
}

inline HsiScene pca_reduce(const HsiScene& scene, std::size_t components) {
  return apply_pca(scene, fit_pca(scene, components));
}

/// Min-max scales every auxiliary band to [0,1] (constant bands become 0).
inline HsiScene normalize_aux(HsiScene scene) {
  if (!scene.aux) return scene;
  auto& aux = *scene.aux;
  for (std::size_t b = 0; b < scene.aux_bands; ++b) {
    float lo = std::numeric_limits<float>::max(), hi = std::numeric_limits<float>::lowest();
    for (std::size_t p = 0; p < scene.pixels(); ++p) {
      lo = std::min(lo, aux[p * scene.aux_bands + b]);
      hi = std::max(hi, aux[p * scene.aux_bands + b]);
    }
    const float span = hi - lo;
    for (std::size_t p = 0; p < scene.pixels(); ++p) {
      float& v = aux[p * scene.aux_bands + b];
      v = span > 0 ? (v - lo) / span : 0.0f;
    }
  }
  return scene;
}

// -------------------------------------------------------------------- patches

/// Mirror reflection about the border cells (edge not repeated).
inline std::size_t reflect_index(long i, std::size_t extent) {
  if (extent == 1) return 0;
  const long n = static_cast<long>(extent);
  const long period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < n ? i : period - i);
}

/// p x p crop in channel-first layout.
struct RawPatch {
  Coord center;
  std::size_t size = 0;
  std::size_t channels = 0;
  std::size_t aux_channels = 0;
  std::vector<float> spectral;       // channels*size*size
  std::vector<std::uint16_t> labels; // size*size
  std::vector<float> aux;            // aux_channels*size*size, empty when absent
};

struct PatchSample {
  Coord center;
  std::size_t patch_size = 0;  // p
  std::size_t model_size = 0;  // r
  std::size_t channels = 0;
  std::size_t aux_channels = 0;
  std::vector<float> spectral;       // channels*r*r
  std::vector<std::uint16_t> labels; // r*r
  std::vector<float> aux;            // aux_channels*r*r, empty when absent
  bool has_aux() const { return !aux.empty(); }
};

/// Crops a p x p patch centred on (row, col) using `label_map` for labels.
inline RawPatch extract_patch(const HsiScene& scene, std::span<const std::uint16_t> label_map,
                              std::size_t row, std::size_t col, std::size_t p) {
  if (p == 0 || p % 2 == 0) throw ArgumentError("patch size must be odd, got " + std::to_string(p));
  if (row >= scene.height || col >= scene.width) throw ArgumentError("patch centre outside scene");
  if (label_map.size() != scene.pixels()) throw DimensionError("label map does not match scene");
  RawPatch out;
  out.center = {static_cast<std::uint32_t>(row), static_cast<std::uint32_t>(col)};
  out.size = p;
  out.channels = scene.bands;
  out.spectral.resize(scene.bands * p * p);
  out.labels.resize(p * p);
  if (scene.aux) {
    out.aux_channels = scene.aux_bands;
    out.aux.resize(scene.aux_bands * p * p);
  }
  const long half = static_cast<long>(p / 2);
  for (std::size_t a = 0; a < p; ++a)
    for (std::size_t b = 0; b < p; ++b) {
      const std::size_t r = reflect_index(static_cast<long>(row) + static_cast<long>(a) - half, scene.height);
      const std::size_t c = reflect_index(static_cast<long>(col) + static_cast<long>(b) - half, scene.width);
      const std::size_t src = r * scene.width + c;
      for (std::size_t ch = 0; ch < scene.bands; ++ch)
        out.spectral[(ch * p + a) * p + b] = scene.cube[src * scene.bands + ch];
      out.labels[a * p + b] = label_map[src];
      for (std::size_t ch = 0; ch < out.aux_channels; ++ch)
        out.aux[(ch * p + a) * p + b] = (*scene.aux)[src * scene.aux_bands + ch];
    }
  return out;
}

inline RawPatch extract_patch(const HsiScene& scene, std::size_t row, std::size_t col, std::size_t p) {
  return extract_patch(scene, scene.labels, row, col, p);
}

namespace detail {

// Bilinear (align-corners-false) resize of channel-first planes.
template <typename V>
std::vector<V> resize_planes(const std::vector<V>& src, std::size_t channels, std::size_t in, std::size_t out) {
  std::vector<V> dst(channels * out * out);
  if (in == out) return src;
  struct Tap {
    std::size_t i0, i1;
    double w1;
  };
  std::vector<Tap> taps(out);
  for (std::size_t o = 0; o < out; ++o) {
    double s = (o + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    if (s < 0) s = 0;
    auto i0 = std::min(static_cast<std::size_t>(std::floor(s)), in - 1);
    taps[o] = {i0, std::min(i0 + 1, in - 1), s - static_cast<double>(i0)};
  }
  for (std::size_t ch = 0; ch < channels; ++ch)
    for (std::size_t i = 0; i < out; ++i)
      for (std::size_t j = 0; j < out; ++j) {
        const auto& a = taps[i];
        const auto& b = taps[j];
        const V* pl = src.data() + ch * in * in;
        const double top = (1 - b.w1) * pl[a.i0 * in + b.i0] + b.w1 * pl[a.i0 * in + b.i1];
        const double bot = (1 - b.w1) * pl[a.i1 * in + b.i0] + b.w1 * pl[a.i1 * in + b.i1];
        dst[(ch * out + i) * out + j] = static_cast<V>((1 - a.w1) * top + a.w1 * bot);
      }
  return dst;
}

}  // namespace detail

/// Nearest-neighbour label resize, source index floor(i*in/out).
inline std::vector<std::uint16_t> resize_labels(const std::vector<std::uint16_t>& src,
                                                std::size_t in, std::size_t out) {
  std::vector<std::uint16_t> dst(out * out);
  for (std::size_t i = 0; i < out; ++i)
    for (std::size_t j = 0; j < out; ++j) dst[i * out + j] = src[(i * in / out) * in + (j * in / out)];
  return dst;
}

/// Resizes a raw patch to the model's r x r grid: bilinear for spectra and
/// auxiliary data, nearest-neighbour for labels.
inline PatchSample resize_patch(const RawPatch& raw, std::size_t r) {
  if (r == 0) throw ArgumentError("model size must be positive");
  PatchSample s;
  s.center = raw.center;
  s.patch_size = raw.size;
  s.model_size = r;
  s.channels = raw.channels;
  s.aux_channels = raw.aux_channels;
  s.spectral = detail::resize_planes(raw.spectral, raw.channels, raw.size, r);
  s.labels = resize_labels(raw.labels, raw.size, r);
  if (!raw.aux.empty()) s.aux = detail::resize_planes(raw.aux, raw.aux_channels, raw.size, r);
  return s;
}

// ---------------------------------------------------------------------- split

struct SplitSpec {
  std::size_t per_class_train = 10;
  std::uint64_t seed = 0;
};

struct Split {
  std::vector<Coord> train;
  std::vector<Coord> test;
};

/// Per class, a seeded random min(n, available) labeled pixels go to train;
/// the remaining labeled pixels go to test.
inline Split make_split(const HsiScene& scene, const SplitSpec& spec) {
  std::vector<std::vector<Coord>> by_class(scene.class_count + 1);
  for (std::size_t r = 0; r < scene.height; ++r)
    for (std::size_t c = 0; c < scene.width; ++c) {
      const auto l = scene.label(r, c);
      if (l > scene.class_count)
        throw ValidationError("label " + std::to_string(l) + " at pixel (" + std::to_string(r) +
                              "," + std::to_string(c) + ") exceeds class count");
      if (l) by_class[l].push_back({static_cast<std::uint32_t>(r), static_cast<std::uint32_t>(c)});
    }
  std::mt19937_64 rng(spec.seed);
  Split split;
  for (std::size_t k = 1; k <= scene.class_count; ++k) {
    auto& coords = by_class[k];
    if (coords.empty())
      throw ValidationError("class " + std::to_string(k) + " has no labeled pixels");
    std::shuffle(coords.begin(), coords.end(), rng);
    const std::size_t n = std::min(spec.per_class_train, coords.size());
    split.train.insert(split.train.end(), coords.begin(), coords.begin() + n);
    split.test.insert(split.test.end(), coords.begin() + n, coords.end());
  }
  std::sort(split.test.begin(), split.test.end());
  return split;
}

/// Label map holding Y0 only at `coords` (0 elsewhere).
inline std::vector<std::uint16_t> restrict_labels(const HsiScene& scene,
                                                  const std::vector<Coord>& coords) {
  std::vector<std::uint16_t> out(scene.pixels(), 0);
  for (const auto& c : coords) out[c.row * scene.width + c.col] = scene.label(c.row, c.col);
  return out;
}

}  // namespace hsiseg
