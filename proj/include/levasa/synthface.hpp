#pragma once

// Procedural grayscale faces whose expression is driven by a VA point, plus
// manifest/PGM ingestion for user supplied datasets.
//
// Valence bends the mouth (frown to smile) and sets its brightness; arousal
// opens the eyes and lifts the brows. Identity only moves nuisance geometry:
// face width and eye spacing.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "levasa/circumplex.hpp"
#include "levasa/csv.hpp"
#include "levasa/error.hpp"
#include "levasa/rng.hpp"

namespace levasa {

struct ImageTensor {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;  // row-major, each in [0,1]

  ImageTensor() = default;
  ImageTensor(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), pixels(h * w, fill) {}
  ImageTensor(std::size_t h, std::size_t w, std::vector<double> px) : height(h), width(w), pixels(std::move(px)) {
    validate();
  }

  void validate() const {
    if (pixels.size() != height * width) throw Error("image pixel count does not match its dimensions");
    for (double p : pixels)
      if (!(p >= 0.0 && p <= 1.0)) throw Error("image pixel outside [0,1]");
  }

  double& at(std::size_t r, std::size_t c) { return pixels[r * width + c]; }
  double at(std::size_t r, std::size_t c) const { return pixels[r * width + c]; }

  friend bool operator==(const ImageTensor&, const ImageTensor&) = default;
};

struct AnnotatedSample {
  ImageTensor image;
  std::optional<EmotionLabel> label;
  std::optional<VAPoint> va;
  std::optional<DiscreteVA> va_discrete;
};

struct SyntheticConfig {
  std::size_t size = 24;
  std::size_t n_samples = 1000;
  std::size_t n_identities = 10;
  double noise_std = 0.05;
  std::uint64_t seed = 0;

  void validate() const {
    if (size < 8) throw Error("synthetic image size must be >= 8");
    if (!(noise_std >= 0.0)) throw Error("noise_std must be >= 0");
    if (n_identities < 1) throw Error("n_identities must be >= 1");
  }
};

inline constexpr int kDiscreteScale = 10;

namespace detail {

struct FaceGeometry {
  double face_half_width;
  double eye_offset;
};

inline FaceGeometry identity_geometry(std::size_t identity) {
  SeededRng r(SeededRng::mix(0x1d3a7f5bULL, identity));
  return {0.34 + 0.08 * r.uniform(-1.0, 1.0), 0.15 + 0.035 * r.uniform(-1.0, 1.0)};
}

// Intensity of the face model at normalised coordinates (x right, y down).
inline double face_intensity(double x, double y, double v, double a, const FaceGeometry& g) {
  auto inside = [](double dx, double dy, double rx, double ry) { return (dx * dx) / (rx * rx) + (dy * dy) / (ry * ry) <= 1.0; };
  double out = 0.0;
  if (inside(x - 0.5, y - 0.52, g.face_half_width, 0.44)) out = 0.45;

  const double eye_half_height = 0.012 + 0.025 * (a + 1.0);
  for (double side : {-1.0, 1.0}) {
    const double ex = 0.5 + side * g.eye_offset;
    if (inside(x - ex, y - 0.40, 0.075, eye_half_height)) out = 1.0;
    const double brow_y = 0.31 - 0.035 * a;
    if (std::abs(x - ex) <= 0.08 && std::abs(y - brow_y) <= 0.018) out = 0.1;
  }

  constexpr double mouth_half_width = 0.16;
  const double dx = x - 0.5;
  if (std::abs(dx) <= mouth_half_width) {
    const double bend = 0.07 * v;
    const double t = dx / mouth_half_width;
    const double centre = 0.72 + bend * (1.0 - t * t) - 0.5 * bend;
    if (std::abs(y - centre) <= 0.035) out = 0.5 + 0.5 * v;
  }
  return out;
}

}  // namespace detail

// Renders one face. Each pixel averages a 4x4 grid of subsamples, then gets
// N(0, noise_std) noise from rng (drawn for every pixel) and is clamped.
inline ImageTensor render_face(VAPoint va, std::size_t identity, SeededRng& rng, const SyntheticConfig& cfg) {
  cfg.validate();
  if (!(va.v >= -1.0 && va.v <= 1.0 && va.a >= -1.0 && va.a <= 1.0)) {
    throw Error("render_face expects VA in [-1,1]^2, got (" + csv::fmt(va.v) + ", " + csv::fmt(va.a) + ")");
  }
  const auto geom = detail::identity_geometry(identity);
  constexpr int kSub = 4;
  const double s = static_cast<double>(cfg.size);
  ImageTensor img(cfg.size, cfg.size);
  for (std::size_t r = 0; r < cfg.size; ++r) {
    for (std::size_t c = 0; c < cfg.size; ++c) {
      double acc = 0.0;
      for (int i = 0; i < kSub; ++i)
        for (int j = 0; j < kSub; ++j) {
          const double y = (static_cast<double>(r) + (i + 0.5) / kSub) / s;
          const double x = (static_cast<double>(c) + (j + 0.5) / kSub) / s;
          acc += detail::face_intensity(x, y, va.v, va.a, geom);
        }
      const double noise = rng.normal() * cfg.noise_std;
      img.at(r, c) = std::clamp(acc / (kSub * kSub) + noise, 0.0, 1.0);
    }
  }
  return img;
}

// Labels uniform over the model's emotions, VA by ellipse sampling, one RNG
// per sample derived from (seed, index).
inline std::vector<AnnotatedSample> generate_dataset(const SyntheticConfig& cfg, const EllipseModel& model) {
  cfg.validate();
  if (model.ellipses.empty()) throw Error("generate_dataset needs a non-empty ellipse model");
  std::vector<AnnotatedSample> out;
  out.reserve(cfg.n_samples);
  for (std::size_t i = 0; i < cfg.n_samples; ++i) {
    SeededRng rng(SeededRng::mix(cfg.seed, i));
    const auto& e = model.ellipses[rng.uniform_index(model.ellipses.size())];
    const std::size_t identity = rng.uniform_index(cfg.n_identities);
    const VAPoint va = sample_va(model, e.label, rng);
    const VAPoint unit = model.domain.normalize(va);
    const VAPoint render_at{std::clamp(unit.v, -1.0, 1.0), std::clamp(unit.a, -1.0, 1.0)};
    AnnotatedSample s;
    s.image = render_face(render_at, identity, rng, cfg);
    s.label = e.label;
    s.va = va;
    s.va_discrete = discretize_va(render_at, kDiscreteScale);
    out.push_back(std::move(s));
  }
  return out;
}

// ---- PGM (binary P5, 8 bit) ----

inline void write_pgm(const std::filesystem::path& path, const ImageTensor& img) {
  auto out = csv::open_out(path);
  out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> bytes(img.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i)
    bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(img.pixels[i], 0.0, 1.0) * 255.0));
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing " + path.string());
}

inline ImageTensor read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open image " + path.string());
  auto token = [&]() {
    std::string t;
    int ch;
    while ((ch = in.get()) != EOF) {
      if (ch == '#') {
        while ((ch = in.get()) != EOF && ch != '\n') {
        }
        continue;
      }
      if (std::isspace(ch)) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(static_cast<char>(ch));
    }
    return t;
  };
  if (token() != "P5") throw Error(path.string() + " is not a binary PGM (P5) image");
  std::size_t w = 0, h = 0;
  long maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stol(token());
  } catch (const std::exception&) {
    throw Error(path.string() + ": malformed PGM header");
  }
  if (w == 0 || h == 0 || maxval < 1 || maxval > 255) throw Error(path.string() + ": unsupported PGM header");
  std::vector<unsigned char> bytes(w * h);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw Error(path.string() + ": truncated PGM data");
  ImageTensor img(h, w);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = std::min(1.0, bytes[i] / static_cast<double>(maxval));
  return img;
}

// ---- manifest CSV: path,emotion,valence,arousal,valence_d,arousal_d ----

inline constexpr const char* kManifestHeader = "path,emotion,valence,arousal,valence_d,arousal_d";

// Writes one manifest row per sample. image_paths are stored verbatim and are
// resolved relative to the manifest's directory when read back.
inline void write_manifest(const std::filesystem::path& manifest, std::span<const AnnotatedSample> samples,
                           std::span<const std::string> image_paths) {
  if (image_paths.size() != samples.size()) throw Error("write_manifest: one image path per sample required");
  auto out = csv::open_out(manifest);
  out << kManifestHeader << '\n';
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    out << image_paths[i] << ',' << (s.label ? s.label->name : "") << ',' << (s.va ? csv::fmt(s.va->v) : "") << ','
        << (s.va ? csv::fmt(s.va->a) : "") << ',' << (s.va_discrete ? std::to_string(s.va_discrete->v) : "") << ','
        << (s.va_discrete ? std::to_string(s.va_discrete->a) : "") << '\n';
  }
  if (!out) throw Error("failed writing " + manifest.string());
}

// Writes images/<prefix>NNNNNN.pgm next to the manifest plus the manifest
// itself. Returns the relative image paths in sample order.
inline std::vector<std::string> write_dataset(const std::filesystem::path& manifest,
                                              std::span<const AnnotatedSample> samples,
                                              const std::string& prefix = "sample_") {
  const auto dir = manifest.has_parent_path() ? manifest.parent_path() : std::filesystem::path(".");
  std::vector<std::string> paths;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "%06zu.pgm", i);
    const std::string rel = "images/" + prefix + name;
    write_pgm(dir / rel, samples[i].image);
    paths.push_back(rel);
  }
  write_manifest(manifest, samples, paths);
  return paths;
}

// label_names fixes the label indices; when empty, indices follow the sorted
// distinct emotion names found in the manifest.
inline std::vector<AnnotatedSample> read_manifest(const std::filesystem::path& manifest,
                                                  std::vector<std::string> label_names = {}) {
  const auto t = csv::read(manifest);
  const auto cp = t.column("path"), ce = t.column("emotion"), cv = t.column("valence"), ca = t.column("arousal"),
             cvd = t.column("valence_d"), cad = t.column("arousal_d");
  if (label_names.empty()) {
    for (const auto& row : t.rows)
      if (!row[ce].empty()) label_names.push_back(row[ce]);
    std::sort(label_names.begin(), label_names.end());
    label_names.erase(std::unique(label_names.begin(), label_names.end()), label_names.end());
  }
  const auto dir = manifest.has_parent_path() ? manifest.parent_path() : std::filesystem::path(".");
  std::vector<AnnotatedSample> out;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const auto where = t.where(r);
    AnnotatedSample s;
    if (!row[ce].empty()) {
      auto it = std::find(label_names.begin(), label_names.end(), row[ce]);
      if (it == label_names.end()) throw Error(where + ": unknown emotion '" + row[ce] + "'");
      s.label = EmotionLabel{static_cast<std::size_t>(it - label_names.begin()), row[ce]};
    }
    if (row[cv].empty() != row[ca].empty()) throw Error(where + ": valence and arousal must both be present or absent");
    if (!row[cv].empty()) s.va = VAPoint{csv::parse_double(row[cv], where), csv::parse_double(row[ca], where)};
    if (row[cvd].empty() != row[cad].empty()) {
      throw Error(where + ": valence_d and arousal_d must both be present or absent");
    }
    if (!row[cvd].empty()) {
      s.va_discrete = DiscreteVA{static_cast<int>(csv::parse_int(row[cvd], where)),
                                 static_cast<int>(csv::parse_int(row[cad], where))};
    }
    if (!s.label && !s.va && !s.va_discrete) throw Error(where + ": row carries no emotion, VA or discrete VA");
    if (row[cp].empty()) throw Error(where + ": empty image path");
    const std::filesystem::path img_path = std::filesystem::path(row[cp]).is_absolute() ? std::filesystem::path(row[cp]) : dir / row[cp];
    if (!std::filesystem::exists(img_path)) throw Error(where + ": missing image file " + img_path.string());
    try {
      s.image = read_pgm(img_path);
    } catch (const Error& e) {
      throw Error(where + ": " + e.what());
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---- splits ----

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct SplitIndices {
  std::vector<std::size_t> train, val, test;
};

inline SplitIndices split_indices(std::size_t n, SplitFractions f, std::uint64_t seed) {
  if (!(f.train > 0 && f.val > 0 && f.test > 0) || std::abs(f.train + f.val + f.test - 1.0) > 1e-9) {
    throw Error("split fractions must be positive and sum to 1");
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  SeededRng rng(seed);
  shuffle(idx.begin(), idx.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(f.train * static_cast<double>(n)));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(f.val * static_cast<double>(n))));
  SplitIndices s;
  s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train),
               idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), idx.end());
  return s;
}

struct DatasetSplit {
  std::vector<AnnotatedSample> train, val, test;
};

inline DatasetSplit split_dataset(std::span<const AnnotatedSample> samples, SplitFractions f, std::uint64_t seed) {
  const auto idx = split_indices(samples.size(), f, seed);
  DatasetSplit out;
  for (auto i : idx.train) out.train.push_back(samples[i]);
  for (auto i : idx.val) out.val.push_back(samples[i]);
  for (auto i : idx.test) out.test.push_back(samples[i]);
  return out;
}

}  // namespace levasa
