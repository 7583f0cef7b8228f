#pragma once

// Annotation transfer between categorical emotion labels and the
// valence-arousal plane. A reference corpus carrying both annotations is
// summarised by one axis-aligned ellipse per emotion; labels are turned into
// VA values by sampling uniformly inside the ellipse, and VA values are turned
// into labels by nearest ellipse centre.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <map>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "levasa/csv.hpp"
#include "levasa/error.hpp"
#include "levasa/rng.hpp"

namespace levasa {

struct VAPoint {
  double v = 0.0;
  double a = 0.0;
  friend bool operator==(const VAPoint&, const VAPoint&) = default;
};

struct VADomain {
  double llim_v = -1.0;
  double ulim_v = 1.0;
  double llim_a = -1.0;
  double ulim_a = 1.0;

  void validate() const {
    if (!(llim_v < ulim_v) || !(llim_a < ulim_a)) throw Error("VA domain requires llim < ulim on both axes");
  }
  bool contains(VAPoint p) const { return p.v >= llim_v && p.v <= ulim_v && p.a >= llim_a && p.a <= ulim_a; }
  VAPoint clamp(VAPoint p) const { return {std::clamp(p.v, llim_v, ulim_v), std::clamp(p.a, llim_a, ulim_a)}; }
  double area() const { return (ulim_v - llim_v) * (ulim_a - llim_a); }

  // Affine map onto [-1, 1]^2.
  VAPoint normalize(VAPoint p) const {
    return {2.0 * (p.v - llim_v) / (ulim_v - llim_v) - 1.0, 2.0 * (p.a - llim_a) / (ulim_a - llim_a) - 1.0};
  }
  VAPoint denormalize(VAPoint p) const {
    return {llim_v + (p.v + 1.0) * 0.5 * (ulim_v - llim_v), llim_a + (p.a + 1.0) * 0.5 * (ulim_a - llim_a)};
  }

  friend bool operator==(const VADomain&, const VADomain&) = default;
};

struct EmotionLabel {
  std::size_t index = 0;
  std::string name;
  friend bool operator==(const EmotionLabel&, const EmotionLabel&) = default;
};

struct EmotionEllipse {
  EmotionLabel label;
  double mu_v = 0.0;
  double mu_a = 0.0;
  double sigma_v = 0.0;
  double sigma_a = 0.0;
  std::size_t count = 1;
  friend bool operator==(const EmotionEllipse&, const EmotionEllipse&) = default;
};

struct EllipseModel {
  VADomain domain;
  std::vector<EmotionEllipse> ellipses;  // sorted by label index

  const EmotionEllipse& find(const EmotionLabel& label) const {
    for (const auto& e : ellipses)
      if (e.label.index == label.index) return e;
    std::string known;
    for (const auto& e : ellipses) known += (known.empty() ? "" : ", ") + e.label.name + "=" + std::to_string(e.label.index);
    throw Error("unknown emotion label " + std::to_string(label.index) + " '" + label.name + "'; known labels: " + known);
  }

  const EmotionEllipse& find(const std::string& name) const {
    for (const auto& e : ellipses)
      if (e.label.name == name) return e;
    std::string known;
    for (const auto& e : ellipses) known += (known.empty() ? "" : ", ") + e.label.name;
    throw Error("unknown emotion '" + name + "'; known labels: " + known);
  }

  std::vector<EmotionLabel> labels() const {
    std::vector<EmotionLabel> out;
    for (const auto& e : ellipses) out.push_back(e.label);
    return out;
  }

  std::vector<std::string> label_names() const {
    std::vector<std::string> out;
    for (const auto& e : ellipses) out.push_back(e.label.name);
    return out;
  }

  friend bool operator==(const EllipseModel&, const EllipseModel&) = default;
};

struct ReferenceSample {
  EmotionLabel label;
  VAPoint point;
};

// Per-label mean and population standard deviation of valence and arousal.
inline EllipseModel fit_reference(std::span<const ReferenceSample> samples, const VADomain& domain) {
  domain.validate();
  if (samples.empty()) throw Error("empty reference");
  std::map<std::size_t, std::vector<VAPoint>> groups;
  std::map<std::size_t, std::string> names;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (!domain.contains(s.point)) {
      throw Error("reference sample " + std::to_string(i) + " (" + s.label.name + ", v=" + csv::fmt(s.point.v) +
                  ", a=" + csv::fmt(s.point.a) + ") lies outside the VA domain");
    }
    auto [it, fresh] = names.emplace(s.label.index, s.label.name);
    if (!fresh && it->second != s.label.name) {
      throw Error("label index " + std::to_string(s.label.index) + " used for both '" + it->second + "' and '" +
                  s.label.name + "'");
    }
    groups[s.label.index].push_back(s.point);
  }
  EllipseModel model{domain, {}};
  for (auto& [index, points] : groups) {
    // Sorting makes the sums, and therefore the fit, independent of input order.
    std::sort(points.begin(), points.end(), [](VAPoint x, VAPoint y) { return x.v != y.v ? x.v < y.v : x.a < y.a; });
    const double n = static_cast<double>(points.size());
    double sv = 0.0, sa = 0.0;
    for (auto p : points) {
      sv += p.v;
      sa += p.a;
    }
    const double mv = sv / n, ma = sa / n;
    double qv = 0.0, qa = 0.0;
    for (auto p : points) {
      qv += (p.v - mv) * (p.v - mv);
      qa += (p.a - ma) * (p.a - ma);
    }
    model.ellipses.push_back({EmotionLabel{index, names[index]}, mv, ma, std::sqrt(qv / n), std::sqrt(qa / n),
                              points.size()});
  }
  return model;
}

// Point at polar coordinates (r, theta) of the unit disc mapped onto the
// ellipse, then clamped to the domain. r = 0 is the centre, r = 1 the rim.
inline VAPoint ellipse_point(const EmotionEllipse& e, double r, double theta, const VADomain& domain) {
  const double rho = std::sqrt(r);
  return domain.clamp({rho * std::cos(theta) * e.sigma_v + e.mu_v, rho * std::sin(theta) * e.sigma_a + e.mu_a});
}

// Uniform draw inside the label's ellipse: r ~ U[0,1], theta ~ U[0, 2pi).
inline VAPoint sample_va(const EllipseModel& model, const EmotionLabel& label, SeededRng& rng) {
  const auto& e = model.find(label);
  const double r = rng.uniform();
  const double theta = 2.0 * std::numbers::pi * rng.uniform();
  return ellipse_point(e, r, theta, model.domain);
}

struct DiscreteVA {
  int v = 0;
  int a = 0;
  friend bool operator==(const DiscreteVA&, const DiscreteVA&) = default;
};

// Expects p normalised to [-1,1]^2. Halves round away from zero.
inline DiscreteVA discretize_va(VAPoint p, int scale) {
  if (scale < 1) throw Error("discretization scale must be >= 1");
  auto q = [scale](double x) {
    const double s = static_cast<double>(scale);
    return static_cast<int>(std::clamp(std::round(s * x), -s, s));
  };
  return {q(p.v), q(p.a)};
}

// Label of the ellipse whose centre is closest; ties go to the lower index.
inline EmotionLabel nearest_emotion(const EllipseModel& model, VAPoint p) {
  if (model.ellipses.empty()) throw Error("nearest_emotion on an empty ellipse model");
  const EmotionEllipse* best = nullptr;
  double best_d2 = 0.0;
  for (const auto& e : model.ellipses) {
    const double dv = p.v - e.mu_v, da = p.a - e.mu_a;
    const double d2 = dv * dv + da * da;
    if (best == nullptr || d2 < best_d2 || (d2 == best_d2 && e.label.index < best->label.index)) {
      best = &e;
      best_d2 = d2;
    }
  }
  return best->label;
}

// Ellipse area as a fraction of the domain area, one entry per ellipse.
inline std::vector<double> area_fraction(const EllipseModel& model) {
  std::vector<double> out;
  const double total = model.domain.area();
  for (const auto& e : model.ellipses) out.push_back(std::numbers::pi * e.sigma_v * e.sigma_a / total);
  return out;
}

// Six basic emotions laid out on the circumplex, used to drive the synthetic
// dataset when no reference corpus is supplied. Mean area fraction is ~2.5%.
inline EllipseModel default_emotion_model() {
  EllipseModel m;
  auto add = [&](const char* name, double mv, double ma, double sv, double sa) {
    m.ellipses.push_back({EmotionLabel{m.ellipses.size(), name}, mv, ma, sv, sa, 1000});
  };
  add("anger", -0.45, 0.60, 0.18, 0.16);
  add("disgust", -0.65, 0.15, 0.16, 0.18);
  add("fear", -0.10, 0.78, 0.17, 0.14);
  add("happiness", 0.72, 0.22, 0.20, 0.22);
  add("sadness", -0.55, -0.50, 0.20, 0.20);
  add("surprise", 0.30, 0.72, 0.18, 0.16);
  return m;
}

// Reference CSV: emotion,valence,arousal. Label indices follow the sorted
// order of the distinct emotion names.
inline std::vector<ReferenceSample> read_reference_csv(const std::filesystem::path& path) {
  const auto table = csv::read(path);
  const auto ce = table.column("emotion"), cv = table.column("valence"), ca = table.column("arousal");
  std::vector<std::string> names;
  for (const auto& row : table.rows) names.push_back(row[ce]);
  std::sort(names.begin(), names.end());
  names.erase(std::unique(names.begin(), names.end()), names.end());
  std::vector<ReferenceSample> out;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    if (row[ce].empty()) throw Error(table.where(r) + ": empty emotion");
    const auto idx = static_cast<std::size_t>(std::lower_bound(names.begin(), names.end(), row[ce]) - names.begin());
    out.push_back({EmotionLabel{idx, row[ce]},
                   VAPoint{csv::parse_double(row[cv], table.where(r)), csv::parse_double(row[ca], table.where(r))}});
  }
  return out;
}

inline void write_ellipse_csv(const std::filesystem::path& path, const EllipseModel& model) {
  auto out = csv::open_out(path);
  out << "emotion,index,mu_v,mu_a,sigma_v,sigma_a,count\n";
  for (const auto& e : model.ellipses) {
    out << e.label.name << ',' << e.label.index << ',' << csv::fmt(e.mu_v) << ',' << csv::fmt(e.mu_a) << ','
        << csv::fmt(e.sigma_v) << ',' << csv::fmt(e.sigma_a) << ',' << e.count << '\n';
  }
  if (!out) throw Error("failed writing " + path.string());
}

// The ellipse file does not carry the domain; the caller supplies it.
inline EllipseModel read_ellipse_csv(const std::filesystem::path& path, const VADomain& domain = {}) {
  domain.validate();
  const auto t = csv::read(path);
  const auto ce = t.column("emotion"), ci = t.column("index"), cmv = t.column("mu_v"), cma = t.column("mu_a"),
             csv_ = t.column("sigma_v"), csa = t.column("sigma_a"), cc = t.column("count");
  EllipseModel m{domain, {}};
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const auto w = t.where(r);
    EmotionEllipse e;
    e.label = {static_cast<std::size_t>(csv::parse_int(row[ci], w)), row[ce]};
    e.mu_v = csv::parse_double(row[cmv], w);
    e.mu_a = csv::parse_double(row[cma], w);
    e.sigma_v = csv::parse_double(row[csv_], w);
    e.sigma_a = csv::parse_double(row[csa], w);
    e.count = static_cast<std::size_t>(csv::parse_int(row[cc], w));
    if (e.sigma_v < 0 || e.sigma_a < 0 || e.count < 1) throw Error(w + ": invalid ellipse");
    m.ellipses.push_back(std::move(e));
  }
  std::sort(m.ellipses.begin(), m.ellipses.end(),
            [](const auto& x, const auto& y) { return x.label.index < y.label.index; });
  for (std::size_t i = 1; i < m.ellipses.size(); ++i) {
    if (m.ellipses[i].label.index == m.ellipses[i - 1].label.index) throw Error(t.source + ": duplicate label index");
  }
  return m;
}

}  // namespace levasa
