#pragma once

// Evaluation protocol: latent/VA alignment, the chunk heuristic for models
// without projection heads, circumplex export, linear and MLP probes, and the
// reconstruction versus alignment sweep over lambda_c.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "levasa/circumplex.hpp"
#include "levasa/csv.hpp"
#include "levasa/diffcore.hpp"
#include "levasa/error.hpp"
#include "levasa/train.hpp"
#include "levasa/vae.hpp"

namespace levasa {

// ---- metrics ----

inline void check_pair(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size() || pred.empty()) throw Error("metric inputs must be non-empty and equally long");
}

inline double mse(std::span<const double> pred, std::span<const double> target) {
  check_pair(pred, target);
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - target[i]) * (pred[i] - target[i]);
  return s / static_cast<double>(pred.size());
}

inline double mae(std::span<const double> pred, std::span<const double> target) {
  check_pair(pred, target);
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - target[i]);
  return s / static_cast<double>(pred.size());
}

inline double mean(std::span<const double> x) {
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

inline bool is_constant(std::span<const double> x) {
  return x.empty() || std::all_of(x.begin(), x.end(), [&](double e) { return e == x.front(); });
}

inline double variance(std::span<const double> x) {
  const double m = mean(x);
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return s / static_cast<double>(x.size());
}

// 1 - Var(y - y_hat) / Var(y)
inline double explained_variance(std::span<const double> pred, std::span<const double> target) {
  check_pair(pred, target);
  if (is_constant(target)) throw Error("explained variance is undefined for zero-variance targets");
  std::vector<double> resid(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) resid[i] = target[i] - pred[i];
  return 1.0 - variance(resid) / variance(target);
}

// 1 - SSE / SST
inline double r2_score(std::span<const double> pred, std::span<const double> target) {
  check_pair(pred, target);
  if (is_constant(target)) throw Error("R^2 is undefined for zero-variance targets");
  const double m = mean(target);
  double sse = 0.0, sst = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    sse += (target[i] - pred[i]) * (target[i] - pred[i]);
    sst += (target[i] - m) * (target[i] - m);
  }
  return 1.0 - sse / sst;
}

// Mean natural-log softmax cross-entropy of logit rows against class indices.
inline double mean_cross_entropy(const std::vector<std::vector<double>>& logits, std::span<const std::size_t> classes) {
  if (logits.size() != classes.size() || logits.empty()) throw Error("cross-entropy inputs must match");
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (classes[i] >= logits[i].size()) throw Error("class index out of range");
    s += detail::log_sum_exp(logits[i]) - logits[i][classes[i]];
  }
  return s / static_cast<double>(logits.size());
}

// ---- reports ----

struct AlignmentReport {
  AnnotationMode mode = AnnotationMode::continuous;
  double mse_v = 0, mae_v = 0, mse_a = 0, mae_a = 0, mse_combined = 0, mae_combined = 0;
  double ce_v = 0, ce_a = 0, ce_combined = 0;

  double combined_error() const { return mode == AnnotationMode::continuous ? mse_combined : ce_combined; }
};

enum class ChunkCombo { v, a, z, va, vaz };

inline std::string to_string(ChunkCombo c) {
  switch (c) {
    case ChunkCombo::v: return "z_v";
    case ChunkCombo::a: return "z_a";
    case ChunkCombo::z: return "z_z";
    case ChunkCombo::va: return "z_v+z_a";
    case ChunkCombo::vaz: return "z_v+z_a+z_z";
  }
  return "?";
}

inline ChunkCombo parse_chunk_combo(const std::string& s) {
  if (s == "v" || s == "z_v") return ChunkCombo::v;
  if (s == "a" || s == "z_a") return ChunkCombo::a;
  if (s == "z" || s == "z_z") return ChunkCombo::z;
  if (s == "va" || s == "z_v+z_a") return ChunkCombo::va;
  if (s == "vaz" || s == "z_v+z_a+z_z") return ChunkCombo::vaz;
  throw Error("unknown chunk combination '" + s + "' (expected v|a|z|va|vaz)");
}

struct ProbeReport {
  ChunkCombo combination = ChunkCombo::va;
  double accuracy = 0.0;
};

enum class Axis { valence, arousal };

struct RegressionReport {
  Axis axis = Axis::valence;
  double mse = 0, mae = 0, explained_variance = 0, r2 = 0;
};

struct RateDistortionPoint {
  double lambda_c = 0;
  double reconstruction_error = 0;
  double alignment_error = 0;
};

using RateDistortionCurve = std::vector<RateDistortionPoint>;

// ---- targets ----

inline std::vector<double> va_targets(std::span<const AnnotatedSample> samples, Axis axis) {
  std::vector<double> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (!s.va) throw Error("sample " + std::to_string(i) + " lacks continuous VA");
    out.push_back(axis == Axis::valence ? s.va->v : s.va->a);
  }
  return out;
}

inline std::vector<std::size_t> discrete_targets(std::span<const AnnotatedSample> samples, Axis axis, int scale) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (!s.va_discrete) throw Error("sample " + std::to_string(i) + " lacks discrete VA");
    const int k = (axis == Axis::valence ? s.va_discrete->v : s.va_discrete->a) + scale;
    if (k < 0 || k > 2 * scale) throw Error("discrete VA outside [-scale, scale]");
    out.push_back(static_cast<std::size_t>(k));
  }
  return out;
}

inline std::vector<std::size_t> emotion_targets(std::span<const AnnotatedSample> samples) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (!samples[i].label) throw Error("sample " + std::to_string(i) + " lacks an emotion label");
    out.push_back(samples[i].label->index);
  }
  return out;
}

// ---- ordinary least squares ----

struct LinearProbe {
  std::vector<double> weights;  // one per input feature
  double intercept = 0.0;

  double predict(std::span<const double> x) const {
    double y = intercept;
    for (std::size_t i = 0; i < weights.size(); ++i) y += weights[i] * x[i];
    return y;
  }
};

// Least squares with intercept through the normal equations. Returns nullopt
// when the design is rank deficient (for instance a constant feature).
inline std::optional<LinearProbe> fit_ols(const std::vector<std::vector<double>>& x, std::span<const double> y) {
  if (x.empty() || x.size() != y.size()) throw Error("fit_ols: inputs must be non-empty and aligned");
  const std::size_t d = x.front().size(), n = d + 1;
  std::vector<double> a(n * n, 0.0), b(n, 0.0);
  std::vector<double> row(n);
  for (std::size_t s = 0; s < x.size(); ++s) {
    row[0] = 1.0;
    std::copy(x[s].begin(), x[s].end(), row.begin() + 1);
    for (std::size_t i = 0; i < n; ++i) {
      b[i] += row[i] * y[s];
      for (std::size_t j = 0; j < n; ++j) a[i * n + j] += row[i] * row[j];
    }
  }
  double scale = 0.0;
  for (std::size_t i = 0; i < n; ++i) scale = std::max(scale, std::abs(a[i * n + i]));
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(a[r * n + col]) > std::abs(a[piv * n + col])) piv = r;
    if (std::abs(a[piv * n + col]) <= 1e-10 * scale) return std::nullopt;
    if (piv != col) {
      for (std::size_t j = 0; j < n; ++j) std::swap(a[col * n + j], a[piv * n + j]);
      std::swap(b[col], b[piv]);
    }
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = a[r * n + col] / a[col * n + col];
      if (f == 0.0) continue;
      for (std::size_t j = col; j < n; ++j) a[r * n + j] -= f * a[col * n + j];
      b[r] -= f * b[col];
    }
  }
  std::vector<double> sol(n);
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t j = i + 1; j < n; ++j) s -= a[i * n + j] * sol[j];
    sol[i] = s / a[i * n + i];
  }
  return LinearProbe{std::vector<double>(sol.begin() + 1, sol.end()), sol[0]};
}

// ---- chunk heuristic for heads-free models ----

inline std::vector<std::vector<double>> chunk_matrix(const std::vector<LatentCode>& codes, Chunk c) {
  std::vector<std::vector<double>> out;
  out.reserve(codes.size());
  for (const auto& code : codes) out.push_back(code.chunk(c));
  return out;
}

struct ChunkScore {
  Chunk chunk = Chunk::v;
  double val_mse_v = std::numeric_limits<double>::infinity();
  double val_mse_a = std::numeric_limits<double>::infinity();
  std::optional<LinearProbe> probe_v, probe_a;
};

struct VanillaSelection {
  Chunk v_chunk = Chunk::v;
  Chunk a_chunk = Chunk::a;
  LinearProbe probe_v;
  LinearProbe probe_a;
  std::array<ChunkScore, 3> scores;

  Chunk remaining() const {
    for (Chunk c : {Chunk::v, Chunk::a, Chunk::z})
      if (c != v_chunk && c != a_chunk) return c;
    return Chunk::z;
  }
};

// Fits chunk -> V and chunk -> A by OLS on the training codes and picks the
// chunk with the lowest validation MSE for V, then the best other chunk for A.
// Rank-deficient chunks score +inf; ties go to the lower chunk index.
inline VanillaSelection select_vanilla_chunks(const std::vector<LatentCode>& train_codes,
                                              std::span<const double> train_v, std::span<const double> train_a,
                                              const std::vector<LatentCode>& val_codes, std::span<const double> val_v,
                                              std::span<const double> val_a) {
  if (train_codes.empty() || val_codes.empty()) throw Error("chunk selection needs train and validation codes");
  VanillaSelection sel;
  for (Chunk c : {Chunk::v, Chunk::a, Chunk::z}) {
    auto& sc = sel.scores[static_cast<std::size_t>(c)];
    sc.chunk = c;
    const auto xtr = chunk_matrix(train_codes, c);
    const auto xva = chunk_matrix(val_codes, c);
    auto score = [&](std::span<const double> ytr, std::span<const double> yva, std::optional<LinearProbe>& probe) {
      probe = fit_ols(xtr, ytr);
      if (!probe) return std::numeric_limits<double>::infinity();
      std::vector<double> pred;
      for (const auto& x : xva) pred.push_back(probe->predict(x));
      const double m = mse(pred, yva);
      return std::isfinite(m) ? m : std::numeric_limits<double>::infinity();
    };
    sc.val_mse_v = score(train_v, val_v, sc.probe_v);
    sc.val_mse_a = score(train_a, val_a, sc.probe_a);
  }
  auto best = [&](auto key, std::optional<Chunk> exclude) {
    std::optional<Chunk> pick;
    for (Chunk c : {Chunk::v, Chunk::a, Chunk::z}) {
      if (exclude && *exclude == c) continue;
      if (!pick || key(sel.scores[static_cast<std::size_t>(c)]) < key(sel.scores[static_cast<std::size_t>(*pick)])) {
        pick = c;
      }
    }
    return *pick;
  };
  sel.v_chunk = best([](const ChunkScore& s) { return s.val_mse_v; }, std::nullopt);
  sel.a_chunk = best([](const ChunkScore& s) { return s.val_mse_a; }, sel.v_chunk);
  auto fallback = [](std::size_t width) { return LinearProbe{std::vector<double>(width, 0.0), 0.0}; };
  const auto& sv = sel.scores[static_cast<std::size_t>(sel.v_chunk)];
  const auto& sa = sel.scores[static_cast<std::size_t>(sel.a_chunk)];
  sel.probe_v = sv.probe_v ? *sv.probe_v : fallback(train_codes.front().chunk(sel.v_chunk).size());
  sel.probe_a = sa.probe_a ? *sa.probe_a : fallback(train_codes.front().chunk(sel.a_chunk).size());
  return sel;
}

// Maps the semantic chunk roles onto physical chunks. Models with heads use
// the layout directly; heads-free models use the heuristic selection.
struct ChunkRoles {
  Chunk v = Chunk::v, a = Chunk::a, z = Chunk::z;

  static ChunkRoles from(const VanillaSelection& s) { return {s.v_chunk, s.a_chunk, s.remaining()}; }
};

inline std::vector<std::vector<double>> combo_features(const std::vector<LatentCode>& codes, ChunkCombo combo,
                                                       const ChunkRoles& roles = {}) {
  std::vector<Chunk> parts;
  switch (combo) {
    case ChunkCombo::v: parts = {roles.v}; break;
    case ChunkCombo::a: parts = {roles.a}; break;
    case ChunkCombo::z: parts = {roles.z}; break;
    case ChunkCombo::va: parts = {roles.v, roles.a}; break;
    case ChunkCombo::vaz: parts = {roles.v, roles.a, roles.z}; break;
  }
  std::vector<std::vector<double>> out;
  out.reserve(codes.size());
  for (const auto& c : codes) {
    std::vector<double> f;
    for (Chunk p : parts) f.insert(f.end(), c.chunk(p).begin(), c.chunk(p).end());
    out.push_back(std::move(f));
  }
  return out;
}

// ---- alignment ----

struct VAPredictions {
  AnnotationMode mode = AnnotationMode::continuous;
  std::vector<double> v, a;                       // continuous
  std::vector<std::vector<double>> logits_v, logits_a;  // discrete
};

inline AlignmentReport alignment_from_predictions(const VAPredictions& pred, std::span<const AnnotatedSample> test,
                                                  int scale = kDiscreteScale) {
  AlignmentReport r;
  r.mode = pred.mode;
  if (pred.mode == AnnotationMode::continuous) {
    const auto tv = va_targets(test, Axis::valence), ta = va_targets(test, Axis::arousal);
    r.mse_v = mse(pred.v, tv);
    r.mae_v = mae(pred.v, tv);
    r.mse_a = mse(pred.a, ta);
    r.mae_a = mae(pred.a, ta);
    r.mse_combined = r.mse_v + r.mse_a;
    r.mae_combined = r.mae_v + r.mae_a;
  } else {
    r.ce_v = mean_cross_entropy(pred.logits_v, discrete_targets(test, Axis::valence, scale));
    r.ce_a = mean_cross_entropy(pred.logits_a, discrete_targets(test, Axis::arousal, scale));
    r.ce_combined = r.ce_v + r.ce_a;
  }
  return r;
}

// ---- probes trained with the autodiff engine ----

struct ProbeTraining {
  std::size_t epochs = 200;
  std::size_t batch_size = 64;
  double learning_rate = 1e-2;
  std::uint64_t seed = 0;
};

struct Standardizer {
  std::vector<double> mean, inv_std;

  static Standardizer fit(const std::vector<std::vector<double>>& x) {
    const std::size_t d = x.front().size();
    Standardizer s{std::vector<double>(d, 0.0), std::vector<double>(d, 1.0)};
    for (const auto& r : x)
      for (std::size_t j = 0; j < d; ++j) s.mean[j] += r[j];
    for (auto& m : s.mean) m /= static_cast<double>(x.size());
    std::vector<double> var(d, 0.0);
    for (const auto& r : x)
      for (std::size_t j = 0; j < d; ++j) var[j] += (r[j] - s.mean[j]) * (r[j] - s.mean[j]);
    for (std::size_t j = 0; j < d; ++j) {
      const double sd = std::sqrt(var[j] / static_cast<double>(x.size()));
      s.inv_std[j] = sd > 1e-12 ? 1.0 / sd : 0.0;
    }
    return s;
  }

  Tensor apply(const std::vector<std::vector<double>>& x, std::span<const std::size_t> rows) const {
    const std::size_t d = mean.size();
    Tensor t({rows.size(), d});
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t j = 0; j < d; ++j) t.at(r, j) = (x[rows[r]][j] - mean[j]) * inv_std[j];
    return t;
  }
};

namespace detail {

// Layers are (weight, bias) pairs; tanh between layers.
inline std::vector<Tensor> init_mlp(std::span<const std::size_t> widths, SeededRng& rng) {
  std::vector<Tensor> p;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(widths[l]));
    Tensor w({widths[l + 1], widths[l]}), b({widths[l + 1]});
    for (auto& x : w.data()) x = rng.uniform(-bound, bound);
    for (auto& x : b.data()) x = rng.uniform(-bound, bound);
    p.push_back(std::move(w));
    p.push_back(std::move(b));
  }
  return p;
}

inline Var mlp_forward(Graph& g, std::span<const Var> params, Var x) {
  Var h = x;
  for (std::size_t l = 0; l < params.size(); l += 2) {
    h = g.affine(h, params[l], params[l + 1]);
    if (l + 2 < params.size()) h = g.tanh(h);
  }
  return h;
}

// Minibatch Adam on an MLP. loss_fn builds the scalar loss from the output
// node and the batch rows.
template <class LossFn>
std::vector<Tensor> train_mlp(const Standardizer& st, const std::vector<std::vector<double>>& x,
                              std::span<const std::size_t> train_rows, std::vector<std::size_t> widths,
                              const ProbeTraining& cfg, LossFn loss_fn) {
  SeededRng rng(cfg.seed);
  auto params = init_mlp(widths, rng);
  AdamMoments mom;
  for (const auto& p : params) {
    mom.m.push_back(Tensor::zeros_like(p));
    mom.v.push_back(Tensor::zeros_like(p));
  }
  TrainConfig tc;
  tc.learning_rate = cfg.learning_rate;
  std::vector<std::size_t> order(train_rows.begin(), train_rows.end());
  std::vector<Tensor> grads(params.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      std::span<const std::size_t> rows(order.data() + start, n);
      Graph g;
      std::vector<Var> pv;
      for (const auto& p : params) pv.push_back(g.parameter(p));
      Var out = mlp_forward(g, pv, g.constant(st.apply(x, rows)));
      Var loss = loss_fn(g, out, rows);
      g.backward(loss);
      for (std::size_t k = 0; k < params.size(); ++k) grads[k] = g.grad(pv[k]);
      adam_step(params, grads, mom, tc, mom.step + 1);
    }
  }
  return params;
}

inline Tensor mlp_predict(const std::vector<Tensor>& params, const Standardizer& st,
                          const std::vector<std::vector<double>>& x, std::span<const std::size_t> rows) {
  Graph g;
  std::vector<Var> pv;
  for (const auto& p : params) pv.push_back(g.constant(p));
  return g.value(mlp_forward(g, pv, g.constant(st.apply(x, rows))));
}

}  // namespace detail

struct ProbeSplits {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// Single affine layer + softmax over standardised features, trained with Adam.
// Returns test accuracy.
inline double classify_accuracy(const std::vector<std::vector<double>>& features, std::span<const std::size_t> labels,
                                const ProbeSplits& splits, const ProbeTraining& cfg = {}) {
  if (features.size() != labels.size()) throw Error("probe: one label per feature row required");
  if (splits.train.empty() || splits.test.empty()) throw Error("probe: empty split");
  std::size_t n_classes = 0;
  for (auto i : splits.train) n_classes = std::max(n_classes, labels[i] + 1);
  for (auto i : splits.test) n_classes = std::max(n_classes, labels[i] + 1);
  {
    std::vector<std::size_t> seen;
    for (auto i : splits.train) seen.push_back(labels[i]);
    std::sort(seen.begin(), seen.end());
    seen.erase(std::unique(seen.begin(), seen.end()), seen.end());
    if (seen.size() < 2) throw Error("probe: training split holds a single class");
  }
  const auto st = Standardizer::fit([&] {
    std::vector<std::vector<double>> tr;
    for (auto i : splits.train) tr.push_back(features[i]);
    return tr;
  }());
  const std::size_t d = features.front().size();
  auto params = detail::train_mlp(st, features, splits.train, {d, n_classes}, cfg,
                                  [&](Graph& g, Var out, std::span<const std::size_t> rows) {
                                    Tensor t({rows.size()});
                                    for (std::size_t r = 0; r < rows.size(); ++r) t[r] = static_cast<double>(labels[rows[r]]);
                                    return g.softmax_ce(out, t);
                                  });
  const Tensor logits = detail::mlp_predict(params, st, features, splits.test);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < splits.test.size(); ++r) {
    auto row = logits.row(r);
    const auto pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    if (pred == labels[splits.test[r]]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(splits.test.size());
}

inline ProbeReport probe_classify(const std::vector<LatentCode>& codes, std::span<const std::size_t> labels,
                                  ChunkCombo combo, const ProbeSplits& splits, std::uint64_t seed,
                                  const ChunkRoles& roles = {}) {
  ProbeTraining cfg;
  cfg.seed = seed;
  return {combo, classify_accuracy(combo_features(codes, combo, roles), labels, splits, cfg)};
}

inline RegressionReport regression_report(Axis axis, std::span<const double> pred, std::span<const double> target) {
  RegressionReport r;
  r.axis = axis;
  r.mse = mse(pred, target);
  r.mae = mae(pred, target);
  r.explained_variance = explained_variance(pred, target);
  r.r2 = r2_score(pred, target);
  return r;
}

// One 32-unit tanh hidden layer, MSE, Adam; returns test predictions.
inline std::vector<double> regress_predictions(const std::vector<std::vector<double>>& features,
                                               std::span<const double> targets, const ProbeSplits& splits,
                                               const ProbeTraining& cfg = {}) {
  if (features.size() != targets.size()) throw Error("probe: one target per feature row required");
  {
    std::vector<double> tr;
    for (auto i : splits.train) tr.push_back(targets[i]);
    if (is_constant(tr)) throw Error("probe: zero-variance regression targets");
  }
  const auto st = Standardizer::fit([&] {
    std::vector<std::vector<double>> tr;
    for (auto i : splits.train) tr.push_back(features[i]);
    return tr;
  }());
  auto params = detail::train_mlp(st, features, splits.train, {features.front().size(), 32, 1}, cfg,
                                  [&](Graph& g, Var out, std::span<const std::size_t> rows) {
                                    Tensor t({rows.size(), 1});
                                    for (std::size_t r = 0; r < rows.size(); ++r) t[r] = targets[rows[r]];
                                    return g.mse(out, t);
                                  });
  const Tensor pred = detail::mlp_predict(params, st, features, splits.test);
  return {pred.data().begin(), pred.data().end()};
}

// Valence is probed from the v chunk, arousal from the a chunk.
inline std::array<RegressionReport, 2> probe_regress(const std::vector<LatentCode>& codes,
                                                     std::span<const VAPoint> targets, const ProbeSplits& splits,
                                                     std::uint64_t seed, const ChunkRoles& roles = {}) {
  if (codes.size() != targets.size()) throw Error("probe: one VA target per code required");
  std::array<RegressionReport, 2> out;
  for (Axis axis : {Axis::valence, Axis::arousal}) {
    std::vector<double> y;
    for (auto t : targets) y.push_back(axis == Axis::valence ? t.v : t.a);
    ProbeTraining cfg;
    cfg.seed = seed + (axis == Axis::valence ? 0 : 1);
    const auto feats = combo_features(codes, axis == Axis::valence ? ChunkCombo::v : ChunkCombo::a, roles);
    const auto pred = regress_predictions(feats, y, splits, cfg);
    std::vector<double> truth;
    for (auto i : splits.test) truth.push_back(y[i]);
    out[axis == Axis::valence ? 0 : 1] = regression_report(axis, pred, truth);
  }
  return out;
}

// ---- PCA ----

// First principal component projections. Power iteration from the normalised
// all-ones vector; stops when successive directions move less than 1e-9 or
// after 1000 iterations. The direction's largest-magnitude entry is made
// positive.
inline std::vector<double> pca_project_1d(const std::vector<std::vector<double>>& vectors) {
  if (vectors.size() < 2) throw Error("pca_project_1d needs at least two vectors");
  const std::size_t d = vectors.front().size();
  for (const auto& v : vectors)
    if (v.size() != d || d == 0) throw Error("pca_project_1d needs vectors of one non-zero width");
  const double n = static_cast<double>(vectors.size());
  std::vector<double> mu(d, 0.0);
  for (const auto& v : vectors)
    for (std::size_t j = 0; j < d; ++j) mu[j] += v[j] / n;
  std::vector<double> cov(d * d, 0.0);
  for (const auto& v : vectors)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) cov[i * d + j] += (v[i] - mu[i]) * (v[j] - mu[j]) / n;
  double trace = 0.0;
  for (std::size_t i = 0; i < d; ++i) trace += cov[i * d + i];
  std::vector<double> proj(vectors.size(), 0.0);
  if (trace <= 1e-300) return proj;

  auto normalize = [](std::vector<double>& x) {
    double s = 0.0;
    for (double e : x) s += e * e;
    s = std::sqrt(s);
    if (s > 0.0)
      for (auto& e : x) e /= s;
    return s;
  };
  auto multiply = [&](const std::vector<double>& x) {
    std::vector<double> y(d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) y[i] += cov[i * d + j] * x[j];
    return y;
  };
  std::vector<double> dir(d, 1.0);
  normalize(dir);
  // An all-ones start orthogonal to every high-variance direction (e.g. data
  // along (1,-1)) would stall; restart from the highest-variance axis.
  if (std::sqrt([&] { auto y = multiply(dir); double s = 0; for (double e : y) s += e * e; return s; }()) <=
      1e-12 * trace) {
    std::size_t k = 0;
    for (std::size_t i = 1; i < d; ++i)
      if (cov[i * d + i] > cov[k * d + k]) k = i;
    dir.assign(d, 0.0);
    dir[k] = 1.0;
  }
  for (int it = 0; it < 1000; ++it) {
    auto next = multiply(dir);
    if (normalize(next) == 0.0) break;
    double delta = 0.0;
    for (std::size_t j = 0; j < d; ++j) delta += (next[j] - dir[j]) * (next[j] - dir[j]);
    dir = std::move(next);
    if (std::sqrt(delta) < 1e-9) break;
  }
  std::size_t big = 0;
  for (std::size_t j = 1; j < d; ++j)
    if (std::abs(dir[j]) > std::abs(dir[big])) big = j;
  if (dir[big] < 0)
    for (auto& e : dir) e = -e;
  for (std::size_t s = 0; s < vectors.size(); ++s)
    for (std::size_t j = 0; j < d; ++j) proj[s] += (vectors[s][j] - mu[j]) * dir[j];
  return proj;
}

// ---- model-level evaluation ----

struct EvalData {
  std::span<const AnnotatedSample> train;
  std::span<const AnnotatedSample> val;
  std::span<const AnnotatedSample> test;
};

// Evaluation uses posterior means throughout.
inline std::vector<LatentCode> encode_dataset(const ModelParams& p, std::span<const AnnotatedSample> samples) {
  return encode_batch(p, samples, nullptr);
}

// Mean per-pixel BCE of reconstructions decoded from posterior means.
inline double reconstruction_bce(const ModelParams& p, std::span<const AnnotatedSample> samples) {
  if (samples.empty()) throw Error("reconstruction_bce on an empty set");
  double total = 0.0;
  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < samples.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, samples.size() - start);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), start);
    Graph g;
    auto b = bind_params(g, p, false);
    const Tensor x = stack_images(p.config, samples, idx);
    auto enc = encoder_forward(g, p, b, g.constant(x));
    Var l = g.bce_with_logits(decoder_logits(g, b, enc.mu), x);
    total += g.value(l).item() * static_cast<double>(n);
  }
  return total / static_cast<double>(samples.size());
}

inline VanillaSelection select_vanilla_chunks(const ModelParams& p, std::span<const AnnotatedSample> train,
                                              std::span<const AnnotatedSample> val) {
  const auto ctr = encode_dataset(p, train), cva = encode_dataset(p, val);
  auto target = [&](std::span<const AnnotatedSample> s, Axis axis) {
    std::vector<double> out;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i].va) {
        out.push_back(axis == Axis::valence ? s[i].va->v : s[i].va->a);
      } else if (s[i].va_discrete) {
        out.push_back(axis == Axis::valence ? s[i].va_discrete->v : s[i].va_discrete->a);
      } else {
        throw Error("chunk selection: sample " + std::to_string(i) + " has no VA annotation");
      }
    }
    return out;
  };
  return select_vanilla_chunks(ctr, target(train, Axis::valence), target(train, Axis::arousal), cva,
                               target(val, Axis::valence), target(val, Axis::arousal));
}

// Heads-free models in discrete mode get a softmax probe on each selected
// chunk, trained on the training split.
struct VanillaDiscreteProbes {
  std::vector<Tensor> v, a;
  Standardizer st_v, st_a;
};

// Head (or selected-chunk probe) predictions for every test sample.
inline VAPredictions predict_va(const ModelParams& p, std::span<const AnnotatedSample> test,
                                const VanillaSelection* sel, std::span<const AnnotatedSample> train = {},
                                std::uint64_t seed = 0) {
  VAPredictions out;
  out.mode = p.config.mode;
  const auto codes = encode_dataset(p, test);
  if (p.has_heads()) {
    for (const auto& c : codes) {
      auto h = project_va(p, c);
      if (out.mode == AnnotationMode::continuous) {
        out.v.push_back(h.v[0]);
        out.a.push_back(h.a[0]);
      } else {
        out.logits_v.push_back(std::move(h.v));
        out.logits_a.push_back(std::move(h.a));
      }
    }
    return out;
  }
  if (sel == nullptr) throw Error("a vanilla model needs a chunk selection for VA predictions");
  if (out.mode == AnnotationMode::continuous) {
    for (const auto& c : codes) {
      out.v.push_back(sel->probe_v.predict(c.chunk(sel->v_chunk)));
      out.a.push_back(sel->probe_a.predict(c.chunk(sel->a_chunk)));
    }
    return out;
  }
  if (train.empty()) throw Error("discrete alignment of a vanilla model needs the training split");
  const auto tr_codes = encode_dataset(p, train);
  const int scale = p.config.discrete_scale();
  for (Axis axis : {Axis::valence, Axis::arousal}) {
    const Chunk ch = axis == Axis::valence ? sel->v_chunk : sel->a_chunk;
    const auto xtr = chunk_matrix(tr_codes, ch);
    const auto labels = discrete_targets(train, axis, scale);
    std::vector<std::size_t> rows(xtr.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    const auto st = Standardizer::fit(xtr);
    ProbeTraining cfg;
    cfg.seed = seed + (axis == Axis::valence ? 0 : 1);
    auto params = detail::train_mlp(st, xtr, rows, {xtr.front().size(), p.config.n_classes}, cfg,
                                    [&](Graph& g, Var o, std::span<const std::size_t> r) {
                                      Tensor t({r.size()});
                                      for (std::size_t i = 0; i < r.size(); ++i) t[i] = static_cast<double>(labels[r[i]]);
                                      return g.softmax_ce(o, t);
                                    });
    const auto xte = chunk_matrix(codes, ch);
    std::vector<std::size_t> te(xte.size());
    std::iota(te.begin(), te.end(), std::size_t{0});
    const Tensor logits = detail::mlp_predict(params, st, xte, te);
    auto& dst = axis == Axis::valence ? out.logits_v : out.logits_a;
    for (std::size_t r = 0; r < te.size(); ++r) dst.emplace_back(logits.row(r).begin(), logits.row(r).end());
  }
  return out;
}

inline AlignmentReport alignment_report(const ModelParams& p, std::span<const AnnotatedSample> test,
                                        AnnotationMode mode, const VanillaSelection* sel = nullptr,
                                        std::span<const AnnotatedSample> train = {}) {
  if (mode != p.config.mode) {
    throw Error("annotation mode mismatch: model trained with " + to_string(p.config.mode) + ", report requested " +
                to_string(mode));
  }
  return alignment_from_predictions(predict_va(p, test, sel, train), test, p.config.discrete_scale());
}

// ---- circumplex export ----

struct CircumplexRow {
  std::size_t sample_id = 0;
  VAPoint truth;
  VAPoint pred;
  std::string emotion;
};

// Head outputs for aligned models; for heads-free models the 1-D PCA of each
// selected chunk, oriented to agree with the chunk's linear probe and
// min-max rescaled onto the domain.
inline std::vector<CircumplexRow> circumplex_rows(const ModelParams& p, std::span<const AnnotatedSample> test,
                                                  const VanillaSelection* sel, const VADomain& domain = {}) {
  if (p.config.mode != AnnotationMode::continuous) {
    throw Error("circumplex export needs a continuous-mode model");
  }
  std::vector<double> pv, pa;
  if (p.has_heads()) {
    const auto pred = predict_va(p, test, nullptr);
    pv = pred.v;
    pa = pred.a;
  } else {
    if (sel == nullptr) throw Error("a vanilla model needs a chunk selection for circumplex export");
    const auto codes = encode_dataset(p, test);
    auto axis_pred = [&](Chunk ch, const LinearProbe& probe, double lo, double hi) {
      const auto x = chunk_matrix(codes, ch);
      auto proj = pca_project_1d(x);
      std::vector<double> lin;
      for (const auto& row : x) lin.push_back(probe.predict(row));
      const double ml = mean(lin), mp = mean(proj);
      double cov = 0.0;
      for (std::size_t i = 0; i < proj.size(); ++i) cov += (proj[i] - mp) * (lin[i] - ml);
      if (cov < 0)
        for (auto& e : proj) e = -e;
      const auto [mn, mx] = std::minmax_element(proj.begin(), proj.end());
      const double span = *mx - *mn;
      const double lo_v = *mn;
      for (auto& e : proj) e = span > 0 ? lo + (e - lo_v) / span * (hi - lo) : 0.5 * (lo + hi);
      return proj;
    };
    pv = axis_pred(sel->v_chunk, sel->probe_v, domain.llim_v, domain.ulim_v);
    pa = axis_pred(sel->a_chunk, sel->probe_a, domain.llim_a, domain.ulim_a);
  }
  std::vector<CircumplexRow> rows;
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (!test[i].va) throw Error("circumplex export: test sample " + std::to_string(i) + " lacks VA");
    rows.push_back({i, *test[i].va, {pv[i], pa[i]}, test[i].label ? test[i].label->name : ""});
  }
  return rows;
}

inline void write_circumplex_csv(const std::filesystem::path& path, std::span<const CircumplexRow> rows) {
  auto out = csv::open_out(path);
  out << "sample_id,true_v,true_a,pred_v,pred_a,emotion\n";
  for (const auto& r : rows) {
    out << r.sample_id << ',' << csv::fmt(r.truth.v) << ',' << csv::fmt(r.truth.a) << ',' << csv::fmt(r.pred.v) << ','
        << csv::fmt(r.pred.a) << ',' << r.emotion << '\n';
  }
  if (!out) throw Error("failed writing " + path.string());
}

// Scatter of predicted points over the unit circle, one colour per emotion.
inline void write_circumplex_svg(const std::filesystem::path& path, std::span<const CircumplexRow> rows,
                                 const VADomain& domain = {}) {
  static constexpr std::array<const char*, 10> kPalette = {"#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4",
                                                           "#42d4f4", "#f032e6", "#bfef45", "#469990", "#9a6324"};
  std::vector<std::string> names;
  for (const auto& r : rows)
    if (std::find(names.begin(), names.end(), r.emotion) == names.end()) names.push_back(r.emotion);
  std::sort(names.begin(), names.end());
  constexpr double size = 480.0, half = size / 2.0, radius = 200.0;
  auto sx = [&](double v) { return half + radius * domain.normalize({v, 0}).v; };
  auto sy = [&](double a) { return half - radius * domain.normalize({0, a}).a; };
  auto out = csv::open_out(path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size + 140 << "\" height=\"" << size
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<circle cx=\"" << half << "\" cy=\"" << half << "\" r=\"" << radius
      << "\" fill=\"none\" stroke=\"#888\"/>\n"
      << "<line x1=\"" << half - radius << "\" y1=\"" << half << "\" x2=\"" << half + radius << "\" y2=\"" << half
      << "\" stroke=\"#bbb\"/>\n"
      << "<line x1=\"" << half << "\" y1=\"" << half - radius << "\" x2=\"" << half << "\" y2=\"" << half + radius
      << "\" stroke=\"#bbb\"/>\n"
      << "<text x=\"" << half + radius + 4 << "\" y=\"" << half - 4 << "\">valence</text>\n"
      << "<text x=\"" << half + 4 << "\" y=\"" << half - radius - 6 << "\">arousal</text>\n";
  for (const auto& r : rows) {
    const auto k = static_cast<std::size_t>(std::find(names.begin(), names.end(), r.emotion) - names.begin());
    out << "<circle cx=\"" << sx(r.pred.v) << "\" cy=\"" << sy(r.pred.a) << "\" r=\"2\" fill=\""
        << kPalette[k % kPalette.size()] << "\" fill-opacity=\"0.6\"/>\n";
  }
  for (std::size_t k = 0; k < names.size(); ++k) {
    const double y = 20.0 + 18.0 * static_cast<double>(k);
    out << "<circle cx=\"" << size + 10 << "\" cy=\"" << y - 4 << "\" r=\"5\" fill=\"" << kPalette[k % kPalette.size()]
        << "\"/>\n<text x=\"" << size + 20 << "\" y=\"" << y << "\">" << (names[k].empty() ? "(none)" : names[k])
        << "</text>\n";
  }
  out << "</svg>\n";
  if (!out) throw Error("failed writing " + path.string());
}

// ---- rate-distortion sweep ----

// Trains one aligned model per lambda_c from the same initial parameters and
// seed; records test reconstruction BCE (mean per pixel) and the combined
// alignment error. Result is sorted by lambda_c.
inline RateDistortionCurve rate_distortion_sweep(std::span<const AnnotatedSample> train,
                                                 std::span<const AnnotatedSample> test, const ModelParams& init,
                                                 const TrainConfig& cfg, std::vector<double> lambdas) {
  if (lambdas.size() < 2) throw Error("rate-distortion sweep needs at least two lambda values");
  if (!init.has_heads()) throw Error("rate-distortion sweep trains the aligned model; got a vanilla init");
  std::sort(lambdas.begin(), lambdas.end());
  RateDistortionCurve curve;
  for (double lc : lambdas) {
    TrainConfig c = cfg;
    c.weights.lambda_c = lc;
    const auto result = train_model(train, init, c);
    const auto& model = result.checkpoint.model;
    curve.push_back({lc, reconstruction_bce(model, test),
                     alignment_report(model, test, model.config.mode).combined_error()});
  }
  return curve;
}

// ---- report CSVs ----

inline void write_alignment_csv(const std::filesystem::path& path, const AlignmentReport& r) {
  auto out = csv::open_out(path);
  if (r.mode == AnnotationMode::continuous) {
    out << "mode,mse_v,mae_v,mse_a,mae_a,mse_combined,mae_combined\n"
        << "continuous," << csv::fmt(r.mse_v) << ',' << csv::fmt(r.mae_v) << ',' << csv::fmt(r.mse_a) << ','
        << csv::fmt(r.mae_a) << ',' << csv::fmt(r.mse_combined) << ',' << csv::fmt(r.mae_combined) << '\n';
  } else {
    out << "mode,ce_v,ce_a,ce_combined\n"
        << "discrete," << csv::fmt(r.ce_v) << ',' << csv::fmt(r.ce_a) << ',' << csv::fmt(r.ce_combined) << '\n';
  }
}

inline void write_probe_csv(const std::filesystem::path& path, std::span<const ProbeReport> reports) {
  auto out = csv::open_out(path);
  out << "chunk_combination,accuracy\n";
  for (const auto& r : reports) out << to_string(r.combination) << ',' << csv::fmt(r.accuracy) << '\n';
}

inline void write_regression_csv(const std::filesystem::path& path, std::span<const RegressionReport> reports) {
  auto out = csv::open_out(path);
  out << "axis,mse,mae,explained_variance,r2\n";
  for (const auto& r : reports) {
    out << (r.axis == Axis::valence ? "valence" : "arousal") << ',' << csv::fmt(r.mse) << ',' << csv::fmt(r.mae) << ','
        << csv::fmt(r.explained_variance) << ',' << csv::fmt(r.r2) << '\n';
  }
}

inline void write_rate_distortion_csv(const std::filesystem::path& path, const RateDistortionCurve& curve) {
  auto out = csv::open_out(path);
  out << "lambda_c,reconstruction_error,alignment_error\n";
  for (const auto& p : curve) {
    out << csv::fmt(p.lambda_c) << ',' << csv::fmt(p.reconstruction_error) << ',' << csv::fmt(p.alignment_error)
        << '\n';
  }
}

}  // namespace levasa
