#pragma once

// Vanilla VAE and the VA-aligned variant. Both share one backbone:
//
//   encoder  image -> affine(hidden) -> tanh -> affine(2 * total) = [mu | log_var]
//   decoder  z     -> affine(hidden) -> tanh -> affine(pixels) -> sigmoid
//
// The latent vector is split into three contiguous chunks in the order
// z_v, z_a, z_z. The aligned model adds one head per affective axis, each
// reading only its own chunk: chunk -> affine(16) -> tanh -> affine(out).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "levasa/diffcore.hpp"
#include "levasa/error.hpp"
#include "levasa/rng.hpp"
#include "levasa/synthface.hpp"

namespace levasa {

enum class ModelKind { vanilla, levasa };
enum class AnnotationMode { continuous, discrete };

inline std::string to_string(ModelKind k) { return k == ModelKind::vanilla ? "vanilla" : "levasa"; }
inline std::string to_string(AnnotationMode m) { return m == AnnotationMode::continuous ? "continuous" : "discrete"; }

inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "vanilla") return ModelKind::vanilla;
  if (s == "levasa") return ModelKind::levasa;
  throw Error("unknown model kind '" + s + "' (expected vanilla|levasa)");
}

inline AnnotationMode parse_annotation_mode(const std::string& s) {
  if (s == "continuous") return AnnotationMode::continuous;
  if (s == "discrete") return AnnotationMode::discrete;
  throw Error("unknown annotation mode '" + s + "' (expected continuous|discrete)");
}

enum class Chunk : std::size_t { v = 0, a = 1, z = 2 };

struct LatentLayout {
  std::size_t d_v = 8;
  std::size_t d_a = 8;
  std::size_t d_z = 16;

  std::size_t total() const { return d_v + d_a + d_z; }
  std::size_t width(Chunk c) const { return c == Chunk::v ? d_v : c == Chunk::a ? d_a : d_z; }
  std::size_t offset(Chunk c) const { return c == Chunk::v ? 0 : c == Chunk::a ? d_v : d_v + d_a; }
  void validate() const {
    if (d_v == 0 || d_a == 0 || d_z == 0) throw Error("latent chunk widths must be positive");
  }
  friend bool operator==(const LatentLayout&, const LatentLayout&) = default;
};

struct ChunkPosterior {
  std::vector<double> mu;
  std::vector<double> log_var;
};

struct LatentCode {
  std::vector<double> z_v, z_a, z_z;
  ChunkPosterior post_v, post_a, post_z;

  const std::vector<double>& chunk(Chunk c) const { return c == Chunk::v ? z_v : c == Chunk::a ? z_a : z_z; }
  std::vector<double>& chunk(Chunk c) { return c == Chunk::v ? z_v : c == Chunk::a ? z_a : z_z; }
  std::vector<double> concat() const {
    std::vector<double> z = z_v;
    z.insert(z.end(), z_a.begin(), z_a.end());
    z.insert(z.end(), z_z.begin(), z_z.end());
    return z;
  }
};

struct ModelConfig {
  ModelKind kind = ModelKind::levasa;
  AnnotationMode mode = AnnotationMode::continuous;
  LatentLayout layout;
  std::size_t image_height = 24;
  std::size_t image_width = 24;
  std::size_t hidden = 128;
  std::size_t head_hidden = 16;
  std::size_t n_classes = 2 * kDiscreteScale + 1;  // discrete mode only

  std::size_t input_dim() const { return image_height * image_width; }
  std::size_t head_outputs() const { return mode == AnnotationMode::continuous ? 1 : n_classes; }
  // Discrete VA value k maps to class k + scale.
  int discrete_scale() const { return static_cast<int>((n_classes - 1) / 2); }

  void validate() const {
    layout.validate();
    if (input_dim() == 0 || hidden == 0 || head_hidden == 0) throw Error("model dimensions must be positive");
    if (mode == AnnotationMode::discrete && (n_classes < 3 || n_classes % 2 == 0)) {
      throw Error("discrete mode needs an odd class count >= 3");
    }
  }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct Parameter {
  std::string name;
  Tensor value;
  friend bool operator==(const Parameter&, const Parameter&) = default;
};

// Parameter slots, in storage order.
enum ParamIndex : std::size_t {
  kEncW1, kEncB1, kEncW2, kEncB2,
  kDecW1, kDecB1, kDecW2, kDecB2,
  kHvW1, kHvB1, kHvW2, kHvB2,
  kHaW1, kHaB1, kHaW2, kHaB2,
};

inline constexpr std::size_t kBackboneParams = 8;

struct ModelParams {
  ModelConfig config;
  std::vector<Parameter> tensors;

  const Tensor& operator[](std::size_t i) const { return tensors.at(i).value; }
  Tensor& operator[](std::size_t i) { return tensors.at(i).value; }
  bool has_heads() const { return config.kind == ModelKind::levasa; }

  std::size_t backbone_count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < kBackboneParams; ++i) n += tensors.at(i).value.size();
    return n;
  }
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : tensors) n += p.value.size();
    return n;
  }
  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

// Names and shapes of every parameter for a config, in storage order.
inline std::vector<Parameter> parameter_shapes(const ModelConfig& c) {
  const std::size_t t = c.layout.total();
  std::vector<Parameter> p = {
      {"enc.w1", Tensor({c.hidden, c.input_dim()})}, {"enc.b1", Tensor({c.hidden})},
      {"enc.w2", Tensor({2 * t, c.hidden})},         {"enc.b2", Tensor({2 * t})},
      {"dec.w1", Tensor({c.hidden, t})},             {"dec.b1", Tensor({c.hidden})},
      {"dec.w2", Tensor({c.input_dim(), c.hidden})}, {"dec.b2", Tensor({c.input_dim()})},
  };
  if (c.kind == ModelKind::levasa) {
    const std::size_t out = c.head_outputs();
    p.push_back({"hv.w1", Tensor({c.head_hidden, c.layout.d_v})});
    p.push_back({"hv.b1", Tensor({c.head_hidden})});
    p.push_back({"hv.w2", Tensor({out, c.head_hidden})});
    p.push_back({"hv.b2", Tensor({out})});
    p.push_back({"ha.w1", Tensor({c.head_hidden, c.layout.d_a})});
    p.push_back({"ha.b1", Tensor({c.head_hidden})});
    p.push_back({"ha.w2", Tensor({out, c.head_hidden})});
    p.push_back({"ha.b2", Tensor({out})});
  }
  return p;
}

// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases alike,
// filled in storage order from one stream. The backbone is drawn first, so a
// vanilla and an aligned model built from the same seed share it exactly.
inline ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams params{config, parameter_shapes(config)};
  SeededRng rng(seed);
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    // Each bias follows its weight; both use the weight's fan-in.
    const Tensor& weight = params.tensors[i - i % 2].value;
    const double bound = 1.0 / std::sqrt(static_cast<double>(weight.cols()));
    for (auto& x : params.tensors[i].value.data()) x = rng.uniform(-bound, bound);
  }
  return params;
}

inline ModelParams zero_params(const ModelConfig& config) {
  config.validate();
  return ModelParams{config, parameter_shapes(config)};
}

// ---- graph construction ----

struct BoundParams {
  std::vector<Var> vars;
  Var operator[](std::size_t i) const { return vars.at(i); }
};

inline BoundParams bind_params(Graph& g, const ModelParams& p, bool trainable) {
  BoundParams b;
  for (const auto& t : p.tensors) b.vars.push_back(trainable ? g.parameter(t.value) : g.constant(t.value));
  return b;
}

struct EncoderOutput {
  Var mu;
  Var log_var;
};

inline EncoderOutput encoder_forward(Graph& g, const ModelParams& p, const BoundParams& b, Var images) {
  const std::size_t t = p.config.layout.total();
  Var h = g.tanh(g.affine(images, b[kEncW1], b[kEncB1]));
  Var out = g.affine(h, b[kEncW2], b[kEncB2]);
  return {g.slice_cols(out, 0, t), g.slice_cols(out, t, 2 * t)};
}

// Pre-sigmoid decoder output.
inline Var decoder_logits(Graph& g, const BoundParams& b, Var z) {
  Var h = g.tanh(g.affine(z, b[kDecW1], b[kDecB1]));
  return g.affine(h, b[kDecW2], b[kDecB2]);
}

inline Var chunk_of(Graph& g, const LatentLayout& layout, Var z, Chunk c) {
  const std::size_t off = layout.offset(c);
  return g.slice_cols(z, off, off + layout.width(c));
}

// Continuous mode: one value per row. Discrete mode: n_classes logits.
inline Var head_forward(Graph& g, const ModelParams& p, const BoundParams& b, Chunk axis, Var chunk) {
  if (!p.has_heads()) throw Error("projection heads are only defined for the levasa model kind");
  if (axis == Chunk::z) throw Error("there is no projection head for z_z");
  const std::size_t base = axis == Chunk::v ? kHvW1 : kHaW1;
  Var h = g.tanh(g.affine(chunk, b[base], b[base + 1]));
  return g.affine(h, b[base + 2], b[base + 3]);
}

inline Tensor stack_images(const ModelConfig& c, std::span<const AnnotatedSample> samples,
                           std::span<const std::size_t> indices) {
  Tensor x({indices.size(), c.input_dim()});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto& img = samples[indices[r]].image;
    if (img.pixels.size() != c.input_dim()) {
      throw ShapeError("image of " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                       " does not match encoder input of " + std::to_string(c.input_dim()) + " pixels");
    }
    std::copy(img.pixels.begin(), img.pixels.end(), x.row(r).begin());
  }
  return x;
}

// ---- single-sample operations ----

namespace detail {

inline std::vector<double> row_slice(const Tensor& t, std::size_t r, std::size_t off, std::size_t w) {
  auto row = t.row(r);
  return {row.begin() + static_cast<std::ptrdiff_t>(off), row.begin() + static_cast<std::ptrdiff_t>(off + w)};
}

inline LatentCode code_from_rows(const LatentLayout& L, const Tensor& z, const Tensor& mu, const Tensor& lv,
                                 std::size_t r) {
  LatentCode c;
  for (Chunk k : {Chunk::v, Chunk::a, Chunk::z}) {
    const auto off = L.offset(k), w = L.width(k);
    c.chunk(k) = row_slice(z, r, off, w);
    ChunkPosterior post{row_slice(mu, r, off, w), row_slice(lv, r, off, w)};
    (k == Chunk::v ? c.post_v : k == Chunk::a ? c.post_a : c.post_z) = std::move(post);
  }
  return c;
}

}  // namespace detail

// Encodes a batch. With an rng every chunk is sampled by reparameterization;
// without one the code is the posterior mean.
inline std::vector<LatentCode> encode_batch(const ModelParams& p, std::span<const AnnotatedSample> samples,
                                            SeededRng* rng = nullptr) {
  std::vector<LatentCode> out;
  out.reserve(samples.size());
  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < samples.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, samples.size() - start);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), start);
    Graph g;
    auto b = bind_params(g, p, false);
    Var x = g.constant(stack_images(p.config, samples, idx));
    auto enc = encoder_forward(g, p, b, x);
    Var z = rng ? g.reparameterize(enc.mu, enc.log_var, *rng) : enc.mu;
    for (std::size_t r = 0; r < n; ++r) {
      out.push_back(detail::code_from_rows(p.config.layout, g.value(z), g.value(enc.mu), g.value(enc.log_var), r));
    }
  }
  return out;
}

inline LatentCode encode(const ModelParams& p, const ImageTensor& image, SeededRng& rng) {
  AnnotatedSample s;
  s.image = image;
  return encode_batch(p, std::span<const AnnotatedSample>(&s, 1), &rng).front();
}

inline LatentCode encode_mean(const ModelParams& p, const ImageTensor& image) {
  AnnotatedSample s;
  s.image = image;
  return encode_batch(p, std::span<const AnnotatedSample>(&s, 1), nullptr).front();
}

inline void check_code(const LatentLayout& L, const LatentCode& c) {
  if (c.z_v.size() != L.d_v || c.z_a.size() != L.d_a || c.z_z.size() != L.d_z) {
    throw ShapeError("latent code widths (" + std::to_string(c.z_v.size()) + "," + std::to_string(c.z_a.size()) + "," +
                     std::to_string(c.z_z.size()) + ") do not match layout (" + std::to_string(L.d_v) + "," +
                     std::to_string(L.d_a) + "," + std::to_string(L.d_z) + ")");
  }
}

inline ImageTensor decode(const ModelParams& p, const LatentCode& code) {
  check_code(p.config.layout, code);
  Graph g;
  auto b = bind_params(g, p, false);
  Var out = g.sigmoid(decoder_logits(g, b, g.constant(Tensor::vector(code.concat()))));
  ImageTensor img(p.config.image_height, p.config.image_width);
  std::copy(g.value(out).data().begin(), g.value(out).data().end(), img.pixels.begin());
  return img;
}

struct HeadOutput {
  std::vector<double> v;  // one value (continuous) or n_classes logits
  std::vector<double> a;
};

inline HeadOutput project_va(const ModelParams& p, const LatentCode& code) {
  if (!p.has_heads()) throw Error("project_va called on a vanilla model");
  check_code(p.config.layout, code);
  Graph g;
  auto b = bind_params(g, p, false);
  Var rv = head_forward(g, p, b, Chunk::v, g.constant(Tensor::vector(code.z_v)));
  Var ra = head_forward(g, p, b, Chunk::a, g.constant(Tensor::vector(code.z_a)));
  auto vals = [&](Var x) { return std::vector<double>(g.value(x).data().begin(), g.value(x).data().end()); };
  return {vals(rv), vals(ra)};
}

// ---- objective ----

struct LossWeights {
  double lambda_kl = 1.0;
  double lambda_c = 10.0;
  void validate() const {
    if (!(lambda_kl >= 0.0) || !(lambda_c >= 0.0)) throw Error("loss weights must be nonnegative");
  }
};

struct LossComponents {
  double reconstruction = 0.0;
  double kl = 0.0;
  double alignment = 0.0;
  double total = 0.0;
  friend bool operator==(const LossComponents&, const LossComponents&) = default;
};

struct LossGraph {
  Graph graph;
  BoundParams params;
  Var total;
  LossComponents components;
};

// L_R: per-image pixel BCE summed over pixels, averaged over the batch.
// L_KL: KL to N(0, I) summed over all three chunks, averaged over the batch.
// L_C: (L(r_v, v) + L(r_a, a)) averaged over the batch, L = MSE or softmax CE.
inline LossGraph batch_loss(const ModelParams& p, std::span<const AnnotatedSample> samples,
                            std::span<const std::size_t> indices, const LossWeights& w, SeededRng& rng) {
  w.validate();
  if (indices.empty()) throw Error("empty batch");
  const auto& c = p.config;
  const std::size_t n = indices.size();
  Tensor va_v, va_a;
  if (p.has_heads()) {
    va_v = Tensor({n, 1});
    va_a = va_v;
    const int scale = c.discrete_scale();
    for (std::size_t r = 0; r < n; ++r) {
      const auto& s = samples[indices[r]];
      if (c.mode == AnnotationMode::continuous) {
        if (!s.va) throw Error("sample " + std::to_string(indices[r]) + " has no continuous VA annotation");
        va_v[r] = s.va->v;
        va_a[r] = s.va->a;
      } else {
        if (!s.va_discrete) throw Error("sample " + std::to_string(indices[r]) + " has no discrete VA annotation");
        const int kv = s.va_discrete->v + scale, ka = s.va_discrete->a + scale;
        if (kv < 0 || ka < 0 || kv >= static_cast<int>(c.n_classes) || ka >= static_cast<int>(c.n_classes)) {
          throw Error("sample " + std::to_string(indices[r]) + " has discrete VA outside [-scale, scale]");
        }
        va_v[r] = kv;
        va_a[r] = ka;
      }
    }
  }

  LossGraph out;
  Graph& g = out.graph;
  out.params = bind_params(g, p, true);
  const Tensor images = stack_images(c, samples, indices);
  Var x = g.constant(images);
  auto enc = encoder_forward(g, p, out.params, x);
  Var z = g.reparameterize(enc.mu, enc.log_var, rng);
  Var logits = decoder_logits(g, out.params, z);
  Var l_r = g.scale(g.bce_with_logits(logits, images), static_cast<double>(c.input_dim()));
  Var l_kl = g.kl_diag_gaussian(enc.mu, enc.log_var);
  Var total = g.add(l_r, g.scale(l_kl, w.lambda_kl));
  out.components.reconstruction = g.value(l_r).item();
  out.components.kl = g.value(l_kl).item();
  if (p.has_heads()) {
    Var rv = head_forward(g, p, out.params, Chunk::v, chunk_of(g, c.layout, z, Chunk::v));
    Var ra = head_forward(g, p, out.params, Chunk::a, chunk_of(g, c.layout, z, Chunk::a));
    const LossKind kind = c.mode == AnnotationMode::continuous ? LossKind::mse : LossKind::softmax_ce;
    Var l_c = g.add(g.loss(kind, rv, va_v), g.loss(kind, ra, va_a));
    out.components.alignment = g.value(l_c).item();
    total = g.add(total, g.scale(l_c, w.lambda_c));
  }
  out.total = total;
  out.components.total = g.value(total).item();
  return out;
}

inline LossGraph total_loss(const ModelParams& p, std::span<const AnnotatedSample> batch, const LossWeights& w,
                            SeededRng& rng) {
  std::vector<std::size_t> idx(batch.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return batch_loss(p, batch, idx, w, rng);
}

}  // namespace levasa
