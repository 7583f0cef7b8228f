#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "levasa/error.hpp"
#include "levasa/rng.hpp"
#include "levasa/vae.hpp"

namespace levasa {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  LossWeights weights;

  void validate() const {
    if (epochs < 1) throw Error("epochs must be >= 1");
    if (batch_size < 1) throw Error("batch_size must be >= 1");
    if (!(learning_rate >= 0.0)) throw Error("learning_rate must be nonnegative");
    weights.validate();
  }
};

struct AdamMoments {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;

  static AdamMoments zeros_like(const ModelParams& p) {
    AdamMoments s;
    for (const auto& t : p.tensors) {
      s.m.push_back(Tensor::zeros_like(t.value));
      s.v.push_back(Tensor::zeros_like(t.value));
    }
    return s;
  }
  friend bool operator==(const AdamMoments&, const AdamMoments&) = default;
};

// One Adam update with bias correction. step_index counts from 1.
inline void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamMoments& moments,
                      const TrainConfig& cfg, std::uint64_t step_index) {
  if (step_index < 1) throw Error("adam step index starts at 1");
  if (grads.size() != params.size() || moments.m.size() != params.size() || moments.v.size() != params.size()) {
    throw ShapeError("adam_step: parameter, gradient and moment counts differ");
  }
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_index));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_index));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    const auto& g = grads[k];
    auto& m = moments.m[k];
    auto& v = moments.v[k];
    if (!p.same_shape(g) || !p.same_shape(m) || !p.same_shape(v)) {
      throw ShapeError("adam_step: shape mismatch for parameter " + std::to_string(k) + ": " + p.shape_string() +
                       " vs gradient " + g.shape_string());
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
  }
  moments.step = step_index;
}

struct Checkpoint {
  ModelParams model;
  AdamMoments moments;
  std::uint64_t epoch = 0;
  LossComponents final_loss;
  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LossComponents> trace;  // one entry per epoch, sample-weighted means
};

using EpochCallback = std::function<void(std::size_t epoch, const LossComponents&)>;

// Minibatch Adam on the full objective. Batch order is reshuffled each epoch
// from cfg.seed; the same stream supplies the reparameterization noise.
inline TrainResult train_model(std::span<const AnnotatedSample> dataset, const ModelParams& init,
                               const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (dataset.empty()) throw Error("cannot train on an empty dataset");
  TrainResult result;
  Checkpoint& ck = result.checkpoint;
  ck.model = init;
  ck.moments = AdamMoments::zeros_like(init);
  SeededRng rng(cfg.seed);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<Tensor> values(init.tensors.size());
  std::vector<Tensor> grads(init.tensors.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle(order.begin(), order.end(), rng);
    LossComponents sum;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      std::span<const std::size_t> batch(order.data() + start, n);
      auto lg = batch_loss(ck.model, dataset, batch, cfg.weights, rng);
      lg.graph.backward(lg.total);
      for (std::size_t k = 0; k < grads.size(); ++k) grads[k] = lg.graph.grad(lg.params[k]);
      for (std::size_t k = 0; k < values.size(); ++k) values[k] = std::move(ck.model.tensors[k].value);
      adam_step(values, grads, ck.moments, cfg, ck.moments.step + 1);
      for (std::size_t k = 0; k < values.size(); ++k) ck.model.tensors[k].value = std::move(values[k]);
      const double w = static_cast<double>(n);
      sum.reconstruction += w * lg.components.reconstruction;
      sum.kl += w * lg.components.kl;
      sum.alignment += w * lg.components.alignment;
      sum.total += w * lg.components.total;
    }
    const double n = static_cast<double>(dataset.size());
    LossComponents mean{sum.reconstruction / n, sum.kl / n, sum.alignment / n, sum.total / n};
    result.trace.push_back(mean);
    ck.epoch = epoch + 1;
    ck.final_loss = mean;
    if (on_epoch) on_epoch(epoch + 1, mean);
  }
  return result;
}

// ---- checkpoint file ----
//
//   "LVSA1\n"
//   key=value header lines, terminated by an empty line
//   raw little-endian IEEE-754 doubles: every parameter, then every first
//   moment, then every second moment, each in header order

class CheckpointError : public Error {
 public:
  using Error::Error;
};
class BadMagicError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class VersionMismatchError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class TruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_f64(std::ostream& out, double x) {
  const auto bits = std::bit_cast<std::uint64_t>(x);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
  out.write(b, 8);
}

inline std::string shape_text(const Tensor& t) {
  std::string s;
  for (std::size_t i = 0; i < t.shape().size(); ++i) s += (i ? "x" : "") + std::to_string(t.shape()[i]);
  return s;
}

}  // namespace detail

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const auto& c = ck.model.config;
  std::ostringstream h;
  h << "format_version=" << kCheckpointVersion << '\n'
    << "kind=" << to_string(c.kind) << '\n'
    << "annotations=" << to_string(c.mode) << '\n'
    << "d_v=" << c.layout.d_v << '\n'
    << "d_a=" << c.layout.d_a << '\n'
    << "d_z=" << c.layout.d_z << '\n'
    << "image_height=" << c.image_height << '\n'
    << "image_width=" << c.image_width << '\n'
    << "hidden=" << c.hidden << '\n'
    << "head_hidden=" << c.head_hidden << '\n'
    << "n_classes=" << c.n_classes << '\n'
    << "epoch=" << ck.epoch << '\n'
    << "adam_step=" << ck.moments.step << '\n'
    << "loss_reconstruction=" << csv::fmt(ck.final_loss.reconstruction) << '\n'
    << "loss_kl=" << csv::fmt(ck.final_loss.kl) << '\n'
    << "loss_alignment=" << csv::fmt(ck.final_loss.alignment) << '\n'
    << "loss_total=" << csv::fmt(ck.final_loss.total) << '\n'
    << "arrays=" << ck.model.tensors.size() << '\n';
  for (std::size_t k = 0; k < ck.model.tensors.size(); ++k) {
    h << "array." << k << '=' << ck.model.tensors[k].name << ':' << detail::shape_text(ck.model.tensors[k].value)
      << '\n';
  }
  h << '\n';
  if (ck.moments.m.size() != ck.model.tensors.size() || ck.moments.v.size() != ck.model.tensors.size()) {
    throw CheckpointError("checkpoint moments do not match parameter count");
  }
  auto out = csv::open_out(path);
  out << "LVSA1\n" << h.str();
  for (const auto& p : ck.model.tensors)
    for (double x : p.value.data()) detail::put_f64(out, x);
  for (const auto* group : {&ck.moments.m, &ck.moments.v}) {
    for (std::size_t k = 0; k < group->size(); ++k) {
      if (!(*group)[k].same_shape(ck.model.tensors[k].value)) throw CheckpointError("moment shape mismatch");
      for (double x : (*group)[k].data()) detail::put_f64(out, x);
    }
  }
  if (!out) throw CheckpointError("failed writing " + path.string());
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[6] = {};
  in.read(magic, 6);
  if (in.gcount() < 6 || std::memcmp(magic, "LVSA", 4) != 0 || magic[5] != '\n') {
    throw BadMagicError(path.string() + ": bad magic, not a checkpoint file");
  }
  if (magic[4] != '1') {
    throw VersionMismatchError(path.string() + ": checkpoint version " + std::string(1, magic[4]) +
                               " is not supported (expected 1)");
  }
  std::map<std::string, std::string> kv;
  std::string line;
  bool terminated = false;
  while (std::getline(in, line)) {
    if (in.eof()) break;
    if (line.empty()) {
      terminated = true;
      break;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError(path.string() + ": malformed header line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  if (!terminated) throw TruncatedError(path.string() + ": truncated header");
  auto get = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw CheckpointError(path.string() + ": header lacks '" + key + "'");
    return it->second;
  };
  auto get_u = [&](const std::string& key) -> std::uint64_t {
    try {
      return std::stoull(get(key));
    } catch (const std::logic_error&) {
      throw CheckpointError(path.string() + ": bad value for '" + key + "'");
    }
  };
  auto get_d = [&](const std::string& key) { return csv::parse_double(get(key), path.string() + " " + key); };
  if (get_u("format_version") != kCheckpointVersion) {
    throw VersionMismatchError(path.string() + ": header format_version " + get("format_version") +
                               " is not supported");
  }
  Checkpoint ck;
  ModelConfig c;
  c.kind = parse_model_kind(get("kind"));
  c.mode = parse_annotation_mode(get("annotations"));
  c.layout = {get_u("d_v"), get_u("d_a"), get_u("d_z")};
  c.image_height = get_u("image_height");
  c.image_width = get_u("image_width");
  c.hidden = get_u("hidden");
  c.head_hidden = get_u("head_hidden");
  c.n_classes = get_u("n_classes");
  c.validate();
  ck.model = zero_params(c);
  ck.epoch = get_u("epoch");
  ck.moments = AdamMoments::zeros_like(ck.model);
  ck.moments.step = get_u("adam_step");
  ck.final_loss = {get_d("loss_reconstruction"), get_d("loss_kl"), get_d("loss_alignment"), get_d("loss_total")};
  if (get_u("arrays") != ck.model.tensors.size()) {
    throw CheckpointError(path.string() + ": array count inconsistent with the recorded layout");
  }
  for (std::size_t k = 0; k < ck.model.tensors.size(); ++k) {
    const auto& expect = ck.model.tensors[k];
    const std::string want = expect.name + ":" + detail::shape_text(expect.value);
    if (get("array." + std::to_string(k)) != want) {
      throw CheckpointError(path.string() + ": array " + std::to_string(k) + " is '" +
                            get("array." + std::to_string(k)) + "', expected '" + want + "'");
    }
  }
  auto fill = [&](Tensor& t, const std::string& what) {
    std::vector<char> buf(t.size() * 8);
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() != static_cast<std::streamsize>(buf.size())) {
      throw TruncatedError(path.string() + ": truncated while reading " + what);
    }
    for (std::size_t i = 0; i < t.size(); ++i) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b)
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[i * 8 + b])) << (8 * b);
      t[i] = std::bit_cast<double>(bits);
    }
  };
  for (auto& p : ck.model.tensors) fill(p.value, p.name);
  for (std::size_t k = 0; k < ck.moments.m.size(); ++k) fill(ck.moments.m[k], "first moment of " + ck.model.tensors[k].name);
  for (std::size_t k = 0; k < ck.moments.v.size(); ++k) fill(ck.moments.v[k], "second moment of " + ck.model.tensors[k].name);
  if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError(path.string() + ": trailing bytes after arrays");
  return ck;
}

}  // namespace levasa
