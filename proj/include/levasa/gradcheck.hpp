#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "levasa/diffcore.hpp"
#include "levasa/vae.hpp"

namespace levasa {

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
};

// Builds the loss on a fresh graph whose leaves hold the given tensors.
using LossBuilder = std::function<Var(Graph&, std::span<const Var>)>;

// Gradients below this magnitude are compared in absolute terms; central
// differences cannot resolve them any better in double precision.
inline constexpr double kGradCheckFloor = 1e-6;

inline double gradient_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kGradCheckFloor});
}

// Compares backward() against central finite differences for every element of
// every leaf. The builder must be deterministic (reseed any RNG it uses).
inline GradCheckResult check_gradients(const LossBuilder& build, std::vector<Tensor> leaves, double step = 1e-5) {
  std::vector<Tensor> analytic;
  {
    Graph g;
    std::vector<Var> vars;
    for (const auto& t : leaves) vars.push_back(g.parameter(t));
    Var loss = build(g, vars);
    g.backward(loss);
    for (Var v : vars) analytic.push_back(g.grad(v));
  }
  auto evaluate = [&]() {
    Graph g;
    std::vector<Var> vars;
    for (const auto& t : leaves) vars.push_back(g.constant(t));
    return g.value(build(g, vars)).item();
  };
  GradCheckResult result;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    for (std::size_t i = 0; i < leaves[k].size(); ++i) {
      const double saved = leaves[k][i];
      leaves[k][i] = saved + step;
      const double up = evaluate();
      leaves[k][i] = saved - step;
      const double down = evaluate();
      leaves[k][i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      result.max_rel_error = std::max(result.max_rel_error, gradient_rel_error(analytic[k][i], numeric));
      result.max_abs_error = std::max(result.max_abs_error, std::abs(analytic[k][i] - numeric));
      ++result.checked;
    }
  }
  return result;
}

// Same comparison for the full training objective of a model. The noise draw
// is replayed from rng_seed on every evaluation.
inline GradCheckResult check_model_gradients(ModelParams params, std::span<const AnnotatedSample> batch,
                                             const LossWeights& w, std::uint64_t rng_seed, double step = 1e-5) {
  std::vector<Tensor> analytic;
  {
    SeededRng rng(rng_seed);
    auto lg = total_loss(params, batch, w, rng);
    lg.graph.backward(lg.total);
    for (std::size_t k = 0; k < params.tensors.size(); ++k) analytic.push_back(lg.graph.grad(lg.params[k]));
  }
  auto evaluate = [&]() {
    SeededRng rng(rng_seed);
    return total_loss(params, batch, w, rng).components.total;
  };
  GradCheckResult result;
  for (std::size_t k = 0; k < params.tensors.size(); ++k) {
    Tensor& t = params[k];
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double saved = t[i];
      t[i] = saved + step;
      const double up = evaluate();
      t[i] = saved - step;
      const double down = evaluate();
      t[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      result.max_rel_error = std::max(result.max_rel_error, gradient_rel_error(analytic[k][i], numeric));
      result.max_abs_error = std::max(result.max_abs_error, std::abs(analytic[k][i] - numeric));
      ++result.checked;
    }
  }
  return result;
}

struct GradSuiteEntry {
  std::string name;
  GradCheckResult result;
};

namespace detail {

inline Tensor random_tensor(std::vector<std::size_t> shape, SeededRng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& x : t.data()) x = rng.uniform(lo, hi);
  return t;
}

// Keeps inputs of kinked ops away from the kink by more than the step.
inline Tensor away_from_zero(std::vector<std::size_t> shape, SeededRng& rng) {
  Tensor t = random_tensor(std::move(shape), rng);
  for (auto& x : t.data()) x = x < 0 ? x - 0.05 : x + 0.05;
  return t;
}

inline std::vector<AnnotatedSample> tiny_batch(const ModelConfig& c, std::size_t n, SeededRng& rng) {
  std::vector<AnnotatedSample> batch(n);
  const int scale = c.discrete_scale();
  for (auto& s : batch) {
    s.image.height = c.image_height;
    s.image.width = c.image_width;
    for (std::size_t i = 0; i < c.input_dim(); ++i) s.image.pixels.push_back(rng.uniform());
    s.va = VAPoint{rng.uniform(-1, 1), rng.uniform(-1, 1)};
    s.va_discrete = DiscreteVA{static_cast<int>(rng.uniform_index(2 * scale + 1)) - scale,
                               static_cast<int>(rng.uniform_index(2 * scale + 1)) - scale};
  }
  return batch;
}

}  // namespace detail

// Every differentiable op plus the full objective (both annotation modes) on
// a tiny model, each at `points` random inputs. Non-scalar ops are reduced by
// an MSE against a random target.
inline std::vector<GradSuiteEntry> gradient_suite(std::uint64_t seed, std::size_t points = 20) {
  using detail::away_from_zero;
  using detail::random_tensor;
  std::vector<GradSuiteEntry> out;
  SeededRng rng(seed);
  auto run = [&](const std::string& name, auto make) {
    GradSuiteEntry e{name, {}};
    for (std::size_t p = 0; p < points; ++p) {
      auto [builder, leaves] = make();
      const auto r = check_gradients(builder, leaves);
      e.result.max_rel_error = std::max(e.result.max_rel_error, r.max_rel_error);
      e.result.max_abs_error = std::max(e.result.max_abs_error, r.max_abs_error);
      e.result.checked += r.checked;
    }
    out.push_back(e);
  };
  using Case = std::pair<LossBuilder, std::vector<Tensor>>;
  auto reduce = [](Graph& g, Var y, const Tensor& target) { return g.mse(y, target); };
  auto unary = [&](const std::string& name, Var (Graph::*op)(Var), bool kinked) {
    run(name, [&, op, kinked]() -> Case {
      Tensor x = kinked ? away_from_zero({3, 4}, rng) : random_tensor({3, 4}, rng, -2, 2);
      Tensor t = random_tensor({3, 4}, rng);
      return {[=](Graph& g, std::span<const Var> v) { return reduce(g, (g.*op)(v[0]), t); }, {x}};
    });
  };
  run("affine", [&]() -> Case {
    Tensor t = random_tensor({3, 2}, rng);
    return {[=](Graph& g, std::span<const Var> v) { return reduce(g, g.affine(v[0], v[1], v[2]), t); },
            {random_tensor({3, 4}, rng), random_tensor({2, 4}, rng), random_tensor({2}, rng)}};
  });
  unary("tanh", &Graph::tanh, false);
  unary("relu", &Graph::relu, true);
  unary("sigmoid", &Graph::sigmoid, false);
  unary("softmax", &Graph::softmax, false);
  run("add", [&]() -> Case {
    Tensor t = random_tensor({2, 3}, rng);
    return {[=](Graph& g, std::span<const Var> v) { return reduce(g, g.add(v[0], v[1]), t); },
            {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)}};
  });
  run("scale", [&]() -> Case {
    Tensor t = random_tensor({2, 3}, rng);
    const double c = rng.uniform(-2, 2);
    return {[=](Graph& g, std::span<const Var> v) { return reduce(g, g.scale(v[0], c), t); },
            {random_tensor({2, 3}, rng)}};
  });
  run("sum", [&]() -> Case {
    return {[](Graph& g, std::span<const Var> v) { return g.sum(g.tanh(v[0])); }, {random_tensor({2, 3}, rng)}};
  });
  run("slice_cols", [&]() -> Case {
    Tensor t = random_tensor({2, 2}, rng);
    return {[=](Graph& g, std::span<const Var> v) { return reduce(g, g.slice_cols(v[0], 1, 3), t); },
            {random_tensor({2, 4}, rng)}};
  });
  run("concat_cols", [&]() -> Case {
    Tensor t = random_tensor({2, 5}, rng);
    return {[=](Graph& g, std::span<const Var> v) {
              const Var parts[] = {v[0], v[1]};
              return reduce(g, g.concat_cols(parts), t);
            },
            {random_tensor({2, 2}, rng), random_tensor({2, 3}, rng)}};
  });
  run("reparameterize", [&]() -> Case {
    Tensor t = random_tensor({2, 3}, rng);
    Tensor eps = random_tensor({2, 3}, rng, -2, 2);
    return {[=](Graph& g, std::span<const Var> v) { return reduce(g, g.reparameterize(v[0], v[1], eps), t); },
            {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)}};
  });
  run("kl_diag_gaussian", [&]() -> Case {
    return {[](Graph& g, std::span<const Var> v) { return g.kl_diag_gaussian(v[0], v[1]); },
            {random_tensor({2, 3}, rng, -2, 2), random_tensor({2, 3}, rng, -2, 2)}};
  });
  run("mse", [&]() -> Case {
    Tensor t = random_tensor({3, 2}, rng);
    return {[=](Graph& g, std::span<const Var> v) { return g.mse(v[0], t); }, {random_tensor({3, 2}, rng)}};
  });
  run("bce", [&]() -> Case {
    Tensor t = random_tensor({3, 2}, rng, 0, 1);
    return {[=](Graph& g, std::span<const Var> v) { return g.bce(v[0], t); }, {random_tensor({3, 2}, rng, 0.05, 0.95)}};
  });
  run("bce_with_logits", [&]() -> Case {
    Tensor t = random_tensor({3, 2}, rng, 0, 1);
    return {[=](Graph& g, std::span<const Var> v) { return g.bce_with_logits(v[0], t); },
            {random_tensor({3, 2}, rng, -3, 3)}};
  });
  run("softmax_ce", [&]() -> Case {
    Tensor t({3});
    for (auto& x : t.data()) x = static_cast<double>(rng.uniform_index(4));
    return {[=](Graph& g, std::span<const Var> v) { return g.softmax_ce(v[0], t); },
            {random_tensor({3, 4}, rng, -2, 2)}};
  });
  for (AnnotationMode mode : {AnnotationMode::continuous, AnnotationMode::discrete}) {
    ModelConfig c;
    c.mode = mode;
    c.layout = {1, 1, 2};
    c.image_height = 2;
    c.image_width = 3;
    c.hidden = 4;
    c.head_hidden = 3;
    c.n_classes = 5;
    GradSuiteEntry e{"total_loss_" + to_string(mode), {}};
    for (std::size_t p = 0; p < points; ++p) {
      const auto batch = detail::tiny_batch(c, 3, rng);
      const LossWeights w{rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)};
      const auto r = check_model_gradients(init_params(c, rng.next_u64()), batch, w, rng.next_u64());
      e.result.max_rel_error = std::max(e.result.max_rel_error, r.max_rel_error);
      e.result.max_abs_error = std::max(e.result.max_abs_error, r.max_abs_error);
      e.result.checked += r.checked;
    }
    out.push_back(e);
  }
  return out;
}

}  // namespace levasa
