#pragma once

// Minimal define-by-run reverse-mode differentiation over dense tensors.
//
// A Graph records every node in creation order, which is a valid topological
// order, so backward() is a single reverse sweep. Nodes are addressed through
// the Var handle returned by each op. Graphs are single-threaded; build a new
// one per minibatch.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "levasa/error.hpp"
#include "levasa/rng.hpp"
#include "levasa/tensor.hpp"

namespace levasa {

struct Var {
  std::size_t id = 0;
  friend bool operator==(Var, Var) = default;
};

enum class OpKind { affine, tanh, relu, sigmoid, softmax };
enum class LossKind { mse, bce, softmax_ce };

namespace detail {

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline void softmax_row(std::span<const double> in, std::span<double> out) {
  const double mx = *std::max_element(in.begin(), in.end());
  double total = 0.0;
  for (std::size_t j = 0; j < in.size(); ++j) {
    out[j] = std::exp(in[j] - mx);
    total += out[j];
  }
  for (auto& v : out) v /= total;
}

inline double log_sum_exp(std::span<const double> in) {
  const double mx = *std::max_element(in.begin(), in.end());
  double total = 0.0;
  for (double v : in) total += std::exp(v - mx);
  return mx + std::log(total);
}

}  // namespace detail

class Graph {
 public:
  Var constant(Tensor value) { return push("constant", std::move(value), {}, false, nullptr); }
  Var parameter(Tensor value) { return push("parameter", std::move(value), {}, true, nullptr); }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  const std::string& op_name(Var v) const { return nodes_.at(v.id).op; }
  const std::vector<std::size_t>& inputs(Var v) const { return nodes_.at(v.id).inputs; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Accumulated gradient; zeros if nothing has flowed into the node yet.
  Tensor grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.grad.empty() ? Tensor::zeros_like(n.value) : n.grad;
  }

  void zero_grad() {
    for (auto& n : nodes_) n.grad = Tensor();
  }

  // Adds d(loss)/d(node) into every node that requires a gradient. Calling it
  // twice without zero_grad() doubles the stored gradients.
  void backward(Var loss) {
    const Node& root = nodes_.at(loss.id);
    if (root.value.size() != 1) {
      throw ShapeError("backward requires a scalar loss, got shape " + root.value.shape_string());
    }
    std::vector<Tensor> local(loss.id + 1);
    local[loss.id] = Tensor(root.value.shape(), 1.0);
    for (std::size_t k = loss.id + 1; k-- > 0;) {
      if (local[k].empty()) continue;
      const Node& n = nodes_[k];
      if (n.backward) n.backward(*this, k, local);
    }
    for (std::size_t k = 0; k <= loss.id; ++k) {
      Node& n = nodes_[k];
      if (local[k].empty() || !n.requires_grad) continue;
      if (n.grad.empty()) {
        n.grad = std::move(local[k]);
      } else {
        auto dst = n.grad.data();
        auto src = local[k].data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      }
    }
  }

  Var forward(OpKind kind, std::span<const Var> inputs, std::span<const Var> params = {}) {
    auto need = [&](std::size_t n_in, std::size_t n_par) {
      if (inputs.size() != n_in || params.size() != n_par) {
        throw ShapeError("wrong operand count for op");
      }
    };
    switch (kind) {
      case OpKind::affine:
        need(1, 2);
        return affine(inputs[0], params[0], params[1]);
      case OpKind::tanh:
        need(1, 0);
        return tanh(inputs[0]);
      case OpKind::relu:
        need(1, 0);
        return relu(inputs[0]);
      case OpKind::sigmoid:
        need(1, 0);
        return sigmoid(inputs[0]);
      case OpKind::softmax:
        need(1, 0);
        return softmax(inputs[0]);
    }
    throw Error("unknown op kind");
  }

  // y = x W^T + b. x is [batch, in] or [in]; W is [out, in]; b is [out].
  Var affine(Var x, Var w, Var b) {
    const Tensor& xv = value(x);
    const Tensor& wv = value(w);
    const Tensor& bv = value(b);
    if (wv.rank() != 2 || xv.rank() > 2 || xv.cols() != wv.cols() || bv.size() != wv.rows()) {
      throw ShapeError("affine shape mismatch: input " + xv.shape_string() + ", weight " +
                       wv.shape_string() + ", bias " + bv.shape_string());
    }
    const std::size_t batch = xv.rows(), in = wv.cols(), out = wv.rows();
    std::vector<double> wt(in * out);
    for (std::size_t o = 0; o < out; ++o)
      for (std::size_t i = 0; i < in; ++i) wt[i * out + o] = wv[o * in + i];
    Tensor y = xv.rank() == 1 ? Tensor({out}) : Tensor({batch, out});
    for (std::size_t r = 0; r < batch; ++r) {
      double* yr = y.data().data() + r * out;
      const double* xr = xv.data().data() + r * in;
      for (std::size_t o = 0; o < out; ++o) yr[o] = bv[o];
      for (std::size_t i = 0; i < in; ++i) {
        const double xi = xr[i];
        const double* wr = wt.data() + i * out;
        for (std::size_t o = 0; o < out; ++o) yr[o] += xi * wr[o];
      }
    }
    return push("affine", std::move(y), {x.id, w.id, b.id}, any_grad({x, w, b}),
                [batch, in, out](const Graph& g, std::size_t self, std::vector<Tensor>& grads) {
                  const Node& n = g.nodes_[self];
                  const std::size_t xi = n.inputs[0], wi = n.inputs[1], bi = n.inputs[2];
                  const Tensor& dy = grads[self];
                  const Tensor& xv = g.nodes_[xi].value;
                  const Tensor& wv = g.nodes_[wi].value;
                  const bool gx = g.nodes_[xi].requires_grad;
                  const bool gw = g.nodes_[wi].requires_grad;
                  const bool gb = g.nodes_[bi].requires_grad;
                  double* dx = gx ? g.slot(grads, xi).data().data() : nullptr;
                  double* dw = gw ? g.slot(grads, wi).data().data() : nullptr;
                  double* db = gb ? g.slot(grads, bi).data().data() : nullptr;
                  for (std::size_t r = 0; r < batch; ++r) {
                    const double* dyr = dy.data().data() + r * out;
                    const double* xr = xv.data().data() + r * in;
                    for (std::size_t o = 0; o < out; ++o) {
                      const double go = dyr[o];
                      if (db) db[o] += go;
                      if (go == 0.0) continue;
                      if (dx) {
                        double* dxr = dx + r * in;
                        const double* wr = wv.data().data() + o * in;
                        for (std::size_t i = 0; i < in; ++i) dxr[i] += go * wr[i];
                      }
                      if (dw) {
                        double* dwr = dw + o * in;
                        for (std::size_t i = 0; i < in; ++i) dwr[i] += go * xr[i];
                      }
                    }
                  }
                });
  }

  Var tanh(Var x) {
    Tensor y = value(x);
    for (auto& v : y.data()) v = std::tanh(v);
    return unary("tanh", x, std::move(y), [](double, double y, double g) { return g * (1.0 - y * y); });
  }

  Var relu(Var x) {
    Tensor y = value(x);
    for (auto& v : y.data()) v = v > 0.0 ? v : 0.0;
    return unary("relu", x, std::move(y), [](double xin, double, double g) { return xin > 0.0 ? g : 0.0; });
  }

  Var sigmoid(Var x) {
    Tensor y = value(x);
    for (auto& v : y.data()) v = detail::stable_sigmoid(v);
    return unary("sigmoid", x, std::move(y), [](double, double y, double g) { return g * y * (1.0 - y); });
  }

  // Row-wise softmax.
  Var softmax(Var x) {
    const Tensor& xv = value(x);
    Tensor y = Tensor::zeros_like(xv);
    for (std::size_t r = 0; r < xv.rows(); ++r) detail::softmax_row(xv.row(r), y.row(r));
    return push("softmax", std::move(y), {x.id}, requires_grad(x),
                [](const Graph& g, std::size_t self, std::vector<Tensor>& grads) {
                  const Node& n = g.nodes_[self];
                  const Tensor& y = n.value;
                  const Tensor& dy = grads[self];
                  Tensor& dx = g.slot(grads, n.inputs[0]);
                  for (std::size_t r = 0; r < y.rows(); ++r) {
                    auto yr = y.row(r);
                    auto gr = dy.row(r);
                    double dot = 0.0;
                    for (std::size_t j = 0; j < yr.size(); ++j) dot += gr[j] * yr[j];
                    auto dr = dx.row(r);
                    for (std::size_t j = 0; j < yr.size(); ++j) dr[j] += yr[j] * (gr[j] - dot);
                  }
                });
  }

  Var add(Var a, Var b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (!av.same_shape(bv)) {
      throw ShapeError("add shape mismatch: " + av.shape_string() + " vs " + bv.shape_string());
    }
    Tensor y = av;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
    return push("add", std::move(y), {a.id, b.id}, any_grad({a, b}),
                [](const Graph& g, std::size_t self, std::vector<Tensor>& grads) {
                  const Node& n = g.nodes_[self];
                  for (std::size_t in : n.inputs) {
                    if (!g.nodes_[in].requires_grad) continue;
                    auto dst = g.slot(grads, in).data();
                    auto src = grads[self].data();
                    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
                  }
                });
  }

  Var scale(Var x, double c) {
    Tensor y = value(x);
    for (auto& v : y.data()) v *= c;
    return unary("scale", x, std::move(y), [c](double, double, double g) { return c * g; });
  }

  Var sum(Var x) {
    double total = 0.0;
    for (double v : value(x).data()) total += v;
    return push("sum", Tensor::scalar(total), {x.id}, requires_grad(x),
                [](const Graph& g, std::size_t self, std::vector<Tensor>& grads) {
                  const Node& n = g.nodes_[self];
                  const double go = grads[self][0];
                  for (auto& d : g.slot(grads, n.inputs[0]).data()) d += go;
                });
  }

  // Columns [begin, end) of a matrix (or elements of a vector).
  Var slice_cols(Var x, std::size_t begin, std::size_t end) {
    const Tensor& xv = value(x);
    if (begin >= end || end > xv.cols()) {
      throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) +
                       ") out of range for " + xv.shape_string());
    }
    const std::size_t rows = xv.rows(), width = end - begin;
    Tensor y = xv.rank() == 1 ? Tensor({width}) : Tensor({rows, width});
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < width; ++c) y.at(r, c) = xv.at(r, begin + c);
    return push("slice", std::move(y), {x.id}, requires_grad(x),
                [begin, width, rows](const Graph& g, std::size_t self, std::vector<Tensor>& grads) {
                  const Node& n = g.nodes_[self];
                  Tensor& dx = g.slot(grads, n.inputs[0]);
                  const Tensor& dy = grads[self];
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < width; ++c) dx.at(r, begin + c) += dy.at(r, c);
                });
  }

  Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    const std::size_t rows = value(parts[0]).rows();
    const bool vec = value(parts[0]).rank() == 1;
    std::size_t width = 0;
    std::vector<std::size_t> ids;
    std::vector<Var> list(parts.begin(), parts.end());
    for (Var p : parts) {
      if (value(p).rows() != rows) throw ShapeError("concat row mismatch");
      width += value(p).cols();
      ids.push_back(p.id);
    }
    Tensor y = vec ? Tensor({width}) : Tensor({rows, width});
    std::size_t off = 0;
    for (Var p : parts) {
      const Tensor& pv = value(p);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < pv.cols(); ++c) y.at(r, off + c) = pv.at(r, c);
      off += pv.cols();
    }
    return push("concat", std::move(y), std::move(ids), any_grad(list),
                [rows](const Graph& g, std::size_t self, std::vector<Tensor>& grads) {
                  const Node& n = g.nodes_[self];
                  std::size_t off = 0;
                  for (std::size_t in : n.inputs) {
                    const std::size_t w = g.nodes_[in].value.cols();
                    if (g.nodes_[in].requires_grad) {
                      Tensor& dx = g.slot(grads, in);
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < w; ++c) dx.at(r, c) += grads[self].at(r, off + c);
                    }
                    off += w;
                  }
                });
  }

  // mu + exp(log_var / 2) * eps with eps ~ N(0, 1) drawn row-major from rng.
  Var reparameterize(Var mu, Var log_var, SeededRng& rng) {
    Tensor eps = Tensor::zeros_like(value(mu));
    for (auto& e : eps.data()) e = rng.normal();
    return reparameterize(mu, log_var, std::move(eps));
  }

  Var reparameterize(Var mu, Var log_var, Tensor eps) {
    const Tensor& m = value(mu);
    const Tensor& lv = value(log_var);
    if (!m.same_shape(lv) || !m.same_shape(eps)) {
      throw ShapeError("reparameterize shape mismatch: mu " + m.shape_string() + ", log_var " +
                       lv.shape_string() + ", eps " + eps.shape_string());
    }
    Tensor y = m;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += std::exp(0.5 * lv[i]) * eps[i];
    return push("reparameterize", std::move(y), {mu.id, log_var.id}, any_grad({mu, log_var}),
                [eps = std::move(eps)](const Graph& g, std::size_t self, std::vector<Tensor>& grads) {
                  const Node& n = g.nodes_[self];
                  const Tensor& dy = grads[self];
                  if (g.nodes_[n.inputs[0]].requires_grad) {
                    auto dm = g.slot(grads, n.inputs[0]).data();
                    for (std::size_t i = 0; i < dm.size(); ++i) dm[i] += dy[i];
                  }
                  if (g.nodes_[n.inputs[1]].requires_grad) {
                    const Tensor& lv = g.nodes_[n.inputs[1]].value;
                    auto dl = g.slot(grads, n.inputs[1]).data();
                    for (std::size_t i = 0; i < dl.size(); ++i)
                      dl[i] += dy[i] * eps[i] * 0.5 * std::exp(0.5 * lv[i]);
                  }
                });
  }

  // KL(N(mu, diag(exp(log_var))) || N(0, I)) summed over columns, averaged
  // over rows. A rank 1 input is one row.
  Var kl_diag_gaussian(Var mu, Var log_var) {
    const Tensor& m = value(mu);
    const Tensor& lv = value(log_var);
    if (!m.same_shape(lv)) {
      throw ShapeError("kl shape mismatch: mu " + m.shape_string() + ", log_var " + lv.shape_string());
    }
    const double rows = static_cast<double>(m.rows());
    double total = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) total += m[i] * m[i] + std::exp(lv[i]) - 1.0 - lv[i];
    return push("kl_diag_gaussian", Tensor::scalar(0.5 * total / rows), {mu.id, log_var.id},
                any_grad({mu, log_var}),
                [rows](const Graph& g, std::size_t self, std::vector<Tensor>& grads) {
                  const Node& n = g.nodes_[self];
                  const double go = grads[self][0] / rows;
                  const Tensor& m = g.nodes_[n.inputs[0]].value;
                  const Tensor& lv = g.nodes_[n.inputs[1]].value;
                  if (g.nodes_[n.inputs[0]].requires_grad) {
                    auto dm = g.slot(grads, n.inputs[0]).data();
                    for (std::size_t i = 0; i < dm.size(); ++i) dm[i] += go * m[i];
                  }
                  if (g.nodes_[n.inputs[1]].requires_grad) {
                    auto dl = g.slot(grads, n.inputs[1]).data();
                    for (std::size_t i = 0; i < dl.size(); ++i) dl[i] += go * 0.5 * (std::exp(lv[i]) - 1.0);
                  }
                });
  }

  Var loss(LossKind kind, Var prediction, const Tensor& target) {
    switch (kind) {
      case LossKind::mse: return mse(prediction, target);
      case LossKind::bce: return bce(prediction, target);
      case LossKind::softmax_ce: return softmax_ce(prediction, target);
    }
    throw Error("unknown loss kind");
  }

  // Mean squared error over all elements.
  Var mse(Var prediction, const Tensor& target) {
    const Tensor& p = value(prediction);
    check_same(p, target, "mse");
    const double n = static_cast<double>(p.size());
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) total += (p[i] - target[i]) * (p[i] - target[i]);
    return push("mse", Tensor::scalar(total / n), {prediction.id}, requires_grad(prediction),
                [target, n](const Graph& g, std::size_t self, std::vector<Tensor>& grads) {
                  const Node& nd = g.nodes_[self];
                  const Tensor& p = g.nodes_[nd.inputs[0]].value;
                  const double go = grads[self][0];
                  auto d = g.slot(grads, nd.inputs[0]).data();
                  for (std::size_t i = 0; i < d.size(); ++i) d[i] += go * 2.0 * (p[i] - target[i]) / n;
                });
  }

  // Mean binary cross-entropy; predictions must already be probabilities.
  Var bce(Var prediction, const Tensor& target) {
    const Tensor& p = value(prediction);
    check_same(p, target, "bce");
    const double n = static_cast<double>(p.size());
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (!(p[i] > 0.0 && p[i] < 1.0)) {
        throw Error("bce prediction " + std::to_string(p[i]) + " at index " + std::to_string(i) +
                    " is outside (0,1); apply sigmoid first");
      }
      if (target[i] < 0.0 || target[i] > 1.0) throw Error("bce target outside [0,1]");
      total -= target[i] * std::log(p[i]) + (1.0 - target[i]) * std::log1p(-p[i]);
    }
    return push("bce", Tensor::scalar(total / n), {prediction.id}, requires_grad(prediction),
                [target, n](const Graph& g, std::size_t self, std::vector<Tensor>& grads) {
                  const Node& nd = g.nodes_[self];
                  const Tensor& p = g.nodes_[nd.inputs[0]].value;
                  const double go = grads[self][0];
                  auto d = g.slot(grads, nd.inputs[0]).data();
                  for (std::size_t i = 0; i < d.size(); ++i)
                    d[i] += go * (p[i] - target[i]) / (p[i] * (1.0 - p[i])) / n;
                });
  }

  // Mean BCE of sigmoid(logits) against targets, evaluated in the stable
  // log-sum-exp form. Same value as bce(sigmoid(logits)) without saturation.
  Var bce_with_logits(Var logits, const Tensor& target) {
    const Tensor& l = value(logits);
    check_same(l, target, "bce_with_logits");
    const double n = static_cast<double>(l.size());
    double total = 0.0;
    for (std::size_t i = 0; i < l.size(); ++i) {
      total += std::max(l[i], 0.0) - l[i] * target[i] + std::log1p(std::exp(-std::abs(l[i])));
    }
    return push("bce_with_logits", Tensor::scalar(total / n), {logits.id}, requires_grad(logits),
                [target, n](const Graph& g, std::size_t self, std::vector<Tensor>& grads) {
                  const Node& nd = g.nodes_[self];
                  const Tensor& l = g.nodes_[nd.inputs[0]].value;
                  const double go = grads[self][0] / n;
                  auto d = g.slot(grads, nd.inputs[0]).data();
                  for (std::size_t i = 0; i < d.size(); ++i) d[i] += go * (detail::stable_sigmoid(l[i]) - target[i]);
                });
  }

  // Mean over rows of -log softmax(logits)[class]; target holds one class
  // index per row.
  Var softmax_ce(Var logits, const Tensor& target) {
    const Tensor& l = value(logits);
    const std::size_t rows = l.rows(), classes = l.cols();
    if (target.size() != rows) {
      throw ShapeError("softmax_ce expects one class index per row: logits " + l.shape_string() +
                       ", target " + target.shape_string());
    }
    std::vector<std::size_t> cls(rows);
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      const double t = target[r];
      if (t < 0.0 || t >= static_cast<double>(classes) || t != std::floor(t)) {
        throw Error("softmax_ce class index " + std::to_string(t) + " out of range");
      }
      cls[r] = static_cast<std::size_t>(t);
      total += detail::log_sum_exp(l.row(r)) - l.at(r, cls[r]);
    }
    const double n = static_cast<double>(rows);
    return push("softmax_ce", Tensor::scalar(total / n), {logits.id}, requires_grad(logits),
                [cls = std::move(cls), n](const Graph& g, std::size_t self, std::vector<Tensor>& grads) {
                  const Node& nd = g.nodes_[self];
                  const Tensor& l = g.nodes_[nd.inputs[0]].value;
                  const double go = grads[self][0] / n;
                  Tensor& d = g.slot(grads, nd.inputs[0]);
                  std::vector<double> p(l.cols());
                  for (std::size_t r = 0; r < l.rows(); ++r) {
                    detail::softmax_row(l.row(r), p);
                    auto dr = d.row(r);
                    for (std::size_t j = 0; j < p.size(); ++j) dr[j] += go * (p[j] - (j == cls[r] ? 1.0 : 0.0));
                  }
                });
  }

 private:
  using BackwardFn = std::function<void(const Graph&, std::size_t, std::vector<Tensor>&)>;

  struct Node {
    Tensor value;
    Tensor grad;
    std::string op;
    std::vector<std::size_t> inputs;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(std::string op, Tensor value, std::vector<std::size_t> inputs, bool needs_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Tensor(), std::move(op), std::move(inputs), needs_grad,
                          needs_grad ? std::move(fn) : BackwardFn()});
    return Var{nodes_.size() - 1};
  }

  template <class F>
  Var unary(std::string op, Var x, Tensor y, F dfn) {
    return push(std::move(op), std::move(y), {x.id}, requires_grad(x),
                [dfn](const Graph& g, std::size_t self, std::vector<Tensor>& grads) {
                  const Node& n = g.nodes_[self];
                  const Tensor& xv = g.nodes_[n.inputs[0]].value;
                  const Tensor& dy = grads[self];
                  auto dx = g.slot(grads, n.inputs[0]).data();
                  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dfn(xv[i], n.value[i], dy[i]);
                });
  }

  bool any_grad(std::initializer_list<Var> vs) const {
    return std::any_of(vs.begin(), vs.end(), [&](Var v) { return requires_grad(v); });
  }
  bool any_grad(const std::vector<Var>& vs) const {
    return std::any_of(vs.begin(), vs.end(), [&](Var v) { return requires_grad(v); });
  }

  Tensor& slot(std::vector<Tensor>& grads, std::size_t id) const {
    if (grads[id].empty()) grads[id] = Tensor::zeros_like(nodes_[id].value);
    return grads[id];
  }

  static void check_same(const Tensor& p, const Tensor& t, const char* what) {
    if (!p.same_shape(t) && p.size() != t.size()) {
      throw ShapeError(std::string(what) + " shape mismatch: prediction " + p.shape_string() +
                       ", target " + t.shape_string());
    }
  }

  std::vector<Node> nodes_;
};

}  // namespace levasa
