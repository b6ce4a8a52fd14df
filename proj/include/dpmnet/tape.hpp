/* Copyright 2026 The dpmnet Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License. */

#pragma once

// Minimal reverse-mode tape. Nodes are appended in evaluation order, so
// reverse creation order is a valid topological order for backward.
// One tape per image forward pass; tapes are never shared across images.

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "dpmnet/ops.hpp"
#include "dpmnet/tensor.hpp"

namespace dpmnet {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Tensor& grad() const;
  bool has_grad() const;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad) {
    return push(std::move(value), {}, nullptr, requires_grad);
  }
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records an op. The node requires a gradient iff any input does.
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
    bool rg = false;
    for (std::size_t in : inputs) rg = rg || node(in).requires_grad;
    return push(std::move(value), std::move(inputs), std::move(fn), rg);
  }

  const Tensor& value(std::size_t id) const { return node(id).value; }
  bool requires_grad(std::size_t id) const { return node(id).requires_grad; }
  bool has_grad(std::size_t id) const { return !node(id).grad.empty(); }
  const Tensor& grad(std::size_t id) const {
    const Node& n = node(id);
    if (n.grad.empty()) throw Error("no gradient recorded for node");
    return n.grad;
  }

  /// Gradient buffer of an input, allocated on first use.
  Tensor& grad_buffer(std::size_t id) {
    Node& n = node(id);
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  /// Reverse accumulation from a scalar root with seed 1.
  void backward(Var root) {
    if (node(root.id).value.size() != 1) {
      throw Error("backward: root must be scalar, got shape " +
                  shape_str(node(root.id).value.shape()));
    }
    Tensor seed(node(root.id).value.shape(), 1.0);
    backward_from({{root.id, std::move(seed)}});
  }

  /// Reverse accumulation seeded with explicit upstream gradients.
  void backward_from(std::vector<std::pair<std::size_t, Tensor>> seeds) {
    std::size_t top = 0;
    for (auto& [id, g] : seeds) {
      node(id).value.require_same_shape(g, "backward seed");
      if (!node(id).requires_grad) continue;
      grad_buffer(id) += g;
      top = std::max(top, id + 1);
    }
    for (std::size_t k = top; k-- > 0;) {
      Node& n = *nodes_[k];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      n.backward(*this, k);
    }
  }

  const std::vector<std::size_t>& inputs(std::size_t id) const {
    return node(id).inputs;
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var push(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn,
           bool requires_grad) {
    auto n = std::make_unique<Node>();
    n->value = std::move(value);
    n->inputs = std::move(inputs);
    n->backward = std::move(fn);
    n->requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  Node& node(std::size_t id) { return *nodes_.at(id); }
  const Node& node(std::size_t id) const { return *nodes_.at(id); }

  std::vector<std::unique_ptr<Node>> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(id); }
inline const Tensor& Var::grad() const { return tape->grad(id); }
inline bool Var::has_grad() const { return tape->has_grad(id); }

namespace ag {

inline Var correlate2d(Var x, Var w, int stride) {
  Tape& t = *x.tape;
  Tensor y = dpmnet::correlate2d(x.value(), w.value(), stride);
  return t.record(std::move(y), {x.id, w.id},
                  [xi = x.id, wi = w.id, stride](Tape& tp, std::size_t self) {
                    Tensor* dx = tp.requires_grad(xi) ? &tp.grad_buffer(xi) : nullptr;
                    Tensor* dw = tp.requires_grad(wi) ? &tp.grad_buffer(wi) : nullptr;
                    correlate2d_backward(tp.value(xi), tp.value(wi), stride,
                                         tp.grad(self), dx, dw);
                  });
}

inline Var add_bias(Var x, Var b) {
  Tape& t = *x.tape;
  Tensor y = dpmnet::add_bias(x.value(), b.value());
  return t.record(std::move(y), {x.id, b.id},
                  [xi = x.id, bi = b.id](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.grad(self);
                    if (tp.requires_grad(xi)) tp.grad_buffer(xi) += g;
                    if (tp.requires_grad(bi)) {
                      Tensor& db = tp.grad_buffer(bi);
                      const std::size_t plane = g.dim(1) * g.dim(2);
                      for (std::size_t c = 0; c < g.dim(0); ++c) {
                        double s = 0.0;
                        for (std::size_t p = 0; p < plane; ++p) s += g[c * plane + p];
                        db[c] += s;
                      }
                    }
                  });
}

/// y = x + c for a constant c.
inline Var shift(Var x, double c) {
  Tensor y = x.value();
  for (double& v : y.data()) v += c;
  return x.tape->record(std::move(y), {x.id}, [xi = x.id](Tape& tp, std::size_t self) {
    if (tp.requires_grad(xi)) tp.grad_buffer(xi) += tp.grad(self);
  });
}

inline Var relu(Var x) {
  Tape& t = *x.tape;
  Tensor y = dpmnet::relu(x.value());
  return t.record(std::move(y), {x.id},
                  [xi = x.id](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.grad(self);
                    const Tensor& xv = tp.value(xi);
                    Tensor& dx = tp.grad_buffer(xi);
                    for (std::size_t k = 0; k < g.size(); ++k) {
                      if (xv[k] > 0.0) dx[k] += g[k];
                    }
                  });
}

inline Var maxpool2d(Var x, int k, int stride) {
  Tape& t = *x.tape;
  PoolResult r = dpmnet::maxpool2d(x.value(), k, stride);
  auto argmax = std::make_shared<std::vector<std::size_t>>(std::move(r.argmax));
  return t.record(std::move(r.output), {x.id},
                  [xi = x.id, argmax](Tape& tp, std::size_t self) {
                    maxpool2d_backward(tp.grad(self), *argmax, tp.grad_buffer(xi));
                  });
}

/// Elementwise sum of equally shaped maps.
inline Var add_n(const std::vector<Var>& xs) {
  if (xs.empty()) throw Error("add_n: no inputs");
  Tape& t = *xs.front().tape;
  Tensor y = xs.front().value();
  std::vector<std::size_t> ids{xs.front().id};
  for (std::size_t k = 1; k < xs.size(); ++k) {
    if (xs[k].value().shape() != y.shape()) {
      throw ShapeError("add_n: misaligned extents " + shape_str(y.shape()) +
                       " vs " + shape_str(xs[k].value().shape()));
    }
    y += xs[k].value();
    ids.push_back(xs[k].id);
  }
  return t.record(std::move(y), ids, [](Tape& tp, std::size_t self) {
    for (std::size_t in : tp.inputs(self)) {
      if (tp.requires_grad(in)) tp.grad_buffer(in) += tp.grad(self);
    }
  });
}

/// Scalar inner product of two equally shaped tensors.
inline Var dot(Var a, Var b) {
  Tape& t = *a.tape;
  Tensor y = Tensor::scalar(dpmnet::dot(a.value(), b.value()));
  return t.record(std::move(y), {a.id, b.id},
                  [ai = a.id, bi = b.id](Tape& tp, std::size_t self) {
                    const double g = tp.grad(self)[0];
                    // read both values before touching buffers: a and b may alias
                    const Tensor av = tp.value(ai);
                    const Tensor bv = tp.value(bi);
                    if (tp.requires_grad(ai)) tp.grad_buffer(ai).axpy(g, bv);
                    if (tp.requires_grad(bi)) tp.grad_buffer(bi).axpy(g, av);
                  });
}

inline Var sum(Var x) {
  Tape& t = *x.tape;
  Tensor y = Tensor::scalar(x.value().sum());
  return t.record(std::move(y), {x.id}, [xi = x.id](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0];
    for (double& v : tp.grad_buffer(xi).data()) v += g;
  });
}

/// Scalar node whose value and input gradients were computed externally,
/// e.g. by a loss that treats discrete selections as fixed.
inline Var external_scalar(Tape& t, double value,
                           std::vector<std::pair<Var, Tensor>> grads) {
  std::vector<std::size_t> ids;
  auto saved = std::make_shared<std::vector<Tensor>>();
  for (auto& [v, g] : grads) {
    v.value().require_same_shape(g, "external_scalar");
    ids.push_back(v.id);
    saved->push_back(std::move(g));
  }
  return t.record(Tensor::scalar(value), ids,
                  [saved](Tape& tp, std::size_t self) {
                    const double g = tp.grad(self)[0];
                    const auto& ins = tp.inputs(self);
                    for (std::size_t k = 0; k < ins.size(); ++k) {
                      if (tp.requires_grad(ins[k])) {
                        tp.grad_buffer(ins[k]).axpy(g, (*saved)[k]);
                      }
                    }
                  });
}

}  // namespace ag
}  // namespace dpmnet
