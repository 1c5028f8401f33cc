#pragma once

#include <functional>
#include <memory>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dm1/tensor.hpp"

namespace dm1 {

namespace detail {

struct Node {
  Tensor value;
  Tensor grad;  // empty-shaped until first accumulation
  bool requires_grad = false;
  bool has_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into parents.
  std::function<void(Node&)> backward;

  void add_grad(const Tensor& g) {
    if (!has_grad) {
      grad = g;
      has_grad = true;
    } else {
      accumulate(grad, g);
    }
  }
};

}  // namespace detail

// Reverse-mode value: a handle to a node of the computation graph built by
// the primitives below. Graphs are owned by their output handles; nothing is
// global, so independent graphs may be built on different threads.
class Var {
 public:
  Var() : node_(std::make_shared<detail::Node>()) {}

  // Constant: never receives a gradient.
  explicit Var(Tensor v) : node_(std::make_shared<detail::Node>()) { node_->value = std::move(v); }

  static Var leaf(Tensor v) {
    Var x(std::move(v));
    x.node_->requires_grad = true;
    return x;
  }

  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }

  // Gradient after backward(); zeros if none reached this node.
  Tensor grad() const { return node_->has_grad ? node_->grad : Tensor::zeros_like(node_->value); }

  const std::shared_ptr<detail::Node>& node() const { return node_; }

  // Builds a node from `value` with `parents`; `backward` maps the output
  // gradient to each parent's gradient (in parent order).
  template <class Backward>
  static Var make(Tensor value, std::vector<Var> parents, Backward backward) {
    Var out(std::move(value));
    bool any = false;
    for (const Var& p : parents) any = any || p.requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    for (const Var& p : parents) out.node_->parents.push_back(p.node_);
    out.node_->backward = [bw = std::move(backward)](detail::Node& self) {
      std::vector<Tensor> grads = bw(self.grad);
      for (std::size_t i = 0; i < self.parents.size(); ++i) {
        detail::Node& p = *self.parents[i];
        if (p.requires_grad && grads[i].size() != 0) p.add_grad(grads[i]);
      }
    };
    return out;
  }

 private:
  std::shared_ptr<detail::Node> node_;
};

inline const Tensor& value(const Var& x) { return x.value(); }

// Reverse sweep from a scalar root.
inline void backward(const Var& root) {
  if (root.value().size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(root.shape()));
  }
  if (!root.requires_grad()) return;
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  // Iterative post-order DFS.
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      detail::Node* p = n->parents[i++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root.node()->add_grad(Tensor(root.shape(), 1.0));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && n->has_grad) n->backward(*n);
  }
}

inline Var add(const Var& a, const Var& b) {
  Shape sa = a.shape(), sb = b.shape();
  return Var::make(add(a.value(), b.value()), {a, b}, [sa, sb](const Tensor& g) {
    return std::vector<Tensor>{reduce_to(g, sa), reduce_to(g, sb)};
  });
}

inline Var sub(const Var& a, const Var& b) {
  Shape sa = a.shape(), sb = b.shape();
  return Var::make(sub(a.value(), b.value()), {a, b}, [sa, sb](const Tensor& g) {
    return std::vector<Tensor>{reduce_to(g, sa), reduce_to(neg(g), sb)};
  });
}

inline Var mul(const Var& a, const Var& b) {
  return Var::make(mul(a.value(), b.value()), {a, b}, [a, b](const Tensor& g) {
    std::vector<Tensor> out(2, Tensor(Shape{0}));
    if (a.requires_grad()) out[0] = reduce_to(mul(g, b.value()), a.shape());
    if (b.requires_grad()) out[1] = reduce_to(mul(g, a.value()), b.shape());
    return out;
  });
}

inline Var div(const Var& a, const Var& b) {
  Tensor q = div(a.value(), b.value());
  return Var::make(q, {a, b}, [q, a, b](const Tensor& g) {
    Tensor ga = div(g, b.value());
    Tensor gb = neg(mul(ga, q));
    return std::vector<Tensor>{reduce_to(ga, a.shape()), reduce_to(gb, b.shape())};
  });
}

inline Var neg(const Var& x) {
  return Var::make(neg(x.value()), {x}, [](const Tensor& g) { return std::vector<Tensor>{neg(g)}; });
}

inline Var scale(const Var& x, double c) {
  return Var::make(scale(x.value(), c), {x}, [c](const Tensor& g) { return std::vector<Tensor>{scale(g, c)}; });
}

inline Var add_scalar(const Var& x, double c) {
  return Var::make(add_scalar(x.value(), c), {x}, [](const Tensor& g) { return std::vector<Tensor>{g}; });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator-(const Var& x) { return neg(x); }

inline Var transpose(const Var& x) {
  return Var::make(transpose(x.value()), {x}, [](const Tensor& g) { return std::vector<Tensor>{transpose(g)}; });
}

inline Var matmul(const Var& a, const Var& b) {
  return Var::make(matmul(a.value(), b.value()), {a, b}, [a, b](const Tensor& g) {
    std::vector<Tensor> out(2, Tensor(Shape{0}));
    if (a.requires_grad()) out[0] = matmul_nt(g, b.value()).reshaped(a.shape());
    if (b.requires_grad()) out[1] = matmul_tn(a.value(), g).reshaped(b.shape());
    return out;
  });
}

inline Var affine(const Var& x, const Var& w, const Var& b) {
  return Var::make(affine(x.value(), w.value(), b.value()), {x, w, b}, [x, w, b](const Tensor& g) {
    std::vector<Tensor> out(3, Tensor(Shape{0}));
    if (x.requires_grad()) out[0] = matmul_nt(g, w.value()).reshaped(x.shape());
    if (w.requires_grad()) out[1] = matmul_tn(x.value(), g);
    if (b.requires_grad()) out[2] = sum_axis(g, 0).reshaped(b.shape());
    return out;
  });
}

inline Var tanh(const Var& x) {
  Tensor y = tanh(x.value());
  return Var::make(y, {x}, [y](const Tensor& g) {
    return std::vector<Tensor>{mul(g, detail::unary(y, [](double v) { return 1.0 - v * v; }))};
  });
}

inline Var gelu(const Var& x) {
  return Var::make(gelu(x.value()), {x}, [x](const Tensor& g) {
    return std::vector<Tensor>{mul(g, gelu_derivative(x.value()))};
  });
}

inline Var sin(const Var& x) {
  return Var::make(sin(x.value()), {x}, [x](const Tensor& g) {
    return std::vector<Tensor>{mul(g, cos(x.value()))};
  });
}

inline Var exp(const Var& x) {
  Tensor y = exp(x.value());
  return Var::make(y, {x}, [y](const Tensor& g) { return std::vector<Tensor>{mul(g, y)}; });
}

inline Var log(const Var& x) {
  return Var::make(log(x.value()), {x}, [x](const Tensor& g) {
    return std::vector<Tensor>{div(g, x.value())};
  });
}

inline Var sqrt(const Var& x) {
  Tensor y = sqrt(x.value());
  return Var::make(y, {x}, [y](const Tensor& g) { return std::vector<Tensor>{div(g, scale(y, 2.0))}; });
}

inline Var maximum(const Var& x, double c) {
  return Var::make(maximum(x.value(), c), {x}, [x, c](const Tensor& g) {
    Tensor out = g;
    for (std::size_t i = 0; i < out.size(); ++i)
      if (!(x.value()[i] > c)) out[i] = 0.0;
    return std::vector<Tensor>{std::move(out)};
  });
}

inline Var square(const Var& x) {
  return Var::make(square(x.value()), {x}, [x](const Tensor& g) {
    return std::vector<Tensor>{mul(g, scale(x.value(), 2.0))};
  });
}

inline Var sum(const Var& x) {
  Shape s = x.shape();
  return Var::make(sum(x.value()), {x}, [s](const Tensor& g) { return std::vector<Tensor>{Tensor(s, g[0])}; });
}

inline Var mean(const Var& x) {
  Shape s = x.shape();
  const double n = static_cast<double>(x.value().size());
  return Var::make(mean(x.value()), {x}, [s, n](const Tensor& g) { return std::vector<Tensor>{Tensor(s, g[0] / n)}; });
}

inline Var sum_axis(const Var& x, int axis) {
  Shape s = x.shape();
  return Var::make(sum_axis(x.value(), axis), {x}, [s](const Tensor& g) {
    return std::vector<Tensor>{add(Tensor(s, 0.0), g)};
  });
}

inline Var concat_cols(std::span<const Var> parts) {
  std::vector<Tensor> vals;
  std::vector<std::size_t> widths;
  for (const Var& p : parts) {
    vals.push_back(p.value());
    widths.push_back(p.value().cols());
  }
  return Var::make(concat_cols(vals), std::vector<Var>(parts.begin(), parts.end()), [widths](const Tensor& g) {
    std::vector<Tensor> out;
    std::size_t off = 0;
    for (std::size_t w : widths) {
      out.push_back(slice_cols(g, off, off + w));
      off += w;
    }
    return out;
  });
}

inline Var slice_cols(const Var& x, std::size_t begin, std::size_t end) {
  Shape s = x.shape();
  return Var::make(slice_cols(x.value(), begin, end), {x}, [s, begin, end](const Tensor& g) {
    Tensor out(s, 0.0);
    const std::size_t R = out.rows(), C = out.cols(), W = end - begin;
    for (std::size_t i = 0; i < R; ++i)
      for (std::size_t j = 0; j < W; ++j) out[i * C + begin + j] = g[i * W + j];
    return std::vector<Tensor>{std::move(out)};
  });
}

inline Var pairwise_sqdist(const Var& h) {
  return Var::make(pairwise_sqdist(h.value()), {h}, [h](const Tensor& g) {
    return std::vector<Tensor>{pairwise_sqdist_backward(h.value(), g)};
  });
}

// Same value, no gradient path.
inline Var stop_gradient(const Var& x) { return Var(x.value()); }

// Gradient of a scalar-valued f with respect to each of `params`. f takes
// std::span<const Var> and returns a Var built from the primitives above.
template <class F>
std::vector<Tensor> grad(F&& f, std::span<const Tensor> params) {
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const Tensor& p : params) leaves.push_back(Var::leaf(p));
  Var out = f(std::span<const Var>(leaves));
  if (out.value().size() != 1) {
    throw ShapeError("grad: loss must be a scalar, got shape " + shape_str(out.shape()));
  }
  backward(out);
  std::vector<Tensor> grads;
  grads.reserve(leaves.size());
  for (const Var& l : leaves) grads.push_back(l.grad());
  return grads;
}

}  // namespace dm1
