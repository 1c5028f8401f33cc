#pragma once

#include <span>
#include <utility>
#include <vector>

#include "dm1/tensor.hpp"

namespace dm1 {

// Forward-mode value: a primal tensor and its tangent (directional
// derivative) of the same shape. Every primitive below propagates both.
class DualTensor {
 public:
  DualTensor() = default;

  // Constant: zero tangent.
  explicit DualTensor(Tensor primal) : primal_(std::move(primal)), tangent_(Tensor::zeros_like(primal_)) {}

  DualTensor(Tensor primal, Tensor tangent) : primal_(std::move(primal)), tangent_(std::move(tangent)) {
    if (primal_.shape() != tangent_.shape()) {
      throw ShapeError("dual: tangent " + shape_str(tangent_.shape()) + " does not match primal " +
                       shape_str(primal_.shape()));
    }
  }

  const Tensor& primal() const { return primal_; }
  const Tensor& tangent() const { return tangent_; }
  const Shape& shape() const { return primal_.shape(); }

 private:
  Tensor primal_;
  Tensor tangent_;
};

inline const Tensor& value(const DualTensor& x) { return x.primal(); }

namespace detail {
inline bool is_zero(const Tensor& t) {
  return std::all_of(t.values().begin(), t.values().end(), [](double v) { return v == 0.0; });
}
}  // namespace detail

inline DualTensor add(const DualTensor& a, const DualTensor& b) {
  Tensor p = add(a.primal(), b.primal());
  Tensor t = add(a.tangent(), b.tangent());
  return {std::move(p), std::move(t)};
}

inline DualTensor sub(const DualTensor& a, const DualTensor& b) {
  Tensor p = sub(a.primal(), b.primal());
  Tensor t = sub(a.tangent(), b.tangent());
  return {std::move(p), std::move(t)};
}

inline DualTensor mul(const DualTensor& a, const DualTensor& b) {
  Tensor p = mul(a.primal(), b.primal());
  Tensor t = add(mul(a.tangent(), b.primal()), mul(a.primal(), b.tangent()));
  return {std::move(p), std::move(t)};
}

inline DualTensor div(const DualTensor& a, const DualTensor& b) {
  Tensor p = div(a.primal(), b.primal());
  // (a/b)' = a'/b - (a/b) b'/b
  Tensor t = sub(div(a.tangent(), b.primal()), div(mul(p, b.tangent()), b.primal()));
  return {std::move(p), std::move(t)};
}

inline DualTensor neg(const DualTensor& x) { return {neg(x.primal()), neg(x.tangent())}; }
inline DualTensor scale(const DualTensor& x, double c) { return {scale(x.primal(), c), scale(x.tangent(), c)}; }
inline DualTensor add_scalar(const DualTensor& x, double c) { return {add_scalar(x.primal(), c), x.tangent()}; }

inline DualTensor operator+(const DualTensor& a, const DualTensor& b) { return add(a, b); }
inline DualTensor operator-(const DualTensor& a, const DualTensor& b) { return sub(a, b); }
inline DualTensor operator*(const DualTensor& a, const DualTensor& b) { return mul(a, b); }
inline DualTensor operator-(const DualTensor& x) { return neg(x); }

inline DualTensor transpose(const DualTensor& x) { return {transpose(x.primal()), transpose(x.tangent())}; }

inline DualTensor matmul(const DualTensor& a, const DualTensor& b) {
  Tensor p = matmul(a.primal(), b.primal());
  Tensor t = Tensor::zeros_like(p);
  if (!detail::is_zero(a.tangent())) accumulate(t, matmul(a.tangent(), b.primal()));
  if (!detail::is_zero(b.tangent())) accumulate(t, matmul(a.primal(), b.tangent()));
  return {std::move(p), std::move(t)};
}

inline DualTensor affine(const DualTensor& x, const DualTensor& w, const DualTensor& b) {
  Tensor p = affine(x.primal(), w.primal(), b.primal());
  Tensor t = Tensor::zeros_like(p);
  if (!detail::is_zero(x.tangent())) accumulate(t, matmul(x.tangent(), w.primal()));
  if (!detail::is_zero(w.tangent())) accumulate(t, matmul(x.primal(), w.tangent()));
  if (!detail::is_zero(b.tangent())) t = add(t, b.tangent().reshaped(Shape{1, b.tangent().size()}));
  return {std::move(p), std::move(t)};
}

inline DualTensor tanh(const DualTensor& x) {
  Tensor y = tanh(x.primal());
  Tensor d = detail::unary(y, [](double v) { return 1.0 - v * v; });
  return {std::move(y), mul(d, x.tangent())};
}

inline DualTensor gelu(const DualTensor& x) {
  return {gelu(x.primal()), mul(gelu_derivative(x.primal()), x.tangent())};
}

inline DualTensor sin(const DualTensor& x) { return {sin(x.primal()), mul(cos(x.primal()), x.tangent())}; }

inline DualTensor exp(const DualTensor& x) {
  Tensor y = exp(x.primal());
  Tensor t = mul(y, x.tangent());
  return {std::move(y), std::move(t)};
}

inline DualTensor log(const DualTensor& x) { return {log(x.primal()), div(x.tangent(), x.primal())}; }

inline DualTensor sqrt(const DualTensor& x) {
  Tensor y = sqrt(x.primal());
  Tensor t = div(x.tangent(), scale(y, 2.0));
  return {std::move(y), std::move(t)};
}

inline DualTensor maximum(const DualTensor& x, double c) {
  Tensor t = x.tangent();
  for (std::size_t i = 0; i < t.size(); ++i)
    if (!(x.primal()[i] > c)) t[i] = 0.0;
  return {maximum(x.primal(), c), std::move(t)};
}

inline DualTensor square(const DualTensor& x) {
  return {square(x.primal()), mul(scale(x.primal(), 2.0), x.tangent())};
}

inline DualTensor sum(const DualTensor& x) { return {sum(x.primal()), sum(x.tangent())}; }
inline DualTensor mean(const DualTensor& x) { return {mean(x.primal()), mean(x.tangent())}; }
inline DualTensor sum_axis(const DualTensor& x, int axis) {
  return {sum_axis(x.primal(), axis), sum_axis(x.tangent(), axis)};
}

inline DualTensor concat_cols(std::span<const DualTensor> parts) {
  std::vector<Tensor> p, t;
  p.reserve(parts.size());
  t.reserve(parts.size());
  for (const auto& x : parts) {
    p.push_back(x.primal());
    t.push_back(x.tangent());
  }
  return {concat_cols(p), concat_cols(t)};
}

inline DualTensor slice_cols(const DualTensor& x, std::size_t begin, std::size_t end) {
  return {slice_cols(x.primal(), begin, end), slice_cols(x.tangent(), begin, end)};
}

inline DualTensor pairwise_sqdist(const DualTensor& h) {
  return {pairwise_sqdist(h.primal()), pairwise_sqdist_tangent(h.primal(), h.tangent())};
}

// Forward mode has no tape to cut; detaching means dropping the tangent.
inline DualTensor stop_gradient(const DualTensor& x) { return DualTensor(x.primal()); }

// Jacobian-vector product of f at `inputs` along `tangents`, by forward
// propagation of dual values. f takes std::span<const DualTensor> and returns
// a DualTensor built from the primitives above. Returns (f(inputs), J.v).
template <class F>
std::pair<Tensor, Tensor> jvp(F&& f, std::span<const Tensor> inputs, std::span<const Tensor> tangents) {
  if (inputs.size() != tangents.size()) {
    throw ShapeError("jvp: " + std::to_string(inputs.size()) + " inputs but " + std::to_string(tangents.size()) +
                     " tangents");
  }
  std::vector<DualTensor> duals;
  duals.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].shape() != tangents[i].shape()) {
      throw ShapeError("jvp: tangent shape " + shape_str(tangents[i].shape()) + " does not match input shape " +
                           shape_str(inputs[i].shape()),
                       i);
    }
    duals.emplace_back(inputs[i], tangents[i]);
  }
  DualTensor out = f(std::span<const DualTensor>(duals));
  return {out.primal(), out.tangent()};
}

}  // namespace dm1
