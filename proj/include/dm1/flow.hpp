#pragma once

#include <concepts>
#include <cstdint>
#include <optional>
#include <vector>

#include "dm1/rng.hpp"
#include "dm1/tensor.hpp"

namespace dm1 {

// A batch of points on the straight noise-to-data path. Every tensor is
// B x n (one flattened T_a x D_a trajectory per row) except r and t (B x 1).
//   z_t = (1 - t) eps + t a,   z_r = (1 - r) eps + r a,   0 <= r <= t <= 1.
struct Interpolant {
  Tensor z_t;
  Tensor z_r;
  Tensor t;
  Tensor r;
  Tensor eps;
  Tensor a;

  std::size_t batch() const { return a.rows(); }
};

// Per-dimension hard bounds, applied to every time step of a trajectory.
struct ActionBounds {
  std::vector<double> a_min;
  std::vector<double> a_max;

  ActionBounds() = default;
  ActionBounds(std::vector<double> lo, std::vector<double> hi) : a_min(std::move(lo)), a_max(std::move(hi)) {
    if (a_min.size() != a_max.size() || a_min.empty()) throw ShapeError("action bounds: size mismatch");
    for (std::size_t i = 0; i < a_min.size(); ++i)
      if (!(a_min[i] < a_max[i])) throw DomainError("action bounds: need a_min < a_max in dimension " + std::to_string(i));
  }

  static ActionBounds uniform(std::size_t D_a, double lo, double hi) {
    return ActionBounds(std::vector<double>(D_a, lo), std::vector<double>(D_a, hi));
  }
};

// Elementwise clamp. Columns of `a` cycle through the D_a bound dimensions,
// so a B x (T_a * D_a) batch and a single T_a x D_a trajectory both work.
inline Tensor clip_actions(const Tensor& a, const ActionBounds& bounds) {
  const std::size_t D = bounds.a_min.size();
  if (a.cols() % D != 0) throw ShapeError("clip_actions: width " + std::to_string(a.cols()) + " not a multiple of D_a");
  Tensor out = a;
  const std::size_t C = a.cols();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t d = (i % C) % D;
    out[i] = std::clamp(out[i], bounds.a_min[d], bounds.a_max[d]);
  }
  return out;
}

inline Interpolant make_interpolant(const Tensor& a, const Tensor& eps, const Tensor& r, const Tensor& t) {
  if (a.shape() != eps.shape()) {
    throw ShapeError("make_interpolant: a " + shape_str(a.shape()) + " vs eps " + shape_str(eps.shape()));
  }
  const std::size_t B = a.rows(), n = a.cols();
  if (r.size() != B || t.size() != B) throw ShapeError("make_interpolant: need one (r, t) per row");
  a.require_finite("action");
  eps.require_finite("noise");
  Interpolant in{Tensor(a.shape()), Tensor(a.shape()), t.reshaped(Shape{B, 1}), r.reshaped(Shape{B, 1}), eps, a};
  for (std::size_t i = 0; i < B; ++i) {
    const double ri = r[i], ti = t[i];
    if (!(0.0 <= ri && ri <= ti && ti <= 1.0)) {
      throw DomainError("make_interpolant: need 0 <= r <= t <= 1, got r=" + std::to_string(ri) +
                        " t=" + std::to_string(ti));
    }
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t k = i * n + j;
      in.z_t[k] = (1.0 - ti) * eps[k] + ti * a[k];
      in.z_r[k] = (1.0 - ri) * eps[k] + ri * a[k];
    }
  }
  return in;
}

// Single trajectory convenience: a and eps are one sample of any shape.
inline Interpolant make_interpolant(const Tensor& a, const Tensor& eps, double r, double t) {
  const Shape flat{1, a.size()};
  if (a.shape() != eps.shape()) {
    throw ShapeError("make_interpolant: a " + shape_str(a.shape()) + " vs eps " + shape_str(eps.shape()));
  }
  return make_interpolant(a.reshaped(flat), eps.reshaped(flat), Tensor::matrix(1, 1, r), Tensor::matrix(1, 1, t));
}

// Direction from noise to data, a - eps.
inline Tensor conditional_velocity(const Tensor& a, const Tensor& eps) {
  if (a.shape() != eps.shape()) throw ShapeError("conditional_velocity: shape mismatch");
  return sub(a, eps);
}

// Anything the samplers can query: velocity(z, r, t, obs) with z B x n,
// r and t B x 1, obs B x D_o.
template <class F>
concept VelocityField = requires(const F& f, const Tensor& x) {
  { f.velocity(x, x, x, x) } -> std::convertible_to<Tensor>;
};

// Wraps a field and counts network evaluations. `calls` is the NFE of one
// batched draw; `rows` totals evaluations over every sample in the batch.
template <VelocityField F>
class CountingField {
 public:
  explicit CountingField(const F& field) : field_(&field) {}

  Tensor velocity(const Tensor& z, const Tensor& r, const Tensor& t, const Tensor& obs) const {
    ++calls_;
    rows_ += z.rows();
    return field_->velocity(z, r, t, obs);
  }

  std::size_t calls() const { return calls_; }
  std::size_t rows() const { return rows_; }
  void reset() { calls_ = rows_ = 0; }

 private:
  const F* field_;
  mutable std::size_t calls_ = 0;
  mutable std::size_t rows_ = 0;
};

// B x n standard normals, row-major, from SplitMix64(seed) via Box-Muller.
inline Tensor draw_noise(std::size_t B, std::size_t n, std::uint64_t seed) {
  SplitMix64 rng(seed);
  Tensor z = Tensor::matrix(B, n);
  for (double& v : z.data()) v = rng.normal();
  return z;
}

namespace detail {

inline void require_obs_rows(const Tensor& obs) {
  if (obs.rank() != 2 || obs.rows() == 0) throw ShapeError("sampler: obs must be a non-empty B x D_o matrix");
}

inline Tensor finish(Tensor z, const std::optional<ActionBounds>& bounds) {
  return bounds ? clip_actions(z, *bounds) : z;
}

}  // namespace detail

// Forward Euler over K equal steps from t = 0 to 1, querying the field in
// instantaneous mode (r = t). One batched evaluation per step.
template <VelocityField F>
Tensor euler_sample(const F& field, const Tensor& obs, std::size_t action_size, std::size_t K, std::uint64_t seed,
                    const std::optional<ActionBounds>& bounds = std::nullopt) {
  if (K < 1) throw DomainError("euler_sample: K must be >= 1");
  detail::require_obs_rows(obs);
  const std::size_t B = obs.rows();
  Tensor z = draw_noise(B, action_size, seed);
  const double h = 1.0 / static_cast<double>(K);
  for (std::size_t k = 0; k < K; ++k) {
    const Tensor tcol = Tensor::matrix(B, 1, static_cast<double>(k) * h);
    const Tensor u = field.velocity(z, tcol, tcol, obs);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += h * u[i];
  }
  return detail::finish(std::move(z), bounds);
}

// a = z_0 + u(z_0, 0, 1, o): a single evaluation.
template <VelocityField F>
Tensor meanflow_sample_1(const F& field, const Tensor& obs, std::size_t action_size, std::uint64_t seed,
                         const std::optional<ActionBounds>& bounds = std::nullopt) {
  detail::require_obs_rows(obs);
  const std::size_t B = obs.rows();
  Tensor z = draw_noise(B, action_size, seed);
  const Tensor u = field.velocity(z, Tensor::matrix(B, 1, 0.0), Tensor::matrix(B, 1, 1.0), obs);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] += u[i];
  return detail::finish(std::move(z), bounds);
}

// k equal intervals; per interval z <- z + (t_{i+1} - t_i) u(z, t_i, t_{i+1}, o).
// With k = 1, dt is exactly 1.0, so the result matches meanflow_sample_1 bit for bit.
template <VelocityField F>
Tensor meanflow_sample_k(const F& field, const Tensor& obs, std::size_t action_size, std::size_t k,
                         std::uint64_t seed, const std::optional<ActionBounds>& bounds = std::nullopt) {
  if (k < 1) throw DomainError("meanflow_sample_k: k must be >= 1");
  detail::require_obs_rows(obs);
  const std::size_t B = obs.rows();
  Tensor z = draw_noise(B, action_size, seed);
  for (std::size_t i = 0; i < k; ++i) {
    const double t0 = static_cast<double>(i) / static_cast<double>(k);
    const double t1 = i + 1 == k ? 1.0 : static_cast<double>(i + 1) / static_cast<double>(k);
    const double dt = t1 - t0;
    const Tensor u = field.velocity(z, Tensor::matrix(B, 1, t0), Tensor::matrix(B, 1, t1), obs);
    for (std::size_t j = 0; j < z.size(); ++j) z[j] += dt * u[j];
  }
  return detail::finish(std::move(z), bounds);
}

}  // namespace dm1
