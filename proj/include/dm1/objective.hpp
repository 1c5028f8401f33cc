#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

#include "dm1/diff.hpp"
#include "dm1/dispersive.hpp"
#include "dm1/flow.hpp"
#include "dm1/toy_data.hpp"
#include "dm1/velocity_net.hpp"

namespace dm1 {

// ---------------------------------------------------------------------------
// Time pairs
// ---------------------------------------------------------------------------

struct TimePairConfig {
  double mu = -0.4;
  double sigma = 1.0;
  double rho = 0.5;  // probability of forcing r = t

  void validate() const {
    if (!std::isfinite(mu)) throw DomainError("time: mu must be finite");
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw DomainError("time: sigma must be > 0");
    if (!(rho >= 0.0 && rho <= 1.0)) throw DomainError("time: rho must lie in [0, 1]");
  }
};

// Logit-normal pairs. Each draw consumes two normals (t1, t2) and one
// uniform u, in that order, whatever the branch: r = min, t = max, then
// r = t if u < rho.
class TimePairSampler {
 public:
  TimePairSampler(TimePairConfig cfg, std::uint64_t rng_seed) : cfg_(cfg), rng_(rng_seed) { cfg_.validate(); }

  std::pair<double, double> sample() {
    const double t1 = sigmoid(rng_.normal(cfg_.mu, cfg_.sigma));
    const double t2 = sigmoid(rng_.normal(cfg_.mu, cfg_.sigma));
    const double u = rng_.uniform();
    const double t = std::max(t1, t2);
    const double r = u < cfg_.rho ? t : std::min(t1, t2);
    return {r, t};
  }

  const TimePairConfig& config() const { return cfg_; }

  static double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

 private:
  TimePairConfig cfg_;
  SplitMix64 rng_;
};

inline std::pair<double, double> sample_time_pair(TimePairSampler& s) { return s.sample(); }

// ---------------------------------------------------------------------------
// Targets
// ---------------------------------------------------------------------------

// Where the network is anchored on the path when regressing u(., r, t).
//   End:   u(z_t, r, t) ~ v - (t - r) d/dt u, tangent (v, 0, 1) over (z_t, r, t).
//   Start: u(z_r, r, t) ~ v + (t - r) d/dr u, tangent (v, 1, 0) over (z_r, r, t).
// One-step sampling evaluates u(z_0, 0, 1) on pure noise, i.e. at the start
// of the interval, which only Start trains for.
enum class TimeAnchor { Start, End };

enum class TrainingMode { MeanFlow, Rectified };

inline std::string_view to_string(TimeAnchor a) { return a == TimeAnchor::Start ? "start" : "end"; }
inline std::string_view to_string(TrainingMode m) { return m == TrainingMode::MeanFlow ? "meanflow" : "rectified"; }

inline TimeAnchor parse_anchor(std::string_view s) {
  if (s == "start") return TimeAnchor::Start;
  if (s == "end") return TimeAnchor::End;
  throw DomainError("unknown time anchor: " + std::string(s));
}

inline TrainingMode parse_mode(std::string_view s) {
  if (s == "meanflow") return TrainingMode::MeanFlow;
  if (s == "rectified") return TrainingMode::Rectified;
  throw DomainError("unknown training mode: " + std::string(s));
}

struct ObjectiveConfig {
  TrainingMode mode = TrainingMode::MeanFlow;
  TimeAnchor anchor = TimeAnchor::Start;
  DispersiveConfig disp;
};

// Point at which the prediction pass evaluates the net.
inline const Tensor& anchor_point(const Interpolant& in, TimeAnchor anchor) {
  return anchor == TimeAnchor::End ? in.z_t : in.z_r;
}

// The d/dt (End) or d/dr (Start) total derivative of u along the path,
// by one forward-mode pass. Returns (u, du).
inline std::pair<Tensor, Tensor> path_derivative(const VelocityNet& net, const Interpolant& in, const Tensor& obs,
                                                 TimeAnchor anchor) {
  const std::size_t B = in.batch();
  const Tensor v = conditional_velocity(in.a, in.eps);
  const Tensor one = Tensor::matrix(B, 1, 1.0), zero = Tensor::matrix(B, 1, 0.0);
  const std::vector<Tensor> inputs{anchor_point(in, anchor), in.r, in.t};
  const std::vector<Tensor> tangents =
      anchor == TimeAnchor::End ? std::vector<Tensor>{v, zero, one} : std::vector<Tensor>{v, one, zero};
  const auto params = net.lift_params<DualTensor>();
  const DualTensor o(obs);
  return jvp(
      [&](std::span<const DualTensor> x) {
        return net.forward_with<DualTensor>(params, x[0], x[1], x[2], o).u;
      },
      inputs, tangents);
}

// Regression target for u, treated as a constant (no gradient path).
// Rows with r == t get exactly a - eps.
inline Tensor mf_target(const VelocityNet& net, const Interpolant& in, const Tensor& obs,
                        TimeAnchor anchor = TimeAnchor::Start) {
  net.validate_inputs(anchor_point(in, anchor), in.r, in.t, obs);
  Tensor target = conditional_velocity(in.a, in.eps);
  const std::size_t B = in.batch(), n = target.cols();
  bool any_gap = false;
  for (std::size_t i = 0; i < B; ++i) any_gap = any_gap || in.t[i] != in.r[i];
  if (!any_gap) return target;
  const Tensor du = path_derivative(net, in, obs, anchor).second;
  const double sign = anchor == TimeAnchor::End ? -1.0 : 1.0;
  for (std::size_t i = 0; i < B; ++i) {
    const double gap = in.t[i] - in.r[i];
    if (gap == 0.0) continue;
    for (std::size_t j = 0; j < n; ++j) target[i * n + j] += sign * gap * du[i * n + j];
  }
  return target;
}

inline Tensor flow_target(const VelocityNet& net, const Interpolant& in, const Tensor& obs,
                          const ObjectiveConfig& cfg) {
  if (cfg.mode == TrainingMode::Rectified) return conditional_velocity(in.a, in.eps);
  return mf_target(net, in, obs, cfg.anchor);
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

struct LossBreakdown {
  double mf_loss = 0.0;
  double disp_T = 0.0;
  double disp_R = 0.0;
  double disp_Cond = 0.0;
  double total = 0.0;
  double alpha_disp = 0.0;
};

template <EngineValue T>
struct LossTerms {
  T mf;
  std::array<T, 3> features;
  std::optional<DispersiveTotal<T>> disp;  // present when alpha_disp > 0
  T total;
};

// Prediction pass plus loss assembly over any engine value type.
template <EngineValue T>
LossTerms<T> loss_terms(const VelocityNet& net, std::span<const T> params, const Tensor& z, const Interpolant& in,
                        const Tensor& obs, const Tensor& target, const DispersiveConfig& cfg) {
  const std::size_t B = in.batch();
  NetOutput<T> out = net.forward_with<T>(params, constant<T>(z), constant<T>(in.r), constant<T>(in.t), constant<T>(obs));
  T err = sub(out.u, constant<T>(target));
  T mf = scale(sum(square(err)), 1.0 / static_cast<double>(B));
  LossTerms<T> terms{mf, out.features, std::nullopt, mf};
  if (cfg.alpha_disp > 0.0) {
    terms.disp = multi_layer_dispersive(out.features, cfg);
    terms.total = add(mf, scale(terms.disp->total, cfg.alpha_disp));
  }
  return terms;
}

namespace detail {

inline void require_batch(const VelocityNet& net, const Interpolant& in, const Tensor& obs,
                          const DispersiveConfig& cfg) {
  if (in.batch() == 0 || in.a.size() == 0) throw DomainError("loss: empty batch");
  if (cfg.alpha_disp > 0.0 && in.batch() < 2) {
    throw DomainError("loss: dispersive term needs a batch of at least 2, got " + std::to_string(in.batch()));
  }
  cfg.validate();
  net.validate_inputs(in.z_t, in.r, in.t, obs);
}

template <EngineValue T>
LossBreakdown breakdown(const LossTerms<T>& terms, const DispersiveConfig& cfg) {
  LossBreakdown b;
  b.mf_loss = value(terms.mf).item();
  b.alpha_disp = cfg.alpha_disp;
  if (terms.disp) {
    b.disp_T = value(terms.disp->per_layer[0]).item();
    b.disp_R = value(terms.disp->per_layer[1]).item();
    b.disp_Cond = value(terms.disp->per_layer[2]).item();
  } else if (value(terms.features[0]).rows() >= 2) {
    // Monitoring only: the unweighted terms are still reported at alpha = 0.
    try {
      const std::array<Tensor, 3> f{value(terms.features[0]), value(terms.features[1]), value(terms.features[2])};
      const auto d = multi_layer_dispersive<Tensor>(f, cfg);
      b.disp_T = d.per_layer[0].item();
      b.disp_R = d.per_layer[1].item();
      b.disp_Cond = d.per_layer[2].item();
    } catch (const DomainError&) {
      b.disp_T = b.disp_R = b.disp_Cond = std::numeric_limits<double>::quiet_NaN();
    }
  }
  b.total = value(terms.total).item();
  return b;
}

}  // namespace detail

// Mean over the batch of ||u - sg(target)||^2, with the tagged feature
// batches of the same (prediction) pass.
inline std::pair<double, std::vector<FeatureBatch>> mf_loss(const VelocityNet& net, const Interpolant& in,
                                                            const Tensor& obs, const ObjectiveConfig& cfg = {}) {
  DispersiveConfig plain = cfg.disp;
  plain.alpha_disp = 0.0;
  detail::require_batch(net, in, obs, plain);
  const Tensor target = flow_target(net, in, obs, cfg);
  const auto terms = loss_terms<Tensor>(net, net.params(), anchor_point(in, cfg.anchor), in, obs, target, plain);
  std::vector<FeatureBatch> fb;
  for (LayerTag tag : kLayerTags) fb.push_back({tag, terms.features[static_cast<std::size_t>(tag)]});
  return {terms.mf.item(), std::move(fb)};
}

inline LossBreakdown total_loss(const VelocityNet& net, const Interpolant& in, const Tensor& obs,
                                const ObjectiveConfig& cfg) {
  detail::require_batch(net, in, obs, cfg.disp);
  const Tensor target = flow_target(net, in, obs, cfg);
  const auto terms = loss_terms<Tensor>(net, net.params(), anchor_point(in, cfg.anchor), in, obs, target, cfg.disp);
  return detail::breakdown(terms, cfg.disp);
}

struct LossAndGrad {
  LossBreakdown loss;
  std::vector<Tensor> grads;  // registry order
};

inline LossAndGrad loss_and_grad(const VelocityNet& net, const Interpolant& in, const Tensor& obs,
                                 const ObjectiveConfig& cfg) {
  detail::require_batch(net, in, obs, cfg.disp);
  const Tensor target = flow_target(net, in, obs, cfg);
  const std::vector<Var> params = net.lift_params<Var>();
  const auto terms = loss_terms<Var>(net, params, anchor_point(in, cfg.anchor), in, obs, target, cfg.disp);
  LossAndGrad out{detail::breakdown(terms, cfg.disp), {}};
  backward(terms.total);
  out.grads.reserve(params.size());
  for (const Var& p : params) out.grads.push_back(p.grad());
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool cosine_decay = false;  // lr * (1 + cos(pi * step / total_steps)) / 2

  void validate() const {
    if (!(lr > 0.0)) throw DomainError("opt: lr must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw DomainError("opt: betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw DomainError("opt: eps must be > 0");
  }
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
    if (params.size() != grads.size()) throw ShapeError("adam: parameter and gradient counts differ");
    if (m_.empty()) {
      for (const Tensor& p : params) {
        m_.push_back(Tensor::zeros_like(p));
        v_.push_back(Tensor::zeros_like(p));
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto p = params[k].data();
      auto m = m_[k].data();
      auto v = v_[k].data();
      const auto g = grads[k].data();
      if (g.size() != p.size()) throw ShapeError("adam: gradient shape mismatch", k);
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        p[i] -= cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
      }
    }
  }

  std::size_t steps() const { return t_; }
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  AdamConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::size_t epochs = 1;
  std::size_t steps = 0;  // if nonzero, run exactly this many steps (reshuffling per epoch); epochs is ignored
  std::size_t batch_size = 64;
  std::size_t log_every = 1;
  AdamConfig opt;
  TimePairConfig time;
  ObjectiveConfig objective;
  std::uint64_t seed = 0;  // root seed; noise, time pairs and shuffling derive from it
  std::optional<ActionBounds> bounds;

  void validate() const {
    if (batch_size == 0) throw DomainError("train: batch_size must be positive");
    if (epochs == 0 && steps == 0) throw DomainError("train: need epochs > 0 or steps > 0");
    if (log_every == 0) throw DomainError("train: log_every must be positive");
    opt.validate();
    time.validate();
    objective.disp.validate();
  }
};

struct StepRecord {
  std::size_t step = 0;
  LossBreakdown loss;
  double wall_ms = 0.0;  // elapsed since training began
};

struct TrainResult {
  VelocityNet net;
  std::vector<StepRecord> log;
};

// Fisher-Yates with j = next() % (i + 1), i from N-1 down to 1.
inline std::vector<std::size_t> shuffled_indices(std::size_t N, SplitMix64& rng) {
  std::vector<std::size_t> idx(N);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = N; i-- > 1;) std::swap(idx[i], idx[rng.next() % (i + 1)]);
  return idx;
}

using StepCallback = std::function<void(const StepRecord&)>;

// Per step: gather a shuffled batch, draw eps (row-major) and one (r, t) per
// row, build the interpolant, regress, Adam update. Batches of batch_size are
// cut from each epoch's permutation; a short tail is dropped unless the
// dataset is smaller than one batch. Deterministic given config and net.
inline TrainResult train(VelocityNet net, const Dataset& data, const TrainConfig& cfg,
                         const StepCallback& on_step = {}) {
  cfg.validate();
  const std::size_t N = data.size(), n = net.dims().action_size(), D_o = net.dims().D_o;
  if (N == 0) throw DomainError("train: dataset is empty");
  if (data.actions.cols() != n) throw ShapeError("train: dataset action width does not match the network");
  if (data.observations.cols() != D_o || data.observations.rows() != N)
    throw ShapeError("train: dataset observation shape does not match the network");
  const Tensor actions = cfg.bounds ? clip_actions(data.actions, *cfg.bounds) : data.actions;
  actions.require_finite("dataset actions");
  data.observations.require_finite("dataset observations");

  const bool rectified = cfg.objective.mode == TrainingMode::Rectified;
  TimePairConfig time_cfg = cfg.time;
  if (rectified) time_cfg.rho = 1.0;
  TimePairSampler times(time_cfg, derive_seed(cfg.seed, "timepairs"));
  SplitMix64 noise(derive_seed(cfg.seed, "noise"));
  // Under the "data" subsystem, but distinct from the generator's own seed.
  SplitMix64 shuffle(derive_seed(derive_seed(cfg.seed, "data"), "shuffle"));
  Adam adam(cfg.opt);

  const std::size_t B = std::min(cfg.batch_size, N);
  const std::size_t per_epoch = N / B;
  const std::size_t total_steps = cfg.steps > 0 ? cfg.steps : cfg.epochs * per_epoch;

  TrainResult result{std::move(net), {}};
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::size_t> order;
  for (std::size_t step = 0; step < total_steps; ++step) {
    const std::size_t slot = step % per_epoch;
    if (slot == 0) order = shuffled_indices(N, shuffle);

    Tensor a = Tensor::matrix(B, n), obs = Tensor::matrix(B, D_o), eps = Tensor::matrix(B, n);
    Tensor r = Tensor::matrix(B, 1), t = Tensor::matrix(B, 1);
    for (std::size_t i = 0; i < B; ++i) {
      const std::size_t src = order[slot * B + i];
      for (std::size_t j = 0; j < n; ++j) a[i * n + j] = actions[src * n + j];
      for (std::size_t j = 0; j < D_o; ++j) obs[i * D_o + j] = data.observations[src * D_o + j];
    }
    for (double& e : eps.data()) e = noise.normal();
    for (std::size_t i = 0; i < B; ++i) std::tie(r[i], t[i]) = times.sample();

    if (cfg.opt.cosine_decay) {
      const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
      adam.set_lr(cfg.opt.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac)));
    }
    const Interpolant in = make_interpolant(a, eps, r, t);
    LossAndGrad lg = loss_and_grad(result.net, in, obs, cfg.objective);
    if (!std::isfinite(lg.loss.total)) throw DivergenceError(step);
    for (const Tensor& g : lg.grads)
      if (!g.all_finite()) throw DivergenceError(step);
    adam.step(result.net.mutable_params(), lg.grads);

    if (step % cfg.log_every == 0 || step + 1 == total_steps) {
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      StepRecord rec{step, lg.loss, ms};
      if (on_step) on_step(rec);
      result.log.push_back(rec);
    }
  }
  return result;
}

inline std::string metrics_csv_header() { return "step,mf_loss,disp_T,disp_R,disp_Cond,total,wall_ms"; }

}  // namespace dm1
