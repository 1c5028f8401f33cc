#pragma once

#include <array>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dm1/diff.hpp"
#include "dm1/velocity_net.hpp"

namespace dm1 {

enum class DispersiveVariant { InfoNceL2, InfoNceCos, Hinge, Covariance };

// Which InfoNCE-cosine formula to use.
//   Dispersive: the anchor's own similarity (1/tau) is the positive logit,
//     L = mean_i [ log sum_{k != i} exp(cos_ik / tau) ] - 1/tau.
//     Spreading angles lowers it; identical rows give log(B - 1).
//   Literal: the pairwise softmax form used for InfoNCE-L2, with cosine
//     similarity as the logit. Minimized whenever all similarities in a row
//     are equal, collapse included.
enum class CosineForm { Dispersive, Literal };

inline constexpr double kNormFloor = 1e-8;

struct DispersiveConfig {
  DispersiveVariant variant = DispersiveVariant::InfoNceCos;
  double tau = 0.5;
  double delta = 1.0;
  double lambda_cov = 1.0;
  double sigma_min = 0.1;
  double alpha_disp = 0.5;
  CosineForm cosine_form = CosineForm::Dispersive;

  void validate() const {
    if (!(tau > 0.0)) throw DomainError("dispersive: tau must be > 0");
    if (!(delta > 0.0)) throw DomainError("dispersive: delta must be > 0");
    if (!(lambda_cov > 0.0)) throw DomainError("dispersive: lambda_cov must be > 0");
    if (!(sigma_min > 0.0)) throw DomainError("dispersive: sigma_min must be > 0");
    if (!(alpha_disp >= 0.0)) throw DomainError("dispersive: alpha_disp must be >= 0");
  }
};

inline std::string_view to_string(DispersiveVariant v) {
  switch (v) {
    case DispersiveVariant::InfoNceL2: return "infonce_l2";
    case DispersiveVariant::InfoNceCos: return "infonce_cos";
    case DispersiveVariant::Hinge: return "hinge";
    case DispersiveVariant::Covariance: return "covariance";
  }
  return "?";
}

inline DispersiveVariant parse_variant(std::string_view s) {
  for (auto v : {DispersiveVariant::InfoNceL2, DispersiveVariant::InfoNceCos, DispersiveVariant::Hinge,
                 DispersiveVariant::Covariance}) {
    if (to_string(v) == s) return v;
  }
  throw DomainError("unknown dispersive variant: " + std::string(s));
}

namespace detail {

inline void require_batch(const Tensor& h, const char* op) {
  if (h.rank() != 2) throw ShapeError(std::string(op) + ": features must be a B x d matrix");
  if (h.rows() < 2) throw DomainError(std::string(op) + ": need a batch of at least 2, got " + std::to_string(h.rows()));
  if (h.cols() == 0) throw ShapeError(std::string(op) + ": feature width must be positive");
}

// Row-wise log sum_{k != i} exp(S_ik), as a B x 1 column. The per-row shift
// is a constant; the result does not depend on it.
template <EngineValue T>
T masked_logsumexp_rows(const T& logits) {
  const Tensor& s = value(logits);
  const std::size_t B = s.rows();
  Tensor shift = Tensor::matrix(B, 1);
  for (std::size_t i = 0; i < B; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < B; ++k)
      if (k != i) m = std::max(m, s[i * B + k]);
    shift[i] = m;
  }
  T c = constant<T>(shift);
  T e = mul(exp(sub(logits, c)), constant<T>(offdiag_mask(B)));
  return add(log(sum_axis(e, 1)), c);
}

// mean over ordered pairs (i, j != i) of -log softmax_{k != i}(S_i.)_j
template <EngineValue T>
T pairwise_softmax_nll(const T& logits) {
  const std::size_t B = value(logits).rows();
  const double pairs = static_cast<double>(B * (B - 1));
  T off = sum(mul(logits, constant<T>(offdiag_mask(B))));
  T lse = sum(masked_logsumexp_rows(logits));
  return scale(sub(scale(lse, static_cast<double>(B - 1)), off), 1.0 / pairs);
}

template <EngineValue T>
T cosine_logits(const T& h, double tau) {
  const std::size_t B = value(h).rows();
  T norms = sqrt(sum_axis(square(h), 1));
  for (std::size_t i = 0; i < B; ++i) {
    if (!(value(norms)[i] >= kNormFloor)) {
      throw DomainError("infonce_cos: row " + std::to_string(i) + " has norm below " + std::to_string(kNormFloor));
    }
  }
  T unit = div(h, norms);
  return scale(matmul(unit, transpose(unit)), 1.0 / tau);
}

}  // namespace detail

// InfoNCE over negative scaled squared distances, -||h_i - h_j||^2 / (2 tau^2).
template <EngineValue T>
T infonce_l2(const T& h, double tau) {
  detail::require_batch(value(h), "infonce_l2");
  if (!(tau > 0.0)) throw DomainError("infonce_l2: tau must be > 0");
  return detail::pairwise_softmax_nll(scale(pairwise_sqdist(h), -1.0 / (2.0 * tau * tau)));
}

template <EngineValue T>
T infonce_cos(const T& h, double tau, CosineForm form = CosineForm::Dispersive) {
  detail::require_batch(value(h), "infonce_cos");
  if (!(tau > 0.0)) throw DomainError("infonce_cos: tau must be > 0");
  T logits = detail::cosine_logits(h, tau);
  if (form == CosineForm::Literal) return detail::pairwise_softmax_nll(logits);
  const std::size_t B = value(h).rows();
  return add_scalar(scale(sum(detail::masked_logsumexp_rows(logits)), 1.0 / static_cast<double>(B)), -1.0 / tau);
}

// Distances carry a 1e-24 floor under the square root so coincident rows
// have a finite (zero) gradient; it shifts values by at most 1e-12.
inline constexpr double kHingeSqrtFloor = 1e-24;

template <EngineValue T>
T hinge(const T& h, double delta) {
  detail::require_batch(value(h), "hinge");
  if (!(delta > 0.0)) throw DomainError("hinge: delta must be > 0");
  const std::size_t B = value(h).rows();
  T dist = sqrt(add_scalar(pairwise_sqdist(h), kHingeSqrtFloor));
  T gap = maximum(add_scalar(neg(dist), delta), 0.0);
  return scale(sum(mul(gap, constant<T>(offdiag_mask(B)))), 1.0 / static_cast<double>(B * (B - 1)));
}

// Unbiased feature covariance (divide by B - 1), d x d.
template <EngineValue T>
T feature_covariance(const T& h) {
  const std::size_t B = value(h).rows();
  T centered = sub(h, scale(sum_axis(h, 0), 1.0 / static_cast<double>(B)));
  return scale(matmul(transpose(centered), centered), 1.0 / static_cast<double>(B - 1));
}

template <EngineValue T>
T covariance(const T& h, double lambda_cov, double sigma_min) {
  detail::require_batch(value(h), "covariance");
  if (!(lambda_cov > 0.0) || !(sigma_min > 0.0)) throw DomainError("covariance: lambda_cov and sigma_min must be > 0");
  const std::size_t d = value(h).cols();
  T c = feature_covariance(h);
  T off = sum(square(mul(c, constant<T>(offdiag_mask(d)))));
  T diag = sum_axis(mul(c, constant<T>(identity(d))), 1);
  T shortfall = sum(maximum(add_scalar(neg(diag), sigma_min), 0.0));
  return add(off, scale(shortfall, lambda_cov));
}

template <EngineValue T>
T dispersive_loss(const T& h, const DispersiveConfig& cfg) {
  switch (cfg.variant) {
    case DispersiveVariant::InfoNceL2: return infonce_l2(h, cfg.tau);
    case DispersiveVariant::InfoNceCos: return infonce_cos(h, cfg.tau, cfg.cosine_form);
    case DispersiveVariant::Hinge: return hinge(h, cfg.delta);
    case DispersiveVariant::Covariance: return covariance(h, cfg.lambda_cov, cfg.sigma_min);
  }
  throw DomainError("unknown dispersive variant");
}

template <EngineValue T>
struct DispersiveTotal {
  T total;
  std::array<T, 3> per_layer;  // T, R, Cond
};

// Sum of the configured loss over the T, R and Cond batches (in that order).
// The alpha_disp weight is applied by the caller.
template <EngineValue T>
DispersiveTotal<T> multi_layer_dispersive(const std::array<T, 3>& features, const DispersiveConfig& cfg) {
  std::array<T, 3> per{dispersive_loss(features[0], cfg), dispersive_loss(features[1], cfg),
                       dispersive_loss(features[2], cfg)};
  T total = add(add(per[0], per[1]), per[2]);
  return {std::move(total), std::move(per)};
}

// Tagged-list form: each of T, R and Cond must appear exactly once.
inline DispersiveTotal<Tensor> multi_layer_dispersive(std::span<const FeatureBatch> batches,
                                                      const DispersiveConfig& cfg) {
  std::array<const Tensor*, 3> slot{nullptr, nullptr, nullptr};
  for (const FeatureBatch& fb : batches) {
    auto& s = slot[static_cast<std::size_t>(fb.layer_tag)];
    if (s) throw DomainError("multi_layer_dispersive: duplicate layer tag " + std::string(to_string(fb.layer_tag)));
    s = &fb.features;
  }
  for (LayerTag tag : kLayerTags) {
    if (!slot[static_cast<std::size_t>(tag)]) {
      throw DomainError("multi_layer_dispersive: missing layer tag " + std::string(to_string(tag)));
    }
  }
  return multi_layer_dispersive<Tensor>({*slot[0], *slot[1], *slot[2]}, cfg);
}

}  // namespace dm1
