#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "dm1/dispersive.hpp"
#include "dm1/flow.hpp"
#include "dm1/toy_data.hpp"
#include "dm1/velocity_net.hpp"

namespace dm1 {

// ---------------------------------------------------------------------------
// Sample quality
// ---------------------------------------------------------------------------

// Unbiased Gaussian-kernel MMD^2, k(x, y) = exp(-||x - y||^2 / (2 h^2)).
// Rows are points. Needs at least two points per set.
inline double mmd(const Tensor& x, const Tensor& y, double bandwidth) {
  if (x.rank() != 2 || y.rank() != 2) throw ShapeError("mmd: point sets must be matrices");
  if (x.rows() < 2 || y.rows() < 2) throw DomainError("mmd: each set needs at least 2 points");
  if (x.cols() != y.cols()) throw ShapeError("mmd: point dimensions differ");
  if (!(bandwidth > 0.0)) throw DomainError("mmd: bandwidth must be > 0");
  const std::size_t m = x.rows(), n = y.rows(), d = x.cols();
  const double inv = -1.0 / (2.0 * bandwidth * bandwidth);
  auto kernel_sum = [&](const Tensor& a, const Tensor& b, bool skip_diag) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) {
      for (std::size_t j = skip_diag ? i + 1 : 0; j < b.rows(); ++j) {
        double d2 = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
          const double diff = a[i * d + k] - b[j * d + k];
          d2 += diff * diff;
        }
        s += std::exp(inv * d2);
      }
    }
    return skip_diag ? 2.0 * s : s;
  };
  const double kxx = kernel_sum(x, x, true) / static_cast<double>(m * (m - 1));
  const double kyy = kernel_sum(y, y, true) / static_cast<double>(n * (n - 1));
  const double kxy = kernel_sum(x, y, false) / static_cast<double>(m * n);
  return kxx + kyy - 2.0 * kxy;
}

// Mode m of a bucket is hit when some sample lies within hit_radius
// (L-infinity) of its center; hit_radius defaults to 3 noise_std.
struct CoverageReport {
  std::vector<std::vector<std::size_t>> hits;  // [bucket][mode] sample counts
  std::vector<double> coverage;                // per bucket, fraction of modes hit

  double min_coverage() const { return coverage.empty() ? 0.0 : *std::min_element(coverage.begin(), coverage.end()); }
};

inline std::vector<std::size_t> mode_hits(const ToyTaskSpec& spec, std::size_t bucket, const Tensor& samples,
                                          double hit_radius) {
  const Tensor c = mode_centers(spec, bucket);
  const std::size_t n = spec.action_size();
  if (samples.cols() != n) throw ShapeError("mode_hits: sample width does not match the task");
  std::vector<std::size_t> hits(spec.modes_per_obs, 0);
  for (std::size_t i = 0; i < samples.rows(); ++i) {
    for (std::size_t m = 0; m < spec.modes_per_obs; ++m) {
      double dist = 0.0;
      for (std::size_t j = 0; j < n; ++j) dist = std::max(dist, std::abs(samples[i * n + j] - c[m * n + j]));
      if (dist <= hit_radius) ++hits[m];
    }
  }
  return hits;
}

// samples[b] holds draws conditioned on bucket b.
inline CoverageReport mode_coverage(const ToyTaskSpec& spec, const std::vector<Tensor>& samples,
                                    double hit_radius = -1.0) {
  if (samples.size() != spec.n_buckets) throw ShapeError("mode_coverage: need one sample set per bucket");
  if (hit_radius < 0.0) hit_radius = 3.0 * spec.noise_std;
  CoverageReport rep;
  for (std::size_t b = 0; b < spec.n_buckets; ++b) {
    rep.hits.push_back(mode_hits(spec, b, samples[b], hit_radius));
    const auto hit = std::count_if(rep.hits.back().begin(), rep.hits.back().end(), [](std::size_t h) { return h > 0; });
    rep.coverage.push_back(static_cast<double>(hit) / static_cast<double>(spec.modes_per_obs));
  }
  return rep;
}

struct QualityReport {
  std::vector<double> mmd_per_bucket;
  double mean_mmd = 0.0;
  CoverageReport coverage;
};

// MMD of each bucket's samples against an equal-sized ground-truth draw,
// plus mode coverage.
inline QualityReport evaluate_quality(const ToyTaskSpec& spec, const std::vector<Tensor>& samples, double bandwidth,
                                      std::uint64_t truth_seed) {
  QualityReport q;
  q.coverage = mode_coverage(spec, samples);
  for (std::size_t b = 0; b < spec.n_buckets; ++b) {
    const Tensor truth = sample_ground_truth(spec, b, samples[b].rows(), derive_seed(truth_seed, "truth") + b);
    q.mmd_per_bucket.push_back(mmd(samples[b], truth, bandwidth));
  }
  double s = 0.0;
  for (double v : q.mmd_per_bucket) s += v;
  q.mean_mmd = s / static_cast<double>(q.mmd_per_bucket.size());
  return q;
}

// ---------------------------------------------------------------------------
// Samplers as data
// ---------------------------------------------------------------------------

enum class SamplerKind { MeanFlow, Euler };

struct SamplerSpec {
  SamplerKind kind = SamplerKind::MeanFlow;
  std::size_t steps = 1;

  std::string name() const { return (kind == SamplerKind::MeanFlow ? "MF-" : "Euler-") + std::to_string(steps); }
};

inline SamplerSpec parse_sampler(const std::string& s) {
  auto dash = s.find('-');
  if (dash == std::string::npos) throw DomainError("sampler must look like MF-<k> or Euler-<K>: " + s);
  const std::string kind = s.substr(0, dash);
  const std::string digits = s.substr(dash + 1);
  std::size_t steps = 0;
  const auto res = std::from_chars(digits.data(), digits.data() + digits.size(), steps);
  if (digits.empty() || res.ec != std::errc{} || res.ptr != digits.data() + digits.size())
    throw DomainError("bad step count in sampler " + s);
  if (steps == 0) throw DomainError("sampler steps must be >= 1: " + s);
  if (kind == "MF") return {SamplerKind::MeanFlow, steps};
  if (kind == "Euler") return {SamplerKind::Euler, steps};
  throw DomainError("unknown sampler kind " + kind);
}

inline std::vector<SamplerSpec> default_bench_samplers() {
  return {{SamplerKind::MeanFlow, 1}, {SamplerKind::MeanFlow, 5}, {SamplerKind::Euler, 32}, {SamplerKind::Euler, 128}};
}

template <VelocityField F>
Tensor run_sampler(const F& field, const SamplerSpec& s, const Tensor& obs, std::size_t action_size, std::uint64_t seed,
                   const std::optional<ActionBounds>& bounds = std::nullopt) {
  if (s.kind == SamplerKind::Euler) return euler_sample(field, obs, action_size, s.steps, seed, bounds);
  return meanflow_sample_k(field, obs, action_size, s.steps, seed, bounds);
}

// ---------------------------------------------------------------------------
// Efficiency
// ---------------------------------------------------------------------------

struct EfficiencyReport {
  std::string method;
  std::size_t nfe = 0;  // network evaluations per sample
  double wall_ms_per_sample = 0.0;
  std::size_t samples = 0;
};

// Draws n samples per sampler as one batch, `repeats` times, and keeps the
// fastest wall time. NFE comes from an evaluation counter.
inline std::vector<EfficiencyReport> bench(const VelocityNet& net, const std::vector<SamplerSpec>& samplers,
                                           const Tensor& obs_row, std::size_t n, std::uint64_t seed,
                                           std::size_t repeats = 3) {
  if (n < 1) throw DomainError("bench: n must be >= 1");
  if (repeats < 1) throw DomainError("bench: repeats must be >= 1");
  Tensor obs = Tensor::matrix(n, obs_row.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < obs_row.size(); ++j) obs[i * obs_row.size() + j] = obs_row[j];
  std::vector<EfficiencyReport> out;
  for (const SamplerSpec& s : samplers) {
    CountingField counter(net);
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t rep = 0; rep < repeats; ++rep) {
      counter.reset();
      const auto t0 = std::chrono::steady_clock::now();
      const Tensor draw = run_sampler(counter, s, obs, net.dims().action_size(), seed);
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      best = std::min(best, ms);
      if (draw.rows() != n) throw Error("bench: sampler returned the wrong number of samples");
    }
    out.push_back({s.name(), counter.calls(), best / static_cast<double>(n), n});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Collapse
// ---------------------------------------------------------------------------

struct LayerDispersion {
  LayerTag tag = LayerTag::T;
  double mean_pairwise_distance = 0.0;
  double mean_pairwise_cosine = 0.0;
  double covariance_trace = 0.0;
  double covariance_offdiag_frobenius = 0.0;
};

struct DispersionReport {
  std::array<LayerDispersion, 3> layers;  // T, R, Cond
  std::size_t n_probe = 0;

  const LayerDispersion& at(LayerTag tag) const { return layers[static_cast<std::size_t>(tag)]; }
};

// Statistics over ordered pairs i != j. Rows with norm below kNormFloor
// count as cosine 1 with each other and 0 with anything else.
inline LayerDispersion layer_dispersion(LayerTag tag, const Tensor& h) {
  if (h.rank() != 2 || h.rows() < 2) throw DomainError("layer_dispersion: need at least 2 rows");
  const std::size_t B = h.rows(), d = h.cols();
  LayerDispersion s{tag};
  const Tensor D = pairwise_sqdist(h);
  std::vector<double> norms(B);
  for (std::size_t i = 0; i < B; ++i) {
    double q = 0.0;
    for (std::size_t k = 0; k < d; ++k) q += h[i * d + k] * h[i * d + k];
    norms[i] = std::sqrt(q);
  }
  double dist = 0.0, cosine = 0.0;
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t j = 0; j < B; ++j) {
      if (i == j) continue;
      dist += std::sqrt(std::max(D[i * B + j], 0.0));
      const bool zi = norms[i] < kNormFloor, zj = norms[j] < kNormFloor;
      double c = 0.0;
      if (zi && zj) {
        c = 1.0;
      } else if (!zi && !zj) {
        for (std::size_t k = 0; k < d; ++k) c += h[i * d + k] * h[j * d + k];
        c = std::clamp(c / (norms[i] * norms[j]), -1.0, 1.0);
      }
      cosine += c;
    }
  }
  const double pairs = static_cast<double>(B * (B - 1));
  s.mean_pairwise_distance = dist / pairs;
  s.mean_pairwise_cosine = cosine / pairs;
  const Tensor C = feature_covariance(h);
  double off = 0.0;
  for (std::size_t a = 0; a < d; ++a) {
    s.covariance_trace += C[a * d + a];
    for (std::size_t b = 0; b < d; ++b)
      if (a != b) off += C[a * d + b] * C[a * d + b];
  }
  s.covariance_offdiag_frobenius = std::sqrt(off);
  return s;
}

// Distinct observation rows in order of first appearance.
inline Tensor unique_observations(const Tensor& obs) {
  const std::size_t D = obs.cols();
  std::vector<std::vector<double>> seen;
  for (std::size_t i = 0; i < obs.rows(); ++i) {
    std::vector<double> row(obs.data().begin() + static_cast<std::ptrdiff_t>(i * D),
                            obs.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * D));
    if (std::find(seen.begin(), seen.end(), row) == seen.end()) seen.push_back(std::move(row));
  }
  Tensor out = Tensor::matrix(seen.size(), D);
  for (std::size_t i = 0; i < seen.size(); ++i) std::copy(seen[i].begin(), seen[i].end(), out.data().begin() + i * D);
  return out;
}

// n_probe distinct observations: a seeded choice among the dataset's
// distinct rows when there are enough, otherwise evenly spaced points on
// the polyline through them (sorted lexicographically).
inline Tensor probe_observations(const Dataset& data, std::size_t n_probe, std::uint64_t seed) {
  Tensor u = unique_observations(data.observations);
  const std::size_t U = u.rows(), D = u.cols();
  if (U < 2) throw DomainError("collapse_report: dataset has fewer than 2 distinct observations");
  Tensor out = Tensor::matrix(n_probe, D);
  if (U >= n_probe) {
    SplitMix64 rng(seed);
    std::vector<std::size_t> idx(U);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = U; i-- > 1;) std::swap(idx[i], idx[rng.next() % (i + 1)]);
    for (std::size_t i = 0; i < n_probe; ++i)
      for (std::size_t k = 0; k < D; ++k) out[i * D + k] = u[idx[i] * D + k];
    return out;
  }
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < U; ++i) rows.emplace_back(u.data().begin() + i * D, u.data().begin() + (i + 1) * D);
  std::sort(rows.begin(), rows.end());
  for (std::size_t i = 0; i < n_probe; ++i) {
    const double pos = static_cast<double>(i) * static_cast<double>(U - 1) / static_cast<double>(n_probe - 1);
    const std::size_t seg = std::min(static_cast<std::size_t>(pos), U - 2);
    const double w = pos - static_cast<double>(seg);
    for (std::size_t k = 0; k < D; ++k) out[i * D + k] = (1.0 - w) * rows[seg][k] + w * rows[seg + 1][k];
  }
  return out;
}

// One batched forward pass over n_probe distinct observations sharing a
// single noise draw z (from seed) at r = 0, t = 1. T and R features are
// therefore identical across probes; Cond carries the observation signal.
inline DispersionReport collapse_report(const VelocityNet& net, const Dataset& data, std::size_t n_probe,
                                        std::uint64_t seed) {
  if (n_probe < 2) throw DomainError("collapse_report: n_probe must be >= 2");
  const Tensor obs = probe_observations(data, n_probe, derive_seed(seed, "probe"));
  const std::size_t n = net.dims().action_size();
  const Tensor z1 = draw_noise(1, n, derive_seed(seed, "noise"));
  Tensor z = Tensor::matrix(n_probe, n);
  for (std::size_t i = 0; i < n_probe; ++i) std::copy(z1.data().begin(), z1.data().end(), z.data().begin() + i * n);
  const auto out = net.forward(z, Tensor::matrix(n_probe, 1, 0.0), Tensor::matrix(n_probe, 1, 1.0), obs);
  DispersionReport rep;
  rep.n_probe = n_probe;
  for (LayerTag tag : kLayerTags) {
    const auto k = static_cast<std::size_t>(tag);
    rep.layers[k] = layer_dispersion(tag, out.features[k]);
  }
  return rep;
}

}  // namespace dm1
