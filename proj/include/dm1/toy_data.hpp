#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "dm1/binary_io.hpp"
#include "dm1/rng.hpp"
#include "dm1/tensor.hpp"

namespace dm1 {

// Conditional multimodal trajectories. Each sample picks an observation
// bucket b (angle theta_b = pi b / n_buckets) and a mode m uniformly; the
// mode's unit direction is rotated by theta_b + 2 pi m / modes_per_obs and
// the trajectory ramps linearly toward mode_separation along it:
//   a_k = mode_separation * e_m(theta_b) * (k + 1) / T_a + noise_std * N(0, I).
struct ToyTaskSpec {
  std::string name = "orient-grasp-2";
  std::size_t D_o = 1;
  std::size_t T_a = 4;
  std::size_t D_a = 2;
  std::size_t modes_per_obs = 2;
  std::size_t n_buckets = 4;
  double mode_separation = 1.0;
  double noise_std = 0.05;
  std::size_t n_samples = 4096;
  std::uint64_t seed = 0;

  std::size_t action_size() const { return T_a * D_a; }

  void validate() const {
    if (modes_per_obs < 2) throw DomainError("task: modes_per_obs must be >= 2");
    if (D_o == 0 || T_a == 0) throw DomainError("task: D_o and T_a must be positive");
    if (D_a < 2) throw DomainError("task: D_a must be >= 2 (modes are rotated in the first two action dimensions)");
    if (n_buckets == 0) throw DomainError("task: n_buckets must be positive");
    if (n_samples == 0) throw DomainError("task: n_samples must be positive");
    if (!(mode_separation > 0.0) || !std::isfinite(mode_separation))
      throw DomainError("task: mode_separation must be positive");
    if (!(noise_std > 0.0) || !std::isfinite(noise_std)) throw DomainError("task: noise_std must be positive");
  }

  friend bool operator==(const ToyTaskSpec&, const ToyTaskSpec&) = default;
};

struct Dataset {
  ToyTaskSpec spec;
  Tensor observations;  // N x D_o
  Tensor actions;       // N x (T_a * D_a), each row a row-major T_a x D_a trajectory

  std::size_t size() const { return actions.rows(); }

  std::uint64_t checksum() const { return dm1::checksum(actions.data(), dm1::checksum(observations.data())); }
};

inline double bucket_angle(const ToyTaskSpec& spec, std::size_t bucket) {
  return std::numbers::pi * static_cast<double>(bucket) / static_cast<double>(spec.n_buckets);
}

// o_0 = theta; further coordinates are harmonics cos(theta), sin(theta),
// cos(2 theta), ... so every D_o separates the buckets.
inline Tensor bucket_observation(const ToyTaskSpec& spec, std::size_t bucket) {
  const double theta = bucket_angle(spec, bucket);
  Tensor o = Tensor::matrix(1, spec.D_o);
  o[0] = theta;
  for (std::size_t j = 1; j < spec.D_o; ++j) {
    const double k = static_cast<double>((j + 1) / 2);
    o[j] = (j % 2 == 1) ? std::cos(k * theta) : std::sin(k * theta);
  }
  return o;
}

// modes_per_obs x (T_a * D_a) noise-free trajectories for one bucket.
inline Tensor mode_centers(const ToyTaskSpec& spec, std::size_t bucket) {
  const double theta = bucket_angle(spec, bucket);
  const std::size_t M = spec.modes_per_obs, n = spec.action_size();
  Tensor c = Tensor::matrix(M, n);
  for (std::size_t m = 0; m < M; ++m) {
    const double phi = theta + 2.0 * std::numbers::pi * static_cast<double>(m) / static_cast<double>(M);
    for (std::size_t k = 0; k < spec.T_a; ++k) {
      const double ramp = spec.mode_separation * static_cast<double>(k + 1) / static_cast<double>(spec.T_a);
      c[m * n + k * spec.D_a + 0] = ramp * std::cos(phi);
      c[m * n + k * spec.D_a + 1] = ramp * std::sin(phi);
    }
  }
  return c;
}

// Bucket index of an observation row (nearest bucket angle in o_0).
inline std::size_t observation_bucket(const ToyTaskSpec& spec, std::span<const double> obs_row) {
  const double pos = obs_row[0] * static_cast<double>(spec.n_buckets) / std::numbers::pi;
  const double b = std::round(pos);
  if (!(b >= 0.0) || b >= static_cast<double>(spec.n_buckets)) throw DomainError("observation outside bucket range");
  return static_cast<std::size_t>(b);
}

// Draw order per sample: bucket, mode, then n noise normals, all from
// SplitMix64(seed). Bucket and mode use next() % count.
inline Dataset generate(const ToyTaskSpec& spec) {
  spec.validate();
  const std::size_t N = spec.n_samples, n = spec.action_size();
  std::vector<Tensor> centers, obs;
  for (std::size_t b = 0; b < spec.n_buckets; ++b) {
    centers.push_back(mode_centers(spec, b));
    obs.push_back(bucket_observation(spec, b));
  }
  SplitMix64 rng(spec.seed);
  Dataset ds{spec, Tensor::matrix(N, spec.D_o), Tensor::matrix(N, n)};
  for (std::size_t i = 0; i < N; ++i) {
    const std::size_t b = rng.next() % spec.n_buckets;
    const std::size_t m = rng.next() % spec.modes_per_obs;
    for (std::size_t j = 0; j < spec.D_o; ++j) ds.observations[i * spec.D_o + j] = obs[b][j];
    for (std::size_t j = 0; j < n; ++j) ds.actions[i * n + j] = centers[b][m * n + j] + spec.noise_std * rng.normal();
  }
  return ds;
}

// n draws from the ground-truth mixture at one bucket.
inline Tensor sample_ground_truth(const ToyTaskSpec& spec, std::size_t bucket, std::size_t count, std::uint64_t seed) {
  const Tensor c = mode_centers(spec, bucket);
  const std::size_t n = spec.action_size();
  SplitMix64 rng(seed);
  Tensor out = Tensor::matrix(count, n);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t m = rng.next() % spec.modes_per_obs;
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = c[m * n + j] + spec.noise_std * rng.normal();
  }
  return out;
}

// log p(a | bucket) under the equal-weight isotropic Gaussian mixture.
inline double mixture_log_density(const ToyTaskSpec& spec, std::size_t bucket, std::span<const double> a) {
  const Tensor c = mode_centers(spec, bucket);
  const std::size_t n = spec.action_size(), M = spec.modes_per_obs;
  if (a.size() != n) throw ShapeError("mixture_log_density: action width mismatch");
  const double var = spec.noise_std * spec.noise_std;
  std::vector<double> logs(M);
  for (std::size_t m = 0; m < M; ++m) {
    double d2 = 0.0;
    for (std::size_t j = 0; j < n; ++j) d2 += (a[j] - c[m * n + j]) * (a[j] - c[m * n + j]);
    logs[m] = -0.5 * d2 / var;
  }
  const double mx = *std::max_element(logs.begin(), logs.end());
  double s = 0.0;
  for (double l : logs) s += std::exp(l - mx);
  const double norm = -0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi * var);
  return mx + std::log(s / static_cast<double>(M)) + norm;
}

// "DM1DATA1" | name | D_o T_a D_a modes n_buckets n_samples seed (u64) |
// mode_separation noise_std (f64) | observations | actions (f64, row-major).
inline constexpr std::string_view kDatasetMagic = "DM1DATA1";

inline std::vector<char> dataset_bytes(const Dataset& ds) {
  io::ByteWriter w;
  w.magic(kDatasetMagic);
  const ToyTaskSpec& s = ds.spec;
  w.str(s.name);
  for (std::uint64_t v : {std::uint64_t{s.D_o}, std::uint64_t{s.T_a}, std::uint64_t{s.D_a},
                          std::uint64_t{s.modes_per_obs}, std::uint64_t{s.n_buckets}, std::uint64_t{s.n_samples},
                          s.seed})
    w.u64(v);
  w.f64(s.mode_separation);
  w.f64(s.noise_std);
  for (double v : ds.observations.values()) w.f64(v);
  for (double v : ds.actions.values()) w.f64(v);
  return w.bytes();
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
  io::ByteWriter w;
  const auto bytes = dataset_bytes(ds);
  w.magic(std::string_view(bytes.data(), bytes.size()));
  w.write_file(path);
}

inline Dataset parse_dataset(io::ByteReader in) {
  in.expect_magic(kDatasetMagic);
  ToyTaskSpec s;
  s.name = in.str();
  for (std::size_t* f : {&s.D_o, &s.T_a, &s.D_a, &s.modes_per_obs, &s.n_buckets, &s.n_samples}) {
    *f = in.u64();
    if (*f > (std::uint64_t{1} << 32)) throw FormatError("dataset: implausible header field " + std::to_string(*f));
  }
  s.seed = in.u64();
  s.mode_separation = in.f64();
  s.noise_std = in.f64();
  try {
    s.validate();
  } catch (const DomainError& e) {
    throw FormatError(std::string("dataset header: ") + e.what());
  }
  const std::size_t N = s.n_samples, n = s.action_size();
  in.need((N * s.D_o + N * n) * 8);
  Dataset ds{s, Tensor::matrix(N, s.D_o), Tensor::matrix(N, n)};
  for (double& v : ds.observations.data()) v = in.f64();
  for (double& v : ds.actions.data()) v = in.f64();
  in.expect_end();
  return ds;
}

inline Dataset load_dataset(const std::string& path) { return parse_dataset(io::ByteReader::from_file(path)); }

// N copies of one (o, a*) pair: the delta distribution.
inline Dataset delta_dataset(const Tensor& obs, const Tensor& action, std::size_t copies) {
  ToyTaskSpec s;
  s.name = "delta";
  s.D_o = obs.size();
  s.T_a = 1;
  s.D_a = action.size();
  s.n_samples = copies;
  Dataset ds{s, Tensor::matrix(copies, obs.size()), Tensor::matrix(copies, action.size())};
  for (std::size_t i = 0; i < copies; ++i) {
    for (std::size_t j = 0; j < obs.size(); ++j) ds.observations[i * obs.size() + j] = obs[j];
    for (std::size_t j = 0; j < action.size(); ++j) ds.actions[i * action.size() + j] = action[j];
  }
  return ds;
}

}  // namespace dm1
