#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dm1/binary_io.hpp"
#include "dm1/diff.hpp"
#include "dm1/rng.hpp"

namespace dm1 {

struct NetDims {
  std::size_t T_a = 4;     // action horizon
  std::size_t D_a = 2;     // action dimension
  std::size_t D_o = 1;     // observation dimension
  std::size_t d_emb = 32;  // embedding width of the T, R and Cond sub-networks
  std::size_t width = 128;
  std::size_t depth = 3;   // hidden layers in the trunk

  std::size_t action_size() const { return T_a * D_a; }

  friend bool operator==(const NetDims&, const NetDims&) = default;
};

// Dispersive regularization taps, in registry (extraction) order.
enum class LayerTag { T = 0, R = 1, Cond = 2 };
inline constexpr std::array<LayerTag, 3> kLayerTags{LayerTag::T, LayerTag::R, LayerTag::Cond};

inline std::string_view to_string(LayerTag tag) {
  switch (tag) {
    case LayerTag::T: return "T";
    case LayerTag::R: return "R";
    case LayerTag::Cond: return "Cond";
  }
  return "?";
}

// One tagged layer's activations over a batch, B x d.
struct FeatureBatch {
  LayerTag layer_tag;
  Tensor features;
};

template <EngineValue T>
struct NetOutput {
  T u;                        // B x (T_a * D_a)
  std::array<T, 3> features;  // post-activation T, R, Cond embeddings, B x d_emb each
};

// Sinusoidal feature frequencies span [kMinFrequency, kMaxFrequency] geometrically.
inline constexpr double kMinFrequency = 1.0;
inline constexpr double kMaxFrequency = 10.0;

inline std::vector<double> embedding_frequencies(std::size_t d_emb) {
  const std::size_t half = d_emb / 2;
  std::vector<double> freqs(half);
  for (std::size_t k = 0; k < half; ++k) {
    const double frac = half > 1 ? static_cast<double>(k) / static_cast<double>(half - 1) : 0.0;
    freqs[k] = kMinFrequency * std::pow(kMaxFrequency / kMinFrequency, frac);
  }
  return freqs;
}

namespace detail {

// Row of per-column frequencies (each repeated twice) and a row of phases
// (0, pi/2, 0, pi/2, ...): sin(x w + phase) interleaves sin and cos.
inline std::pair<Tensor, Tensor> embedding_rows(std::size_t d_emb) {
  if (d_emb == 0 || d_emb % 2 != 0) throw DomainError("sinusoidal embedding width must be even and positive");
  const auto freqs = embedding_frequencies(d_emb);
  Tensor w = Tensor::matrix(1, d_emb), phase = Tensor::matrix(1, d_emb);
  for (std::size_t k = 0; k < freqs.size(); ++k) {
    w[2 * k] = freqs[k];
    w[2 * k + 1] = freqs[k];
    phase[2 * k + 1] = std::numbers::pi / 2.0;
  }
  return {std::move(w), std::move(phase)};
}

}  // namespace detail

// x: B x 1 column of times in [0, 1]; returns B x d_emb interleaved
// (sin w_k x, cos w_k x) features.
template <EngineValue T>
T sinusoidal_embed(const T& x, std::size_t d_emb) {
  auto [w, phase] = detail::embedding_rows(d_emb);
  return sin(add(mul(x, constant<T>(std::move(w))), constant<T>(std::move(phase))));
}

inline Tensor sinusoidal_embed(double x, std::size_t d_emb) {
  return sinusoidal_embed(Tensor::matrix(1, 1, x), d_emb).reshaped(Shape{d_emb});
}

// Average-velocity predictor u(z, r, t, o).
//
// Parameter registry order: obs encoder (W, b), t embedding (W, b),
// r embedding (W, b), trunk hidden layers (W, b) x depth, output (W, b).
// Weights are (fan_in x fan_out), biases (1 x fan_out).
class VelocityNet {
 public:
  VelocityNet() = default;
  VelocityNet(NetDims dims, std::uint64_t seed, std::vector<Tensor> params)
      : dims_(dims), seed_(seed), params_(std::move(params)) {
    const auto shapes = param_shapes(dims_);
    if (shapes.size() != params_.size()) throw ShapeError("parameter count does not match dims");
    for (std::size_t i = 0; i < shapes.size(); ++i)
      if (params_[i].shape() != shapes[i]) throw ShapeError("parameter shape mismatch", i);
  }

  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias,
  // drawn in registry order, row-major, from SplitMix64(seed).
  static VelocityNet init(std::uint64_t seed, const NetDims& dims) {
    if (dims.T_a == 0 || dims.D_a == 0 || dims.D_o == 0 || dims.d_emb == 0 || dims.width == 0 || dims.depth == 0) {
      throw DomainError("all network dimensions must be positive");
    }
    if (dims.d_emb % 2 != 0) throw DomainError("d_emb must be even");
    SplitMix64 rng(seed);
    std::vector<Tensor> params;
    for (const Shape& s : param_shapes(dims)) params.emplace_back(s);
    for (std::size_t i = 0; i < params.size(); i += 2) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(params[i].rows()));
      for (Tensor* p : {&params[i], &params[i + 1]})
        for (double& v : p->data()) v = bound * (2.0 * rng.uniform() - 1.0);
    }
    return VelocityNet(dims, seed, std::move(params));
  }

  static std::vector<Shape> param_shapes(const NetDims& d) {
    std::vector<Shape> s;
    auto layer = [&](std::size_t in, std::size_t out) {
      s.push_back(Shape{in, out});
      s.push_back(Shape{1, out});
    };
    layer(d.D_o, d.d_emb);
    layer(d.d_emb, d.d_emb);
    layer(d.d_emb, d.d_emb);
    std::size_t in = d.action_size() + 3 * d.d_emb;
    for (std::size_t l = 0; l < d.depth; ++l) {
      layer(in, d.width);
      in = d.width;
    }
    layer(in, d.action_size());
    return s;
  }

  const NetDims& dims() const { return dims_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<Tensor>& params() const { return params_; }
  std::vector<Tensor>& mutable_params() { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Tensor& p : params_) n += p.size();
    return n;
  }

  std::uint64_t checksum() const {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (const Tensor& p : params_) h = dm1::checksum(p.data(), h);
    return h;
  }

  template <EngineValue T>
  std::vector<T> lift_params() const {
    std::vector<T> out;
    out.reserve(params_.size());
    for (const Tensor& p : params_) {
      if constexpr (std::is_same_v<T, Var>) {
        out.push_back(Var::leaf(p));
      } else {
        out.push_back(constant<T>(p));
      }
    }
    return out;
  }

  // Forward pass with explicit (possibly lifted) parameters. z: B x n,
  // r and t: B x 1, obs: B x D_o. No validation; see forward().
  template <EngineValue T>
  NetOutput<T> forward_with(std::span<const T> p, const T& z, const T& r, const T& t, const T& obs) const {
    T cond = gelu(affine(obs, p[0], p[1]));
    T emb_t = gelu(affine(sinusoidal_embed(t, dims_.d_emb), p[2], p[3]));
    T emb_r = gelu(affine(sinusoidal_embed(r, dims_.d_emb), p[4], p[5]));
    const std::array<T, 4> parts{z, emb_t, emb_r, cond};
    T h = concat_cols(std::span<const T>(parts));
    std::size_t i = 6;
    for (std::size_t l = 0; l < dims_.depth; ++l, i += 2) h = gelu(affine(h, p[i], p[i + 1]));
    T u = affine(h, p[i], p[i + 1]);
    return {std::move(u), {std::move(emb_t), std::move(emb_r), std::move(cond)}};
  }

  // Validates shapes and 0 <= r <= t <= 1 per row, then evaluates.
  NetOutput<Tensor> forward(const Tensor& z, const Tensor& r, const Tensor& t, const Tensor& obs) const {
    validate_inputs(z, r, t, obs);
    return forward_with<Tensor>(params_, z, r, t, obs);
  }

  // Velocity only; the sampler interface.
  Tensor velocity(const Tensor& z, const Tensor& r, const Tensor& t, const Tensor& obs) const {
    return forward(z, r, t, obs).u;
  }

  static std::vector<FeatureBatch> feature_batches(const NetOutput<Tensor>& out) {
    std::vector<FeatureBatch> fb;
    for (LayerTag tag : kLayerTags) fb.push_back({tag, out.features[static_cast<std::size_t>(tag)]});
    return fb;
  }

  void validate_inputs(const Tensor& z, const Tensor& r, const Tensor& t, const Tensor& obs) const {
    const std::size_t B = z.rows();
    if (z.rank() != 2 || z.cols() != dims_.action_size())
      throw ShapeError("forward: z must be B x " + std::to_string(dims_.action_size()) + ", got " + shape_str(z.shape()));
    if (r.shape() != Shape{B, 1}) throw ShapeError("forward: r must be B x 1, got " + shape_str(r.shape()));
    if (t.shape() != Shape{B, 1}) throw ShapeError("forward: t must be B x 1, got " + shape_str(t.shape()));
    if (obs.shape() != Shape{B, dims_.D_o})
      throw ShapeError("forward: obs must be B x " + std::to_string(dims_.D_o) + ", got " + shape_str(obs.shape()));
    for (std::size_t i = 0; i < B; ++i) {
      if (!(0.0 <= r[i] && r[i] <= t[i] && t[i] <= 1.0)) {
        throw DomainError("forward: need 0 <= r <= t <= 1, got r=" + std::to_string(r[i]) +
                          " t=" + std::to_string(t[i]) + " at row " + std::to_string(i));
      }
    }
  }

 private:
  NetDims dims_;
  std::uint64_t seed_ = 0;
  std::vector<Tensor> params_;
};

// Checkpoint layout (all integers u64 LE, all reals f64 LE):
//   "DM1CKPT1" | T_a D_a D_o d_emb width depth | seed | params... | checksum
// Parameters follow registry order, row-major. The trailing checksum is
// FNV-1a 64 over every preceding byte.
inline constexpr std::string_view kCheckpointMagic = "DM1CKPT1";

inline std::vector<char> checkpoint_bytes(const VelocityNet& net) {
  io::ByteWriter w;
  w.magic(kCheckpointMagic);
  const NetDims& d = net.dims();
  for (std::size_t v : {d.T_a, d.D_a, d.D_o, d.d_emb, d.width, d.depth}) w.u64(v);
  w.u64(net.seed());
  for (const Tensor& p : net.params())
    for (double v : p.values()) w.f64(v);
  const auto& b = w.bytes();
  w.u64(fnv1a64(std::string_view(b.data(), b.size())));
  return w.bytes();
}

inline void save_checkpoint(const VelocityNet& net, const std::string& path) {
  io::ByteWriter w;
  const auto bytes = checkpoint_bytes(net);
  w.magic(std::string_view(bytes.data(), bytes.size()));
  w.write_file(path);
}

inline VelocityNet parse_checkpoint(io::ByteReader in) {
  in.expect_magic(kCheckpointMagic);
  NetDims d;
  for (std::size_t* f : {&d.T_a, &d.D_a, &d.D_o, &d.d_emb, &d.width, &d.depth}) {
    *f = in.u64();
    if (*f == 0 || *f > (1u << 20)) throw FormatError("checkpoint: implausible dimension " + std::to_string(*f));
  }
  if (d.d_emb % 2 != 0) throw FormatError("checkpoint: odd d_emb");
  const std::uint64_t seed = in.u64();
  std::vector<Tensor> params;
  for (const Shape& s : VelocityNet::param_shapes(d)) {
    in.need(shape_size(s) * 8);
    Tensor p(s);
    for (double& v : p.data()) v = in.f64();
    params.push_back(std::move(p));
  }
  const std::uint64_t expected = fnv1a64(in.consumed());
  if (in.u64() != expected) throw FormatError("checkpoint: checksum mismatch");
  in.expect_end();
  return VelocityNet(d, seed, std::move(params));
}

inline VelocityNet load_checkpoint(const std::string& path) { return parse_checkpoint(io::ByteReader::from_file(path)); }

}  // namespace dm1
