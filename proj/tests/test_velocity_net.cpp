#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "dm1/velocity_net.hpp"
#include "support.hpp"

using namespace dm1;
using dm1::testing::random_tensor;

namespace {

NetDims small_dims() { return NetDims{4, 2, 3, 8, 16, 2}; }

struct Inputs {
  Tensor z, r, t, obs;
};

Inputs random_inputs(const NetDims& d, std::size_t B, SplitMix64& rng) {
  Inputs in{random_tensor(B, d.action_size(), rng), Tensor::matrix(B, 1), Tensor::matrix(B, 1),
            random_tensor(B, d.D_o, rng)};
  for (std::size_t i = 0; i < B; ++i) {
    const double a = rng.uniform(), b = rng.uniform();
    in.r[i] = std::min(a, b);
    in.t[i] = std::max(a, b);
  }
  return in;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("dm1_test_vnet_" + name);
}

}  // namespace

TEST(VelocityNet, ParameterCountMatchesClosedForm) {
  // {T_a, D_a, D_o, d_emb, width, depth} = {4, 2, 3, 32, 64, 3}:
  //   obs 3*32+32, t/r embeddings 2*(32*32+32), trunk (8+96)*64+64 + 2*(64*64+64), out 64*8+8.
  const NetDims d{4, 2, 3, 32, 64, 3};
  const std::size_t expected = (3 * 32 + 32) + 2 * (32 * 32 + 32) + (104 * 64 + 64) + 2 * (64 * 64 + 64) + (64 * 8 + 8);
  EXPECT_EQ(expected, 17800u);
  EXPECT_EQ(VelocityNet::init(0, d).parameter_count(), expected);
}

TEST(VelocityNet, InitIsDeterministicAndSeedSensitive) {
  EXPECT_EQ(VelocityNet::init(0, small_dims()).checksum(), VelocityNet::init(0, small_dims()).checksum());
  EXPECT_NE(VelocityNet::init(0, small_dims()).checksum(), VelocityNet::init(1, small_dims()).checksum());
}

TEST(VelocityNet, InitWeightsRespectFanInBound) {
  const VelocityNet net = VelocityNet::init(4, small_dims());
  const auto& p = net.params();
  for (std::size_t i = 0; i < p.size(); i += 2) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(p[i].rows()));
    EXPECT_LE(max_abs(p[i]), bound);
    EXPECT_LE(max_abs(p[i + 1]), bound);
  }
}

TEST(VelocityNet, InitRejectsBadDims) {
  NetDims d = small_dims();
  d.d_emb = 7;
  EXPECT_THROW(VelocityNet::init(0, d), DomainError);
  d = small_dims();
  d.width = 0;
  EXPECT_THROW(VelocityNet::init(0, d), DomainError);
}

TEST(VelocityNet, ForwardShapesAndFiniteness) {
  const NetDims d = small_dims();
  const VelocityNet net = VelocityNet::init(1, d);
  SplitMix64 rng(2);
  const Inputs in = random_inputs(d, 5, rng);
  const auto out = net.forward(in.z, in.r, in.t, in.obs);
  EXPECT_EQ(out.u.shape(), (Shape{5, d.action_size()}));
  EXPECT_TRUE(out.u.all_finite());
  for (const Tensor& f : out.features) EXPECT_EQ(f.shape(), (Shape{5, d.d_emb}));
  const auto fb = VelocityNet::feature_batches(out);
  ASSERT_EQ(fb.size(), 3u);
  EXPECT_EQ(fb[0].layer_tag, LayerTag::T);
  EXPECT_EQ(fb[1].layer_tag, LayerTag::R);
  EXPECT_EQ(fb[2].layer_tag, LayerTag::Cond);
}

TEST(VelocityNet, ForwardIsBitIdenticalAcrossCalls) {
  const NetDims d = small_dims();
  const VelocityNet net = VelocityNet::init(1, d);
  SplitMix64 rng(3);
  const Inputs in = random_inputs(d, 4, rng);
  EXPECT_EQ(net.velocity(in.z, in.r, in.t, in.obs).values(), net.velocity(in.z, in.r, in.t, in.obs).values());
}

TEST(VelocityNet, DistinctObservationsGiveDistinctCondRows) {
  const NetDims d = small_dims();
  const VelocityNet net = VelocityNet::init(9, d);
  Tensor z = Tensor::matrix(2, d.action_size(), 0.1);
  Tensor rt = Tensor::matrix(2, 1, 0.5);
  Tensor obs = Tensor::matrix(2, d.D_o, std::vector<double>{0.0, 0.5, -1.0, 1.0, 0.2, 0.3});
  const auto out = net.forward(z, rt, rt, obs);
  const Tensor& cond = out.features[static_cast<std::size_t>(LayerTag::Cond)];
  double diff = 0.0;
  for (std::size_t j = 0; j < d.d_emb; ++j) diff = std::max(diff, std::abs(cond.at(0, j) - cond.at(1, j)));
  EXPECT_GT(diff, 1e-3);
}

TEST(VelocityNet, RejectsRAfterT) {
  const NetDims d = small_dims();
  const VelocityNet net = VelocityNet::init(1, d);
  const Tensor z = Tensor::matrix(1, d.action_size()), obs = Tensor::matrix(1, d.D_o);
  EXPECT_THROW(net.forward(z, Tensor::matrix(1, 1, 0.6), Tensor::matrix(1, 1, 0.4), obs), DomainError);
  EXPECT_THROW(net.forward(z, Tensor::matrix(1, 1, 0.0), Tensor::matrix(1, 1, 1.5), obs), DomainError);
}

TEST(VelocityNet, RejectsShapeMismatch) {
  const NetDims d = small_dims();
  const VelocityNet net = VelocityNet::init(1, d);
  const Tensor rt = Tensor::matrix(1, 1, 0.5);
  EXPECT_THROW(net.forward(Tensor::matrix(1, 3), rt, rt, Tensor::matrix(1, d.D_o)), ShapeError);
  EXPECT_THROW(net.forward(Tensor::matrix(1, d.action_size()), rt, rt, Tensor::matrix(1, 1)), ShapeError);
  EXPECT_THROW(net.forward(Tensor::matrix(2, d.action_size()), rt, rt, Tensor::matrix(2, d.D_o)), ShapeError);
}

TEST(VelocityNet, GradAndJvpThroughForwardSucceed) {
  const NetDims d = small_dims();
  const VelocityNet net = VelocityNet::init(1, d);
  SplitMix64 rng(4);
  const Inputs in = random_inputs(d, 3, rng);
  const auto g = grad(
      [&](std::span<const Var> p) {
        return sum(square(net.forward_with<Var>(p, Var(in.z), Var(in.r), Var(in.t), Var(in.obs)).u));
      },
      net.params());
  ASSERT_EQ(g.size(), net.params().size());
  for (const Tensor& gi : g) EXPECT_TRUE(gi.all_finite());
  const auto params = net.lift_params<DualTensor>();
  const std::vector<Tensor> x{in.z, in.r, in.t};
  const std::vector<Tensor> dx{random_tensor(3, d.action_size(), rng), Tensor::matrix(3, 1, 1.0),
                               Tensor::matrix(3, 1, 1.0)};
  const auto [u, du] = jvp(
      [&](std::span<const DualTensor> v) {
        return net.forward_with<DualTensor>(params, v[0], v[1], v[2], DualTensor(in.obs)).u;
      },
      x, dx);
  EXPECT_EQ(u.values(), net.velocity(in.z, in.r, in.t, in.obs).values());
  EXPECT_TRUE(du.all_finite());
}

TEST(SinusoidalEmbed, ZeroIsAlternatingZeroOne) {
  const Tensor e = sinusoidal_embed(0.0, 8);
  for (std::size_t k = 0; k < 8; ++k) EXPECT_EQ(e[k], k % 2 == 0 ? 0.0 : 1.0);
}

TEST(SinusoidalEmbed, OddWidthThrows) { EXPECT_THROW(sinusoidal_embed(0.3, 7), DomainError); }

TEST(SinusoidalEmbed, ZeroAndOneDifferInEveryBand) {
  const std::size_t d = 32;
  const Tensor e0 = sinusoidal_embed(0.0, d), e1 = sinusoidal_embed(1.0, d);
  for (std::size_t k = 0; k < d / 2; ++k) {
    const double dist = std::hypot(e0[2 * k] - e1[2 * k], e0[2 * k + 1] - e1[2 * k + 1]);
    EXPECT_GT(dist, 1e-3) << "band " << k;
  }
}

TEST(SinusoidalEmbed, PairIsLipschitzWithItsFrequency) {
  const std::size_t d = 16;
  const auto freqs = embedding_frequencies(d);
  SplitMix64 rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const double x = rng.uniform(), y = rng.uniform();
    const Tensor ex = sinusoidal_embed(x, d), ey = sinusoidal_embed(y, d);
    for (std::size_t k = 0; k < d / 2; ++k) {
      const double dist = std::hypot(ex[2 * k] - ey[2 * k], ex[2 * k + 1] - ey[2 * k + 1]);
      EXPECT_LE(dist, freqs[k] * std::abs(x - y) + 1e-12);
    }
  }
}

TEST(SinusoidalEmbed, FrequenciesAreGeometricBetweenBounds) {
  const auto f = embedding_frequencies(32);
  EXPECT_DOUBLE_EQ(f.front(), kMinFrequency);
  EXPECT_NEAR(f.back(), kMaxFrequency, 1e-12);
  for (std::size_t k = 2; k < f.size(); ++k) EXPECT_NEAR(f[k] / f[k - 1], f[1] / f[0], 1e-12);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const VelocityNet net = VelocityNet::init(12, small_dims());
  const auto path = temp_path("roundtrip.bin");
  save_checkpoint(net, path.string());
  const VelocityNet back = load_checkpoint(path.string());
  EXPECT_EQ(back.dims(), net.dims());
  EXPECT_EQ(back.seed(), net.seed());
  for (std::size_t i = 0; i < net.params().size(); ++i) EXPECT_EQ(back.params()[i].values(), net.params()[i].values());
  EXPECT_EQ(checkpoint_bytes(back), checkpoint_bytes(net));
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptionIsDetected) {
  const auto bytes = checkpoint_bytes(VelocityNet::init(12, small_dims()));
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  EXPECT_THROW(parse_checkpoint(io::ByteReader(flipped)), FormatError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(parse_checkpoint(io::ByteReader(bad_magic)), FormatError);
  EXPECT_THROW(parse_checkpoint(io::ByteReader(std::vector<char>(bytes.begin(), bytes.end() - 9))), FormatError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(parse_checkpoint(io::ByteReader(trailing)), FormatError);
}

TEST(Checkpoint, MissingFileThrows) { EXPECT_THROW(load_checkpoint("/nonexistent/dm1.bin"), Error); }
