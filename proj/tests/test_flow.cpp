#include <gtest/gtest.h>

#include "dm1/flow.hpp"
#include "dm1/velocity_net.hpp"
#include "support.hpp"

using namespace dm1;
using dm1::testing::random_tensor;

namespace {

// u(z, r, t) = c regardless of inputs.
struct ConstantField {
  Tensor c;  // 1 x n
  Tensor velocity(const Tensor& z, const Tensor&, const Tensor&, const Tensor&) const {
    Tensor u = Tensor::zeros_like(z);
    for (std::size_t i = 0; i < z.rows(); ++i)
      for (std::size_t j = 0; j < z.cols(); ++j) u.at(i, j) = c[j];
    return u;
  }
};

// The exact average velocity of the delta distribution at target:
// u(z, r, t) = (target - z) / (1 - r).
struct DeltaField {
  Tensor target;
  Tensor velocity(const Tensor& z, const Tensor& r, const Tensor&, const Tensor&) const {
    Tensor u = Tensor::zeros_like(z);
    for (std::size_t i = 0; i < z.rows(); ++i)
      for (std::size_t j = 0; j < z.cols(); ++j) u.at(i, j) = (target[j] - z.at(i, j)) / (1.0 - r[i]);
    return u;
  }
};

}  // namespace

TEST(Interpolant, EndpointsAndMidpoint) {
  const Tensor a = Tensor::row({2.0, -1.0}), eps = Tensor::row({0.0, 3.0});
  EXPECT_EQ(make_interpolant(a, eps, 0.0, 0.0).z_t.values(), eps.values());
  EXPECT_EQ(make_interpolant(a, eps, 0.0, 1.0).z_t.values(), a.values());
  const Interpolant q = make_interpolant(Tensor::row({2.0}), Tensor::row({0.0}), 0.0, 0.25);
  EXPECT_DOUBLE_EQ(q.z_t[0], 0.5);
}

TEST(Interpolant, FieldsSatisfyPathInvariants) {
  SplitMix64 rng(1);
  const std::size_t B = 16, n = 6;
  const Tensor a = random_tensor(B, n, rng), eps = random_tensor(B, n, rng);
  Tensor r = Tensor::matrix(B, 1), t = Tensor::matrix(B, 1);
  for (std::size_t i = 0; i < B; ++i) {
    const double x = rng.uniform(), y = rng.uniform();
    r[i] = std::min(x, y);
    t[i] = std::max(x, y);
  }
  const Interpolant in = make_interpolant(a, eps, r, t);
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t k = i * n + j;
      EXPECT_NEAR(in.z_t[k], (1 - t[i]) * eps[k] + t[i] * a[k], 1e-12);
      EXPECT_NEAR(in.z_r[k], (1 - r[i]) * eps[k] + r[i] * a[k], 1e-12);
      // Displacement identity: (t - r)(a - eps) == z_t - z_r.
      EXPECT_NEAR((t[i] - r[i]) * (a[k] - eps[k]), in.z_t[k] - in.z_r[k], 1e-12);
      // z_t + (1 - t) v == a.
      EXPECT_NEAR(in.z_t[k] + (1 - t[i]) * (a[k] - eps[k]), a[k], 1e-12);
    }
  }
}

TEST(Interpolant, RejectsROutOfOrder) {
  const Tensor a = Tensor::row({1.0}), eps = Tensor::row({0.0});
  EXPECT_THROW(make_interpolant(a, eps, 0.7, 0.3), DomainError);
  EXPECT_THROW(make_interpolant(a, eps, -0.1, 0.3), DomainError);
  EXPECT_THROW(make_interpolant(a, Tensor::row({0.0, 1.0}), 0.1, 0.3), ShapeError);
}

TEST(ConditionalVelocity, Examples) {
  EXPECT_EQ(conditional_velocity(Tensor::row({1.0, 1.0}), Tensor::row({0.0, -1.0})).values(),
            (std::vector<double>{1.0, 2.0}));
  const Tensor a = Tensor::row({0.3, -2.0});
  EXPECT_EQ(conditional_velocity(a, a).values(), (std::vector<double>{0.0, 0.0}));
}

TEST(Samplers, EulerSingleStepOnConstantField) {
  const ConstantField f{Tensor::row({0.5, -1.0})};
  const Tensor obs = Tensor::matrix(3, 1);
  const Tensor z0 = draw_noise(3, 2, 42);
  const Tensor s = euler_sample(f, obs, 2, 1, 42);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_DOUBLE_EQ(s.at(i, 0), z0.at(i, 0) + 0.5);
    EXPECT_DOUBLE_EQ(s.at(i, 1), z0.at(i, 1) - 1.0);
  }
}

TEST(Samplers, NfeEqualsDeclaredSteps) {
  const VelocityNet net = VelocityNet::init(0, NetDims{2, 2, 1, 8, 16, 1});
  const Tensor obs = Tensor::matrix(4, 1, 0.3);
  for (std::size_t K : {1u, 32u, 128u}) {
    CountingField c(net);
    euler_sample(c, obs, 4, K, 1);
    EXPECT_EQ(c.calls(), K);
    EXPECT_EQ(c.rows(), 4 * K);
  }
  for (std::size_t k : {1u, 5u}) {
    CountingField c(net);
    meanflow_sample_k(c, obs, 4, k, 1);
    EXPECT_EQ(c.calls(), k);
  }
  CountingField c(net);
  meanflow_sample_1(c, obs, 4, 1);
  EXPECT_EQ(c.calls(), 1u);
}

TEST(Samplers, OneStepWithOracleDisplacementIsExact) {
  const Tensor target = Tensor::row({0.25, -0.75, 1.5});
  const DeltaField f{target};
  const Tensor s = meanflow_sample_1(f, Tensor::matrix(5, 2), 3, 9);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(s.at(i, j), target[j], 1e-15);
}

TEST(Samplers, KStepReducesToOneStepBitExactly) {
  const VelocityNet net = VelocityNet::init(3, NetDims{2, 2, 1, 8, 16, 1});
  const Tensor obs = Tensor::matrix(6, 1, -0.4);
  EXPECT_EQ(meanflow_sample_k(net, obs, 4, 1, 77).values(), meanflow_sample_1(net, obs, 4, 77).values());
}

TEST(Samplers, DeterministicGivenSeed) {
  const VelocityNet net = VelocityNet::init(3, NetDims{2, 2, 1, 8, 16, 1});
  const Tensor obs = Tensor::matrix(6, 1, 0.2);
  EXPECT_EQ(meanflow_sample_1(net, obs, 4, 5).values(), meanflow_sample_1(net, obs, 4, 5).values());
  EXPECT_EQ(euler_sample(net, obs, 4, 8, 5).values(), euler_sample(net, obs, 4, 8, 5).values());
  EXPECT_NE(meanflow_sample_1(net, obs, 4, 5).values(), meanflow_sample_1(net, obs, 4, 6).values());
}

TEST(Samplers, RejectZeroSteps) {
  const ConstantField f{Tensor::row({0.0})};
  const Tensor obs = Tensor::matrix(1, 1);
  EXPECT_THROW(euler_sample(f, obs, 1, 0, 0), DomainError);
  EXPECT_THROW(meanflow_sample_k(f, obs, 1, 0, 0), DomainError);
}

TEST(Samplers, ResultIsClipped) {
  const ConstantField f{Tensor::row({100.0, -100.0})};
  const ActionBounds b = ActionBounds::uniform(2, -1.0, 1.0);
  const Tensor s = meanflow_sample_1(f, Tensor::matrix(2, 1), 2, 0, b);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(s.at(i, 0), 1.0);
    EXPECT_EQ(s.at(i, 1), -1.0);
  }
}

TEST(Noise, MomentsAreStandardNormal) {
  const Tensor z = draw_noise(200, 100, 123);
  double m = 0.0, v = 0.0;
  for (double x : z.values()) m += x;
  m /= static_cast<double>(z.size());
  for (double x : z.values()) v += (x - m) * (x - m);
  v /= static_cast<double>(z.size() - 1);
  // Standard errors: 1/sqrt(2e4) ~ 0.007 for the mean, ~0.01 for the variance.
  EXPECT_NEAR(m, 0.0, 0.035);
  EXPECT_NEAR(v, 1.0, 0.05);
}

TEST(Clip, Examples) {
  const ActionBounds b = ActionBounds::uniform(1, -1.0, 1.0);
  EXPECT_EQ(clip_actions(Tensor::row({5.0}), b).values(), (std::vector<double>{1.0}));
  EXPECT_EQ(clip_actions(Tensor::row({0.3, -0.9}), b).values(), (std::vector<double>{0.3, -0.9}));
}

TEST(Clip, PerDimensionBoundsCycleOverTrajectory) {
  const ActionBounds b({-1.0, 0.0}, {1.0, 0.5});
  const Tensor a = Tensor::row({2.0, 2.0, -2.0, -2.0});
  EXPECT_EQ(clip_actions(a, b).values(), (std::vector<double>{1.0, 0.5, -1.0, 0.0}));
  EXPECT_THROW(clip_actions(Tensor::row({1.0, 2.0, 3.0}), b), ShapeError);
}

TEST(Clip, IsIdempotent) {
  SplitMix64 rng(2);
  const ActionBounds b({-0.5, -2.0}, {0.7, 0.1});
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor a = random_tensor(4, 6, rng, 2.0);
    const Tensor once = clip_actions(a, b);
    EXPECT_EQ(clip_actions(once, b).values(), once.values());
  }
}

TEST(Clip, BoundsMustBeOrdered) {
  EXPECT_THROW(ActionBounds({1.0}, {1.0}), DomainError);
  EXPECT_THROW(ActionBounds({0.0, 1.0}, {1.0}), ShapeError);
}
