#include <gtest/gtest.h>

#include <functional>
#include <string>

#include "dm1/diff.hpp"
#include "support.hpp"

using namespace dm1;
using dm1::testing::fd_directional;
using dm1::testing::fd_grad;
using dm1::testing::random_tensor;
using dm1::testing::rel_err;

namespace {

// Two-layer tanh MLP; inputs are (x, W1, b1, W2, b2).
auto mlp2 = [](auto in) {
  auto h = tanh(affine(in[0], in[1], in[2]));
  return affine(h, in[3], in[4]);
};

std::vector<Tensor> mlp_point(SplitMix64& rng, std::size_t B = 3, std::size_t d = 4, std::size_t h = 5,
                              std::size_t o = 2) {
  return {random_tensor(B, d, rng), random_tensor(d, h, rng, 0.5), random_tensor(1, h, rng, 0.5),
          random_tensor(h, o, rng, 0.5), random_tensor(1, o, rng, 0.5)};
}

std::vector<Tensor> like(const std::vector<Tensor>& x, SplitMix64& rng) {
  std::vector<Tensor> out;
  for (const Tensor& t : x) out.push_back(random_tensor(t.rows(), t.cols(), rng));
  return out;
}

}  // namespace

TEST(Jvp, SquareAtThree) {
  const std::vector<Tensor> x{Tensor::scalar(3.0)}, d{Tensor::scalar(1.0)};
  auto [y, dy] = jvp([](auto in) { return mul(in[0], in[0]); }, x, d);
  EXPECT_DOUBLE_EQ(y.item(), 9.0);
  EXPECT_DOUBLE_EQ(dy.item(), 6.0);
}

TEST(Jvp, ConstantHasZeroTangent) {
  const std::vector<Tensor> x{Tensor::row({1.0, -2.0})}, d{Tensor::row({0.3, 7.0})};
  auto [y, dy] = jvp([](auto) { return DualTensor(Tensor::row({4.0, 5.0})); }, x, d);
  EXPECT_EQ(y.values(), (std::vector<double>{4.0, 5.0}));
  EXPECT_EQ(dy.values(), (std::vector<double>{0.0, 0.0}));
}

TEST(Jvp, TwoLayerMlpMatchesCentralDifference) {
  SplitMix64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = mlp_point(rng);
    const auto d = like(x, rng);
    const Tensor fd = fd_directional(mlp2, std::span<const Tensor>(x), std::span<const Tensor>(d));
    const Tensor ad = jvp(mlp2, x, d).second;
    EXPECT_LT(rel_err(ad, fd), 1e-5) << "trial " << trial;
  }
}

TEST(Jvp, TangentShapeMismatchNamesInput) {
  const std::vector<Tensor> x{Tensor::row({1.0}), Tensor::row({1.0, 2.0})};
  const std::vector<Tensor> d{Tensor::row({1.0}), Tensor::row({1.0})};
  try {
    jvp([](auto in) { return add(in[0], in[1]); }, x, d);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    ASSERT_TRUE(e.index().has_value());
    EXPECT_EQ(*e.index(), 1u);
  }
}

TEST(Jvp, TangentCountMismatchThrows) {
  const std::vector<Tensor> x{Tensor::row({1.0})}, d{};
  EXPECT_THROW(jvp([](auto in) { return in[0]; }, x, d), ShapeError);
}

// Each primitive's JVP along every basis direction equals the matching
// finite-difference Jacobian column.
struct PrimitiveCase {
  std::string name;
  std::function<Tensor(std::span<const Tensor>)> f_plain;
  std::function<DualTensor(std::span<const DualTensor>)> f_dual;
  std::function<Var(std::span<const Var>)> f_var;
  std::vector<Tensor> x;
};

#define DM1_CASE(NAME, EXPR, ...)                                                           \
  PrimitiveCase {                                                                           \
    NAME, [](std::span<const Tensor> in) -> Tensor { return EXPR; },                        \
        [](std::span<const DualTensor> in) -> DualTensor { return EXPR; },                  \
        [](std::span<const Var> in) -> Var { return EXPR; }, std::vector<Tensor>{__VA_ARGS__} \
  }

std::vector<PrimitiveCase> primitive_cases() {
  SplitMix64 rng(5);
  const Tensor a = random_tensor(3, 4, rng), b = random_tensor(3, 4, rng), w = random_tensor(4, 2, rng);
  const Tensor bias = random_tensor(1, 2, rng), row = random_tensor(1, 4, rng);
  Tensor pos = a;
  for (double& v : pos.data()) v = 0.5 + std::abs(v);
  Tensor away = a;  // keep maximum() away from its kink
  for (double& v : away.data()) v = (v >= 0 ? 0.3 : -0.3) + v;
  return {
      DM1_CASE("add", add(in[0], in[1]), a, b),
      DM1_CASE("add_broadcast_row", add(in[0], in[1]), a, row),
      DM1_CASE("sub", sub(in[0], in[1]), a, b),
      DM1_CASE("mul", mul(in[0], in[1]), a, b),
      DM1_CASE("div", div(in[0], in[1]), a, pos),
      DM1_CASE("neg_scale_shift", add_scalar(scale(neg(in[0]), 2.5), 1.0), a),
      DM1_CASE("matmul", matmul(in[0], in[1]), a, w),
      DM1_CASE("transpose", transpose(in[0]), a),
      DM1_CASE("affine", affine(in[0], in[1], in[2]), a, w, bias),
      DM1_CASE("tanh", tanh(in[0]), a),
      DM1_CASE("gelu", gelu(in[0]), a),
      DM1_CASE("sin", sin(in[0]), a),
      DM1_CASE("exp", exp(in[0]), a),
      DM1_CASE("log", log(in[0]), pos),
      DM1_CASE("sqrt", sqrt(in[0]), pos),
      DM1_CASE("maximum", maximum(in[0], 0.0), away),
      DM1_CASE("square", square(in[0]), a),
      DM1_CASE("sum", sum(in[0]), a),
      DM1_CASE("mean", mean(in[0]), a),
      DM1_CASE("sum_axis0", sum_axis(in[0], 0), a),
      DM1_CASE("sum_axis1", sum_axis(in[0], 1), a),
      DM1_CASE("concat", concat_cols(std::vector{in[0], in[1]}), a, b),
      DM1_CASE("slice", slice_cols(in[0], 1, 3), a),
      DM1_CASE("pairwise_sqdist", pairwise_sqdist(in[0]), a),
  };
}

TEST(Primitives, JvpMatchesFiniteDifferenceJacobianColumns) {
  for (const PrimitiveCase& c : primitive_cases()) {
    for (std::size_t k = 0; k < c.x.size(); ++k) {
      for (std::size_t i = 0; i < c.x[k].size(); ++i) {
        std::vector<Tensor> dirs;
        for (const Tensor& t : c.x) dirs.push_back(Tensor::zeros_like(t));
        dirs[k][i] = 1.0;
        const Tensor fd = fd_directional(c.f_plain, std::span<const Tensor>(c.x), std::span<const Tensor>(dirs), 1e-5);
        const Tensor ad = jvp(c.f_dual, c.x, dirs).second;
        EXPECT_LT(rel_err(ad, fd, 1.0), 1e-5) << c.name << " input " << k << " coord " << i;
      }
    }
  }
}

TEST(Primitives, PlainDualAndReverseAgreeOnValues) {
  for (const PrimitiveCase& c : primitive_cases()) {
    const Tensor plain = c.f_plain(c.x);
    const std::vector<Tensor> zero_dirs = [&] {
      std::vector<Tensor> z;
      for (const Tensor& t : c.x) z.push_back(Tensor::zeros_like(t));
      return z;
    }();
    EXPECT_EQ(jvp(c.f_dual, c.x, zero_dirs).first.values(), plain.values()) << c.name;
    std::vector<Var> vars;
    for (const Tensor& t : c.x) vars.emplace_back(t);
    EXPECT_EQ(c.f_var(vars).value().values(), plain.values()) << c.name;
  }
}

// <grad of <w, f(x)>, d> == <w, J d> for a random weighting w.
TEST(Primitives, ReverseModeIsTransposeOfForwardMode) {
  SplitMix64 rng(17);
  for (const PrimitiveCase& c : primitive_cases()) {
    const Tensor out = c.f_plain(c.x);
    const Tensor w = random_tensor(out.rows(), out.cols(), rng).reshaped(out.shape());
    const auto g = grad([&](std::span<const Var> in) { return sum(mul(c.f_var(in), Var(w))); }, c.x);
    const auto d = like(c.x, rng);
    const Tensor jd = jvp(c.f_dual, c.x, d).second;
    double lhs = 0.0, rhs = 0.0;
    for (std::size_t k = 0; k < d.size(); ++k)
      for (std::size_t i = 0; i < d[k].size(); ++i) lhs += g[k][i] * d[k][i];
    for (std::size_t i = 0; i < jd.size(); ++i) rhs += w[i] * jd[i];
    EXPECT_NEAR(lhs, rhs, 1e-6 * std::max(1.0, std::abs(rhs))) << c.name;
  }
}

TEST(Grad, QuadraticNorm) {
  const std::vector<Tensor> w{Tensor::row({1.0, 2.0})};
  const auto g = grad([](std::span<const Var> in) { return sum(mul(in[0], in[0])); }, w);
  EXPECT_EQ(g[0].values(), (std::vector<double>{2.0, 4.0}));
}

TEST(Grad, NonScalarLossThrows) {
  const std::vector<Tensor> w{Tensor::row({1.0, 2.0})};
  EXPECT_THROW(grad([](std::span<const Var> in) { return mul(in[0], in[0]); }, w), ShapeError);
}

TEST(Grad, MlpMatchesFiniteDifferences) {
  SplitMix64 rng(3);
  const auto x = mlp_point(rng);
  auto loss = [](auto in) { return sum(square(mlp2(in))); };
  const auto g = grad(loss, x);
  const auto fd = fd_grad([&](std::span<const Tensor> in) { return loss(in).item(); }, std::span<const Tensor>(x));
  EXPECT_LT(rel_err(g, fd), 1e-6);
}

TEST(StopGradient, IdentityOnValues) {
  const Tensor x = Tensor::row({1.0, 2.0, 3.0});
  EXPECT_EQ(stop_gradient(x).values(), x.values());
  EXPECT_EQ(stop_gradient(Var::leaf(x)).value().values(), x.values());
  EXPECT_EQ(stop_gradient(DualTensor(x, Tensor::row({1.0, 1.0, 1.0}))).primal().values(), x.values());
}

TEST(StopGradient, ContributesNoGradient) {
  const std::vector<Tensor> x{Tensor::row({1.0, 2.0, 3.0})};
  const auto g = grad([](std::span<const Var> in) { return sum(stop_gradient(in[0])); }, x);
  EXPECT_EQ(g[0].values(), (std::vector<double>{0.0, 0.0, 0.0}));
}

TEST(StopGradient, ForwardTangentIsZero) {
  const std::vector<Tensor> x{Tensor::scalar(2.0)}, d{Tensor::scalar(1.0)};
  EXPECT_EQ(jvp([](auto in) { return stop_gradient(in[0]); }, x, d).second.item(), 0.0);
}

TEST(StopGradient, OneFactorDetached) {
  const std::vector<Tensor> x{Tensor::scalar(2.0)};
  const auto g = grad([](std::span<const Var> in) { return mul(in[0], stop_gradient(in[0])); }, x);
  EXPECT_EQ(g[0].item(), 2.0);
  const std::vector<Tensor> d{Tensor::scalar(1.0)};
  EXPECT_EQ(jvp([](auto in) { return mul(in[0], stop_gradient(in[0])); }, x, d).second.item(), 2.0);
}

TEST(StopGradient, DetachedTargetEqualsConstantTarget) {
  SplitMix64 rng(8);
  const auto x = mlp_point(rng);
  const Tensor target_value = add_scalar(mlp2(std::span<const Tensor>(x)), 0.7);
  // Target computed from the same parameters but detached.
  const auto g_sg = grad(
      [](std::span<const Var> in) {
        Var target = stop_gradient(add_scalar(mlp2(in), 0.7));
        return sum(square(sub(scale(mlp2(in), 1.3), target)));
      },
      x);
  const auto g_const = grad(
      [&](std::span<const Var> in) { return sum(square(sub(scale(mlp2(in), 1.3), Var(target_value)))); }, x);
  for (std::size_t k = 0; k < x.size(); ++k) EXPECT_EQ(g_sg[k].values(), g_const[k].values());
}

TEST(Tensor, ConstructionRejectsLengthMismatch) {
  EXPECT_THROW(Tensor::matrix(2, 2, std::vector<double>{1.0, 2.0, 3.0}), ShapeError);
}

TEST(Tensor, RequireFiniteRejectsNan) {
  Tensor t = Tensor::row({1.0, std::nan("")});
  EXPECT_THROW(t.require_finite("x"), DomainError);
}

TEST(Tensor, MatmulShapeMismatchThrows) {
  EXPECT_THROW(matmul(Tensor::matrix(2, 3), Tensor::matrix(2, 3)), ShapeError);
}
