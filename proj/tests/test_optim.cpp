#include <cmath>

#include <gtest/gtest.h>

#include "flatnce/optim.hpp"

using namespace flatnce;

namespace {

std::vector<Parameter> one_param(double v) { return {{"theta", Matrix<double>::scalar(v)}}; }

}  // namespace

TEST(Sgd, PlainStep) {
  auto p = one_param(1.5);
  OptimizerState st;
  OptimizerSpec spec{OptimizerKind::sgd, 0.1};
  optimizer_step(p, {Matrix<double>::scalar(2.0)}, st, spec);
  EXPECT_EQ(p[0].value.item(), 1.5 - 0.1 * 2.0);
}

TEST(Sgd, MomentumAccumulates) {
  auto p = one_param(0.0);
  OptimizerState st;
  OptimizerSpec spec{OptimizerKind::sgd, 0.1, 0.9};
  optimizer_step(p, {Matrix<double>::scalar(1.0)}, st, spec);
  optimizer_step(p, {Matrix<double>::scalar(1.0)}, st, spec);
  EXPECT_NEAR(p[0].value.item(), -0.1 - 0.1 * 1.9, 1e-15);
}

TEST(Adam, FirstStepByHand) {
  // m = 0.1 g, v = 0.001 g², m̂ = g, v̂ = g², step = lr·g/(|g| + eps).
  const double g = -0.37, lr = 0.01, eps = 1e-8;
  auto p = one_param(2.0);
  OptimizerState st;
  optimizer_step(p, {Matrix<double>::scalar(g)}, st, {OptimizerKind::adam, lr});
  EXPECT_NEAR(p[0].value.item(), 2.0 - lr * g / (std::abs(g) + eps), 1e-15);
}

TEST(Adam, SecondStepByHand) {
  const double g1 = 0.5, g2 = -1.25, lr = 0.001, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  auto p = one_param(0.0);
  OptimizerState st;
  optimizer_step(p, {Matrix<double>::scalar(g1)}, st, {OptimizerKind::adam, lr});
  const double after1 = p[0].value.item();
  optimizer_step(p, {Matrix<double>::scalar(g2)}, st, {OptimizerKind::adam, lr});
  const double m = b1 * (1 - b1) * g1 + (1 - b1) * g2;
  const double v = b2 * (1 - b2) * g1 * g1 + (1 - b2) * g2 * g2;
  const double mhat = m / (1 - b1 * b1), vhat = v / (1 - b2 * b2);
  EXPECT_NEAR(p[0].value.item(), after1 - lr * mhat / (std::sqrt(vhat) + eps), 1e-15);
}

TEST(Optimizer, ZeroGradientsLeaveParamsUnchanged) {
  for (auto kind : {OptimizerKind::sgd, OptimizerKind::adam}) {
    std::vector<Parameter> p = {{"a", Matrix<double>{{1.0, -2.0}}}, {"b", Matrix<double>::scalar(3.0)}};
    const auto before = p;
    OptimizerState st;
    optimizer_step(p, {Matrix<double>(1, 2), Matrix<double>(1, 1)}, st, {kind, 0.1, 0.5});
    EXPECT_EQ(p, before);
  }
}

TEST(Optimizer, NonFiniteGradientNamesParameter) {
  std::vector<Parameter> p = {{"f.w0", Matrix<double>(2, 2)}, {"h.b1", Matrix<double>(1, 2)}};
  OptimizerState st;
  try {
    optimizer_step(p, {Matrix<double>(2, 2), Matrix<double>{{0.0, std::nan("")}}}, st, {});
    FAIL();
  } catch (const NonFiniteGradient& e) {
    EXPECT_EQ(e.parameter, "h.b1");
  }
  EXPECT_THROW(optimizer_step(p, {Matrix<double>(2, 2)}, st, {}), ShapeError);
}

TEST(Optimizer, SpecValidation) {
  EXPECT_THROW((OptimizerSpec{OptimizerKind::sgd, -1.0}.validate()), std::invalid_argument);
  EXPECT_THROW((OptimizerSpec{OptimizerKind::adam, 1e-3, 0.0, 1.0}.validate()), std::invalid_argument);
  EXPECT_NO_THROW(OptimizerSpec{}.validate());
}
