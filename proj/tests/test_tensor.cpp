#include <gtest/gtest.h>

#include <cmath>

#include "icount/ops.hpp"
#include "icount/random.hpp"
#include "icount/tensor.hpp"

using namespace icount;

TEST(Tensor, DataLengthMatchesShape) {
  Tensor<double> t(Shape{2, 3, 4});
  EXPECT_EQ(t.numel(), 24u);
  EXPECT_EQ(t.rank(), 3u);
  EXPECT_THROW(Tensor<double>(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST(Tensor, NoGradientBufferWithoutRequiresGrad) {
  Tensor<double> x(Shape{3}, std::vector<double>{1, 2, 3});
  const auto loss = sum(mul(x, x));
  EXPECT_FALSE(x.has_grad());
  EXPECT_FALSE(loss.requires_grad());
}

TEST(Tensor, GradientHasDataShape) {
  Tensor<double> x(Shape{2, 2}, std::vector<double>{1, 2, 3, 4}, true);
  backward(sum(x));
  EXPECT_EQ(x.grad().size(), x.numel());
}

TEST(Tensor, SumOfSquaresGradient) {
  Tensor<double> x(Shape{2}, std::vector<double>{1, 2}, true);
  backward(sum(mul(x, x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
}

TEST(Tensor, LeafGradientsAccumulateAcrossPasses) {
  Tensor<double> x(Shape{2}, std::vector<double>{1, 2}, true);
  backward(sum(x));
  backward(sum(x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  x.zero_grad();
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.0);
}

TEST(Tensor, UnreachableLeafKeepsZeroGradient) {
  Tensor<double> x(Shape{2}, std::vector<double>{1, 2}, true);
  Tensor<double> unused(Shape{2}, std::vector<double>{5, 6}, true);
  backward(sum(x));
  EXPECT_DOUBLE_EQ(unused.grad()[0], 0.0);
  EXPECT_DOUBLE_EQ(unused.grad()[1], 0.0);
}

TEST(Tensor, NonScalarLossRejected) {
  Tensor<double> x(Shape{2}, std::vector<double>{1, 2}, true);
  EXPECT_THROW(backward(mul(x, x)), ShapeError);
}

TEST(Tensor, SecondBackwardOnSameGraphRejected) {
  Tensor<double> x(Shape{2}, std::vector<double>{1, 2}, true);
  const auto loss = sum(mul(x, x));
  backward(loss);
  EXPECT_THROW(backward(loss), GraphError);
}

TEST(Tensor, ReusingConsumedIntermediateRejected) {
  Tensor<double> x(Shape{2}, std::vector<double>{1, 2}, true);
  const auto y = mul(x, x);
  backward(sum(y));
  EXPECT_THROW(sum(y), GraphError);
}

TEST(Tensor, SharedSubexpressionGradient) {
  // loss = sum(y) + sum(y*y) with y = 3x
  Tensor<double> x(Shape{1}, std::vector<double>{2}, true);
  const auto y = scalar_mul(x, 3.0);
  backward(add(sum(y), sum(mul(y, y))));
  EXPECT_DOUBLE_EQ(x.grad()[0], 3.0 + 2.0 * 6.0 * 3.0);
}

TEST(Tensor, NoGradGuardStopsRecording) {
  Tensor<double> x(Shape{2}, std::vector<double>{1, 2}, true);
  {
    NoGradGuard guard;
    EXPECT_FALSE(grad_enabled());
    EXPECT_FALSE(sum(x).requires_grad());
  }
  EXPECT_TRUE(grad_enabled());
  EXPECT_TRUE(sum(x).requires_grad());
}

TEST(Tensor, FrozenTensorCannotTrackAgain) {
  Tensor<double> x(Shape{2}, std::vector<double>{1, 2}, true);
  x.freeze();
  EXPECT_TRUE(x.frozen());
  EXPECT_FALSE(x.requires_grad());
  EXPECT_THROW(x.set_requires_grad(true), GraphError);
}

TEST(Tensor, CloneIsIndependent) {
  Tensor<double> x(Shape{2}, std::vector<double>{1, 2});
  auto y = x.clone();
  y.data()[0] = 9.0;
  EXPECT_DOUBLE_EQ(x.data()[0], 1.0);
  EXPECT_FALSE(x.same_storage(y));
  Tensor<double> alias = x;
  EXPECT_TRUE(alias.same_storage(x));
}

TEST(Tensor, LinearityOfBackward) {
  Rng rng(7);
  Tensor<double> x(Shape{5});
  for (auto& v : x.data()) v = rng.uniform(-1, 1);
  const double a = 0.7, b = -1.3;

  auto grad_of = [&](auto make_loss) {
    Tensor<double> xc = x.clone();
    xc.set_requires_grad(true);
    backward(make_loss(xc));
    return std::vector<double>(xc.grad().begin(), xc.grad().end());
  };
  auto l1 = [](const Tensor<double>& t) { return sq_l2_norm(t); };
  auto l2 = [](const Tensor<double>& t) { return sum(mul(t, scalar_mul(t, 3.0))); };
  const auto g1 = grad_of(l1);
  const auto g2 = grad_of(l2);
  const auto gc = grad_of([&](const Tensor<double>& t) { return add(scalar_mul(l1(t), a), scalar_mul(l2(t), b)); });
  for (std::size_t i = 0; i < gc.size(); ++i) EXPECT_NEAR(gc[i], a * g1[i] + b * g2[i], 1e-10);
}

TEST(Tensor, DeterministicForwardAndBackward) {
  auto run = [] {
    Rng rng(11);
    Tensor<double> x(Shape{1, 2, 5, 5});
    Tensor<double> k(Shape{3, 2, 3, 3});
    for (auto& v : x.data()) v = rng.uniform(-1, 1);
    for (auto& v : k.data()) v = rng.uniform(-1, 1);
    k.set_requires_grad(true);
    const auto y = relu(conv2d(x, k, std::nullopt, 1, 1));
    const auto loss = sq_l2_norm(y);
    const double value = loss.item();
    backward(loss);
    return std::make_pair(value, std::vector<double>(k.grad().begin(), k.grad().end()));
  };
  const auto a = run();
  const auto b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(Tensor, Float32Supported) {
  Tensor<float> x(Shape{2}, std::vector<float>{1.f, 2.f}, true);
  backward(sum(mul(x, x)));
  EXPECT_FLOAT_EQ(x.grad()[1], 4.f);
}
