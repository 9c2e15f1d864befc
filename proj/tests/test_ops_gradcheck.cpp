#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "icount/ops.hpp"

using namespace icount;
using icount::testing::gradcheck;
using icount::testing::gradcheck_detail;
using icount::testing::probe;
using icount::testing::random_tensor;

namespace {
constexpr int kCases = 20;
constexpr double kTol = 1e-3;
}  // namespace

TEST(Conv2d, OneByOneKernelScales) {
  Tensor<double> x(Shape{1, 1, 3, 3}, 1.0);
  Tensor<double> k(Shape{1, 1, 1, 1}, 2.0);
  const auto y = conv2d(x, k, std::nullopt, 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  for (auto v : y.data()) EXPECT_DOUBLE_EQ(v, 2.0);
}

TEST(Conv2d, FullWindowSum) {
  Tensor<double> x(Shape{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  Tensor<double> k(Shape{1, 1, 2, 2}, 1.0);
  const auto y = conv2d(x, k, std::nullopt, 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(y.item(), 10.0);
}

TEST(Conv2d, OutputExtents) {
  Tensor<double> x(Shape{2, 3, 7, 6});
  Tensor<double> k(Shape{4, 3, 3, 3});
  EXPECT_EQ(conv2d(x, k, std::nullopt, 2, 1).shape(), (Shape{2, 4, 4, 3}));
  EXPECT_EQ(conv2d(x, k, std::nullopt, 1, 0).shape(), (Shape{2, 4, 5, 4}));
}

TEST(Conv2d, MatchesDirectLoopOracle) {
  Rng rng(3);
  const auto x = random_tensor(rng, {2, 3, 6, 5});
  const auto k = random_tensor(rng, {4, 3, 3, 3});
  const auto b = random_tensor(rng, {4});
  const std::size_t stride = 2, pad = 1;
  const auto y = conv2d(x, k, std::optional<Tensor<double>>(b), stride, pad);
  const std::size_t ho = y.dim(2), wo = y.dim(3);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t o = 0; o < 4; ++o)
      for (std::size_t i = 0; i < ho; ++i)
        for (std::size_t j = 0; j < wo; ++j) {
          double acc = b.data()[o];
          for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t u = 0; u < 3; ++u)
              for (std::size_t v = 0; v < 3; ++v) {
                const long yy = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                const long xx = static_cast<long>(j * stride + v) - static_cast<long>(pad);
                if (yy < 0 || xx < 0 || yy >= 6 || xx >= 5) continue;
                acc += x.data()[((n * 3 + c) * 6 + yy) * 5 + xx] * k.data()[((o * 3 + c) * 3 + u) * 3 + v];
              }
          EXPECT_NEAR(y.data()[((n * 4 + o) * ho + i) * wo + j], acc, 1e-12);
        }
}

TEST(Conv2d, ShapeErrors) {
  Tensor<double> x(Shape{1, 3, 4, 4});
  EXPECT_THROW(conv2d(x, Tensor<double>(Shape{2, 2, 3, 3}), std::nullopt, 1, 0), ShapeError);
  EXPECT_THROW(conv2d(x, Tensor<double>(Shape{2, 3, 5, 5}), std::nullopt, 1, 0), ShapeError);
  EXPECT_THROW(conv2d(x, Tensor<double>(Shape{2, 3, 3, 3}), std::optional(Tensor<double>(Shape{3})), 1, 0), ShapeError);
  EXPECT_THROW(conv2d(Tensor<double>(Shape{3, 4, 4}), Tensor<double>(Shape{2, 3, 3, 3}), std::nullopt, 1, 0), ShapeError);
  EXPECT_THROW(conv2d(x, Tensor<double>(Shape{2, 3, 3, 3}), std::nullopt, 0, 0), ShapeError);
}

TEST(Conv2d, GradientOfSumMatchesFiniteDifferences) {
  for (int seed = 0; seed < kCases; ++seed) {
    Rng rng(100 + seed);
    const auto x = random_tensor(rng, {1, 2, 5, 5});
    const auto k = random_tensor(rng, {3, 2, 3, 3});
    const double err = gradcheck({x, k}, [](const auto& in) { return sum(conv2d(in[0], in[1], std::nullopt, 1, 0)); },
                                 1e-3);
    EXPECT_LE(err, kTol) << "seed " << seed;
  }
}

TEST(Conv2d, GradientWithBiasStrideAndPadding) {
  for (int seed = 0; seed < kCases; ++seed) {
    Rng rng(200 + seed);
    const std::size_t stride = 1 + seed % 2, pad = seed % 3 == 0 ? 0 : 1;
    const auto x = random_tensor(rng, {2, 3, 6, 7});
    const auto k = random_tensor(rng, {2, 3, 3, 3});
    const auto b = random_tensor(rng, {2});
    const double err = gradcheck({x, k, b}, [&](const auto& in) {
      return probe(conv2d(in[0], in[1], std::optional(in[2]), stride, pad), 99);
    });
    EXPECT_LE(err, kTol) << "seed " << seed;
  }
}

TEST(Conv2d, PointwiseKernelGradient) {
  for (int seed = 0; seed < kCases; ++seed) {
    Rng rng(300 + seed);
    const auto x = random_tensor(rng, {2, 4, 3, 3});
    const auto k = random_tensor(rng, {4, 4, 1, 1});
    const auto b = random_tensor(rng, {4});
    const double err = gradcheck(
        {x, k, b}, [](const auto& in) { return probe(conv2d(in[0], in[1], std::optional(in[2]), 1, 0), 5); });
    EXPECT_LE(err, kTol) << "seed " << seed;
  }
}

TEST(Elementwise, ReluValues) {
  Tensor<double> x(Shape{3}, std::vector<double>{-1, 0, 2}, true);
  const auto y = relu(x);
  EXPECT_EQ(y.values(), (std::vector<double>{0, 0, 2}));
  backward(sum(y));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{0, 0, 1}));
}

TEST(Elementwise, AbsValuesAndSignGradient) {
  Tensor<double> x(Shape{3}, std::vector<double>{-3, 3, 0}, true);
  const auto y = abs(x);
  EXPECT_EQ(y.values(), (std::vector<double>{3, 3, 0}));
  backward(sum(y));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{-1, 1, 0}));
}

TEST(Elementwise, AddMatchesLoopOracle) {
  Rng rng(5);
  const auto a = random_tensor(rng, {2, 2});
  const auto b = random_tensor(rng, {2, 2});
  const auto c = add(a, b);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(c.data()[i], a.data()[i] + b.data()[i]);
}

TEST(Elementwise, BinaryShapeMismatchRejected) {
  Tensor<double> a(Shape{2, 2});
  Tensor<double> b(Shape{4});
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(sub(a, b), ShapeError);
  EXPECT_THROW(mul(a, b), ShapeError);
}

TEST(Elementwise, ScalarOperandBroadcasts) {
  Tensor<double> a(Shape{3}, std::vector<double>{1, 2, 3}, true);
  Tensor<double> s = Tensor<double>::scalar(2.0);
  s.set_requires_grad(true);
  const auto y = mul(a, s);
  EXPECT_EQ(y.values(), (std::vector<double>{2, 4, 6}));
  backward(sum(y));
  EXPECT_DOUBLE_EQ(s.grad()[0], 6.0);
  EXPECT_DOUBLE_EQ(a.grad()[2], 2.0);
}

namespace {

void check_unary(const char* name, const std::function<Tensor<double>(const Tensor<double>&)>& op, double margin) {
  for (int seed = 0; seed < kCases; ++seed) {
    Rng rng(1000 + seed);
    const auto x = random_tensor(rng, {2, 3, 4}, -2.0, 2.0, margin);
    const double err = gradcheck({x}, [&](const auto& in) { return probe(op(in[0]), seed); });
    EXPECT_LE(err, kTol) << name << " seed " << seed;
  }
}

void check_binary(const char* name, const std::function<Tensor<double>(const Tensor<double>&, const Tensor<double>&)>& op) {
  for (int seed = 0; seed < kCases; ++seed) {
    Rng rng(2000 + seed);
    const auto a = random_tensor(rng, {3, 4});
    const auto b = random_tensor(rng, {3, 4});
    const double err = gradcheck({a, b}, [&](const auto& in) { return probe(op(in[0], in[1]), seed); });
    EXPECT_LE(err, kTol) << name << " seed " << seed;
  }
}

void check_reduce(const char* name, const std::function<Tensor<double>(const Tensor<double>&)>& op, double margin) {
  for (int seed = 0; seed < kCases; ++seed) {
    Rng rng(3000 + seed);
    const auto x = random_tensor(rng, {4, 5}, -2.0, 2.0, margin);
    const double err = gradcheck({x}, [&](const auto& in) { return op(in[0]); });
    EXPECT_LE(err, kTol) << name << " seed " << seed;
  }
}

}  // namespace

TEST(GradCheck, Relu) { check_unary("relu", [](const auto& x) { return relu(x); }, 0.05); }
TEST(GradCheck, Abs) { check_unary("abs", [](const auto& x) { return abs(x); }, 0.05); }
TEST(GradCheck, ScalarMul) { check_unary("scalar_mul", [](const auto& x) { return scalar_mul(x, -1.7); }, 0.0); }
TEST(GradCheck, Reshape) {
  check_unary("reshape", [](const auto& x) { return reshape(x, Shape{4, 6}); }, 0.0);
}
TEST(GradCheck, Add) { check_binary("add", [](const auto& a, const auto& b) { return add(a, b); }); }
TEST(GradCheck, Sub) { check_binary("sub", [](const auto& a, const auto& b) { return sub(a, b); }); }
TEST(GradCheck, Mul) { check_binary("mul", [](const auto& a, const auto& b) { return mul(a, b); }); }
TEST(GradCheck, Sum) { check_reduce("sum", [](const auto& x) { return sum(x); }, 0.0); }
TEST(GradCheck, L1Norm) { check_reduce("l1_norm", [](const auto& x) { return l1_norm(x); }, 0.05); }
TEST(GradCheck, SqL2Norm) { check_reduce("sq_l2_norm", [](const auto& x) { return sq_l2_norm(x); }, 0.0); }
TEST(GradCheck, L2Norm) { check_reduce("l2_norm", [](const auto& x) { return l2_norm(x); }, 0.0); }

TEST(GradCheck, ConvReluSumComposite) {
  for (int seed = 0; seed < kCases; ++seed) {
    Rng rng(4000 + seed);
    const auto x = random_tensor(rng, {1, 2, 6, 6});
    const auto k1 = random_tensor(rng, {3, 2, 3, 3});
    const auto k2 = random_tensor(rng, {1, 3, 1, 1});
    const auto r = gradcheck_detail({x, k1, k2}, [](const auto& in) {
      return sum(relu(conv2d(relu(conv2d(in[0], in[1], std::nullopt, 2, 1)), in[2], std::nullopt, 1, 0)));
    }, 1e-3);
    EXPECT_GE(r.fraction(), 0.95) << "seed " << seed;
  }
}

TEST(Reduce, KnownValues) {
  EXPECT_DOUBLE_EQ(sum(Tensor<double>::zeros({4, 4})).item(), 0.0);
  Tensor<double> x(Shape{2}, std::vector<double>{1, 2}, true);
  const auto s = sq_l2_norm(x);
  EXPECT_DOUBLE_EQ(s.item(), 5.0);
  backward(s);
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
  EXPECT_DOUBLE_EQ(l2_norm(Tensor<double>(Shape{2}, std::vector<double>{3, 4})).item(), 5.0);
}

TEST(Reduce, L1NormMatchesAccumulation) {
  Rng rng(17);
  const auto x = random_tensor(rng, {100}, -5.0, 5.0);
  double acc = 0.0;
  for (auto v : x.data()) acc += std::abs(v);
  EXPECT_NEAR(l1_norm(x).item(), acc, 1e-12);
}

TEST(ScalarWithGradient, InjectsGivenGradient) {
  Tensor<double> x(Shape{3}, std::vector<double>{1, 2, 3}, true);
  const auto loss = scalar_mul(scalar_with_gradient(x, 4.0, {0.5, -1.0, 2.0}), 2.0);
  EXPECT_DOUBLE_EQ(loss.item(), 8.0);
  backward(loss);
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{1.0, -2.0, 4.0}));
  EXPECT_THROW(scalar_with_gradient(x, 1.0, {1.0}), ShapeError);
}
