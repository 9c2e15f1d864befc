#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "icount/network.hpp"
#include "icount/optim.hpp"

using namespace icount;
using icount::testing::random_tensor;

namespace {

NetworkConfig small_config() {
  NetworkConfig cfg;
  cfg.extractor_channels = {4, 6, 8, 8};
  cfg.head_channels = {6, 4};
  return cfg;
}

void zero_all(const ParameterList<double>& params) {
  for (auto p : params)
    for (auto& v : p.tensor.data()) v = 0.0;
}

void randomize(const ParameterList<double>& params, Rng& rng, double scale = 0.5) {
  for (auto p : params)
    for (auto& v : p.tensor.data()) v = rng.uniform(-scale, scale);
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace

TEST(Extractor, DefaultShape) {
  NetworkConfig cfg;
  Rng rng(1);
  FeatureExtractor<double> f(cfg);
  f.init(rng);
  const auto y = f.forward(Tensor<double>(Shape{1, 3, 32, 32}));
  EXPECT_EQ(y.shape(), (Shape{1, 64, 4, 4}));
  EXPECT_EQ(cfg.feature_channels(), 64u);
}

TEST(Extractor, ExtentsAreCeilOfStride) {
  const auto cfg = small_config();
  Rng rng(2);
  FeatureExtractor<double> f(cfg);
  f.init(rng);
  for (int i = 0; i < 10; ++i) {
    const auto h = static_cast<std::size_t>(rng.integer(5, 40));
    const auto w = static_cast<std::size_t>(rng.integer(5, 40));
    const auto y = f.forward(Tensor<double>(Shape{1, 3, h, w}));
    EXPECT_EQ(y.shape(), (Shape{1, 8, (h + 7) / 8, (w + 7) / 8})) << h << "x" << w;
  }
}

TEST(Extractor, ZeroImageZeroBiasGivesZeroFeatures) {
  const auto cfg = small_config();
  Rng rng(3);
  FeatureExtractor<double> f(cfg);
  f.init(rng);
  for (auto p : f.parameters("f"))
    if (p.path.ends_with("bias")) zero_all({p});
  const auto y = f.forward(Tensor<double>(Shape{2, 3, 16, 16}));
  for (auto v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Extractor, RejectsNonRgbInput) {
  FeatureExtractor<double> f(small_config());
  EXPECT_THROW(f.forward(Tensor<double>(Shape{1, 1, 16, 16})), ShapeError);
}

TEST(Extractor, ParameterPaths) {
  FeatureExtractor<double> f(small_config());
  const auto params = f.parameters("f_t");
  ASSERT_FALSE(params.empty());
  EXPECT_EQ(params.front().path, "f_t/block1/conv/kernel");
}

TEST(Extractor, GradientFlowsToInput) {
  NetworkConfig cfg;
  cfg.stride = 2;
  cfg.extractor_channels = {3, 4};
  Rng rng(4);
  FeatureExtractor<double> f(cfg);
  f.init(rng);
  const auto x = random_tensor(rng, {1, 3, 6, 6}, 0.0, 1.0);
  const double err = icount::testing::gradcheck({x}, [&](const auto& in) { return icount::testing::probe(f.forward(in[0]), 1); });
  EXPECT_LE(err, 1e-3);
}

TEST(Head, OutputNonnegativeAndShape) {
  const auto cfg = small_config();
  Rng rng(5);
  CounterHead<double> h(cfg.feature_channels(), cfg.head_channels);
  h.init(rng);
  for (int i = 0; i < 5; ++i) {
    const auto hh = static_cast<std::size_t>(rng.integer(1, 9));
    const auto ww = static_cast<std::size_t>(rng.integer(1, 9));
    const auto d = h.forward(random_tensor(rng, {2, 8, hh, ww}, -3.0, 3.0));
    EXPECT_EQ(d.shape(), (Shape{2, 1, hh, ww}));
    for (auto v : d.data()) EXPECT_GE(v, 0.0);
  }
}

TEST(Head, ZeroFeaturesZeroBiasGiveZeroDensity) {
  const auto cfg = small_config();
  Rng rng(6);
  CounterHead<double> h(cfg.feature_channels(), cfg.head_channels);
  h.init(rng);
  const auto d = h.forward(Tensor<double>(Shape{1, 8, 3, 3}));
  for (auto v : d.data()) EXPECT_EQ(v, 0.0);
}

TEST(Head, ChannelMismatchRejected) {
  CounterHead<double> h(8, {4});
  EXPECT_THROW(h.forward(Tensor<double>(Shape{1, 5, 3, 3})), ShapeError);
}

TEST(Head, FrozenHeadRejectsOptimizerAndKeepsChecksum) {
  Rng rng(7);
  CounterHead<double> h(8, {4});
  h.init(rng);
  const auto params = h.parameters("h");
  h.freeze();
  const auto sum_before = h.checksum();
  EXPECT_THROW(Adam<double>{params}, GraphError);
  h.freeze();  // idempotent
  EXPECT_TRUE(h.frozen());
  EXPECT_EQ(h.checksum(), sum_before);
}

TEST(Count, SumOfMap) {
  EXPECT_DOUBLE_EQ(count(Tensor<double>(Shape{1, 1, 4, 4})).item(), 0.0);
  Tensor<double> one(Shape{1, 1, 3, 3});
  one.data()[4] = 1.0;
  EXPECT_DOUBLE_EQ(count(one).item(), 1.0);
  Rng rng(8);
  const auto m = random_tensor(rng, {1, 1, 16, 16}, 0.0, 1.0);
  double acc = 0.0;
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 16; ++j) acc += m.data()[i * 16 + j];
  EXPECT_NEAR(count(m).item(), acc, 1e-12);
}

TEST(Adaptor, IdentityInitIsNoOp) {
  Rng rng(9);
  Adaptor<double> a(8, true);
  const auto x = random_tensor(rng, {2, 8, 3, 3});
  EXPECT_LE(max_abs_diff(a.forward(x), x), 1e-12);
  EXPECT_EQ(a.forward(x).shape(), x.shape());
}

TEST(AdaptChain, EmptyChainIsIdentity) {
  Rng rng(10);
  const auto x = random_tensor(rng, {1, 8, 2, 2});
  const auto y = adapt_chain(x, std::span<const Adaptor<double>>{});
  EXPECT_EQ(y.values(), x.values());
}

TEST(AdaptChain, TwoIdentityAdaptors) {
  Rng rng(11);
  std::vector<Adaptor<double>> chain{Adaptor<double>(8, true), Adaptor<double>(8, true)};
  const auto x = random_tensor(rng, {1, 8, 3, 3});
  EXPECT_LE(max_abs_diff(adapt_chain(x, std::span<const Adaptor<double>>(chain)), x), 1e-12);
}

TEST(AdaptChain, NewestAdaptorAppliedFirst) {
  Rng rng(12);
  std::vector<Adaptor<double>> chain{Adaptor<double>(4, true), Adaptor<double>(4, true)};
  for (auto& a : chain) randomize(a.parameters("a"), rng);
  const auto x = random_tensor(rng, {1, 4, 3, 3});
  const auto manual = chain[0].forward(chain[1].forward(x));
  EXPECT_LE(max_abs_diff(adapt_chain(x, std::span<const Adaptor<double>>(chain)), manual), 1e-12);
}

TEST(AdaptChain, ChannelMismatchRejected) {
  std::vector<Adaptor<double>> chain{Adaptor<double>(4, true)};
  EXPECT_THROW(adapt_chain(Tensor<double>(Shape{1, 5, 2, 2}), std::span<const Adaptor<double>>(chain)), ShapeError);
}

namespace {

ModelState<double> three_task_dmd_state(Rng& rng) {
  auto s = ModelState<double>::create(small_config(), MethodKind::DMD, rng);
  for (int t = 1; t <= 3; ++t) {
    CounterHead<double> h(8, {6, 4});
    h.init(rng, 0.2);
    s.heads.push_back(std::move(h));
    freeze_head(s, static_cast<std::size_t>(t));
    if (t >= 2) {
      Adaptor<double> a(8, true);
      randomize(a.parameters("a"), rng, 0.3);
      a.freeze();
      s.adaptors.push_back(std::move(a));
    }
    snapshot_extractor(s);
    s.tasks.push_back("task" + std::to_string(t));
  }
  return s;
}

}  // namespace

TEST(InferTask, DmdComposesHeadAdaptorsAndExtractor) {
  Rng rng(13);
  auto s = three_task_dmd_state(rng);
  const auto x = random_tensor(rng, {1, 3, 16, 16}, 0.0, 1.0);
  const auto f = s.current.forward(x);
  const auto manual = s.heads[0].forward(s.adaptors[0].forward(s.adaptors[1].forward(f)));
  EXPECT_LE(max_abs_diff(infer_task(x, 1, s).density, manual), 1e-12);
  const auto last = s.heads[2].forward(f);
  EXPECT_EQ(infer_task(x, 3, s).density.values(), last.values());
}

TEST(InferTask, IdentityAdaptorsMatchPlainHead) {
  Rng rng(14);
  auto s = three_task_dmd_state(rng);
  for (auto& a : s.adaptors) a = Adaptor<double>(8, true);
  const auto x = random_tensor(rng, {1, 3, 16, 16}, 0.0, 1.0);
  const auto plain = s.heads[0].forward(s.current.forward(x));
  EXPECT_LE(max_abs_diff(infer_task(x, 1, s).density, plain), 1e-12);
}

TEST(InferTask, UnknownTaskRejected) {
  Rng rng(15);
  auto s = three_task_dmd_state(rng);
  EXPECT_THROW(infer_task(Tensor<double>(Shape{1, 3, 8, 8}), 4, s), std::out_of_range);
  EXPECT_THROW(infer_task(Tensor<double>(Shape{1, 3, 8, 8}), 0, s), std::out_of_range);
}

TEST(InferTask, CountsMatchDensitySum) {
  Rng rng(16);
  auto s = three_task_dmd_state(rng);
  const auto x = random_tensor(rng, {2, 3, 16, 16}, 0.0, 1.0);
  const auto r = infer_task(x, 2, s);
  const std::size_t per = r.density.numel() / 2;
  for (std::size_t i = 0; i < 2; ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < per; ++k) acc += r.density.data()[i * per + k];
    EXPECT_NEAR(r.counts[i], acc, 1e-12);
  }
}

TEST(Snapshot, KeepsExactlyOnePreviousExtractor) {
  Rng rng(17);
  auto s = ModelState<double>::create(small_config(), MethodKind::FT, rng);
  EXPECT_EQ(s.stored_extractors(), 1u);
  snapshot_extractor(s);
  snapshot_extractor(s);
  EXPECT_EQ(s.stored_extractors(), 2u);
  EXPECT_FALSE(s.previous->parameters("p").front().tensor.same_storage(s.current.parameters("c").front().tensor));
  EXPECT_TRUE(s.previous->parameters("p").front().tensor.frozen());
}

TEST(Snapshot, ModifiedFrozenHeadDetected) {
  Rng rng(18);
  auto s = three_task_dmd_state(rng);
  EXPECT_NO_THROW(verify_frozen_heads(s));
  s.heads[1].parameters("h").front().tensor.data()[0] += 1.0;
  EXPECT_THROW(verify_frozen_heads(s), std::logic_error);
}

TEST(HeadDepth, MovesLayersBetweenExtractorAndHead) {
  NetworkConfig cfg;
  const auto deeper = with_head_depth(cfg, 3);
  EXPECT_EQ(deeper.head_channels.size(), 3u);
  EXPECT_EQ(deeper.extractor_channels.size(), cfg.extractor_channels.size() - 1);
  const auto shallower = with_head_depth(cfg, 1);
  EXPECT_EQ(shallower.head_channels.size(), 1u);
  EXPECT_EQ(shallower.extractor_channels.size(), cfg.extractor_channels.size() + 1);
  EXPECT_EQ(with_head_depth(cfg, 2), cfg);
  EXPECT_NO_THROW(deeper.validate());
  EXPECT_NO_THROW(shallower.validate());
}

TEST(NetworkConfig, Validation) {
  NetworkConfig cfg;
  cfg.stride = 6;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg.stride = 32;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}
