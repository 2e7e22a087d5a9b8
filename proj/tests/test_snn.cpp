#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "sfqn/grad_check.hpp"
#include "sfqn/snn.hpp"
#include "support.hpp"

using namespace sfqn;
using namespace testing_support;

namespace {

LifState binary_state() { return LifState{}; }

LifState ternary_state() {
  LifState s;
  s.theta_neg = -4.0;
  return s;
}

Real step_value(LifState& s, Real x) { return lif_step(s, ad::constant(DenseArray({1}, x))).value()[0]; }

bool in_alphabet(const DenseArray& a, bool ternary) {
  for (Real v : a.values())
    if (!(v == 0.0 || v == 1.0 || (ternary && v == -1.0))) return false;
  return true;
}

SpikeTrain random_binary_train(Shape s, std::mt19937_64& rng, double p) {
  std::bernoulli_distribution fire(p);
  DenseArray d(std::move(s));
  for (auto& v : d.values()) v = fire(rng);
  return {d, SpikeAlphabet::binary};
}

}  // namespace

TEST(Lif, ConstantDriveOfTwoFiresEveryStep) {
  auto s = binary_state();
  for (int t = 0; t < 10; ++t) {
    EXPECT_EQ(step_value(s, 2.0), 1.0);
    EXPECT_DOUBLE_EQ(s.v.value()[0], 0.0);
  }
}

TEST(Lif, TernaryNegativeCrossing) {
  auto s = ternary_state();
  EXPECT_EQ(step_value(s, -10.0), -1.0);
  EXPECT_DOUBLE_EQ(s.v.value()[0], -1.0);
}

TEST(Lif, ZeroDriveNeverFires) {
  auto b = binary_state();
  auto t = ternary_state();
  for (int i = 0; i < 50; ++i) {
    EXPECT_EQ(step_value(b, 0.0), 0.0);
    EXPECT_EQ(step_value(t, 0.0), 0.0);
  }
}

TEST(Lif, LeakWithoutFiring) {
  // x = 1.5: v1 = 0.75, v2 = 1.125 fires, v -> 0.125
  auto s = binary_state();
  EXPECT_EQ(step_value(s, 1.5), 0.0);
  EXPECT_DOUBLE_EQ(s.v.value()[0], 0.75);
  EXPECT_EQ(step_value(s, 1.5), 1.0);
  EXPECT_DOUBLE_EQ(s.v.value()[0], 0.125);
}

TEST(Lif, ShapeMismatchIsAnError) {
  auto s = binary_state();
  lif_step(s, ad::constant(DenseArray({3})));
  EXPECT_THROW(lif_step(s, ad::constant(DenseArray({4}))), DimensionError);
}

TEST(Lif, AlphabetAndFiniteStateOnRandomDrive) {
  std::mt19937_64 rng(1);
  for (bool ternary : {false, true}) {
    auto s = ternary ? ternary_state() : binary_state();
    for (int t = 0; t < 200; ++t) {
      auto out = lif_step(s, ad::constant(random_array({64}, rng, -20, 20))).value();
      ASSERT_TRUE(in_alphabet(out, ternary));
      ASSERT_TRUE(s.v.value().all_finite());
    }
  }
}

TEST(Lif, SurrogateGradientAtThresholdIsHalfAlpha) {
  LifState s;
  s.alpha = 3.0;
  auto x = ad::parameter(DenseArray({1}, 2.0));  // v = 1 = theta
  auto out = lif_step(s, x);
  ad::backward(ad::sum(out));
  EXPECT_NEAR(x.grad()[0], 0.5 * 1.5, 1e-12);
}

TEST(ConvLif, ZeroInputGivesZeroOutput) {
  ParameterSet ps;
  Rng rng(2);
  auto block = ConvLifBlock::create(ps, "c", 2, 4, 3, 1, 1, NeuronGroup(NeuronKind::binary_lif, {}), rng, 1.0);
  auto out = conv_lif_block({DenseArray({5, 2, 6, 6}), SpikeAlphabet::binary}, block);
  EXPECT_EQ(out.data.shape(), (Shape{5, 4, 6, 6}));
  EXPECT_EQ(out.data.sum(), 0.0);
}

TEST(ConvLif, SingleSpikePassesThroughUnitKernel) {
  ParameterSet ps;
  Rng rng(3);
  auto block = ConvLifBlock::create(ps, "c", 1, 1, 1, 1, 0, NeuronGroup(NeuronKind::binary_lif, {}), rng, 1.0);
  block.kernels.mutable_value()[0] = 2.0;
  DenseArray in({4, 1, 5, 5});
  in(2, 0, 3, 1) = 1;
  auto out = conv_lif_block({in, SpikeAlphabet::binary}, block);
  EXPECT_EQ(out.data, in);
}

TEST(ConvLif, RejectsNonBinaryInput) {
  ParameterSet ps;
  Rng rng(4);
  auto block = ConvLifBlock::create(ps, "c", 1, 1, 1, 1, 0, NeuronGroup(NeuronKind::binary_lif, {}), rng, 1.0);
  EXPECT_THROW(conv_lif_block({DenseArray({2, 1, 3, 3}, 0.5), SpikeAlphabet::binary}, block), DimensionError);
  EXPECT_THROW(conv_lif_block({DenseArray({2, 1, 3, 3}, -1.0), SpikeAlphabet::ternary}, block), DimensionError);
}

TEST(ConvLif, AlphabetAndStateIsolation) {
  ParameterSet ps;
  Rng rng(5);
  std::mt19937_64 g(5);
  auto block = ConvLifBlock::create(ps, "c", 3, 8, 3, 2, 1, NeuronGroup(NeuronKind::binary_lif, {}), rng, 3.0);
  for (int trial = 0; trial < 10; ++trial) {
    auto in = random_binary_train({6, 3, 9, 9}, g, 0.4);
    auto a = conv_lif_block(in, block);
    auto b = conv_lif_block(in, block);
    ASSERT_TRUE(a.alphabet_holds());
    ASSERT_TRUE(in_alphabet(a.data, false));
    ASSERT_EQ(a.data, b.data);
    ASSERT_EQ(a.data.shape(), (Shape{6, 8, 5, 5}));
  }
}

TEST(CrossFusion, TernaryScoresOfAllOnesEqualWidth) {
  const std::size_t d = 12, L = 3;
  auto q = ad::constant(DenseArray({L, d}, 1.0));
  auto k = ad::constant(DenseArray({L, d}, 1.0));
  auto s = ad::ternary_scores(q, k, 1, 1).value();
  for (Real v : s.values()) EXPECT_EQ(v, static_cast<Real>(d));
}

TEST(CrossFusion, ZeroInputsGiveZeroScores) {
  ParameterSet ps;
  Rng rng(6);
  FusionConfig fc;
  fc.tokens = 4;
  auto f = CrossFusion::create(ps, "f", fc, {}, rng);
  auto z = ad::constant(DenseArray({4, 32}));
  auto out = f.step(z, z, 1).value();
  for (Real v : f.last_scores().values()) EXPECT_EQ(v, 0.0);
  EXPECT_TRUE(in_alphabet(out, false));
}

TEST(CrossFusion, ZeroInputOutputIsResidualPathOnly) {
  // zero tokens: attention and value neurons are silent, so the output is a
  // function of the bias terms alone and must not depend on the Q/K weights
  ParameterSet ps1, ps2;
  Rng r1(7), r2(7);
  FusionConfig fc;
  fc.tokens = 4;
  auto f1 = CrossFusion::create(ps1, "f", fc, {}, r1);
  auto f2 = CrossFusion::create(ps2, "f", fc, {}, r2);
  std::mt19937_64 g(7);
  for (const auto& name : {"f.ab.wq", "f.ab.wk", "f.ba.wq", "f.ba.wk", "f.ab.wv", "f.ba.wv"})
    ad::Var(ps2.get(name)).mutable_value() = random_array({32, 32}, g, -3, 3);
  auto z = ad::constant(DenseArray({4, 32}));
  for (int t = 0; t < 4; ++t) ASSERT_EQ(f1.step(z, z, 1).value(), f2.step(z, z, 1).value());
}

TEST(CrossFusion, AlphabetOnRandomInputsAndMismatch) {
  ParameterSet ps;
  Rng rng(8);
  std::mt19937_64 g(8);
  FusionConfig fc;
  fc.tokens = 9;
  auto f = CrossFusion::create(ps, "f", fc, {}, rng);
  for (int t = 0; t < 20; ++t) {
    auto a = random_binary_train({18, 32}, g, 0.3).data;
    auto b = random_binary_train({18, 32}, g, 0.3).data;
    auto out = f.step(ad::constant(a), ad::constant(b), 2).value();
    ASSERT_EQ(out.shape(), (Shape{18, 32}));
    ASSERT_TRUE(in_alphabet(out, false));
    for (Real v : f.last_scores().values()) ASSERT_EQ(v, std::round(v));
  }
  EXPECT_THROW(f.step(ad::constant(DenseArray({18, 32})), ad::constant(DenseArray({9, 32})), 1), DimensionError);
  EXPECT_THROW(CrossFusion::create(ps, "g", {30, 8, 128, 4, true}, {}, rng), ConfigError);
}

TEST(FcHead, ZeroInputGivesZeroSpikesAndZeroLambda) {
  ParameterSet ps;
  Rng rng(9);
  auto head = FcLifHead::create(ps, "h", 16, 512, NeuronGroup(NeuronKind::binary_lif, {}), rng, 1.0);
  auto spikes = fc_lif_head({DenseArray({5, 16}), SpikeAlphabet::binary}, head);
  EXPECT_EQ(spikes.data.shape(), (Shape{5, 512}));
  EXPECT_EQ(spikes.data.sum(), 0.0);
  std::mt19937_64 g(9);
  EXPECT_EQ(accumulate_population(spikes.data, random_array({512, 25}, g), 5).sum(), 0.0);
}

TEST(FcHead, DeterministicForFixedWeights) {
  ParameterSet ps;
  Rng rng(10);
  std::mt19937_64 g(10);
  auto head = FcLifHead::create(ps, "h", 20, 64, NeuronGroup(NeuronKind::binary_lif, {}), rng, 3.0);
  auto in = random_binary_train({5, 20}, g, 0.5);
  EXPECT_EQ(fc_lif_head(in, head).data, fc_lif_head(in, head).data);
}

TEST(FcHead, ScalingPositiveWeightsNeverReducesSpikeCount) {
  std::mt19937_64 g(11);
  for (int trial = 0; trial < 500; ++trial) {
    ParameterSet ps;
    Rng rng(trial);
    auto head = FcLifHead::create(ps, "h", 6, 4, NeuronGroup(NeuronKind::binary_lif, {}), rng, 1.0);
    head.weight.mutable_value() = random_array({6, 4}, g, -1, 1);
    DenseArray in = random_array({5, 6}, g, 0, 1);
    const Real before = fc_lif_head({in, SpikeAlphabet::binary}, head).data.sum();
    for (auto& w : head.weight.mutable_value().values())
      if (w > 0) w *= 10;
    const Real after = fc_lif_head({in, SpikeAlphabet::binary}, head).data.sum();
    ASSERT_GE(after, before);
  }
}

TEST(Surrogate, TwoLayerToyMatchesFiniteDifferences) {
  std::mt19937_64 g(12);
  ad::SpikeModeGuard smooth(ad::SpikeMode::smooth);
  for (int trial = 0; trial < 10; ++trial) {
    auto x = random_array({2, 3, 4}, g, 0, 2);  // T=2 inputs
    auto w1 = random_array({4, 5}, g);
    auto w2 = random_array({5, 3}, g);
    auto net = [&](const ad::Var& a, const ad::Var& b) {
      LifState s1, s2;
      s2.theta_neg = -4.0;
      ad::Var total;
      for (std::size_t t = 0; t < 2; ++t) {
        DenseArray xt({3, 4}, std::vector<Real>(x.data() + t * 12, x.data() + (t + 1) * 12));
        auto h = lif_step(s1, ad::matmul(ad::constant(xt), a));
        auto o = ad::sum(lif_step(s2, ad::matmul(h, b)));
        total = total ? ad::add(total, o) : o;
      }
      return total;
    };
    auto r1 = ad::grad_check([&](const ad::Var& a) { return net(a, ad::constant(w2)); }, w1);
    auto r2 = ad::grad_check([&](const ad::Var& b) { return net(ad::constant(w1), b); }, w2);
    EXPECT_LT(r1.max_rel_error, 1e-3);
    EXPECT_LT(r2.max_rel_error, 1e-3);
    EXPECT_TRUE(r1.analytic.all_finite());
    EXPECT_TRUE(r2.analytic.all_finite());
  }
}
