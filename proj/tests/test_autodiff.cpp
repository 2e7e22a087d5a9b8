#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "sfqn/autodiff.hpp"
#include "sfqn/checkpoint.hpp"
#include "sfqn/grad_check.hpp"
#include "support.hpp"

using namespace sfqn;
using namespace testing_support;

namespace {

constexpr Real kTol = 1e-3;

void expect_grad_ok(const std::function<ad::Var(const ad::Var&)>& f, const DenseArray& x, Real tol = kTol) {
  auto r = ad::grad_check(f, x);
  EXPECT_LT(r.max_rel_error, tol) << "worst index " << r.worst_index << " analytic "
                                  << r.analytic[r.worst_index] << " numeric " << r.numeric[r.worst_index];
}

}  // namespace

TEST(DenseArray, RejectsBadShapes) {
  EXPECT_THROW(DenseArray(Shape{}), DimensionError);
  EXPECT_THROW(DenseArray(Shape{2, 0}), DimensionError);
  EXPECT_THROW(DenseArray(Shape{1, 1, 1, 1, 1}), DimensionError);
  EXPECT_THROW(DenseArray(Shape{2, 2}, std::vector<Real>{1, 2, 3}), DimensionError);
  DenseArray a({2, 3});
  EXPECT_EQ(a.size(), 6u);
  EXPECT_THROW(a.reshaped({4}), DimensionError);
}

TEST(Matmul, IdentityTimesIdentity) {
  auto i2 = ad::constant(DenseArray::identity(2));
  EXPECT_EQ(ad::matmul(i2, i2).value(), DenseArray::identity(2));
}

TEST(Matmul, HandExample) {
  auto a = ad::constant(DenseArray::matrix({{1, 2}, {3, 4}}));
  auto b = ad::constant(DenseArray::matrix({{1}, {1}}));
  EXPECT_EQ(ad::matmul(a, b).value(), DenseArray::matrix({{3}, {7}}));
}

TEST(Matmul, ShapeMismatchThrows) {
  auto a = ad::constant(DenseArray({2, 3}));
  EXPECT_THROW(ad::matmul(a, a), DimensionError);
}

TEST(Matmul, AgreesWithNaiveProduct) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 10; ++t) {
    auto a = random_array({std::size_t(3 + t % 4), 5}, rng), b = random_array({5, std::size_t(2 + t % 3)}, rng);
    EXPECT_LT(max_abs_diff(ad::matmul(ad::constant(a), ad::constant(b)).value(), naive_matmul(a, b)), 1e-12);
  }
}

TEST(Matmul, GradientOfSumIsOnesTimesBTransposed) {
  std::mt19937_64 rng(2);
  auto av = random_array({3, 4}, rng), bv = random_array({4, 2}, rng);
  auto a = ad::parameter(av);
  auto b = ad::constant(bv);
  ad::backward(ad::sum(ad::matmul(a, b)));
  DenseArray expect({3, 4});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 4; ++k) expect(i, k) = bv(k, 0) + bv(k, 1);
  EXPECT_LT(max_abs_diff(a.grad(), expect), 1e-12);
  expect_grad_ok([&](const ad::Var& x) { return ad::sum(ad::matmul(x, b)); }, av);
}

TEST(Conv2d, OnesTimesTwo) {
  auto x = ad::constant(DenseArray({1, 3, 3}, 1.0));
  auto k = ad::constant(DenseArray({1, 1, 1, 1}, 2.0));
  EXPECT_EQ(ad::conv2d(x, k, 1, 0).value(), DenseArray({1, 3, 3}, 2.0));
}

TEST(Conv2d, ExtentExample) { EXPECT_EQ(ad::ConvGeometry::extent(8, 3, 1, 1), 8u); }

TEST(Conv2d, ExtentsMatchClosedFormOnGrid) {
  for (std::size_t h : {1u, 3u, 5u, 8u, 13u, 32u})
    for (std::size_t l : {1u, 2u, 3u, 5u})
      for (std::size_t s : {1u, 2u, 3u})
        for (std::size_t p : {0u, 1u, 2u}) {
          if (h + 2 * p < l) {
            EXPECT_THROW(ad::ConvGeometry::extent(h, l, s, p), DimensionError);
            continue;
          }
          const long expect = static_cast<long>(std::floor((static_cast<double>(h) + 2.0 * p - l) / s)) + 1;
          ASSERT_EQ(static_cast<long>(ad::ConvGeometry::extent(h, l, s, p)), expect);
          auto y = ad::conv2d(ad::constant(DenseArray({1, h, h + 1})), ad::constant(DenseArray({2, 1, l, l})), s, p);
          EXPECT_EQ(y.shape(), (Shape{2, static_cast<std::size_t>(expect), ad::ConvGeometry::extent(h + 1, l, s, p)}));
        }
}

TEST(Conv2d, KernelLargerThanPaddedInputThrows) {
  auto x = ad::constant(DenseArray({1, 2, 2}));
  auto k = ad::constant(DenseArray({1, 1, 5, 5}));
  EXPECT_THROW(ad::conv2d(x, k, 1, 1), DimensionError);
  EXPECT_THROW(ad::conv2d(x, ad::constant(DenseArray({1, 2, 1, 1})), 1, 0), DimensionError);
}

TEST(Conv2d, AgreesWithDirectLoopsAndBatches) {
  std::mt19937_64 rng(3);
  for (std::size_t s : {1u, 2u})
    for (std::size_t p : {0u, 1u}) {
      auto x0 = random_array({2, 7, 6}, rng), x1 = random_array({2, 7, 6}, rng);
      auto k = random_array({3, 2, 3, 3}, rng);
      auto single = ad::conv2d(ad::constant(x0), ad::constant(k), s, p).value();
      EXPECT_LT(max_abs_diff(single, naive_conv(x0, k, s, p)), 1e-12);
      std::vector<Real> both(x0.values());
      both.insert(both.end(), x1.values().begin(), x1.values().end());
      auto batched = ad::conv2d(ad::constant(DenseArray({2, 2, 7, 6}, both)), ad::constant(k), s, p).value();
      const auto second = naive_conv(x1, k, s, p);
      for (std::size_t i = 0; i < second.size(); ++i) EXPECT_NEAR(batched[second.size() + i], second[i], 1e-12);
    }
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    auto xv = random_array({2, 2, 5, 5}, rng), kv = random_array({3, 2, 3, 3}, rng);
    auto w = random_array({2, 3, 3, 3}, rng);  // random readout keeps the loss non-trivial
    auto readout = [&](const ad::Var& y) { return ad::sum(ad::mul(y, ad::constant(w))); };
    expect_grad_ok([&](const ad::Var& k) { return readout(ad::conv2d(ad::constant(xv), k, 2, 1)); }, kv);
    expect_grad_ok([&](const ad::Var& x) { return readout(ad::conv2d(x, ad::constant(kv), 2, 1)); }, xv);
  }
}

TEST(Conv2d, MultiplicationCounterMatchesClosedForm) {
  op_counters() = {};
  ad::NoGradGuard ng;
  ad::conv2d(ad::constant(DenseArray({4, 3, 9, 9})), ad::constant(DenseArray({8, 3, 3, 3})), 2, 1);
  EXPECT_EQ(op_counters().multiplications, 4u * 8 * 3 * 9 * 5 * 5);
}

TEST(Spike, ForwardTieRuleAndSlope) {
  auto u = ad::parameter(DenseArray::scalar(1.0));
  auto s = ad::spike(u, 1.0, 2.0);
  EXPECT_EQ(s.value()[0], 1.0);
  ad::backward(ad::sum(s));
  EXPECT_DOUBLE_EQ(u.grad()[0], 1.0);

  for (Real alpha : {0.5, 2.0, 4.0}) {
    auto v = ad::parameter(DenseArray::scalar(0.3));
    ad::backward(ad::sum(ad::spike(v, 0.3, alpha)));
    EXPECT_DOUBLE_EQ(v.grad()[0], alpha / 2);
  }
}

TEST(Spike, SaturatesFarBelowThreshold) {
  auto u = ad::parameter(DenseArray::scalar(-1e3));
  auto s = ad::spike(u, 1.0, 2.0);
  EXPECT_EQ(s.value()[0], 0.0);
  ad::backward(ad::sum(s));
  EXPECT_LT(u.grad()[0], 1e-6);
  EXPECT_THROW(ad::spike(u, 1.0, 0.0), ConfigError);
}

TEST(Spike, BackwardIsTheSurrogateDerivative) {
  // forward under the smooth mode is the surrogate primitive, so finite
  // differences measure its derivative, which backward must reproduce
  std::mt19937_64 rng(5);
  ad::SpikeModeGuard smooth(ad::SpikeMode::smooth);
  for (int t = 0; t < 10; ++t) {
    auto x = random_array({6}, rng, -2, 2);
    expect_grad_ok([](const ad::Var& u) { return ad::sum(ad::spike(u, 0.5, 2.0)); }, x);
    expect_grad_ok([](const ad::Var& u) { return ad::sum(ad::spike(u, -0.5, 3.0, -1.0)); }, x);
  }
  for (Real x : {-1.0, 0.0, 0.7}) {
    const Real h = 1e-6;
    const Real fd = (ad::atan_surrogate(x + h, 2.0) - ad::atan_surrogate(x - h, 2.0)) / (2 * h);
    EXPECT_NEAR(ad::atan_surrogate_grad(x, 2.0), fd, 1e-8);
  }
}

TEST(Spike, HeavisideForwardStillUsesSurrogateBackward) {
  auto u = ad::parameter(DenseArray({3}, std::vector<Real>{0.0, 0.9, 2.0}));
  auto s = ad::spike(u, 1.0, 2.0);
  EXPECT_EQ(s.value(), DenseArray({3}, std::vector<Real>{0, 0, 1}));
  ad::backward(ad::sum(s));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(u.grad()[i], ad::atan_surrogate_grad(u.value()[i] - 1.0, 2.0));
}

TEST(GradCheck, SumOfSquares) {
  auto r = ad::grad_check([](const ad::Var& x) { return ad::sum(ad::mul(x, x)); },
                          DenseArray({2}, std::vector<Real>{1, 2}));
  EXPECT_NEAR(r.analytic[0], 2.0, 1e-12);
  EXPECT_NEAR(r.analytic[1], 4.0, 1e-12);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(GradCheck, NonFiniteOutputThrows) {
  auto f = [](const ad::Var& x) { return ad::sum(ad::scale(x, 1e308)); };
  EXPECT_THROW(ad::grad_check(f, DenseArray({2}, 10.0)), NumericError);
}

TEST(Gradients, EveryDifferentiableOpAtTenRandomPoints) {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 10; ++t) {
    const auto c = ad::constant(random_array({3, 4}, rng));
    const auto w = ad::constant(random_array({3, 4}, rng));
    auto x = random_array({3, 4}, rng);
    for (auto& v : x.values())
      if (std::abs(v) < 1e-2) v = 0.5;  // keep away from the relu kink
    auto dot = [&](const ad::Var& y) { return ad::sum(ad::mul(y, w)); };
    expect_grad_ok([&](const ad::Var& v) { return dot(ad::add(v, c)); }, x);
    expect_grad_ok([&](const ad::Var& v) { return dot(ad::sub(c, v)); }, x);
    expect_grad_ok([&](const ad::Var& v) { return dot(ad::mul(v, v)); }, x);
    expect_grad_ok([&](const ad::Var& v) { return dot(ad::scale(v, -1.7)); }, x);
    expect_grad_ok([&](const ad::Var& v) { return dot(ad::axpby(0.3, v, -2.0, ad::mul(v, c))); }, x);
    expect_grad_ok([&](const ad::Var& v) { return dot(ad::relu(v)); }, x);
    expect_grad_ok([&](const ad::Var& v) { return ad::mean(ad::reshape(ad::mul(v, w), {12})); }, x);
    expect_grad_ok([&](const ad::Var& v) { return ad::mse(v, c.value()); }, x);
    expect_grad_ok([&](const ad::Var& v) { return ad::sum(ad::gather_rows(ad::mul(v, w), {3, 0, 2})); }, x);
    auto bias = random_array({4}, rng);
    expect_grad_ok([&](const ad::Var& b) { return dot(ad::add_bias(c, b)); }, bias);
    auto pos = random_array({1, 4}, rng);
    expect_grad_ok([&](const ad::Var& p) { return dot(ad::add_positional(c, p)); }, pos);
    auto gamma = random_array({4}, rng, 0.5, 1.5), beta = random_array({4}, rng);
    expect_grad_ok([&](const ad::Var& v) { return dot(ad::layer_norm(v, ad::constant(gamma), ad::constant(beta))); }, x);
    expect_grad_ok([&](const ad::Var& g) { return dot(ad::layer_norm(c, g, ad::constant(beta))); }, gamma);
    expect_grad_ok([&](const ad::Var& b) { return dot(ad::layer_norm(c, ad::constant(gamma), b)); }, beta);
    auto fmap = random_array({2, 3, 2, 2}, rng), fw = random_array({8, 3}, rng);
    expect_grad_ok([&](const ad::Var& v) { return ad::sum(ad::mul(ad::to_tokens(v), ad::constant(fw))); }, fmap);
    auto cb = random_array({3}, rng);
    expect_grad_ok([&](const ad::Var& b) { return ad::sum(ad::mul(ad::add_channel_bias(ad::constant(fmap), b), ad::constant(fmap))); }, cb);
  }
}

TEST(Gradients, AttentionOps) {
  std::mt19937_64 rng(7);
  const std::size_t B = 2, L = 3, c = 4, heads = 2;
  for (int t = 0; t < 10; ++t) {
    auto q = random_array({B * L, c}, rng), k = random_array({B * L, c}, rng), v = random_array({B * L, c}, rng);
    auto wsc = ad::constant(random_array({B, heads, L, L}, rng));
    auto wout = ad::constant(random_array({B * L, c}, rng));
    expect_grad_ok([&](const ad::Var& x) { return ad::sum(ad::mul(ad::dense_scores(x, ad::constant(k), B, heads), wsc)); }, q);
    expect_grad_ok([&](const ad::Var& x) { return ad::sum(ad::mul(ad::dense_scores(ad::constant(q), x, B, heads), wsc)); }, k);
    auto sc = random_array({B, heads, L, L}, rng);
    expect_grad_ok([&](const ad::Var& s) { return ad::sum(ad::mul(ad::attend(s, ad::constant(v), heads), wout)); }, sc);
    expect_grad_ok([&](const ad::Var& x) { return ad::sum(ad::mul(ad::attend(ad::constant(sc), x, heads), wout)); }, v);
  }
}

TEST(Attention, TernaryScoresMatchDenseProductWithoutMultiplying) {
  std::mt19937_64 rng(8);
  const std::size_t B = 2, L = 4, c = 8, heads = 2;
  auto q = random_ternary({B * L, c}, rng), k = random_ternary({B * L, c}, rng);
  op_counters() = {};
  auto t = ad::ternary_scores(ad::constant(q), ad::constant(k), B, heads).value();
  EXPECT_EQ(op_counters().multiplications, 0u);
  EXPECT_GT(op_counters().additions, 0u);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < L; ++j) {
          Real s = 0;
          for (std::size_t d = 0; d < c / heads; ++d) s += q(b * L + i, h * 4 + d) * k(b * L + j, h * 4 + d);
          EXPECT_EQ(t(b, h, i, j), s);
        }
  auto bad = q;
  bad[0] = 0.5;
  EXPECT_THROW(ad::ternary_scores(ad::constant(bad), ad::constant(k), B, heads), DimensionError);
  EXPECT_THROW(ad::ternary_scores(ad::constant(q), ad::constant(DenseArray({B * L + 2, c})), B, heads),
               DimensionError);
}

TEST(Graph, DiamondAccumulates) {
  // y = a*b + a  with shared a: dy/da = b + 1
  auto a = ad::parameter(DenseArray::scalar(3.0));
  auto b = ad::parameter(DenseArray::scalar(-2.0));
  auto y = ad::add(ad::mul(a, b), a);
  ad::backward(y);
  EXPECT_DOUBLE_EQ(a.grad()[0], -1.0);
  EXPECT_DOUBLE_EQ(b.grad()[0], 3.0);

  // deeper diamond: z = (x+x)*(x+x) -> dz/dx = 8x
  auto x = ad::parameter(DenseArray::scalar(1.5));
  auto s = ad::add(x, x);
  ad::backward(ad::mul(s, s));
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Graph, NoGradGuardRecordsNothing) {
  auto a = ad::parameter(DenseArray::scalar(2.0));
  ad::Var y;
  {
    ad::NoGradGuard ng;
    y = ad::mul(a, a);
  }
  EXPECT_FALSE(y.requires_grad());
  ad::backward(y);
  EXPECT_FALSE(a.has_grad());
}

TEST(Graph, NonFiniteForwardIsAnError) {
  auto a = ad::constant(DenseArray::scalar(1e200));
  EXPECT_THROW(ad::mul(a, a), NumericError);
  EXPECT_THROW(ad::backward(ad::constant(DenseArray({2}))), DimensionError);
}

TEST(Checkpoint, RoundTripAndLayout) {
  std::vector<checkpoint::Record> recs{{"w", DenseArray::matrix({{1.5, -2}, {0.25, 3}})},
                                       {"bias.b", DenseArray({3}, std::vector<Real>{1, 2, 3})}};
  auto bytes = checkpoint::encode(recs);
  ASSERT_GE(bytes.size(), 6u);
  EXPECT_EQ(bytes.substr(0, 4), "SFQN");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1);
  EXPECT_EQ(static_cast<unsigned char>(bytes[5]), 0);
  // name_len(2) + 'w' + rank(1) + dims(2*4) + 4 floats
  EXPECT_EQ(bytes.size(), 6u + (2 + 1 + 1 + 8 + 16) + (2 + 6 + 1 + 4 + 12));
  // first value 1.5f = 0x3FC00000 little-endian
  const std::size_t v0 = 6 + 2 + 1 + 1 + 8;
  EXPECT_EQ(static_cast<unsigned char>(bytes[v0 + 3]), 0x3F);
  EXPECT_EQ(static_cast<unsigned char>(bytes[v0 + 2]), 0xC0);
  auto back = checkpoint::decode(bytes);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].name, "w");
  EXPECT_EQ(back[0].value, recs[0].value);
  EXPECT_EQ(back[1].value, recs[1].value);
}

TEST(Checkpoint, CorruptInputIsFormatError) {
  auto bytes = checkpoint::encode({{"w", DenseArray({2}, 1.0)}});
  EXPECT_THROW(checkpoint::decode("XXXX" + bytes.substr(4)), FormatError);
  EXPECT_THROW(checkpoint::decode(bytes.substr(0, bytes.size() - 1)), FormatError);
  std::string v2 = bytes;
  v2[4] = 2;
  EXPECT_THROW(checkpoint::decode(v2), FormatError);
}
