#include <gtest/gtest.h>

#include <cmath>

#include "hrnn/autodiff.hpp"
#include "hrnn/gradcheck.hpp"
#include "hrnn/random.hpp"

using namespace hrnn;
using T64 = Tensor<double>;

namespace {

T64 random_tensor(Rng& rng, Shape s, double lo = -2, double hi = 2) {
  T64 t = T64::zeros(std::move(s));
  for (auto& v : t.values) v = uniform(rng, lo, hi);
  return t;
}

// Scalar reduction with non-uniform weights so every output coordinate
// matters differently.
Var weighted_sum(Tape<double>& tape, Var y) {
  const auto& v = tape.value(y);
  T64 w = T64::zeros(v.shape);
  for (std::size_t i = 0; i < w.numel(); ++i) w[i] = 0.3 + 0.1 * static_cast<double>(i % 7);
  return tape.sum(tape.mul(y, tape.constant(w)));
}

template <class F>
double fd_error(F&& f, std::vector<T64> params) {
  return finite_diff_check<double>(f, params, 1e-6).max_rel_err;
}

}  // namespace

TEST(Forward, SigmoidAtZeroIsHalf) {
  Tape<double> tape;
  auto y = tape.sigmoid(tape.constant(T64(Shape{1}, {0.0})));
  EXPECT_EQ(tape.value(y)[0], 0.5);
}

TEST(Forward, MatmulByIdentity) {
  Rng rng(1);
  Tape<double> tape;
  T64 eye = T64::zeros(Shape{3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye.at(i, i) = 1;
  T64 a = random_tensor(rng, Shape{3, 3});
  auto y = tape.matmul(tape.constant(eye), tape.constant(a));
  EXPECT_EQ(tape.value(y).values, a.values);
}

TEST(Forward, MatmulTransposedMatchesHandProduct) {
  Tape<double> tape;
  T64 a(Shape{1, 2}, {1, 2});
  T64 b(Shape{2, 2}, {3, 4, 5, 6});  // rows are output columns
  auto y = tape.matmul(tape.constant(a), tape.constant(b), true);
  EXPECT_EQ(tape.value(y).values, (std::vector<double>{11, 17}));
}

TEST(Forward, ConcatAndSlice) {
  Tape<double> tape;
  auto a = tape.constant(T64(Shape{2, 1}, {1, 2}));
  auto b = tape.constant(T64(Shape{2, 2}, {3, 4, 5, 6}));
  auto c = tape.concat({a, b});
  EXPECT_EQ(tape.value(c).values, (std::vector<double>{1, 3, 4, 2, 5, 6}));
  auto s = tape.slice(c, 1, 3);
  EXPECT_EQ(tape.value(s).values, (std::vector<double>{3, 4, 5, 6}));
}

TEST(Forward, ShapeMismatchNamesOpAndShapes) {
  Tape<double> tape;
  auto a = tape.constant(T64::zeros(Shape{2, 3}));
  auto b = tape.constant(T64::zeros(Shape{3, 2}));
  try {
    tape.add(a, b);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos);
    EXPECT_NE(msg.find("[3, 2]"), std::string::npos);
  }
  EXPECT_THROW(tape.matmul(a, a), Error);
}

TEST(Forward, NonFiniteOutputIsAnError) {
  Tape<double> tape;
  auto a = tape.constant(T64(Shape{1}, {1e308}));
  EXPECT_THROW(tape.mul(a, a), Error);
  Tape<double> lax(false);
  auto b = lax.constant(T64(Shape{1}, {1e308}));
  EXPECT_TRUE(std::isinf(lax.value(lax.mul(b, b))[0]));
}

TEST(Backward, ReluGatesBySign) {
  Tape<double> tape;
  auto x = tape.leaf(T64(Shape{2}, {-1, 2}));
  tape.backward(tape.sum(tape.relu(x)));
  EXPECT_EQ(tape.grad(x).values, (std::vector<double>{0, 1}));
}

TEST(Backward, SumOfScaledInput) {
  Tape<double> tape;
  auto x = tape.leaf(T64(Shape{2}, {1, 1}));
  tape.backward(tape.sum(tape.scale(x, 2.0)));
  EXPECT_EQ(tape.grad(x).values, (std::vector<double>{2, 2}));
}

TEST(Backward, LossGradientIsOne) {
  Tape<double> tape;
  auto x = tape.leaf(T64(Shape{3}, {1, 2, 3}));
  auto loss = tape.sum(tape.mul(x, x));
  tape.backward(loss);
  EXPECT_EQ(tape.grad(loss).values, (std::vector<double>{1.0}));
}

TEST(Backward, TwiceWithoutResetThrows) {
  Tape<double> tape;
  auto x = tape.leaf(T64(Shape{1}, {1}));
  auto loss = tape.sum(x);
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), Error);
  tape.reset();
  auto y = tape.leaf(T64(Shape{1}, {1}));
  EXPECT_NO_THROW(tape.backward(tape.sum(y)));
}

TEST(Backward, NonScalarLossRejected) {
  Tape<double> tape;
  auto x = tape.leaf(T64(Shape{2}, {1, 2}));
  EXPECT_THROW(tape.backward(x), Error);
}

TEST(Backward, SeedsOnOneNodeAdd) {
  Tape<double> tape;
  auto x = tape.leaf(T64(Shape{2}, {1, 2}));
  auto y = tape.scale(x, 3.0);
  std::vector<Seed<double>> seeds{{y, T64(Shape{2}, {1, 0})}, {y, T64(Shape{2}, {0.5, 1})}};
  tape.backward(std::span<const Seed<double>>(seeds));
  EXPECT_EQ(tape.grad(x).values, (std::vector<double>{4.5, 3}));
}

TEST(Barrier, ForwardIsIdentity) {
  Rng rng(2);
  Tape<double> tape;
  T64 v = random_tensor(rng, Shape{4, 3}, -1e3, 1e3);
  auto b = tape.barrier(tape.leaf(v));
  EXPECT_EQ(tape.value(b).values, v.values);
}

TEST(Barrier, SumOfBarrierGivesZeroGradient) {
  Tape<double> tape;
  auto x = tape.leaf(T64(Shape{3}, {1, 2, 3}));
  tape.backward(tape.sum(tape.barrier(x)));
  EXPECT_EQ(tape.grad(x).values, (std::vector<double>{0, 0, 0}));
}

TEST(Barrier, OnlyUnbarrieredPathContributes) {
  Tape<double> tape;
  auto x = tape.leaf(T64(Shape{3}, {1, 2, 3}));
  tape.backward(tape.sum(tape.add(x, tape.barrier(x))));
  EXPECT_EQ(tape.grad(x).values, (std::vector<double>{1, 1, 1}));
}

TEST(Barrier, PassthroughBehavesAsIdentity) {
  Tape<double> tape;
  tape.set_barrier_passthrough(true);
  auto x = tape.leaf(T64(Shape{3}, {1, 2, 3}));
  tape.backward(tape.sum(tape.add(x, tape.barrier(x))));
  EXPECT_EQ(tape.grad(x).values, (std::vector<double>{2, 2, 2}));
}

TEST(Losses, UniformLogitsGiveLogC) {
  Tape<double> tape;
  auto l = tape.constant(T64::zeros(Shape{1, 4}));
  std::vector<int> t{2};
  EXPECT_NEAR(tape.value(tape.softmax_cross_entropy(l, t)).item(), std::log(4.0), 1e-15);
}

TEST(Losses, ConfidentLogitsMatchLogSumExp) {
  Tape<double> tape;
  auto l = tape.constant(T64(Shape{1, 2}, {10, 0}));
  std::vector<int> t{0};
  const double expected = std::log1p(std::exp(-10.0));  // ≈ 4.54e-5
  EXPECT_NEAR(tape.value(tape.softmax_cross_entropy(l, t)).item(), expected, 1e-14);
  EXPECT_NEAR(expected, 4.54e-5, 1e-7);
}

TEST(Losses, CrossEntropyGradientIsSoftmaxMinusOneHot) {
  Tape<double> tape;
  T64 logits(Shape{1, 3}, {0.5, -1.0, 2.0});
  auto l = tape.leaf(logits);
  std::vector<int> t{1};
  tape.backward(tape.softmax_cross_entropy(l, t));
  double z = 0;
  for (double v : logits.values) z += std::exp(v);
  for (std::size_t c = 0; c < 3; ++c)
    EXPECT_NEAR(tape.grad(l)[c], std::exp(logits[c]) / z - (c == 1 ? 1.0 : 0.0), 1e-15);
}

TEST(Losses, CrossEntropyTargetOutOfRange) {
  Tape<double> tape;
  auto l = tape.constant(T64::zeros(Shape{1, 3}));
  std::vector<int> bad{3}, neg{-1};
  EXPECT_THROW(tape.softmax_cross_entropy(l, bad), Error);
  EXPECT_THROW(tape.softmax_cross_entropy(l, neg), Error);
}

TEST(Losses, MseValues) {
  Tape<double> tape;
  auto p = tape.constant(T64(Shape{2}, {1, 3}));
  auto z = tape.constant(T64(Shape{2}, {0, 0}));
  EXPECT_EQ(tape.value(tape.mse(p, z)).item(), 5.0);
  EXPECT_EQ(tape.value(tape.mse(p, p)).item(), 0.0);
  EXPECT_THROW(tape.mse(p, tape.constant(T64::zeros(Shape{3}))), Error);
}

TEST(Losses, MseGradientIsTwiceDifferenceOverN) {
  Tape<double> tape;
  auto p = tape.leaf(T64(Shape{1, 3}, {1, -2, 0.5}));
  auto t = tape.constant(T64(Shape{1, 3}, {0, 1, 1}));
  tape.backward(tape.mse(p, t));
  const std::vector<double> want{2.0 * 1 / 3, 2.0 * -3 / 3, 2.0 * -0.5 / 3};
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(tape.grad(p)[i], want[i], 1e-15);
}

TEST(FiniteDiff, TanhDerivativeAtPointThree) {
  auto f = [](Tape<double>& tape, const std::vector<Var>& v) { return tape.sum(tape.tanh(v[0])); };
  const auto r = finite_diff_check<double>(f, {T64(Shape{1}, {0.3})}, 1e-6);
  EXPECT_LE(r.max_rel_err, 1e-7);
  EXPECT_NEAR(r.analytic, 1 - std::tanh(0.3) * std::tanh(0.3), 1e-15);
}

TEST(FiniteDiff, QuadraticMatchesTwoW) {
  auto f = [](Tape<double>& tape, const std::vector<Var>& v) { return tape.sum(tape.mul(v[0], v[0])); };
  EXPECT_LE(fd_error(f, {T64(Shape{2}, {1, 2})}), 1e-9);
}

TEST(FiniteDiff, DetectsNonDeterministicFunction) {
  int calls = 0;
  auto f = [&](Tape<double>& tape, const std::vector<Var>& v) {
    return tape.sum(tape.scale(v[0], 1.0 + 1e-3 * ++calls));
  };
  EXPECT_THROW(finite_diff_check<double>(f, {T64(Shape{1}, {1})}, 1e-6), Error);
}

TEST(FiniteDiff, BarrieredFunctionMatchesRestrictedGradientOnly) {
  // f(x) = sum(x * barrier(x)): the true derivative is 2x, the restricted one x.
  T64 x(Shape{3}, {0.5, -1.0, 1.5});
  Tape<double> tape;
  auto v = tape.leaf(x);
  tape.backward(tape.sum(tape.mul(v, tape.barrier(v))));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(tape.grad(v)[i], x[i]);
  auto f = [](Tape<double>& t, const std::vector<Var>& p) { return t.sum(t.mul(p[0], t.barrier(p[0]))); };
  EXPECT_GT(fd_error(f, {x}), 0.4);
}

class PrimitiveFd : public ::testing::TestWithParam<int> {};

// Every primitive against central differences at random points in [-2, 2].
TEST_P(PrimitiveFd, MatchesCentralDifferences) {
  Rng rng(100 + GetParam());
  const T64 a = random_tensor(rng, Shape{3, 4});
  const T64 b = random_tensor(rng, Shape{3, 4});
  const T64 m = random_tensor(rng, Shape{5, 4});
  const T64 bias = random_tensor(rng, Shape{4});
  std::vector<int> tg{0, 3, 1};
  const std::vector<double> w{0.2, 0.5, 0.3};
  using F = std::function<Var(Tape<double>&, const std::vector<Var>&)>;
  const std::vector<std::pair<std::string, std::pair<F, std::vector<T64>>>> cases = {
      {"add", {[](auto& t, const auto& v) { return weighted_sum(t, t.add(v[0], v[1])); }, {a, b}}},
      {"sub", {[](auto& t, const auto& v) { return weighted_sum(t, t.sub(v[0], v[1])); }, {a, b}}},
      {"mul", {[](auto& t, const auto& v) { return weighted_sum(t, t.mul(v[0], v[1])); }, {a, b}}},
      {"matmul", {[](auto& t, const auto& v) { return weighted_sum(t, t.matmul(v[0], v[1], true)); }, {a, m}}},
      {"matmul_plain",
       {[](auto& t, const auto& v) { return weighted_sum(t, t.matmul(v[1], v[0], true)); }, {a, m}}},
      {"concat", {[](auto& t, const auto& v) { return weighted_sum(t, t.concat({v[0], v[1]})); }, {a, b}}},
      {"slice", {[](auto& t, const auto& v) { return weighted_sum(t, t.slice(v[0], 1, 3)); }, {a}}},
      {"sigmoid", {[](auto& t, const auto& v) { return weighted_sum(t, t.sigmoid(v[0])); }, {a}}},
      {"tanh", {[](auto& t, const auto& v) { return weighted_sum(t, t.tanh(v[0])); }, {a}}},
      {"relu", {[](auto& t, const auto& v) { return weighted_sum(t, t.relu(v[0])); }, {a}}},
      {"add_bias", {[](auto& t, const auto& v) { return weighted_sum(t, t.add_bias(v[0], v[1])); }, {a, bias}}},
      {"scale", {[](auto& t, const auto& v) { return weighted_sum(t, t.scale(v[0], -1.7)); }, {a}}},
      {"sum", {[](auto& t, const auto& v) { return t.sum(t.mul(v[0], v[0])); }, {a}}},
      {"softmax_cross_entropy",
       {[&](auto& t, const auto& v) { return t.softmax_cross_entropy(v[0], tg, std::span<const double>(w)); }, {a}}},
      {"mse", {[&](auto& t, const auto& v) { return t.mse(v[0], v[1], std::span<const double>(w)); }, {a, b}}},
  };
  for (const auto& [name, c] : cases) {
    const auto r = finite_diff_check<double>(c.first, c.second, 1e-6);
    EXPECT_LE(r.max_rel_err, 1e-5) << name << " analytic " << r.analytic << " numeric " << r.numeric;
  }
}
INSTANTIATE_TEST_SUITE_P(RandomPoints, PrimitiveFd, ::testing::Range(0, 5));

TEST(Properties, BackwardIsBitwiseDeterministic) {
  Rng rng(7);
  const T64 a = random_tensor(rng, Shape{4, 6}), m = random_tensor(rng, Shape{5, 6});
  auto run = [&] {
    Tape<double> tape;
    auto x = tape.leaf(a);
    auto w = tape.leaf(m);
    auto y = tape.tanh(tape.matmul(x, w, true));
    tape.backward(tape.sum(tape.mul(y, tape.sigmoid(y))));
    return std::make_pair(tape.grad(x).values, tape.grad(w).values);
  };
  EXPECT_EQ(run(), run());
}

TEST(Properties, GradientIsLinearInTheLoss) {
  Rng rng(8);
  const T64 a = random_tensor(rng, Shape{3, 5});
  auto grad_of = [&](int which) {
    Tape<double> tape;
    auto x = tape.leaf(a);
    auto l1 = tape.sum(tape.tanh(x));
    auto l2 = tape.sum(tape.mul(x, tape.sigmoid(x)));
    Var loss = which == 0 ? l1 : which == 1 ? l2 : tape.add(l1, l2);
    tape.backward(loss);
    return tape.grad(x);
  };
  const auto g1 = grad_of(0), g2 = grad_of(1), g12 = grad_of(2);
  for (std::size_t i = 0; i < a.numel(); ++i)
    EXPECT_LE(std::abs(g12[i] - (g1[i] + g2[i])), std::numeric_limits<double>::epsilon() * std::abs(g12[i]) * 2);
}

TEST(Properties, RandomThreeLayerCompositionMatchesFd) {
  Rng rng(9);
  std::vector<T64> p{random_tensor(rng, Shape{2, 4}), random_tensor(rng, Shape{6, 4}),
                     random_tensor(rng, Shape{5, 6}), random_tensor(rng, Shape{3, 5})};
  auto f = [](Tape<double>& t, const std::vector<Var>& v) {
    auto h1 = t.tanh(t.matmul(v[0], v[1], true));
    auto h2 = t.sigmoid(t.matmul(h1, v[2], true));
    auto out = t.matmul(h2, v[3], true);
    std::vector<int> tg{2, 0};
    return t.softmax_cross_entropy(out, tg);
  };
  EXPECT_LE(fd_error(f, p), 1e-5);
}
