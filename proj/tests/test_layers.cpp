#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "hrnn/adam.hpp"
#include "hrnn/checkpoint.hpp"
#include "hrnn/gradcheck.hpp"
#include "hrnn/layers.hpp"

using namespace hrnn;
using T64 = Tensor<double>;

namespace {

T64 random_tensor(Rng& rng, Shape s, double scale = 1) {
  T64 t = T64::zeros(std::move(s));
  for (auto& v : t.values) v = uniform(rng, -scale, scale);
  return t;
}

LstmParams<double> random_lstm(Rng& rng, std::size_t H, std::vector<std::size_t> parts) {
  LstmParams<double> p;
  for (auto d : parts) p.w_in.push_back(random_tensor(rng, Shape{4 * H, d}));
  p.w_h = random_tensor(rng, Shape{4 * H, H});
  p.b = random_tensor(rng, Shape{4 * H});
  return p;
}

LstmParams<double> zero_lstm(std::size_t H, std::size_t D) {
  LstmParams<double> p;
  p.w_in.push_back(T64::zeros(Shape{4 * H, D}));
  p.w_h = T64::zeros(Shape{4 * H, H});
  p.b = T64::zeros(Shape{4 * H});
  return p;
}

double sigmoid(double x) { return 1 / (1 + std::exp(-x)); }

ModelDims small_dims() {
  ModelDims d;
  d.input_dim = 3;
  d.output_dim = 4;
  d.aux_out = 3;
  d.sizes = {5, 6, 7};
  d.k_max = {3, 2};
  d.decoder_hidden = 8;
  return d;
}

}  // namespace

TEST(Lstm, ZeroParamsGiveZeroState) {
  Rng rng(1);
  Tape<double> tape;
  ParamBinder<double> binder(tape);
  auto p = zero_lstm(4, 3);
  auto vars = binder.lstm(p, nullptr);
  LstmState s{tape.constant(random_tensor(rng, Shape{2, 4})), tape.constant(T64::zeros(Shape{2, 4}))};
  auto next = lstm_step(tape, vars, s, {tape.constant(random_tensor(rng, Shape{2, 3}))});
  for (double v : tape.value(*next.h).values) EXPECT_EQ(v, 0.0);
  for (double v : tape.value(*next.c).values) EXPECT_EQ(v, 0.0);
}

TEST(Lstm, ZeroParamsHalveCellState) {
  Tape<double> tape;
  ParamBinder<double> binder(tape);
  auto vars = binder.lstm(zero_lstm(2, 1), nullptr);
  LstmState s{tape.constant(T64::zeros(Shape{1, 2})), tape.constant(T64(Shape{1, 2}, {1.0, -3.0}))};
  auto next = lstm_step(tape, vars, s, {tape.constant(T64::zeros(Shape{1, 1}))});
  EXPECT_EQ(tape.value(*next.c).values, (std::vector<double>{0.5, -1.5}));
  EXPECT_NEAR(tape.value(*next.h)[0], 0.5 * std::tanh(0.5), 1e-15);
}

TEST(Lstm, MatchesHandWrittenEquations) {
  Rng rng(2);
  const std::size_t H = 3, D = 2;
  auto p = random_lstm(rng, H, {D});
  const T64 x = random_tensor(rng, Shape{1, D}), h = random_tensor(rng, Shape{1, H}),
            c = random_tensor(rng, Shape{1, H});
  Tape<double> tape;
  ParamBinder<double> binder(tape);
  auto vars = binder.lstm(p, nullptr);
  auto next = lstm_step(tape, vars, {tape.constant(h), tape.constant(c)}, {tape.constant(x)});
  for (std::size_t u = 0; u < H; ++u) {
    double pre[4];
    for (std::size_t g = 0; g < 4; ++g) {
      const std::size_t row = g * H + u;
      pre[g] = p.b[row];
      for (std::size_t d = 0; d < D; ++d) pre[g] += p.w_in[0].at(row, d) * x[d];
      for (std::size_t k = 0; k < H; ++k) pre[g] += p.w_h.at(row, k) * h[k];
    }
    const double cn = sigmoid(pre[1]) * c[u] + sigmoid(pre[0]) * std::tanh(pre[2]);
    EXPECT_NEAR(tape.value(*next.c)[u], cn, 1e-14);
    EXPECT_NEAR(tape.value(*next.h)[u], sigmoid(pre[3]) * std::tanh(cn), 1e-14);
  }
}

TEST(Lstm, EmptyInputPartEqualsExplicitZeros) {
  Rng rng(3);
  auto p = random_lstm(rng, 3, {2, 4});
  const T64 x = random_tensor(rng, Shape{2, 2}), h = random_tensor(rng, Shape{2, 3});
  Tape<double> tape;
  ParamBinder<double> binder(tape);
  auto vars = binder.lstm(p, nullptr);
  LstmState s{tape.constant(h), std::nullopt};
  auto a = lstm_step(tape, vars, s, {tape.constant(x), std::nullopt});
  auto b = lstm_step(tape, vars, s, {tape.constant(x), tape.constant(T64::zeros(Shape{2, 4}))});
  EXPECT_EQ(tape.value(*a.h).values, tape.value(*b.h).values);
}

TEST(Lstm, WrongPartCountIsAnError) {
  Rng rng(4);
  auto p = random_lstm(rng, 2, {2, 2});
  Tape<double> tape;
  ParamBinder<double> binder(tape);
  auto vars = binder.lstm(p, nullptr);
  EXPECT_THROW(lstm_step(tape, vars, {}, {tape.constant(T64::zeros(Shape{1, 2}))}), Error);
}

class LstmFd : public ::testing::TestWithParam<int> {};

TEST_P(LstmFd, GradientsMatchCentralDifferences) {
  Rng rng(50 + GetParam());
  const std::size_t H = 1 + uniform_index(rng, 5), D = 1 + uniform_index(rng, 4), B = 1 + uniform_index(rng, 3);
  auto p = random_lstm(rng, H, {D});
  std::vector<T64> params{p.w_in[0], p.w_h, p.b, random_tensor(rng, Shape{B, D}), random_tensor(rng, Shape{B, H}),
                          random_tensor(rng, Shape{B, H})};
  auto f = [H](Tape<double>& t, const std::vector<Var>& v) {
    LstmVars lv{{v[0]}, v[1], v[2], H};
    auto next = lstm_step(t, lv, {v[4], v[5]}, {v[3]});
    return t.add(t.sum(*next.h), t.scale(t.sum(t.mul(*next.c, *next.c)), 0.5));
  };
  EXPECT_LE(finite_diff_check<double>(f, params, 1e-6).max_rel_err, 1e-5);
}
INSTANTIATE_TEST_SUITE_P(RandomConfigs, LstmFd, ::testing::Range(0, 20));

TEST(Decoder, ZeroParamsGiveZeros) {
  DecoderParams<double> p{T64::zeros(Shape{6, 7}), T64::zeros(Shape{6}), T64::zeros(Shape{3, 6}), T64::zeros(Shape{3}),
                          4};
  Tape<double> tape;
  ParamBinder<double> binder(tape);
  auto v = binder.decoder(p, nullptr);
  std::vector<std::size_t> idx{2};
  auto out = decoder_predict(tape, v, tape.constant(T64(Shape{1, 3}, {1, 2, 3})),
                             tape.constant(one_hot<double>(idx, 4)));
  EXPECT_EQ(tape.value(out).values, (std::vector<double>{0, 0, 0}));
}

TEST(Decoder, IndexChangesOutput) {
  Rng rng(5);
  DecoderParams<double> p{random_tensor(rng, Shape{6, 7}), random_tensor(rng, Shape{6}),
                          random_tensor(rng, Shape{3, 6}), random_tensor(rng, Shape{3}), 4};
  Tape<double> tape;
  ParamBinder<double> binder(tape);
  auto v = binder.decoder(p, nullptr);
  auto h = tape.constant(random_tensor(rng, Shape{1, 3}));
  std::vector<std::size_t> i0{0}, i3{3};
  auto a = decoder_predict(tape, v, h, tape.constant(one_hot<double>(i0, 4)));
  auto b = decoder_predict(tape, v, h, tape.constant(one_hot<double>(i3, 4)));
  EXPECT_NE(tape.value(a).values, tape.value(b).values);
}

TEST(Decoder, MalformedOneHotRejected) {
  DecoderParams<double> p{T64::zeros(Shape{2, 5}), T64::zeros(Shape{2}), T64::zeros(Shape{1, 2}), T64::zeros(Shape{1}),
                          3};
  Tape<double> tape;
  ParamBinder<double> binder(tape);
  auto v = binder.decoder(p, nullptr);
  auto h = tape.constant(T64::zeros(Shape{1, 2}));
  EXPECT_THROW(decoder_predict(tape, v, h, tape.constant(T64(Shape{1, 3}, {1, 1, 0}))), Error);
  EXPECT_THROW(decoder_predict(tape, v, h, tape.constant(T64(Shape{1, 3}, {0, 0, 0}))), Error);
  EXPECT_THROW(decoder_predict(tape, v, h, tape.constant(T64(Shape{1, 3}, {0.5, 0.5, 0}))), Error);
  EXPECT_THROW(decoder_predict(tape, v, h, tape.constant(T64(Shape{1, 2}, {1, 0}))), Error);
  std::vector<std::size_t> out_of_range{3};
  EXPECT_THROW(one_hot<double>(out_of_range, 3), Error);
}

TEST(Decoder, GradientReachesStateAndMatchesFd) {
  Rng rng(6);
  std::vector<T64> params{random_tensor(rng, Shape{2, 3}), random_tensor(rng, Shape{6, 7}),
                          random_tensor(rng, Shape{6}), random_tensor(rng, Shape{3, 6}), random_tensor(rng, Shape{3})};
  std::vector<std::size_t> idx{1, 3};
  const T64 oh = one_hot<double>(idx, 4);
  auto f = [&](Tape<double>& t, const std::vector<Var>& v) {
    DecoderVars dv{v[1], v[2], v[3], v[4], 4};
    std::vector<int> tg{0, 2};
    return t.softmax_cross_entropy(decoder_predict(t, dv, v[0], t.constant(oh)), tg);
  };
  EXPECT_LE(finite_diff_check<double>(f, params, 1e-6).max_rel_err, 1e-5);

  Tape<double> tape;
  auto h = tape.leaf(params[0]);
  DecoderVars dv{tape.constant(params[1]), tape.constant(params[2]), tape.constant(params[3]),
                 tape.constant(params[4]), 4};
  tape.backward(tape.sum(decoder_predict(tape, dv, h, tape.constant(oh))));
  double norm = 0;
  for (double g : tape.grad(h).values) norm += std::abs(g);
  EXPECT_GT(norm, 0);
}

TEST(Decoder, BarrieredStateReceivesNoGradient) {
  Rng rng(7);
  Tape<double> tape;
  auto h = tape.leaf(random_tensor(rng, Shape{1, 3}));
  DecoderVars dv{tape.leaf(random_tensor(rng, Shape{6, 7})), tape.leaf(random_tensor(rng, Shape{6})),
                 tape.leaf(random_tensor(rng, Shape{3, 6})), tape.leaf(random_tensor(rng, Shape{3})), 4};
  std::vector<std::size_t> idx{2};
  tape.backward(tape.sum(decoder_predict(tape, dv, tape.barrier(h), tape.constant(one_hot<double>(idx, 4)))));
  EXPECT_FALSE(tape.has_grad(h));
  EXPECT_EQ(tape.grad(h).values, std::vector<double>(3, 0.0));
  EXPECT_TRUE(tape.has_grad(dv.w1));
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  T64 p(Shape{3}, {1, -2, 3});
  const T64 g = T64::zeros(Shape{3});
  Tensor<double>* ps[] = {&p};
  const Tensor<double>* gs[] = {&g};
  auto s = make_adam<double>(std::span<const Tensor<double>* const>(gs));
  adam_step<double>(s, ps, gs);
  EXPECT_EQ(p.values, (std::vector<double>{1, -2, 3}));
  EXPECT_EQ(s.t, 1);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  for (double g0 : {1.0, -250.0, 3e-3}) {
    T64 p(Shape{1}, {0.5});
    const T64 g(Shape{1}, {g0});
    Tensor<double>* ps[] = {&p};
    const Tensor<double>* gs[] = {&g};
    auto s = make_adam<double>(std::span<const Tensor<double>* const>(gs));
    adam_step<double>(s, ps, gs);
    const double step = 0.5 - p[0];
    EXPECT_NEAR(step, 1e-3 * (g0 > 0 ? 1 : -1), 1e-3 * 1e-8 / std::abs(g0) + 1e-15) << g0;
  }
}

TEST(Adam, TwoStepsMatchHandRecurrence) {
  const double g0 = 0.4, lr = 1e-3, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  T64 p(Shape{1}, {1.0});
  const T64 g(Shape{1}, {g0});
  Tensor<double>* ps[] = {&p};
  const Tensor<double>* gs[] = {&g};
  auto s = make_adam<double>(std::span<const Tensor<double>* const>(gs));
  adam_step<double>(s, ps, gs);
  adam_step<double>(s, ps, gs);
  const double m1 = (1 - b1) * g0, v1 = (1 - b2) * g0 * g0;
  const double m2 = b1 * m1 + (1 - b1) * g0, v2 = b2 * v1 + (1 - b2) * g0 * g0;
  EXPECT_NEAR(s.m[0][0], m2, 1e-16);
  EXPECT_NEAR(s.v[0][0], v2, 1e-18);
  double want = 1.0 - lr * (m1 / (1 - b1)) / (std::sqrt(v1 / (1 - b2)) + eps);
  want -= lr * (m2 / (1 - b1 * b1)) / (std::sqrt(v2 / (1 - b2 * b2)) + eps);
  EXPECT_NEAR(p[0], want, 1e-15);
}

TEST(Adam, ShapeMismatchRejected) {
  T64 p(Shape{2}, {0, 0});
  const T64 g(Shape{3}, {0, 0, 0});
  Tensor<double>* ps[] = {&p};
  const Tensor<double>* gs[] = {&g};
  const Tensor<double>* init[] = {&p};
  auto s = make_adam<double>(std::span<const Tensor<double>* const>(init));
  EXPECT_THROW(adam_step<double>(s, ps, gs), Error);
}

TEST(Init, SameSeedIsBitIdentical) {
  const auto a = init_params<double>(11, small_dims()), b = init_params<double>(11, small_dims());
  auto ta = a.tensors(), tb = b.tensors();
  ASSERT_EQ(ta.size(), tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_EQ(ta[i]->values, tb[i]->values);
  const auto c = init_params<double>(12, small_dims());
  EXPECT_NE(a.head.w.values, c.head.w.values);
}

TEST(Init, ShapesAndForgetBias) {
  const auto d = small_dims();
  const auto p = init_params<double>(1, d);
  ASSERT_EQ(p.levels.size(), 3u);
  for (std::size_t j = 0; j < 3; ++j) {
    const auto H = d.sizes[j];
    EXPECT_EQ(p.levels[j].w_h.shape, (Shape{4 * H, H}));
    EXPECT_EQ(p.levels[j].w_in[0].shape, (Shape{4 * H, d.level_input(j)}));
    EXPECT_EQ(p.levels[j].w_in.size(), j + 1 < 3 ? 2u : 1u);
    for (std::size_t i = 0; i < 4 * H; ++i) EXPECT_EQ(p.levels[j].b[i], (i >= H && i < 2 * H) ? 1.0 : 0.0);
  }
  EXPECT_EQ(p.decoders[0].w1.shape, (Shape{8, 5 + 3}));
  EXPECT_EQ(p.decoders[0].w2.shape, (Shape{3, 8}));
  EXPECT_EQ(p.decoders[1].w1.shape, (Shape{8, 6 + 2}));
  EXPECT_EQ(p.decoders[1].w2.shape, (Shape{5, 8}));  // predicts level-0 states
  EXPECT_EQ(p.head.w.shape, (Shape{4, 5}));
}

TEST(Init, GlorotSampleMeanAndRange) {
  ModelDims d;
  d.input_dim = 100;
  d.output_dim = 2;
  d.aux_out = 2;
  d.sizes = {25, 2};
  d.k_max = {2};
  d.decoder_hidden = 2;
  const auto p = init_params<double>(3, d);
  const auto& w = p.levels[0].w_in[0];  // 100 × 100 = 10^4 draws
  const double a = std::sqrt(6.0 / 200.0);
  double sum = 0;
  for (double v : w.values) {
    EXPECT_LE(std::abs(v), a);
    sum += v;
  }
  const double mean = sum / static_cast<double>(w.numel());
  const double se = a / std::sqrt(3.0) / std::sqrt(static_cast<double>(w.numel()));
  EXPECT_LE(std::abs(mean), 3 * se);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto dir = std::filesystem::temp_directory_path() / "hrnn_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "a.bin").string();
  auto p = init_params<double>(5, small_dims());
  auto adam = make_adam(p, AdamConfig{0.01, 0.8, 0.99, 1e-7});
  auto g = p;
  adam_step(adam, p, g);
  save_checkpoint(path, "task = copy\n", p, adam);

  auto q = init_params<double>(6, small_dims());
  AdamState<double> qa;
  EXPECT_EQ(load_checkpoint(path, q, qa), "task = copy\n");
  EXPECT_EQ(checkpoint_config(path), "task = copy\n");
  auto tp = p.tensors(), tq = q.tensors();
  for (std::size_t i = 0; i < tp.size(); ++i) EXPECT_EQ(tp[i]->values, tq[i]->values);
  EXPECT_EQ(qa.t, 1);
  EXPECT_EQ(qa.cfg.lr, 0.01);
  EXPECT_EQ(qa.cfg.eps, 1e-7);
  for (std::size_t i = 0; i < adam.m.size(); ++i) {
    EXPECT_EQ(adam.m[i].values, qa.m[i].values);
    EXPECT_EQ(adam.v[i].values, qa.v[i].values);
  }
}

TEST(Checkpoint, RejectsMismatches) {
  const auto dir = std::filesystem::temp_directory_path() / "hrnn_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "b.bin").string();
  auto p = init_params<double>(5, small_dims());
  save_checkpoint(path, "", p, make_adam(p));

  auto other = small_dims();
  other.sizes[1] = 9;
  auto q = init_params<double>(5, other);
  AdamState<double> qa;
  EXPECT_THROW(load_checkpoint(path, q, qa), Error);

  auto f = init_params<float>(5, small_dims());
  AdamState<float> fa;
  EXPECT_THROW(load_checkpoint(path, f, fa), Error);

  auto bytes = read_bytes(path);
  bytes.resize(bytes.size() / 2);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  auto r = init_params<double>(5, small_dims());
  EXPECT_THROW(load_checkpoint(path, r, qa), Error);
  bytes[0] = 'X';
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  EXPECT_THROW(checkpoint_config(path), Error);
}
