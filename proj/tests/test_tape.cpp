#include "circle/tape.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

using namespace circle;
using namespace circle::tape;

namespace {

Tensor rnd(std::vector<std::size_t> shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  return random_tensor(std::move(shape), rng, lo, hi);
}

// Values kept away from kinks so central differences are valid.
Tensor away_from(double kink, std::vector<std::size_t> shape, std::uint64_t seed) {
  Tensor t = rnd(std::move(shape), seed);
  for (auto& v : t.values()) {
    if (std::abs(v - kink) < 0.05) v = kink + (v < kink ? -0.1 : 0.1);
  }
  return t;
}

constexpr double kTol = 1e-4;

}  // namespace

TEST(Kernels, LinearIdentity) {
  Tape t;
  Tensor eye = Tensor::matrix(3, 3);
  for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  const Tensor x = rnd({4, 3}, 1);
  const Var y = linear(t.constant(x), t.constant(eye), t.constant(Tensor::matrix(1, 3)));
  EXPECT_EQ(y.value().values(), x.values());
}

TEST(Kernels, LeakyReluOfMinusOne) {
  Tape t;
  const Var y = leaky_relu(t.constant(Tensor::scalar(-1.0)), 0.01);
  EXPECT_DOUBLE_EQ(y.value()[0], -0.01);
}

TEST(Kernels, InstanceNormStatistics) {
  Tape t;
  const Tensor x = rnd({50, 6}, 2, -3.0, 7.0);
  const Var y = instance_norm(t.constant(x), t.constant(Tensor::matrix(1, 6, 1.0)),
                             t.constant(Tensor::matrix(1, 6, 0.0)));
  const auto m = y.value().mat();
  for (int c = 0; c < 6; ++c) {
    const double mean = m.col(c).mean();
    const double var = (m.col(c).array() - mean).square().mean();
    EXPECT_NEAR(mean, 0.0, 1e-6);
    EXPECT_NEAR(var, 1.0, 1e-4);
  }
}

TEST(Kernels, MeanPoolExamples) {
  Tape t;
  const Tensor one = rnd({1, 5}, 3);
  EXPECT_EQ(mean_pool(t.constant(one)).value().values(), one.values());
  const Var two = mean_pool(t.constant(Tensor::from({2, 2}, {0, 2, 2, 0})));
  EXPECT_EQ(two.value().to_vector(), (std::vector<double>{1, 1}));
  const Tensor x = rnd({6, 3}, 4);
  Tensor perm = Tensor::matrix(6, 3);
  const int order[6] = {3, 5, 0, 1, 4, 2};
  for (int r = 0; r < 6; ++r) perm.mat().row(r) = x.mat().row(order[r]);
  const auto a = mean_pool(t.constant(x)).value();
  const auto b = mean_pool(t.constant(perm)).value();
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(a[c], b[c], 1e-15);
  try {
    mean_pool(t.constant(Tensor::matrix(0, 3)));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptySet);
  }
}

TEST(Kernels, ShapeMismatchIsReported) {
  Tape t;
  try {
    matmul(t.constant(Tensor::matrix(2, 3)), t.constant(Tensor::matrix(2, 3)));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
  }
  EXPECT_THROW(add(t.constant(Tensor::matrix(2, 3)), t.constant(Tensor::matrix(3, 2))), Error);
}

TEST(Backward, SumGivesOnes) {
  Tape t;
  const Var x = t.leaf(rnd({3, 4}, 5));
  t.backward(sum(x));
  for (double g : t.grad(x).values()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, AccumulationIsAdditive) {
  const Tensor x0 = rnd({4, 3}, 6);
  const Tensor w0 = rnd({3, 2}, 7);
  auto loss1 = [](const Var& x, const Var& w) { return sum(leaky_relu(matmul(x, w), 0.01)); };
  auto loss2 = [](const Var& x, const Var& w) { return mean(mul(matmul(x, w), matmul(x, w))); };

  Tape joint;
  const Var xj = joint.leaf(x0), wj = joint.leaf(w0);
  joint.backward(add(loss1(xj, wj), loss2(xj, wj)));

  Tape split;
  const Var xs = split.leaf(x0), ws = split.leaf(w0);
  split.backward(loss1(xs, ws));
  split.backward(loss2(xs, ws));
  for (std::size_t i = 0; i < x0.size(); ++i) {
    EXPECT_NEAR(joint.grad(xj)[i], split.grad(xs)[i], 1e-12);
  }
  for (std::size_t i = 0; i < w0.size(); ++i) {
    EXPECT_NEAR(joint.grad(wj)[i], split.grad(ws)[i], 1e-12);
  }
}

TEST(Backward, ParameterGradientsAccumulateIntoStore) {
  ParameterStore store;
  Parameter& p = store.add("w", {2, 2});
  p.value = Tensor::from({2, 2}, {1, 2, 3, 4});
  store.zero_grad();
  for (int rep = 0; rep < 2; ++rep) {
    Tape t;
    t.backward(sum(t.parameter(p)));
  }
  for (double g : p.grad.values()) EXPECT_EQ(g, 2.0);
  store.zero_grad();
  for (double g : p.grad.values()) EXPECT_EQ(g, 0.0);
}

TEST(GradCheck, Linear8x8) {
  const double err = grad_check(
      [](Tape&, std::span<const Var> v) { return linear(v[0], v[1], v[2]); },
      {rnd({8, 8}, 1), rnd({8, 8}, 2), rnd({1, 8}, 3)}, 1e-5);
  EXPECT_LT(err, kTol);
}

TEST(GradCheck, LinearWithoutBias) {
  const double err = grad_check(
      [](Tape&, std::span<const Var> v) { return linear(v[0], v[1], Var{}); },
      {rnd({5, 3}, 1), rnd({3, 4}, 2)});
  EXPECT_LT(err, kTol);
}

TEST(GradCheck, ElementwiseKernels) {
  const auto a = rnd({4, 5}, 11), b = rnd({4, 5}, 12);
  EXPECT_LT(grad_check([](Tape&, std::span<const Var> v) { return add(v[0], v[1]); }, {a, b}), kTol);
  EXPECT_LT(grad_check([](Tape&, std::span<const Var> v) { return sub(v[0], v[1]); }, {a, b}), kTol);
  EXPECT_LT(grad_check([](Tape&, std::span<const Var> v) { return mul(v[0], v[1]); }, {a, b}), kTol);
  EXPECT_LT(grad_check([](Tape&, std::span<const Var> v) { return scale(v[0], -2.5); }, {a}), kTol);
  EXPECT_LT(grad_check([b](Tape&, std::span<const Var> v) { return mul_const(v[0], b); }, {a}), kTol);
  EXPECT_LT(grad_check([b](Tape&, std::span<const Var> v) { return add_const(v[0], b); }, {a}), kTol);
  EXPECT_LT(grad_check([](Tape&, std::span<const Var> v) { return sigmoid(v[0]); }, {a}), kTol);
  EXPECT_LT(grad_check([](Tape&, std::span<const Var> v) { return sum(v[0]); }, {a}), kTol);
  EXPECT_LT(grad_check([](Tape&, std::span<const Var> v) { return mean(v[0]); }, {a}), kTol);
}

TEST(GradCheck, PiecewiseKernelsAwayFromKinks) {
  const auto x = away_from(0.0, {6, 4}, 21);
  EXPECT_LT(grad_check([](Tape&, std::span<const Var> v) { return leaky_relu(v[0], 0.01); }, {x}),
            kTol);
  EXPECT_LT(grad_check([](Tape&, std::span<const Var> v) { return abs(v[0]); }, {x}), kTol);
  Tensor c = rnd({6, 4}, 22, -2.0, 2.0);
  for (auto& v : c.values()) {
    if (std::abs(std::abs(v) - 1.0) < 0.05) v *= 1.2;
  }
  EXPECT_LT(grad_check([](Tape&, std::span<const Var> v) { return clamp(v[0], -1.0, 1.0); }, {c}),
            kTol);
}

TEST(GradCheck, RowReductions) {
  const auto a = rnd({5, 3}, 31), b = rnd({5, 3}, 32);
  EXPECT_LT(grad_check([](Tape&, std::span<const Var> v) { return row_norm(v[0]); }, {a}), kTol);
  EXPECT_LT(grad_check([](Tape&, std::span<const Var> v) { return row_dot(v[0], v[1]); }, {a, b}),
            kTol);
  EXPECT_LT(grad_check([](Tape&, std::span<const Var> v) { return mean_pool(v[0]); }, {a}), kTol);
  const std::vector<int> seg = {0, 1, 0, 2, 1};
  EXPECT_LT(grad_check([&](Tape&, std::span<const Var> v) { return segment_mean(v[0], seg, 3); },
                       {a}),
            kTol);
}

TEST(GradCheck, InstanceNorm) {
  const double err = grad_check(
      [](Tape&, std::span<const Var> v) { return instance_norm(v[0], v[1], v[2]); },
      {rnd({9, 4}, 41), rnd({1, 4}, 42), rnd({1, 4}, 43)}, 1e-5);
  EXPECT_LT(err, kTol);
}

TEST(GradCheck, GathersAndConcats) {
  const auto a = rnd({5, 3}, 51), b = rnd({2, 3}, 52), c = rnd({5, 2}, 53);
  EXPECT_LT(grad_check([](Tape&, std::span<const Var> v) { return gather_rows(v[0], {4, -1, 0, 0, 2}); },
                       {a}),
            kTol);
  EXPECT_LT(grad_check(
                [](Tape&, std::span<const Var> v) {
                  return weighted_gather(v[0], {0, 1, -1, 3, 4, 4}, {0.2, 0.8, 0.5, 0.1, 0.3, 0.6}, 2);
                },
                {a}),
            kTol);
  EXPECT_LT(grad_check([](Tape&, std::span<const Var> v) { return concat_rows(v); }, {a, b}), kTol);
  EXPECT_LT(grad_check([](Tape&, std::span<const Var> v) { return concat_cols(v); }, {a, c}), kTol);
  EXPECT_LT(grad_check([](Tape&, std::span<const Var> v) { return matmul(v[0], v[1]); },
                       {a, rnd({3, 4}, 54)}),
            kTol);
}

TEST(GradCheck, BinaryCrossEntropy) {
  const Tensor p = rnd({7, 1}, 61, 0.05, 0.95);
  const std::vector<double> labels = {1, 0, 0, 1, 1, 0, 1};
  EXPECT_LT(grad_check([&](Tape&, std::span<const Var> v) { return bce_sum(v[0], labels); }, {p}),
            kTol);
  Tape t;
  const Var l = bce_sum(t.constant(Tensor::from({1, 1}, {0.9})), std::vector<double>{1.0});
  EXPECT_NEAR(l.value()[0], -std::log(0.9), 1e-12);
}

TEST(GradCheck, RulebookConv) {
  auto rules = std::make_shared<Rulebook>();
  rules->out_rows = 3;
  rules->taps = {{{0, 0}, {1, 1}}, {{2, 0}, {3, 2}, {1, 2}}};
  const double err = grad_check(
      [rules](Tape&, std::span<const Var> v) { return rulebook_conv(v[0], v[1], rules); },
      {rnd({4, 3}, 71), rnd({2, 3, 2}, 72)});
  EXPECT_LT(err, kTol);
}

TEST(Masks, MatchDefinitions) {
  const Tensor pre = Tensor::from({1, 4}, {-2.0, -0.5, 0.5, 2.0});
  EXPECT_EQ(leaky_relu_mask(pre, 0.01).to_vector(), (std::vector<double>{0.01, 0.01, 1, 1}));
  EXPECT_EQ(clamp_mask(pre, -1, 1).to_vector(), (std::vector<double>{0, 1, 1, 0}));
}

TEST(Checkpoint, RoundTripAndErrors) {
  const auto path = std::filesystem::temp_directory_path() / "circle_ckpt.bin";
  std::mt19937_64 rng(1);
  ParameterStore a;
  a.add_kaiming("enc.w0", {6, 32}, 6, 0.01, rng);
  a.add_kaiming("conv", {27, 4, 8}, 108, 0.01, rng);
  a.add("bias", {1, 8});
  a.save(path);

  ParameterStore b;
  b.add("enc.w0", {6, 32});
  b.add("conv", {27, 4, 8});
  b.add("bias", {1, 8});
  b.load(path);
  for (std::size_t i = 0; i < a.all().size(); ++i) {
    EXPECT_EQ(a.all()[i]->value.values(), b.all()[i]->value.values());
  }

  ParameterStore wrong;
  wrong.add("enc.w0", {6, 31});
  wrong.add("conv", {27, 4, 8});
  wrong.add("bias", {1, 8});
  EXPECT_THROW(wrong.load(path), Error);
  EXPECT_THROW(b.load(path.string() + ".missing"), Error);
}

TEST(Init, KaimingBoundsAndZeroBias) {
  std::mt19937_64 rng(2);
  ParameterStore s;
  const auto& w = s.add_kaiming("w", {64, 64}, 64, 0.01, rng);
  const double bound = std::sqrt(2.0 / (1.0 + 1e-4)) * std::sqrt(3.0 / 64.0);
  double max_abs = 0.0;
  for (double v : w.value.values()) max_abs = std::max(max_abs, std::abs(v));
  EXPECT_LE(max_abs, bound);
  EXPECT_GT(max_abs, 0.9 * bound);
  for (double v : s.add("b", {1, 64}).value.values()) EXPECT_EQ(v, 0.0);
}
