#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "support/oracles.hpp"
#include "tmblock/autodiff/batch_norm.hpp"
#include "tmblock/autodiff/gradcheck.hpp"
#include "tmblock/autodiff/ops.hpp"

using namespace tmb;
using namespace tmb::ad;
using tmb::oracle::random_tensor;

namespace {

void expect_gradcheck(const std::function<Tensor()>& loss, std::vector<Tensor> params,
                      double rtol = 1e-3) {
  GradcheckOptions opts;
  opts.rtol = rtol;
  const auto report = gradcheck(loss, params, opts);
  EXPECT_TRUE(report.passed) << report.first_failure;
  EXPECT_GT(report.checked, 0u);
}

// Fixed random readout so a scalar loss depends on every output element.
Tensor readout(const Tensor& t, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(t, random_tensor(t.shape(), rng, -1.0, 1.0, false)));
}

}  // namespace

TEST(Tensor, RejectsInconsistentData) {
  EXPECT_THROW(Tensor::from({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(Tensor::zeros({2, 0}), ShapeError);
}

TEST(Elementwise, ReluExample) {
  auto y = relu(Tensor::from({3}, {-1.0, 0.0, 2.0}));
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), (std::vector<double>{0, 0, 2}));
}

TEST(Elementwise, SoftmaxSymmetric) {
  auto y = softmax(Tensor::from({2}, {0.0, 0.0}), 0);
  EXPECT_DOUBLE_EQ(y.at(0), 0.5);
  EXPECT_DOUBLE_EQ(y.at(1), 0.5);
}

TEST(Elementwise, SoftmaxOverMiddleAxisSumsToOne) {
  Rng rng(3);
  auto x = random_tensor({2, 4, 3}, rng, -5, 5);
  auto y = softmax(x, 1);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 3; ++i) {
      double s = 0;
      for (std::size_t k = 0; k < 4; ++k) s += y.at((n * 4 + k) * 3 + i);
      EXPECT_NEAR(s, 1.0, 1e-14);
    }
}

TEST(Backward, SumGivesOnes) {
  auto x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  sum(x).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareAtThree) {
  auto x = Tensor::scalar(3.0, true);
  mul(x, x).backward();
  EXPECT_EQ(x.grad()[0], 6.0);
}

TEST(Backward, SharedInputSumsContributions) {
  // f(x) = x*x + x  =>  f'(x) = 2x + 1
  auto x = Tensor::from({3}, {-1.5, 0.25, 2.0}, true);
  sum(add(mul(x, x), x)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], -2.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 1.5);
  EXPECT_DOUBLE_EQ(x.grad()[2], 5.0);
}

TEST(Backward, AccumulatesUntilZeroed) {
  auto x = Tensor::from({2}, {1.0, 2.0}, true);
  sum(scalar_mul(x, 3.0)).backward();
  sum(scalar_mul(x, 3.0)).backward();
  EXPECT_EQ(x.grad()[0], 6.0);
  x.zero_grad();
  sum(scalar_mul(x, 3.0)).backward();
  EXPECT_EQ(x.grad()[1], 3.0);
}

TEST(Backward, RejectsNonScalar) {
  auto x = Tensor::from({2}, {1.0, 2.0}, true);
  EXPECT_THROW(scalar_mul(x, 2.0).backward(), ShapeError);
}

TEST(Backward, NoGradGuardSkipsTape) {
  auto x = Tensor::from({2}, {1.0, 2.0}, true);
  Tensor y;
  {
    NoGradGuard guard;
    y = sum(x);
  }
  EXPECT_FALSE(y.requires_grad());
}

TEST(Conv2d, IdentityKernelPreservesInput) {
  Rng rng(1);
  auto x = random_tensor({2, 1, 5, 4}, rng);
  std::vector<double> k(9, 0.0);
  k[4] = 1.0;
  auto y = conv2d(x, Tensor::from({1, 1, 3, 3}, k), Tensor{});
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.at(i), x.at(i));
}

TEST(Conv2d, ZeroKernelGivesZeroOutputAndGradient) {
  Rng rng(2);
  auto x = random_tensor({1, 3, 4, 4}, rng);
  auto k = Tensor::zeros({2, 3, 3, 3}, true);
  auto y = conv2d(x, k, Tensor{});
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
  sum(y).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Conv2d, MatchesDirectLoopOracle) {
  Rng rng(3);
  for (std::size_t stride : {1u, 2u}) {
    for (Padding pad : {Padding::same, Padding::valid}) {
      auto x = random_tensor({2, 3, 7, 6}, rng);
      auto k = random_tensor({4, 3, 3, 3}, rng);
      auto b = random_tensor({4}, rng);
      auto y = conv2d(x, k, b, {stride, pad});
      std::size_t oh = 0, ow = 0;
      std::vector<double> xv(x.data().begin(), x.data().end()), kv(k.data().begin(), k.data().end()),
          bv(b.data().begin(), b.data().end());
      auto ref = oracle::naive_conv2d(xv, 2, 3, 7, 6, kv, 4, 3, 3, &bv, stride,
                                       pad == Padding::same ? 1 : 0, oh, ow);
      ASSERT_EQ(y.shape(), (Shape{2, 4, oh, ow}));
      EXPECT_LT(oracle::max_abs_diff(y.data(), ref), 1e-12);
    }
  }
}

TEST(Conv2d, GradcheckExample) {
  Rng rng(4);
  auto x = random_tensor({1, 4, 5, 5}, rng);
  auto k = random_tensor({2, 4, 3, 3}, rng);
  auto b = random_tensor({2}, rng);
  expect_gradcheck([&] { return readout(conv2d(x, k, b), 9); }, {x, k, b}, 1e-4);
  expect_gradcheck([&] { return readout(conv2d(x, k, b, {2, Padding::valid}), 9); }, {x, k, b}, 1e-4);
}

TEST(Conv2d, ShapeMismatchNamesBothShapes) {
  auto x = Tensor::zeros({1, 3, 4, 4});
  auto k = Tensor::zeros({2, 5, 3, 3});
  try {
    conv2d(x, k, Tensor{});
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,5,3,3]"), std::string::npos);
    EXPECT_NE(msg.find("[1,3,4,4]"), std::string::npos);
  }
}

TEST(Conv2d, SamePaddingPreservesSpatialShapeForOddKernels) {
  Rng rng(5);
  for (std::size_t kk : {1u, 3u, 5u}) {
    for (std::size_t h : {3u, 6u, 9u}) {
      auto y = conv2d(Tensor::zeros({1, 2, h, h + 1}), Tensor::zeros({3, 2, kk, kk}), Tensor{});
      EXPECT_EQ(y.shape(), (Shape{1, 3, h, h + 1}));
    }
  }
  EXPECT_THROW(conv2d(Tensor::zeros({1, 1, 4, 4}), Tensor::zeros({1, 1, 2, 2}), Tensor{}),
               ShapeError);
}

TEST(AvgPool, ConstantMapStaysConstant) {
  auto x = Tensor::full({1, 2, 5, 5}, 3.25);
  for (std::size_t win : {1u, 2u, 3u, 4u}) {
    auto y = avg_pool(x, {win, win, 1, Padding::same, PoolBorder::count_valid});
    for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 3.25);
  }
}

TEST(AvgPool, TwoByTwoValidWindow) {
  auto y = avg_pool(Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4}), {2, 2, 1, Padding::valid});
  ASSERT_EQ(y.numel(), 1u);
  EXPECT_DOUBLE_EQ(y.item(), 2.5);
}

TEST(AvgPool, ZeroPadBorderDividesByFullWindow) {
  auto y = avg_pool(Tensor::full({1, 1, 2, 2}, 1.0),
                    {2, 2, 1, Padding::same, PoolBorder::zero_pad});
  // Top-left window is entirely inside; the last row/column windows are half out.
  EXPECT_DOUBLE_EQ(y.at(0), 1.0);
  EXPECT_DOUBLE_EQ(y.at(3), 0.25);
}

TEST(AvgPool, ZeroWindowRejected) {
  EXPECT_THROW(avg_pool(Tensor::zeros({1, 1, 2, 2}), {0, 2, 1}), ShapeError);
}

TEST(AvgPool, Gradcheck) {
  Rng rng(6);
  auto x = random_tensor({2, 2, 5, 4}, rng);
  expect_gradcheck([&] { return readout(avg_pool(x, {3, 2, 1, Padding::same}), 7); }, {x}, 1e-5);
  expect_gradcheck([&] { return readout(avg_pool(x, {2, 2, 2, Padding::valid}), 7); }, {x}, 1e-5);
}

TEST(BatchNorm, EvalIdentityParameters) {
  auto state = BatchNormState::create(3);
  state.mode = NormMode::eval;
  state.stats_initialized = true;
  Rng rng(7);
  auto x = random_tensor({2, 3, 2, 2}, rng);
  auto y = batch_norm(x, state);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y.at(i), x.at(i), 1e-5 * std::abs(x.at(i)) + 1e-12);
}

TEST(BatchNorm, TrainModeNormalizesToBetaAndGamma) {
  auto state = BatchNormState::create(2);
  state.gamma.mutable_data()[0] = 2.0;
  state.gamma.mutable_data()[1] = -0.5;
  state.beta.mutable_data()[0] = 0.3;
  state.beta.mutable_data()[1] = -1.0;
  Rng rng(8);
  auto x = random_tensor({4, 2, 3, 3}, rng, -3, 5);
  auto y = batch_norm(x, state);
  for (std::size_t c = 0; c < 2; ++c) {
    double s = 0, ss = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 9; ++i) s += y.at((n * 2 + c) * 9 + i);
    const double m = s / 36;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 9; ++i) ss += std::pow(y.at((n * 2 + c) * 9 + i) - m, 2);
    EXPECT_NEAR(m, state.beta.at(c), 1e-12);
    EXPECT_NEAR(std::sqrt(ss / 36), std::abs(state.gamma.at(c)), 1e-4);
  }
  EXPECT_TRUE(state.stats_initialized);
}

TEST(BatchNorm, EvalRejectsUninitializedStats) {
  auto state = BatchNormState::create(2);
  state.mode = NormMode::eval;
  EXPECT_THROW(batch_norm(Tensor::zeros({1, 2, 2, 2}), state), UninitializedStatsError);
}

TEST(BatchNorm, RunningStatsFollowMovingAverage) {
  auto state = BatchNormState::create(1);
  batch_norm(Tensor::from({4, 1}, {1, 2, 3, 4}), state);
  EXPECT_DOUBLE_EQ(state.running_mean[0], 2.5);
  EXPECT_DOUBLE_EQ(state.running_var[0], 5.0 / 3.0);
  batch_norm(Tensor::from({2, 1}, {10, 10}), state);
  EXPECT_DOUBLE_EQ(state.running_mean[0], 0.9 * 2.5 + 0.1 * 10);
  for (double v : state.running_var) EXPECT_GE(v, 0.0);
}

TEST(BatchNorm, Gradcheck) {
  Rng rng(9);
  for (NormMode mode : {NormMode::train, NormMode::eval}) {
    auto state = BatchNormState::create(3);
    for (auto& g : state.gamma.mutable_data()) g = rng.uniform(0.5, 2.0);
    for (auto& b : state.beta.mutable_data()) b = rng.uniform(-1, 1);
    state.running_mean = {0.1, -0.2, 0.3};
    state.running_var = {1.5, 0.7, 2.0};
    state.stats_initialized = true;
    state.mode = mode;
    auto x = random_tensor({2, 3, 3, 2}, rng, -2, 2);
    expect_gradcheck([&] { return readout(batch_norm(x, state), 11); },
                     {x, state.gamma, state.beta}, 1e-4);
  }
}

TEST(Losses, CrossEntropyValueAndGradcheck) {
  auto logits = Tensor::from({1, 3}, {1.0, 2.0, 0.5}, true);
  const std::vector<int> label{1};
  const double expected = -std::log(std::exp(2.0) / (std::exp(1.0) + std::exp(2.0) + std::exp(0.5)));
  EXPECT_NEAR(cross_entropy(logits, label).item(), expected, 1e-14);
  Rng rng(10);
  auto x = random_tensor({4, 5}, rng, -3, 3);
  const std::vector<int> labels{0, 4, 2, 2};
  expect_gradcheck([&] { return cross_entropy(x, labels); }, {x}, 1e-5);
  auto m = random_tensor({2, 3, 2, 2}, rng, -3, 3);
  const std::vector<int> map_labels{2, 0};
  expect_gradcheck([&] { return cross_entropy_map(m, map_labels); }, {m}, 1e-5);
}

TEST(Losses, OutOfRangeLabelRejected) {
  const std::vector<int> bad{3};
  EXPECT_THROW(cross_entropy(Tensor::zeros({1, 3}), bad), std::out_of_range);
  const std::vector<int> neg{-1};
  EXPECT_THROW(cross_entropy_map(Tensor::zeros({1, 3, 2, 2}), neg), std::out_of_range);
}

TEST(Shape, ConcatRejectsMismatchedSpatialDims) {
  std::vector<Tensor> parts{Tensor::zeros({1, 2, 3, 3}), Tensor::zeros({1, 1, 3, 4})};
  EXPECT_THROW(concat_channels(parts), ShapeError);
}

TEST(Shape, ConcatAndReshapeGradcheck) {
  Rng rng(11);
  auto a = random_tensor({2, 2, 2, 3}, rng);
  auto b = random_tensor({2, 3, 2, 3}, rng);
  expect_gradcheck(
      [&] {
        std::vector<Tensor> parts{a, b};
        return readout(reshape(concat_channels(parts), {2, 30}), 3);
      },
      {a, b});
}

TEST(LinearAlgebra, MatmulAndLinearGradcheck) {
  Rng rng(12);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  auto w = random_tensor({5, 4}, rng);
  auto bias = random_tensor({5}, rng);
  expect_gradcheck([&] { return readout(matmul(a, b), 1); }, {a, b});
  expect_gradcheck([&] { return readout(linear(a, w, bias), 2); }, {a, w, bias});
  EXPECT_THROW(matmul(a, a), ShapeError);
}

TEST(Composite, ConvBnReluSoftmaxCrossEntropyGradcheck) {
  Rng rng(13);
  auto x = random_tensor({3, 2, 5, 5}, rng);
  auto k = random_tensor({4, 2, 3, 3}, rng, -0.5, 0.5);
  auto state = BatchNormState::create(4);
  auto head = random_tensor({3, 4}, rng);
  const std::vector<int> labels{0, 2, 1};
  auto loss = [&] {
    auto h = relu(batch_norm(conv2d(x, k, Tensor{}), state));
    auto logits = linear(global_avg_pool(h), head, Tensor{});
    // The squared-probability term routes gradient through softmax's own backward.
    auto p = softmax(logits, 1);
    return add(cross_entropy(logits, labels), scalar_mul(sum(mul(p, p)), 0.1));
  };
  expect_gradcheck(loss, {x, k, state.gamma, state.beta, head});
}

// Each differentiable op at 100 random points.
TEST(Property, EveryOpAgreesWithFiniteDifferences) {
  Rng rng(14);
  GradcheckOptions opts;
  int failures = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::uint64_t rs = 100 + static_cast<std::uint64_t>(trial);
    auto x = random_tensor({2, 2, 4, 4}, rng, -2, 2);
    auto k = random_tensor({3, 2, 3, 3}, rng);
    auto kb = random_tensor({3}, rng);
    auto state = BatchNormState::create(2);
    auto v = random_tensor({2, 5}, rng, -3, 3);
    auto w = random_tensor({4, 5}, rng);
    const std::vector<int> labels{static_cast<int>(rng.below(5)), static_cast<int>(rng.below(5))};
    std::vector<std::pair<std::function<Tensor()>, std::vector<Tensor>>> cases = {
        {[&] { return readout(conv2d(x, k, kb), rs); }, {x, k, kb}},
        {[&] { return readout(avg_pool(x, {2, 3, 1, Padding::same}), rs); }, {x}},
        {[&] { return readout(batch_norm(x, state), rs); }, {x, state.gamma, state.beta}},
        {[&] { return readout(relu(x), rs); }, {x}},
        {[&] { return readout(softmax(v, 1), rs); }, {v}},
        {[&] { return cross_entropy(v, labels); }, {v}},
        {[&] { return readout(matmul(v, reshape(w, {5, 4})), rs); }, {v, w}},
        {[&] { return readout(global_avg_pool(x), rs); }, {x}},
    };
    for (auto& [fn, params] : cases) {
      const auto report = gradcheck(fn, params, opts);
      if (!report.passed) {
        ++failures;
        ADD_FAILURE() << "trial " << trial << ": " << report.first_failure;
      }
    }
  }
  EXPECT_EQ(failures, 0);
}

TEST(Determinism, RepeatedEvaluationIsBitIdentical) {
  auto run = [] {
    Rng rng(15);
    auto x = random_tensor({2, 3, 6, 6}, rng);
    auto k = random_tensor({4, 3, 3, 3}, rng);
    auto state = BatchNormState::create(4);
    auto y = relu(batch_norm(conv2d(x, k, Tensor{}), state));
    auto loss = readout(y, 5);
    loss.backward();
    return std::make_pair(loss.item(), std::vector<double>(k.grad().begin(), k.grad().end()));
  };
  const auto a = run();
  const auto b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}
