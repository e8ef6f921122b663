#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "support/oracles.hpp"
#include "tmblock/autodiff/batch_norm.hpp"
#include "tmblock/autodiff/gradcheck.hpp"
#include "tmblock/autodiff/ops.hpp"
#include "tmblock/matchers/layers.hpp"
#include "tmblock/matchers/solvers.hpp"

using namespace tmb;
using namespace tmb::match;

namespace {

MatchProblem random_problem(Rng& rng, std::size_t k, double spread = 3.0) {
  MatchProblem prob;
  prob.a.resize(k);
  for (auto& v : prob.a) v = rng.uniform(-spread, spread);
  prob.mu = rng.uniform(-spread, spread);
  prob.eps = rng.uniform(0.2, 3.0);
  return prob;
}

void expect_same_point(const SimplexPoint& x, const SimplexPoint& y, double tol) {
  ASSERT_EQ(x.p.size(), y.p.size());
  EXPECT_NEAR(x.q, y.q, tol);
  for (std::size_t i = 0; i < x.p.size(); ++i) EXPECT_NEAR(x.p[i], y.p[i], tol) << "entry " << i;
}

}  // namespace

TEST(SolveExact, ForcedArgmax) {
  const auto x = solve_exact({{0.5, 3.0, 1.2}, 2.5, 1.0});
  EXPECT_EQ(x.p, (std::vector<double>{0, 1, 0}));
  EXPECT_EQ(x.q, 0.0);
}

TEST(SolveExact, NoMatchBelowMargin) {
  const auto x = solve_exact({{1.0, 2.0}, 2.5, 1.0});
  EXPECT_EQ(x.p, (std::vector<double>{0, 0}));
  EXPECT_EQ(x.q, 1.0);
}

TEST(SolveExact, TieRules) {
  EXPECT_EQ(solve_exact({{1.0, 2.0}, 2.0, 1.0}).q, 1.0);
  const auto x = solve_exact({{3.0, 1.0, 3.0}, 0.0, 1.0});
  EXPECT_EQ(x.p, (std::vector<double>{1, 0, 0}));
}

TEST(BruteForce, Examples) {
  EXPECT_EQ(brute_force_vertices({{7.0}, 0.0, 1.0}).p, (std::vector<double>{1.0}));
  EXPECT_EQ(brute_force_vertices({{0.0, 0.0}, 0.0, 1.0}).q, 1.0);
}

TEST(BruteForce, ReturnedVertexMaximizesObjective) {
  Rng rng(11);
  for (int t = 0; t < 200; ++t) {
    const auto prob = random_problem(rng, 1 + rng.below(8));
    const auto best = brute_force_vertices(prob);
    const double f = linear_objective(prob, best);
    for (std::size_t v = 0; v <= prob.size(); ++v) {
      SimplexPoint vertex{std::vector<double>(prob.size(), 0.0), v == 0 ? 1.0 : 0.0};
      if (v > 0) vertex.p[v - 1] = 1.0;
      EXPECT_GE(f, linear_objective(prob, vertex));
    }
  }
}

TEST(SolveExact, MatchesBruteForceIncludingTies) {
  Rng rng(12);
  for (int t = 0; t < 1000; ++t) {
    auto prob = random_problem(rng, 1 + rng.below(8));
    if (t % 20 == 0) {
      // Round to a coarse grid so exact ties become common.
      for (auto& v : prob.a) v = std::round(v);
      prob.mu = std::round(prob.mu);
    }
    const auto x = solve_exact(prob);
    const auto y = brute_force_vertices(prob);
    ASSERT_EQ(x.p, y.p);
    ASSERT_EQ(x.q, y.q);
  }
}

TEST(SolveEntropy, SymmetricPoints) {
  expect_same_point(solve_entropy({{0.0, 0.0}, 0.0, 1.0}), {{1.0 / 3, 1.0 / 3}, 1.0 / 3}, 1e-15);
  expect_same_point(solve_entropy({{2.5}, 2.5, 1.0}), {{0.5}, 0.5}, 1e-15);
}

TEST(SolveEntropy, OverflowSafe) {
  const auto x = solve_entropy({{1000.0, 999.0}, -1000.0, 5.0});
  EXPECT_TRUE(x.feasible());
  EXPECT_GT(x.p[0], 0.99);
  EXPECT_GT(x.q, 0.0 - 1e-300);
}

TEST(SolveEntropy, MatchesNumericSolver) {
  Rng rng(13);
  for (int t = 0; t < 100; ++t) {
    const auto prob = random_problem(rng, 1 + rng.below(8), 2.0);
    const auto closed = solve_entropy(prob);
    const auto numeric = numeric_solve_entropy(prob);
    EXPECT_TRUE(closed.feasible());
    EXPECT_TRUE(numeric.feasible());
    expect_same_point(closed, numeric, 1e-6);
    EXPECT_NEAR(entropy_objective(prob, numeric), entropy_objective(prob, closed), 1e-9);
  }
}

TEST(NumericSolve, SymmetricExamples) {
  expect_same_point(numeric_solve_entropy({{0.0, 0.0}, 0.0, 1.0}), {{1.0 / 3, 1.0 / 3}, 1.0 / 3},
                    1e-9);
  expect_same_point(numeric_solve_entropy({{0.7}, 0.7, 2.0}), {{0.5}, 0.5}, 1e-9);
}

TEST(NumericSolve, ReportsNonConvergence) {
  NumericSolveOptions opts;
  opts.max_iterations = 3;
  EXPECT_THROW(numeric_solve_entropy({{0.0, 4.0, -2.0}, 1.0, 1.0}, opts), ConvergenceError);
}

TEST(SolveEntropy, LargeTemperatureSelectsExactVertex) {
  Rng rng(14);
  int accepted = 0;
  while (accepted < 200) {
    auto prob = random_problem(rng, 1 + rng.below(6));
    prob.eps = 50.0;
    std::vector<double> all = prob.a;
    all.push_back(prob.mu);
    std::sort(all.begin(), all.end());
    bool gap_ok = true;
    for (std::size_t i = 1; i < all.size(); ++i) gap_ok = gap_ok && all[i] - all[i - 1] >= 0.2;
    if (!gap_ok) continue;
    ++accepted;
    const auto soft = solve_entropy(prob);
    const auto hard = solve_exact(prob);
    EXPECT_EQ(soft.argmax_extended(), hard.argmax_extended());
    double top = soft.q;
    for (double v : soft.p) top = std::max(top, v);
    EXPECT_GE(top, 0.99);
  }
}

TEST(JacobianEntropy, SymmetricClosedForm) {
  const auto j = jacobian_entropy({{0.0, 0.0}, 0.0, 1.0});
  EXPECT_NEAR(j(0, 0), 2.0 / 9, 1e-15);
  EXPECT_NEAR(j(1, 1), 2.0 / 9, 1e-15);
  EXPECT_NEAR(j(0, 1), -1.0 / 9, 1e-15);
  EXPECT_NEAR(j(1, 0), -1.0 / 9, 1e-15);
}

TEST(JacobianEntropy, LinearInTemperatureAtFixedPoint) {
  const std::vector<double> p{0.2, 0.5, 0.1};
  const auto j1 = jacobian_entropy_at(p, 1.0);
  const auto jh = jacobian_entropy_at(p, 0.5);
  EXPECT_LT((jh - 0.5 * j1).cwiseAbs().maxCoeff(), 1e-16);
}

TEST(JacobianEntropy, MatchesFiniteDifferences) {
  Rng rng(15);
  const double h = 1e-6;
  for (int t = 0; t < 50; ++t) {
    const auto prob = random_problem(rng, 1 + rng.below(6), 2.0);
    const auto j = jacobian_entropy(prob);
    EXPECT_LT((j - j.transpose()).cwiseAbs().maxCoeff(), 1e-15);
    for (std::size_t i = 0; i < prob.size(); ++i) {
      auto plus = prob, minus = prob;
      plus.a[i] += h;
      minus.a[i] -= h;
      const auto pp = solve_entropy(plus).p, pm = solve_entropy(minus).p;
      for (std::size_t c = 0; c < prob.size(); ++c)
        EXPECT_NEAR(j(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)),
                    (pp[c] - pm[c]) / (2 * h), 1e-6);
    }
  }
}

TEST(SolvePerturbed, SymmetricPointMillionSamples) {
  const auto x = solve_perturbed({{0.0, 0.0}, 0.0, 1.0}, {1000000, 5});
  EXPECT_TRUE(x.feasible());
  EXPECT_NEAR(x.p[0], 1.0 / 3, 3e-3);
  EXPECT_NEAR(x.p[1], 1.0 / 3, 3e-3);
  EXPECT_NEAR(x.q, 1.0 / 3, 3e-3);
}

TEST(SolvePerturbed, LargeGapConcentrates) {
  const auto x = solve_perturbed({{10.0, 0.0}, 0.0, 1.0}, {100000, 6});
  EXPECT_GE(x.p[0], 0.999);
}

TEST(SolvePerturbed, Deterministic) {
  const MatchProblem prob{{0.3, -0.2, 0.9}, 0.1, 1.5};
  const auto x = solve_perturbed(prob, {5000, 42});
  const auto y = solve_perturbed(prob, {5000, 42});
  EXPECT_EQ(x.p, y.p);
  EXPECT_EQ(x.q, y.q);
  const auto z = solve_perturbed(prob, {5000, 43});
  EXPECT_NE(x.p, z.p);
}

TEST(SolvePerturbed, SampleCountConvergence) {
  Rng rng(16);
  for (int t = 0; t < 5; ++t) {
    const auto prob = random_problem(rng, 1 + rng.below(4), 1.5);
    const auto small = solve_perturbed(prob, {10000, 100u + static_cast<unsigned>(t)});
    const auto large = solve_perturbed(prob, {1000000, 200u + static_cast<unsigned>(t)});
    expect_same_point(small, large, 2e-2);
  }
}

TEST(JacobianPerturbed, MatchesCommonRandomNumberDifferences) {
  const MatchProblem prob{{0.0, 0.0}, 0.0, 1.0};
  const PerturbedConfig cfg{1000000, 7};
  const auto j = jacobian_perturbed(prob, cfg);
  const double h = 1e-2;
  for (std::size_t i = 0; i < 2; ++i) {
    auto plus = prob, minus = prob;
    plus.a[i] += h;
    minus.a[i] -= h;
    const auto pp = solve_perturbed(plus, cfg).p, pm = solve_perturbed(minus, cfg).p;
    for (std::size_t c = 0; c < 2; ++c)
      EXPECT_NEAR(j(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)),
                  (pp[c] - pm[c]) / (2 * h), 5e-2);
  }
}

TEST(JacobianPerturbed, DiagonalNonNegativeWithinNoise) {
  Rng rng(17);
  for (int t = 0; t < 10; ++t) {
    const auto prob = random_problem(rng, 1 + rng.below(5), 1.5);
    const auto est = perturbed_estimate(prob, {20000, 300u + static_cast<unsigned>(t)});
    for (Eigen::Index i = 0; i < est.jacobian.rows(); ++i)
      EXPECT_GE(est.jacobian(i, i), -3.0 * est.jacobian_stderr(i, i));
  }
}

TEST(JacobianPerturbed, GapCaseNearZero) {
  const auto est = perturbed_estimate({{10.0, 0.0}, 0.0, 1.0}, {100000, 8});
  for (Eigen::Index i = 0; i < 2; ++i)
    for (Eigen::Index c = 0; c < 2; ++c)
      EXPECT_LE(std::abs(est.jacobian(i, c)), 3.0 * est.jacobian_stderr(i, c) + 1e-3);
  // Same stream as the mean estimate.
  const auto mean = solve_perturbed({{10.0, 0.0}, 0.0, 1.0}, {100000, 8});
  EXPECT_EQ(est.mean.p, mean.p);
}

TEST(BnReluThreshold, DirectSubstitution) {
  auto state = ad::BatchNormState::create(2);
  state.stats_initialized = true;
  state.running_mean = {1.0, 3.0};
  state.running_var = {4.0, 9.0};
  state.gamma.mutable_data()[0] = 2.0;
  state.beta.mutable_data()[0] = -1.0;
  state.gamma.mutable_data()[1] = 1.5;
  state.beta.mutable_data()[1] = 0.0;
  const auto r = bn_relu_threshold(state);
  EXPECT_DOUBLE_EQ(r.mu[0], 2.0);
  EXPECT_DOUBLE_EQ(r.mu[1], 3.0);
  EXPECT_TRUE(r.flagged.empty());
  EXPECT_DOUBLE_EQ(r.mean_nonzero(), 2.5);
}

TEST(BnReluThreshold, FlagsZeroGammaAndRejectsMissingStats) {
  auto state = ad::BatchNormState::create(2);
  EXPECT_THROW(bn_relu_threshold(state), ad::UninitializedStatsError);
  state.stats_initialized = true;
  state.gamma.mutable_data()[1] = 0.0;
  const auto r = bn_relu_threshold(state);
  ASSERT_EQ(r.flagged, (std::vector<std::size_t>{1}));
  EXPECT_TRUE(std::isnan(r.mu[1]));
  EXPECT_DOUBLE_EQ(r.mu[0], 0.0);
}

TEST(BnReluNormalize, Examples) {
  const auto r = bn_relu_normalize(std::vector<double>{2.0, 6.0});
  EXPECT_EQ(r.eta, 8.0);
  EXPECT_EQ(r.p_star, (std::vector<double>{0.25, 0.75}));
  const auto z = bn_relu_normalize(std::vector<double>{0.0, 0.0});
  EXPECT_EQ(z.eta, 0.0);
  EXPECT_EQ(z.p_star, (std::vector<double>{0.0, 0.0}));
  EXPECT_THROW(bn_relu_normalize(std::vector<double>{1.0, -0.5}), std::invalid_argument);
}

TEST(BnReluNormalize, PreservesRanking) {
  Rng rng(18);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> v(1 + rng.below(8));
    for (auto& x : v) x = rng.uniform() < 0.3 ? 0.0 : rng.uniform(0.0, 5.0);
    const auto r = bn_relu_normalize(v);
    EXPECT_EQ(oracle::ranking(v), oracle::ranking(r.p_star));
  }
}

TEST(OrderPreservation, SharedBnReluMatchesEntropyRanking) {
  Rng rng(19);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t k = 2 + rng.below(7);
    std::vector<double> a(k);
    for (auto& v : a) v = rng.uniform(-3.0, 3.0);
    const double gamma = rng.uniform(0.1, 3.0), beta = rng.uniform(-1.0, 1.0);
    const double mean = rng.uniform(-1.0, 1.0), var = rng.uniform(0.2, 4.0);
    std::vector<std::size_t> nz;
    std::vector<double> bn;
    for (std::size_t i = 0; i < k; ++i) {
      const double y = std::max(0.0, gamma * (a[i] - mean) / std::sqrt(var) + beta);
      if (y > 0.0) {
        nz.push_back(i);
        bn.push_back(y);
      }
    }
    const auto p = solve_entropy({a, rng.uniform(-2.0, 2.0), rng.uniform(0.1, 4.0)}).p;
    std::vector<double> soft;
    for (auto i : nz) soft.push_back(p[i]);
    ASSERT_EQ(oracle::ranking(bn), oracle::ranking(soft));
  }
}

TEST(MarginSoftmax, SingleChannelAtMargin) {
  auto y = margin_softmax_layer(ad::Tensor::from({1, 1}, {2.5}), 2.5, 17.0, 1.0);
  EXPECT_DOUBLE_EQ(y.item(), 8.5);
}

TEST(MarginSoftmax, MatchesClosedFormAndStaysBelowEta) {
  Rng rng(20);
  auto x = oracle::random_tensor({2, 4, 3, 3}, rng, -4, 4);
  const double mu = 2.5, eta = 17.0, eps = 1.0;
  auto y = margin_softmax_layer(x, mu, eta, eps);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 9; ++i) {
      MatchProblem prob{{}, mu, eps};
      for (std::size_t c = 0; c < 4; ++c) prob.a.push_back(x.at((n * 4 + c) * 9 + i));
      const auto sol = solve_entropy(prob);
      double total = 0;
      for (std::size_t c = 0; c < 4; ++c) {
        EXPECT_NEAR(y.at((n * 4 + c) * 9 + i), eta * sol.p[c], 1e-12);
        total += y.at((n * 4 + c) * 9 + i);
      }
      EXPECT_NEAR(total, eta * (1 - sol.q), 1e-12);
      EXPECT_LT(total, eta);
    }
}

TEST(MarginSoftmax, Gradcheck) {
  Rng rng(21);
  auto x = oracle::random_tensor({2, 3, 2, 2}, rng, -2, 2);
  std::vector<ad::Tensor> params{x};
  const auto w = oracle::random_tensor({2, 3, 2, 2}, rng, -1, 1, false);
  const auto report = ad::gradcheck(
      [&] { return ad::sum(ad::mul(margin_softmax_layer(x, 0.5, 3.0, 1.3), w)); }, params);
  EXPECT_TRUE(report.passed) << report.first_failure;
}

TEST(MarginSoftmax, BackwardEqualsEntropyJacobian) {
  const std::vector<double> a{0.4, -1.0, 1.7};
  auto x = ad::Tensor::from({1, 3}, a, true);
  const std::vector<double> g{0.3, -2.0, 1.1};
  ad::sum(ad::mul(margin_softmax_layer(x, 0.2, 2.0, 1.5), ad::Tensor::from({1, 3}, g))).backward();
  const auto j = jacobian_entropy({a, 0.2, 1.5});
  for (Eigen::Index i = 0; i < 3; ++i) {
    double expected = 0;
    for (Eigen::Index c = 0; c < 3; ++c) expected += 2.0 * j(i, c) * g[static_cast<std::size_t>(c)];
    EXPECT_NEAR(x.grad()[static_cast<std::size_t>(i)], expected, 1e-14);
  }
}

TEST(PerturbedLayer, PixelsReproduceSolver) {
  Rng rng(22);
  auto x = oracle::random_tensor({2, 3, 2, 2}, rng, -1, 1);
  const std::uint64_t seed = 77;
  auto y = perturbed_maximizer_layer(x, 0.1, 2.0, 1.0, 200, seed);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 4; ++i) {
      MatchProblem prob{{}, 0.1, 1.0};
      for (std::size_t c = 0; c < 3; ++c) prob.a.push_back(x.at((n * 3 + c) * 4 + i));
      const auto sol = solve_perturbed(prob, {200, combine_keys(seed, n * 4 + i)});
      for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(y.at((n * 3 + c) * 4 + i), 2.0 * sol.p[c], 1e-12);
    }
}

TEST(PerturbedLayer, BackwardEqualsPerturbedJacobian) {
  const std::vector<double> a{0.2, -0.3};
  auto x = ad::Tensor::from({1, 2}, a, true);
  const std::uint64_t seed = 5;
  ad::sum(ad::mul(perturbed_maximizer_layer(x, 0.0, 3.0, 1.0, 4000, seed),
                  ad::Tensor::from({1, 2}, {1.0, -0.5})))
      .backward();
  const auto j = jacobian_perturbed({a, 0.0, 1.0}, {4000, combine_keys(seed, 0)});
  EXPECT_NEAR(x.grad()[0], 3.0 * (j(0, 0) - 0.5 * j(0, 1)), 1e-12);
  EXPECT_NEAR(x.grad()[1], 3.0 * (j(1, 0) - 0.5 * j(1, 1)), 1e-12);
}

TEST(PerturbedLayer, MemoryEstimate) {
  EXPECT_EQ(perturbed_layer_bytes(10, 64), 2560u);
}
