#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "support/oracles.hpp"
#include "tmblock/autodiff/gradcheck.hpp"
#include "tmblock/autodiff/ops.hpp"
#include "tmblock/blocks/blocks.hpp"

using namespace tmb;
using namespace tmb::blocks;
using tmb::oracle::random_tensor;

namespace {

ad::Tensor readout(const ad::Tensor& t, std::uint64_t seed) {
  Rng rng(seed);
  return ad::sum(ad::mul(t, random_tensor(t.shape(), rng, -1.0, 1.0, false)));
}

void zero(ad::Tensor& t) {
  for (auto& v : t.mutable_data()) v = 0.0;
}

TemplateBlockConfig small_config(ShortcutMode mode = ShortcutMode::add) {
  TemplateBlockConfig cfg;
  cfg.num_classes = 3;
  cfg.d_in = 4;
  cfg.d_value = mode == ShortcutMode::concat ? 5 : 4;
  cfg.shortcut = mode;
  return cfg;
}

}  // namespace

TEST(ResidualBlock, ZeroBranchGivesShortcut) {
  Rng rng(1);
  auto p = ResidualBlockParams::create(3, 5, 2, rng);
  zero(p.conv1);
  zero(p.conv2);
  zero(p.conv2_bias);
  auto f = random_tensor({2, 3, 6, 6}, rng);
  const auto out = residual_block_baseline(f, p);
  const auto shortcut = ad::conv2d(f, p.proj, p.proj_bias, {2, ad::Padding::same});
  ASSERT_EQ(out.shape(), (ad::Shape{2, 5, 3, 3}));
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_DOUBLE_EQ(out.at(i), shortcut.at(i));
}

TEST(ResidualBlock, IdentityShortcutWithZeroBranchIsIdentity) {
  Rng rng(2);
  auto p = ResidualBlockParams::create(4, 4, 1, rng);
  EXPECT_FALSE(p.proj.defined());
  zero(p.conv2);
  zero(p.conv2_bias);
  auto f = random_tensor({1, 4, 5, 5}, rng);
  const auto out = residual_block_baseline(f, p);
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_EQ(out.at(i), f.at(i));
}

TEST(ResidualBlock, RejectsWrongChannelCount) {
  Rng rng(3);
  auto p = ResidualBlockParams::create(4, 4, 1, rng);
  EXPECT_THROW(residual_block_baseline(random_tensor({1, 3, 5, 5}, rng), p), std::invalid_argument);
}

TEST(ResidualBlock, Gradcheck) {
  Rng rng(4);
  auto p = ResidualBlockParams::create(3, 4, 2, rng);
  auto f = random_tensor({2, 3, 6, 6}, rng);
  std::vector<ad::Tensor> params{f, p.conv1, p.bn.gamma, p.bn.beta, p.conv2, p.conv2_bias, p.proj, p.proj_bias};
  const auto report = ad::gradcheck([&] { return readout(residual_block_baseline(f, p), 9); }, params);
  EXPECT_TRUE(report.passed) << report.first_failure;
}

TEST(PatchPool, ConstantMapAndUnitWindow) {
  auto c = ad::Tensor::full({1, 2, 5, 5}, 3.25);
  const auto pooled = patch_pool(c, 3, 2);
  for (double v : pooled.data()) EXPECT_DOUBLE_EQ(v, 3.25);
  Rng rng(5);
  auto x = random_tensor({1, 2, 4, 3}, rng);
  const auto same = patch_pool(x, 1, 1);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(same.at(i), x.at(i));
}

TEST(PatchPool, FourByFourOnEightByEightMatchesWindowMeans) {
  Rng rng(6);
  auto x = random_tensor({2, 3, 8, 8}, rng);
  const auto pooled = patch_pool(x, 4, 4);
  ASSERT_EQ(pooled.shape(), x.shape());
  const std::vector<double> xs(x.data().begin(), x.data().end());
  const auto expected = oracle::naive_window_mean(xs, 6, 8, 8, 4, 4);
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(pooled.at(i), expected[i], 1e-14);
}

TEST(PatchClassifier, ZeroAlphaGivesBias) {
  Rng rng(7);
  auto x = random_tensor({2, 4, 3, 3}, rng);
  auto alpha = ad::Tensor::zeros({3, 4});
  auto beta = ad::Tensor::from({3}, {0.5, -1.0, 2.0});
  const auto a = patch_classifier(x, alpha, beta);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t k = 0; k < 3; ++k)
      for (std::size_t p = 0; p < 9; ++p) EXPECT_EQ(a.at((n * 3 + k) * 9 + p), beta.at(k));
}

TEST(PatchClassifier, UnitAlphaSelectsChannel) {
  Rng rng(8);
  auto x = random_tensor({1, 4, 3, 3}, rng);
  auto alpha = ad::Tensor::from({1, 4}, {1, 0, 0, 0});
  const auto a = patch_classifier(x, alpha, ad::Tensor::zeros({1}));
  for (std::size_t p = 0; p < 9; ++p) EXPECT_EQ(a.at(p), x.at(p));
}

TEST(PatchClassifier, MatchesPerPixelDotProducts) {
  Rng rng(9);
  auto x = random_tensor({2, 5, 3, 4}, rng);
  auto alpha = random_tensor({3, 5}, rng);
  auto beta = random_tensor({3}, rng);
  const auto a = patch_classifier(x, alpha, beta);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t k = 0; k < 3; ++k)
      for (std::size_t p = 0; p < 12; ++p) {
        double dot = beta.at(k);
        for (std::size_t d = 0; d < 5; ++d) dot += alpha.at(k * 5 + d) * x.at((n * 5 + d) * 12 + p);
        EXPECT_NEAR(a.at((n * 3 + k) * 12 + p), dot, 1e-13);
      }
}

TEST(EmbedValues, OneHotAndZeroMixing) {
  Rng rng(10);
  auto values = random_tensor({4, 3}, rng);
  std::vector<double> onehot(3 * 2, 0.0);
  onehot[1 * 2 + 0] = 1.0;  // pixel 0 picks class 1
  onehot[2 * 2 + 1] = 1.0;  // pixel 1 picks class 2
  const auto f = weighted_values(ad::Tensor::from({1, 3, 1, 2}, onehot), values);
  for (std::size_t d = 0; d < 4; ++d) {
    EXPECT_EQ(f.at(d * 2 + 0), values.at(d * 3 + 1));
    EXPECT_EQ(f.at(d * 2 + 1), values.at(d * 3 + 2));
  }
  const auto z = weighted_values(ad::Tensor::zeros({1, 3, 1, 2}), values);
  for (double v : z.data()) EXPECT_EQ(v, 0.0);
}

TEST(EmbedValues, MatchesExplicitWeightedSum) {
  Rng rng(11);
  auto mixing = random_tensor({2, 3, 2, 3}, rng, 0.0, 2.0);
  auto values = random_tensor({5, 3}, rng);
  const auto f = weighted_values(mixing, values);
  ASSERT_EQ(f.shape(), (ad::Shape{2, 5, 2, 3}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t d = 0; d < 5; ++d)
      for (std::size_t p = 0; p < 6; ++p) {
        double s = 0.0;
        for (std::size_t k = 0; k < 3; ++k) s += mixing.at((n * 3 + k) * 6 + p) * values.at(d * 3 + k);
        EXPECT_NEAR(f.at((n * 5 + d) * 6 + p), s, 1e-12);
      }
}

TEST(EmbedValues, LinearInValueTable) {
  Rng rng(12);
  auto scores = random_tensor({2, 3, 3, 3}, rng, -2, 2);
  auto a = random_tensor({4, 3}, rng), b = random_tensor({4, 3}, rng);
  MixingParams mp;
  mp.mu = 0.3;
  const auto ea = embed_values(scores, a, Mixing::margin_softmax, mp, nullptr).f_prime;
  const auto eb = embed_values(scores, b, Mixing::margin_softmax, mp, nullptr).f_prime;
  const auto eab = embed_values(scores, ad::add(a, b), Mixing::margin_softmax, mp, nullptr).f_prime;
  for (std::size_t i = 0; i < eab.numel(); ++i) EXPECT_NEAR(eab.at(i), ea.at(i) + eb.at(i), 1e-12);
}

TEST(EmbedValues, MixingNonNegativeAndBelowEta) {
  Rng rng(13);
  auto scores = random_tensor({2, 4, 3, 3}, rng, -3, 6);
  MixingParams mp;
  auto bn = ad::BatchNormState::create(4);
  const auto relu_mix = embed_values(scores, random_tensor({2, 4}, rng), Mixing::bn_relu, mp, &bn).mixing;
  for (double v : relu_mix.data()) EXPECT_GE(v, 0.0);
  const auto soft = embed_values(scores, random_tensor({2, 4}, rng), Mixing::margin_softmax, mp, nullptr).mixing;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t p = 0; p < 9; ++p) {
      double s = 0.0;
      for (std::size_t k = 0; k < 4; ++k) {
        EXPECT_GE(soft.at((n * 4 + k) * 9 + p), 0.0);
        s += soft.at((n * 4 + k) * 9 + p);
      }
      EXPECT_LT(s, mp.eta);
    }
}

TEST(TemplateBlock, ConfigValidation) {
  auto cfg = small_config();
  cfg.d_shortcut = 3;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  auto id = small_config(ShortcutMode::identity);
  id.d_value = 6;
  EXPECT_THROW(id.validate(), std::invalid_argument);
  EXPECT_EQ(small_config(ShortcutMode::concat).d_out(), 4u + 5u);
  EXPECT_EQ(small_config().window_for(8, 7), (std::pair<std::size_t, std::size_t>{4, 4}));
}

TEST(TemplateBlock, ZeroClassifierAndValuesGiveProjectedShortcut) {
  Rng rng(14);
  const auto cfg = small_config();
  auto p = TemplateBlockParams::create(cfg, rng);
  zero(p.alpha);
  auto f = random_tensor({2, 4, 4, 4}, rng);
  const auto out = template_block_forward(f, cfg, p);
  const auto proj = ad::conv2d(f, p.proj, p.proj_bias);
  for (std::size_t i = 0; i < out.f_out.numel(); ++i) EXPECT_EQ(out.f_out.at(i), proj.at(i));
}

TEST(TemplateBlock, IdentityShortcutWithZeroValuesIsIdentity) {
  Rng rng(15);
  const auto cfg = small_config(ShortcutMode::identity);
  auto p = TemplateBlockParams::create(cfg, rng);
  auto f = random_tensor({1, 4, 4, 4}, rng);
  const auto out = template_block_forward(f, cfg, p);
  for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_EQ(out.f_out.at(i), f.at(i));
}

TEST(TemplateBlock, ConcatWidthAndSharedScores) {
  Rng rng(16);
  auto cfg = small_config(ShortcutMode::concat);
  auto p = TemplateBlockParams::create(cfg, rng);
  auto f = random_tensor({2, 4, 6, 6}, rng);
  const auto out = template_block_forward(f, cfg, p);
  EXPECT_EQ(out.f_out.shape(), (ad::Shape{2, 9, 6, 6}));
  EXPECT_EQ(out.f_prime.shape(), (ad::Shape{2, 5, 6, 6}));
  const auto [wh, ww] = cfg.window_for(6, 6);
  const auto direct = patch_classifier(patch_pool(f, wh, ww), p.alpha, p.alpha_bias);
  for (std::size_t i = 0; i < direct.numel(); ++i) EXPECT_EQ(out.patch_scores.at(i), direct.at(i));
}

TEST(TemplateBlock, FullGradcheckOnSmallInput) {
  Rng rng(17);
  TemplateBlockConfig cfg;
  cfg.num_classes = 3;
  cfg.d_in = 8;
  cfg.d_value = 8;
  cfg.pre_pool_bn = true;
  auto p = TemplateBlockParams::create(cfg, rng);
  for (auto& v : p.values.mutable_data()) v = rng.uniform(-1.0, 1.0);
  auto f = random_tensor({1, 8, 6, 6}, rng);
  std::vector<ad::Tensor> params{f, p.alpha, p.alpha_bias, p.values, p.proj, p.proj_bias,
                                 p.pre_bn.gamma, p.pre_bn.beta, p.mix_bn.gamma, p.mix_bn.beta};
  const auto report = ad::gradcheck(
      [&] {
        const auto out = template_block_forward(f, cfg, p);
        return ad::add(readout(out.f_out, 1), readout(out.patch_scores, 2));
      },
      params);
  EXPECT_TRUE(report.passed) << report.first_failure;
  EXPECT_GT(report.checked, 300u);
}

TEST(TemplateBlock, ParameterNames) {
  Rng rng(18);
  auto cfg = small_config();
  cfg.score_bn = true;
  auto p = TemplateBlockParams::create(cfg, rng);
  std::vector<NamedParam> params;
  std::vector<NamedNorm> norms;
  p.collect("template", cfg, params, norms);
  std::vector<std::string> names;
  for (const auto& np : params) names.push_back(np.name);
  EXPECT_EQ(names, (std::vector<std::string>{"template.alpha", "template.alpha_bias",
                                             "template.score_bn.gamma", "template.score_bn.beta",
                                             "template.mix_bn.gamma", "template.mix_bn.beta",
                                             "template.values", "template.proj.weight",
                                             "template.proj.bias"}));
  EXPECT_EQ(norms.size(), 2u);
}

TEST(Mixing, NamesRoundTrip) {
  for (auto m : {Mixing::bn_relu, Mixing::margin_softmax, Mixing::perturbed})
    EXPECT_EQ(parse_mixing(to_string(m)), m);
  for (auto s : {ShortcutMode::add, ShortcutMode::concat, ShortcutMode::identity})
    EXPECT_EQ(parse_shortcut(to_string(s)), s);
  EXPECT_THROW(parse_mixing("gelu"), std::invalid_argument);
}
