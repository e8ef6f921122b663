#include "tmblock/blocks/blocks.hpp"

#include <cmath>
#include <stdexcept>

#include "tmblock/autodiff/ops.hpp"
#include "tmblock/matchers/layers.hpp"

namespace tmb::blocks {

using ad::Tensor;

std::string to_string(Mixing m) {
  switch (m) {
    case Mixing::bn_relu: return "bn_relu";
    case Mixing::margin_softmax: return "margin_softmax";
    case Mixing::perturbed: return "perturbed";
  }
  return "?";
}

std::string to_string(ShortcutMode m) {
  switch (m) {
    case ShortcutMode::add: return "add";
    case ShortcutMode::concat: return "concat";
    case ShortcutMode::identity: return "identity";
  }
  return "?";
}

Mixing parse_mixing(const std::string& text) {
  if (text == "bn_relu") return Mixing::bn_relu;
  if (text == "margin_softmax") return Mixing::margin_softmax;
  if (text == "perturbed") return Mixing::perturbed;
  throw std::invalid_argument("unknown mixing '" + text +
                              "' (expected bn_relu, margin_softmax or perturbed)");
}

ShortcutMode parse_shortcut(const std::string& text) {
  if (text == "add") return ShortcutMode::add;
  if (text == "concat") return ShortcutMode::concat;
  if (text == "identity") return ShortcutMode::identity;
  throw std::invalid_argument("unknown shortcut '" + text + "' (expected add, concat or identity)");
}

Tensor apply_mixing(const Tensor& scores, Mixing mode, const MixingParams& params,
                    ad::BatchNormState* bn, std::uint64_t noise_key) {
  switch (mode) {
    case Mixing::bn_relu:
      if (bn == nullptr) throw std::invalid_argument("bn_relu mixing needs a BatchNormState");
      return ad::relu(ad::batch_norm(scores, *bn));
    case Mixing::margin_softmax:
      return match::margin_softmax_layer(scores, params.mu, params.eta, params.eps);
    case Mixing::perturbed:
      return match::perturbed_maximizer_layer(scores, params.mu, params.eta, params.eps,
                                              params.samples, noise_key);
  }
  throw std::logic_error("apply_mixing: bad mode");
}

Tensor kaiming_uniform(ad::Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<double> v(ad::shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from(std::move(shape), std::move(v), true);
}

void set_norm_mode(std::vector<NamedNorm>& norms, ad::NormMode mode) {
  for (auto& n : norms) n.state->mode = mode;
}

// ---------------------------------------------------------------------------

ResidualBlockParams ResidualBlockParams::create(std::size_t in, std::size_t out,
                                                std::size_t stride, Rng& rng) {
  if (stride == 0) throw std::invalid_argument("residual block: stride must be positive");
  ResidualBlockParams p;
  p.stride = stride;
  p.conv1 = kaiming_uniform({out, in, 3, 3}, in * 9, rng);
  p.bn = ad::BatchNormState::create(out);
  p.conv2 = kaiming_uniform({out, out, 1, 1}, out, rng);
  p.conv2_bias = Tensor::zeros({out}, true);
  if (in != out || stride != 1) {
    p.proj = kaiming_uniform({out, in, 1, 1}, in, rng);
    p.proj_bias = Tensor::zeros({out}, true);
  }
  return p;
}

void ResidualBlockParams::collect(const std::string& prefix, std::vector<NamedParam>& params,
                                  std::vector<NamedNorm>& norms) {
  params.push_back({prefix + ".conv1.weight", conv1});
  if (activation == Mixing::bn_relu) {
    params.push_back({prefix + ".bn.gamma", bn.gamma});
    params.push_back({prefix + ".bn.beta", bn.beta});
    norms.push_back({prefix + ".bn", &bn});
  }
  params.push_back({prefix + ".conv2.weight", conv2});
  params.push_back({prefix + ".conv2.bias", conv2_bias});
  if (proj.defined()) {
    params.push_back({prefix + ".proj.weight", proj});
    params.push_back({prefix + ".proj.bias", proj_bias});
  }
}

Tensor residual_block_baseline(const Tensor& f, ResidualBlockParams& p, std::uint64_t noise_key) {
  if (f.rank() != 4 || f.dim(1) != p.conv1.dim(1)) {
    throw ad::ShapeError("residual block: input " + ad::shape_str(f.shape()) +
                         " does not match conv " + ad::shape_str(p.conv1.shape()));
  }
  if (!p.proj.defined() && p.stride != 1) {
    throw ad::ShapeError("residual block: strided block needs a projection shortcut");
  }
  auto h = ad::conv2d(f, p.conv1, Tensor{}, {p.stride, ad::Padding::same});
  h = apply_mixing(h, p.activation, p.mixing, &p.bn, noise_key);
  h = ad::conv2d(h, p.conv2, p.conv2_bias);
  const Tensor shortcut =
      p.proj.defined() ? ad::conv2d(f, p.proj, p.proj_bias, {p.stride, ad::Padding::same}) : f;
  return ad::add(shortcut, h);
}

// ---------------------------------------------------------------------------

std::size_t TemplateBlockConfig::shortcut_width() const {
  switch (shortcut) {
    case ShortcutMode::identity: return d_in;
    case ShortcutMode::add: return d_shortcut == 0 ? d_value : d_shortcut;
    case ShortcutMode::concat: return d_shortcut == 0 ? d_in : d_shortcut;
  }
  return 0;
}

std::size_t TemplateBlockConfig::d_out() const {
  return shortcut == ShortcutMode::concat ? shortcut_width() + d_value : d_value;
}

void TemplateBlockConfig::validate() const {
  if (num_classes == 0 || d_in == 0 || d_value == 0) {
    throw std::invalid_argument("template block: num_classes, d_in and d_value must be positive");
  }
  if (shortcut == ShortcutMode::add && shortcut_width() != d_value) {
    throw std::invalid_argument("template block: add shortcut needs projection width " +
                                std::to_string(shortcut_width()) + " == d_value " +
                                std::to_string(d_value));
  }
  if (shortcut == ShortcutMode::identity && d_in != d_value) {
    throw std::invalid_argument("template block: identity shortcut needs d_in " +
                                std::to_string(d_in) + " == d_value " + std::to_string(d_value));
  }
  if (mixing == Mixing::margin_softmax || mixing == Mixing::perturbed) {
    if (!(mixing_params.eps > 0.0) || !(mixing_params.eta > 0.0)) {
      throw std::invalid_argument("template block: eps and eta must be positive");
    }
  }
}

std::pair<std::size_t, std::size_t> TemplateBlockConfig::window_for(std::size_t h,
                                                                    std::size_t w) const {
  return {window_h != 0 ? window_h : (h + 1) / 2, window_w != 0 ? window_w : (w + 1) / 2};
}

TemplateBlockParams TemplateBlockParams::create(const TemplateBlockConfig& cfg, Rng& rng) {
  cfg.validate();
  TemplateBlockParams p;
  const std::size_t c = cfg.num_classes;
  p.pre_bn = ad::BatchNormState::create(cfg.d_in);
  p.alpha = kaiming_uniform({c, cfg.d_in}, cfg.d_in, rng);
  p.alpha_bias = Tensor::zeros({c}, true);
  p.score_norm = ad::BatchNormState::create(c);
  p.mix_bn = ad::BatchNormState::create(c);
  p.values = Tensor::zeros({cfg.d_value, c}, true);
  if (cfg.shortcut != ShortcutMode::identity) {
    p.proj = kaiming_uniform({cfg.shortcut_width(), cfg.d_in, 1, 1}, cfg.d_in, rng);
    p.proj_bias = Tensor::zeros({cfg.shortcut_width()}, true);
  }
  return p;
}

void TemplateBlockParams::collect(const std::string& prefix, const TemplateBlockConfig& cfg,
                                  std::vector<NamedParam>& params, std::vector<NamedNorm>& norms) {
  if (cfg.pre_pool_bn) {
    params.push_back({prefix + ".pre_bn.gamma", pre_bn.gamma});
    params.push_back({prefix + ".pre_bn.beta", pre_bn.beta});
    norms.push_back({prefix + ".pre_bn", &pre_bn});
  }
  params.push_back({prefix + ".alpha", alpha});
  params.push_back({prefix + ".alpha_bias", alpha_bias});
  if (cfg.score_bn) {
    params.push_back({prefix + ".score_bn.gamma", score_norm.gamma});
    params.push_back({prefix + ".score_bn.beta", score_norm.beta});
    norms.push_back({prefix + ".score_bn", &score_norm});
  }
  if (cfg.mixing == Mixing::bn_relu) {
    params.push_back({prefix + ".mix_bn.gamma", mix_bn.gamma});
    params.push_back({prefix + ".mix_bn.beta", mix_bn.beta});
    norms.push_back({prefix + ".mix_bn", &mix_bn});
  }
  params.push_back({prefix + ".values", values});
  if (proj.defined()) {
    params.push_back({prefix + ".proj.weight", proj});
    params.push_back({prefix + ".proj.bias", proj_bias});
  }
}

Tensor patch_pool(const Tensor& f, std::size_t window_h, std::size_t window_w) {
  return ad::avg_pool(f, {window_h, window_w, 1, ad::Padding::same, ad::PoolBorder::count_valid});
}

Tensor patch_classifier(const Tensor& x_g, const Tensor& alpha, const Tensor& beta) {
  if (alpha.rank() != 2) {
    throw ad::ShapeError("patch_classifier: alpha must be [c,d], got " + ad::shape_str(alpha.shape()));
  }
  return ad::conv2d(x_g, ad::reshape(alpha, {alpha.dim(0), alpha.dim(1), 1, 1}), beta);
}

Tensor weighted_values(const Tensor& mixing, const Tensor& values) {
  if (values.rank() != 2) {
    throw ad::ShapeError("value table must be [d_value,c], got " + ad::shape_str(values.shape()));
  }
  return ad::conv2d(mixing, ad::reshape(values, {values.dim(0), values.dim(1), 1, 1}), Tensor{});
}

Embedding embed_values(const Tensor& scores, const Tensor& values, Mixing mode,
                       const MixingParams& params, ad::BatchNormState* bn,
                       std::uint64_t noise_key) {
  Embedding e;
  e.mixing = apply_mixing(scores, mode, params, bn, noise_key);
  e.f_prime = weighted_values(e.mixing, values);
  return e;
}

BlockOutput template_block_forward(const Tensor& f, const TemplateBlockConfig& cfg,
                                   TemplateBlockParams& p, std::uint64_t noise_key) {
  cfg.validate();
  if (f.rank() != 4 || f.dim(1) != cfg.d_in) {
    throw ad::ShapeError("template block: expected [N," + std::to_string(cfg.d_in) +
                         ",H,W] input, got " + ad::shape_str(f.shape()));
  }
  Tensor x = cfg.pre_pool_bn ? ad::batch_norm(f, p.pre_bn) : f;
  const auto [wh, ww] = cfg.window_for(f.dim(2), f.dim(3));
  BlockOutput out;
  out.patch_scores = patch_classifier(patch_pool(x, wh, ww), p.alpha, p.alpha_bias);
  if (cfg.score_bn) out.patch_scores = ad::batch_norm(out.patch_scores, p.score_norm);
  auto emb = embed_values(out.patch_scores, p.values, cfg.mixing, cfg.mixing_params, &p.mix_bn,
                          noise_key);
  out.mixing = emb.mixing;
  out.f_prime = emb.f_prime;

  Tensor shortcut = f;
  if (cfg.shortcut_avgpool2) {
    shortcut = ad::avg_pool(shortcut, {2, 2, 1, ad::Padding::same, ad::PoolBorder::count_valid});
  }
  if (cfg.shortcut != ShortcutMode::identity) shortcut = ad::conv2d(shortcut, p.proj, p.proj_bias);
  if (cfg.shortcut == ShortcutMode::concat) {
    const Tensor parts[] = {shortcut, out.f_prime};
    out.f_out = ad::concat_channels(parts);
  } else {
    out.f_out = ad::add(shortcut, out.f_prime);
  }
  return out;
}

}  // namespace tmb::blocks
