#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tmblock/autodiff/batch_norm.hpp"
#include "tmblock/autodiff/tensor.hpp"
#include "tmblock/rng.hpp"

namespace tmb::blocks {

/// Non-linearity that turns matching scores into mixing coefficients.
enum class Mixing { bn_relu, margin_softmax, perturbed };
enum class ShortcutMode { add, concat, identity };

std::string to_string(Mixing m);
std::string to_string(ShortcutMode m);
Mixing parse_mixing(const std::string& text);
ShortcutMode parse_shortcut(const std::string& text);

/// Settings of the margin soft-max and perturbed replacements. Unused by
/// bn_relu.
struct MixingParams {
  double mu = 2.5;
  double eta = 17.0;
  double eps = 1.0;
  std::size_t samples = 64;
};

/// One parameter tensor under a stable dotted name.
struct NamedParam {
  std::string name;
  ad::Tensor tensor;
};

struct NamedNorm {
  std::string name;
  ad::BatchNormState* state;
};

/// Applies the configured mixing non-linearity. `bn` is required for
/// bn_relu; `noise_key` seeds the perturbed variant.
ad::Tensor apply_mixing(const ad::Tensor& scores, Mixing mode, const MixingParams& params,
                        ad::BatchNormState* bn, std::uint64_t noise_key);

/// Kaiming-uniform initialization with bound sqrt(6 / fan_in).
ad::Tensor kaiming_uniform(ad::Shape shape, std::size_t fan_in, Rng& rng);

// ---------------------------------------------------------------------------
// Baseline residual unit: conv3x3 -> activation -> conv1x1, plus shortcut.

struct ResidualBlockParams {
  ad::Tensor conv1;         // [out, in, 3, 3]
  ad::BatchNormState bn;    // used when activation == bn_relu
  ad::Tensor conv2;         // [out, out, 1, 1]
  ad::Tensor conv2_bias;    // [out]
  ad::Tensor proj;          // [out, in, 1, 1]; undefined for identity shortcut
  ad::Tensor proj_bias;     // [out]
  std::size_t stride = 1;
  Mixing activation = Mixing::bn_relu;
  MixingParams mixing;

  static ResidualBlockParams create(std::size_t in, std::size_t out, std::size_t stride,
                                    Rng& rng);
  void collect(const std::string& prefix, std::vector<NamedParam>& params,
               std::vector<NamedNorm>& norms);
};

ad::Tensor residual_block_baseline(const ad::Tensor& f, ResidualBlockParams& params,
                                   std::uint64_t noise_key = 0);

// ---------------------------------------------------------------------------
// Template-matching block.

struct TemplateBlockConfig {
  std::size_t num_classes = 10;
  std::size_t d_in = 32;
  std::size_t d_value = 32;
  /// Width of the 1x1 shortcut projection; 0 picks d_value for add and d_in
  /// for concat. Ignored for identity.
  std::size_t d_shortcut = 0;
  /// Patch window; 0 means ceil(H/2) (resp. ceil(W/2)) of the incoming map.
  std::size_t window_h = 0;
  std::size_t window_w = 0;
  ShortcutMode shortcut = ShortcutMode::add;
  bool pre_pool_bn = false;
  bool shortcut_avgpool2 = false;
  /// Batch-normalize the patch scores before both the loss head and mixing.
  bool score_bn = false;
  Mixing mixing = Mixing::bn_relu;
  MixingParams mixing_params;

  std::size_t shortcut_width() const;
  std::size_t d_out() const;
  /// Throws std::invalid_argument on inconsistent widths.
  void validate() const;
  std::pair<std::size_t, std::size_t> window_for(std::size_t h, std::size_t w) const;
};

struct TemplateBlockParams {
  ad::BatchNormState pre_bn;     // pre_pool_bn
  ad::Tensor alpha;              // [c, d]
  ad::Tensor alpha_bias;         // [c]
  ad::BatchNormState score_norm; // score_bn
  ad::BatchNormState mix_bn;     // bn_relu mixing
  ad::Tensor values;             // [d_value, c]
  ad::Tensor proj;               // [d_shortcut, d, 1, 1]
  ad::Tensor proj_bias;          // [d_shortcut]

  static TemplateBlockParams create(const TemplateBlockConfig& cfg, Rng& rng);
  void collect(const std::string& prefix, const TemplateBlockConfig& cfg,
               std::vector<NamedParam>& params, std::vector<NamedNorm>& norms);
};

struct BlockOutput {
  ad::Tensor f_out;
  ad::Tensor patch_scores;
  ad::Tensor mixing;
  ad::Tensor f_prime;
};

/// Stride-1 same-size average pooling with count_valid borders.
ad::Tensor patch_pool(const ad::Tensor& f, std::size_t window_h, std::size_t window_w);

/// a = alpha x_g + beta at every pixel.
ad::Tensor patch_classifier(const ad::Tensor& x_g, const ad::Tensor& alpha,
                            const ad::Tensor& beta);

struct Embedding {
  ad::Tensor f_prime;
  ad::Tensor mixing;
};

/// Mixing coefficients from the scores, then x' = sum_k p_k nu_k per pixel.
Embedding embed_values(const ad::Tensor& scores, const ad::Tensor& values, Mixing mode,
                       const MixingParams& params, ad::BatchNormState* bn,
                       std::uint64_t noise_key = 0);

/// f'(x) = sum_k mixing_k(x) nu_k for an already computed mixing map.
ad::Tensor weighted_values(const ad::Tensor& mixing, const ad::Tensor& values);

BlockOutput template_block_forward(const ad::Tensor& f, const TemplateBlockConfig& cfg,
                                   TemplateBlockParams& params, std::uint64_t noise_key = 0);

/// Switches every BatchNormState in `norms` to `mode`.
void set_norm_mode(std::vector<NamedNorm>& norms, ad::NormMode mode);

}  // namespace tmb::blocks
