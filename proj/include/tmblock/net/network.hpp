#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tmblock/autodiff/batch_norm.hpp"
#include "tmblock/autodiff/tensor.hpp"
#include "tmblock/blocks/blocks.hpp"
#include "tmblock/config_text.hpp"

namespace tmb::net {

struct StageSpec {
  std::size_t blocks = 2;
  std::size_t width_in = 16;
  std::size_t width_out = 16;
  /// Spatial reduction of the stage's first block (1 or 2).
  std::size_t reduction = 1;
};

struct StemSpec {
  std::size_t in_channels = 3;
  std::size_t width = 16;
};

/// Stem conv-BN-ReLU, residual stages, an optional template block between
/// the last two stages, then BN-ReLU, global average pooling and a linear
/// classifier.
struct NetConfig {
  StemSpec stem;
  std::vector<StageSpec> stages;
  std::optional<blocks::TemplateBlockConfig> insert_block;
  std::size_t num_classes = 10;
  double lambda = 0.5;
  /// Activation between the two convolutions of every residual unit.
  blocks::Mixing activation = blocks::Mixing::bn_relu;
  blocks::MixingParams activation_params;

  /// Throws std::invalid_argument naming the first inconsistency.
  void validate() const;
  /// Index of the stage after which the template block runs.
  std::size_t insert_after() const { return stages.size() - 2; }
  /// Product of stage reductions up to and including the insert point.
  std::size_t block_stride() const;

  std::string to_text() const;
  static NetConfig parse(const std::string& text);
  /// Consumes the top-level, [stem], [stage] and [insert_block] sections;
  /// other section names are skipped.
  static NetConfig from_sections(const std::vector<ConfigSection>& sections);

  /// Widths 16/32/32/64, reductions 1/2/2/1, two blocks per stage; with
  /// `with_block` an add-shortcut template block of value width 32.
  static NetConfig desk(std::size_t num_classes, bool with_block);
};

struct ForwardResult {
  ad::Tensor main_logits;
  /// Undefined when the network has no template block.
  ad::Tensor patch_scores;
  std::optional<blocks::BlockOutput> block;
  /// Feature map entering the template block (undefined without one).
  ad::Tensor block_input;
  bool has_patch_scores() const { return patch_scores.defined(); }
};

/// Parameters of every component are drawn from their own seeded stream, so
/// adding or removing the template block leaves the remaining initial
/// weights unchanged.
class Network {
 public:
  static Network build(const NetConfig& cfg, std::uint64_t seed);

  Network(Network&&) noexcept;
  Network& operator=(Network&&) noexcept;
  ~Network();

  /// input is [N, C, H, W], already normalized.
  ForwardResult forward(const ad::Tensor& input);

  void set_mode(ad::NormMode mode);
  ad::NormMode mode() const { return mode_; }

  std::vector<blocks::NamedParam> parameters();
  std::vector<blocks::NamedNorm> norms();
  std::size_t parameter_count();

  const NetConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  bool has_block() const { return cfg_.insert_block.has_value(); }

 private:
  Network();
  struct Impl;
  NetConfig cfg_;
  std::uint64_t seed_ = 0;
  ad::NormMode mode_ = ad::NormMode::train;
  std::uint64_t forward_count_ = 0;
  std::unique_ptr<Impl> impl_;
};

struct LossParts {
  ad::Tensor total;
  ad::Tensor main;
  /// Undefined when the network has no patch scores.
  ad::Tensor aux;
};

/// (1 - lambda) * CE(main) + lambda * mean per-patch CE(patch scores).
LossParts loss_parts(const ForwardResult& result, std::span<const int> labels, double lambda);
ad::Tensor total_loss(const ForwardResult& result, std::span<const int> labels, double lambda);

/// Fraction of rows whose first maximal logit equals the label.
double top1_accuracy(const ad::Tensor& logits, std::span<const int> labels);
std::vector<int> argmax_rows(const ad::Tensor& logits);

struct EvalResult {
  ForwardResult result;
  double top1 = 0.0;
};

/// Eval-mode forward without recording a tape. Throws
/// ad::UninitializedStatsError when BN statistics were never estimated.
EvalResult forward_eval(Network& net, const ad::Tensor& input, std::span<const int> labels);

/// Train-mode forward without a tape or optimizer step, used to populate
/// running statistics of an untrained network.
void calibrate_norms(Network& net, const ad::Tensor& input);

}  // namespace tmb::net
