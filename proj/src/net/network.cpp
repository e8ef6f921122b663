#include "tmblock/net/network.hpp"

#include <sstream>
#include <stdexcept>

#include "tmblock/autodiff/ops.hpp"
#include "tmblock/rng.hpp"

namespace tmb::net {

using ad::Tensor;
using blocks::Mixing;
using blocks::NamedNorm;
using blocks::NamedParam;

namespace {

constexpr std::uint64_t kStemStream = 1;
constexpr std::uint64_t kBlockStream = 2;
constexpr std::uint64_t kHeadStream = 3;
constexpr std::uint64_t kStageStream = 1000;

void check(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument("NetConfig: " + msg);
}

void check_mixing(Mixing m, const blocks::MixingParams& p, const std::string& where) {
  if (m == Mixing::bn_relu) return;
  check(p.eps > 0.0, where + " eps must be positive");
  check(p.eta > 0.0, where + " eta must be positive");
  check(m != Mixing::perturbed || p.samples >= 1, where + " samples must be >= 1");
}

}  // namespace

// ---------------------------------------------------------------------------
// NetConfig

void NetConfig::validate() const {
  check(num_classes >= 2, "num_classes must be >= 2");
  check(lambda >= 0.0 && lambda <= 1.0, "lambda must lie in [0,1], got " + format_double(lambda));
  check(stem.in_channels >= 1 && stem.width >= 1, "stem widths must be positive");
  check(!stages.empty(), "at least one stage is required");
  check_mixing(activation, activation_params, "activation");
  check(stem.width == stages.front().width_in,
        "stem width " + std::to_string(stem.width) + " != stage 1 width_in " +
            std::to_string(stages.front().width_in));
  if (insert_block) {
    check(stages.size() >= 2, "the template block needs at least two stages");
    insert_block->validate();
    check(insert_block->num_classes == num_classes,
          "insert_block num_classes must equal the network's");
    check(insert_block->d_in == stages[insert_after()].width_out,
          "insert_block d_in " + std::to_string(insert_block->d_in) + " != stage " +
              std::to_string(insert_after() + 1) + " width_out " +
              std::to_string(stages[insert_after()].width_out));
    check_mixing(insert_block->mixing, insert_block->mixing_params, "insert_block");
  }
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    const std::string name = "stage " + std::to_string(i + 1);
    check(s.blocks >= 1, name + " needs at least one block");
    check(s.width_in >= 1 && s.width_out >= 1, name + " widths must be positive");
    check(s.reduction == 1 || s.reduction == 2, name + " reduction must be 1 or 2");
    if (i + 1 < stages.size()) {
      const std::size_t feeds =
          insert_block && i == insert_after() ? insert_block->d_out() : s.width_out;
      check(feeds == stages[i + 1].width_in,
            "width chain broken: " + name + " delivers " + std::to_string(feeds) +
                " channels but stage " + std::to_string(i + 2) + " expects " +
                std::to_string(stages[i + 1].width_in));
    }
  }
}

std::size_t NetConfig::block_stride() const {
  std::size_t s = 1;
  const std::size_t last = insert_block ? insert_after() : stages.size() - 1;
  for (std::size_t i = 0; i <= last && i < stages.size(); ++i) s *= stages[i].reduction;
  return s;
}

NetConfig NetConfig::desk(std::size_t num_classes, bool with_block) {
  NetConfig cfg;
  cfg.num_classes = num_classes;
  cfg.stem = {3, 16};
  cfg.stages = {{2, 16, 16, 1}, {2, 16, 32, 2}, {2, 32, 32, 2}, {2, 32, 64, 1}};
  if (with_block) {
    blocks::TemplateBlockConfig b;
    b.num_classes = num_classes;
    b.d_in = 32;
    b.d_value = 32;
    cfg.insert_block = b;
  }
  return cfg;
}

std::string NetConfig::to_text() const {
  std::ostringstream out;
  out << "num_classes = " << num_classes << "\n";
  out << "lambda = " << format_double(lambda) << "\n";
  out << "activation = " << blocks::to_string(activation) << "\n";
  out << "activation_mu = " << format_double(activation_params.mu) << "\n";
  out << "activation_eta = " << format_double(activation_params.eta) << "\n";
  out << "activation_eps = " << format_double(activation_params.eps) << "\n";
  out << "activation_samples = " << activation_params.samples << "\n";
  out << "\n[stem]\n";
  out << "in_channels = " << stem.in_channels << "\n";
  out << "width = " << stem.width << "\n";
  for (const auto& s : stages) {
    out << "\n[stage]\n";
    out << "blocks = " << s.blocks << "\n";
    out << "width_in = " << s.width_in << "\n";
    out << "width_out = " << s.width_out << "\n";
    out << "reduction = " << s.reduction << "\n";
  }
  if (insert_block) {
    const auto& b = *insert_block;
    out << "\n[insert_block]\n";
    out << "num_classes = " << b.num_classes << "\n";
    out << "d_in = " << b.d_in << "\n";
    out << "d_value = " << b.d_value << "\n";
    out << "d_shortcut = " << b.d_shortcut << "\n";
    out << "window_h = " << b.window_h << "\n";
    out << "window_w = " << b.window_w << "\n";
    out << "shortcut = " << blocks::to_string(b.shortcut) << "\n";
    out << "pre_pool_bn = " << (b.pre_pool_bn ? "true" : "false") << "\n";
    out << "shortcut_avgpool2 = " << (b.shortcut_avgpool2 ? "true" : "false") << "\n";
    out << "score_bn = " << (b.score_bn ? "true" : "false") << "\n";
    out << "mixing = " << blocks::to_string(b.mixing) << "\n";
    out << "mu = " << format_double(b.mixing_params.mu) << "\n";
    out << "eta = " << format_double(b.mixing_params.eta) << "\n";
    out << "eps = " << format_double(b.mixing_params.eps) << "\n";
    out << "samples = " << b.mixing_params.samples << "\n";
  }
  return out.str();
}

NetConfig NetConfig::parse(const std::string& text) {
  const auto sections = parse_config_text(text);
  for (const auto& s : sections) {
    if (!s.name.empty() && s.name != "stem" && s.name != "stage" && s.name != "insert_block") {
      throw ConfigError("line " + std::to_string(s.line) + ": unknown section [" + s.name + "]");
    }
  }
  return from_sections(sections);
}

NetConfig NetConfig::from_sections(const std::vector<ConfigSection>& sections) {
  NetConfig cfg;
  bool block_classes_set = false;
  for (const auto& sec : sections) {
    if (sec.name.empty()) {
      for (const auto& e : sec.entries) {
        if (e.key == "num_classes") cfg.num_classes = config_size(e);
        else if (e.key == "lambda") cfg.lambda = config_double(e);
        else if (e.key == "activation") cfg.activation = blocks::parse_mixing(e.value);
        else if (e.key == "activation_mu") cfg.activation_params.mu = config_double(e);
        else if (e.key == "activation_eta") cfg.activation_params.eta = config_double(e);
        else if (e.key == "activation_eps") cfg.activation_params.eps = config_double(e);
        else if (e.key == "activation_samples") cfg.activation_params.samples = config_size(e);
        else config_unknown_key(e, sec.name);
      }
    } else if (sec.name == "stem") {
      for (const auto& e : sec.entries) {
        if (e.key == "in_channels") cfg.stem.in_channels = config_size(e);
        else if (e.key == "width") cfg.stem.width = config_size(e);
        else config_unknown_key(e, sec.name);
      }
    } else if (sec.name == "stage") {
      StageSpec s;
      for (const auto& e : sec.entries) {
        if (e.key == "blocks") s.blocks = config_size(e);
        else if (e.key == "width_in") s.width_in = config_size(e);
        else if (e.key == "width_out") s.width_out = config_size(e);
        else if (e.key == "reduction") s.reduction = config_size(e);
        else config_unknown_key(e, sec.name);
      }
      cfg.stages.push_back(s);
    } else if (sec.name == "insert_block") {
      if (cfg.insert_block) {
        throw ConfigError("line " + std::to_string(sec.line) + ": [insert_block] given twice");
      }
      blocks::TemplateBlockConfig b;
      for (const auto& e : sec.entries) {
        if (e.key == "num_classes") {
          b.num_classes = config_size(e);
          block_classes_set = true;
        } else if (e.key == "d_in") b.d_in = config_size(e);
        else if (e.key == "d_value") b.d_value = config_size(e);
        else if (e.key == "d_shortcut") b.d_shortcut = config_size(e);
        else if (e.key == "window_h") b.window_h = config_size(e);
        else if (e.key == "window_w") b.window_w = config_size(e);
        else if (e.key == "shortcut") b.shortcut = blocks::parse_shortcut(e.value);
        else if (e.key == "pre_pool_bn") b.pre_pool_bn = config_bool(e);
        else if (e.key == "shortcut_avgpool2") b.shortcut_avgpool2 = config_bool(e);
        else if (e.key == "score_bn") b.score_bn = config_bool(e);
        else if (e.key == "mixing") b.mixing = blocks::parse_mixing(e.value);
        else if (e.key == "mu") b.mixing_params.mu = config_double(e);
        else if (e.key == "eta") b.mixing_params.eta = config_double(e);
        else if (e.key == "eps") b.mixing_params.eps = config_double(e);
        else if (e.key == "samples") b.mixing_params.samples = config_size(e);
        else config_unknown_key(e, sec.name);
      }
      cfg.insert_block = b;
    }
  }
  if (cfg.insert_block && !block_classes_set) cfg.insert_block->num_classes = cfg.num_classes;
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Network

struct Network::Impl {
  Tensor stem_conv;
  ad::BatchNormState stem_bn;
  std::vector<std::vector<blocks::ResidualBlockParams>> stages;
  std::unique_ptr<blocks::TemplateBlockParams> block;
  ad::BatchNormState head_bn;
  Tensor fc_weight;
  Tensor fc_bias;
};

Network::Network() : impl_(std::make_unique<Impl>()) {}
Network::Network(Network&&) noexcept = default;
Network& Network::operator=(Network&&) noexcept = default;
Network::~Network() = default;

Network Network::build(const NetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Network net;
  net.cfg_ = cfg;
  net.seed_ = seed;
  auto& m = *net.impl_;

  Rng stem_rng(combine_keys(seed, kStemStream));
  m.stem_conv = blocks::kaiming_uniform({cfg.stem.width, cfg.stem.in_channels, 3, 3},
                                        cfg.stem.in_channels * 9, stem_rng);
  m.stem_bn = ad::BatchNormState::create(cfg.stem.width);

  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    const auto& s = cfg.stages[i];
    std::vector<blocks::ResidualBlockParams> stage;
    for (std::size_t j = 0; j < s.blocks; ++j) {
      Rng rng(combine_keys(seed, kStageStream + 100 * i + j));
      auto p = blocks::ResidualBlockParams::create(j == 0 ? s.width_in : s.width_out, s.width_out,
                                                   j == 0 ? s.reduction : 1, rng);
      p.activation = cfg.activation;
      p.mixing = cfg.activation_params;
      stage.push_back(std::move(p));
    }
    m.stages.push_back(std::move(stage));
  }
  if (cfg.insert_block) {
    Rng rng(combine_keys(seed, kBlockStream));
    m.block = std::make_unique<blocks::TemplateBlockParams>(
        blocks::TemplateBlockParams::create(*cfg.insert_block, rng));
  }
  const std::size_t width = cfg.stages.back().width_out;
  Rng head_rng(combine_keys(seed, kHeadStream));
  m.head_bn = ad::BatchNormState::create(width);
  m.fc_weight = blocks::kaiming_uniform({cfg.num_classes, width}, width, head_rng);
  m.fc_bias = Tensor::zeros({cfg.num_classes}, true);
  return net;
}

ForwardResult Network::forward(const Tensor& input) {
  if (input.rank() != 4 || input.dim(1) != cfg_.stem.in_channels) {
    throw ad::ShapeError("network input must be [N," + std::to_string(cfg_.stem.in_channels) +
                         ",H,W], got " + ad::shape_str(input.shape()));
  }
  auto& m = *impl_;
  // Perturbed layers draw fresh noise on every training forward and a fixed
  // stream in eval mode.
  const std::uint64_t pass = mode_ == ad::NormMode::eval ? 0 : ++forward_count_;
  const std::uint64_t pass_key = combine_keys(seed_ ^ 0xA5A5A5A5ULL, pass);
  std::uint64_t layer = 0;

  ForwardResult out;
  Tensor x = ad::relu(ad::batch_norm(ad::conv2d(input, m.stem_conv, Tensor{}), m.stem_bn));
  for (std::size_t i = 0; i < m.stages.size(); ++i) {
    for (auto& block : m.stages[i]) {
      x = blocks::residual_block_baseline(x, block, combine_keys(pass_key, layer++));
    }
    if (m.block && i == cfg_.insert_after()) {
      out.block_input = x;
      auto b = blocks::template_block_forward(x, *cfg_.insert_block, *m.block,
                                              combine_keys(pass_key, layer++));
      x = b.f_out;
      out.patch_scores = b.patch_scores;
      out.block = std::move(b);
    }
  }
  x = ad::global_avg_pool(ad::relu(ad::batch_norm(x, m.head_bn)));
  out.main_logits = ad::linear(x, m.fc_weight, m.fc_bias);
  return out;
}

void Network::set_mode(ad::NormMode mode) {
  mode_ = mode;
  auto n = norms();
  blocks::set_norm_mode(n, mode);
}

std::vector<NamedParam> Network::parameters() {
  std::vector<NamedParam> params;
  std::vector<NamedNorm> unused;
  auto& m = *impl_;
  params.push_back({"stem.conv.weight", m.stem_conv});
  params.push_back({"stem.bn.gamma", m.stem_bn.gamma});
  params.push_back({"stem.bn.beta", m.stem_bn.beta});
  for (std::size_t i = 0; i < m.stages.size(); ++i) {
    for (std::size_t j = 0; j < m.stages[i].size(); ++j) {
      m.stages[i][j].collect("stage" + std::to_string(i + 1) + ".block" + std::to_string(j),
                             params, unused);
    }
    if (m.block && i == cfg_.insert_after()) {
      m.block->collect("template", *cfg_.insert_block, params, unused);
    }
  }
  params.push_back({"head.bn.gamma", m.head_bn.gamma});
  params.push_back({"head.bn.beta", m.head_bn.beta});
  params.push_back({"head.fc.weight", m.fc_weight});
  params.push_back({"head.fc.bias", m.fc_bias});
  return params;
}

std::vector<NamedNorm> Network::norms() {
  std::vector<NamedParam> unused;
  std::vector<NamedNorm> norms;
  auto& m = *impl_;
  norms.push_back({"stem.bn", &m.stem_bn});
  for (std::size_t i = 0; i < m.stages.size(); ++i) {
    for (std::size_t j = 0; j < m.stages[i].size(); ++j) {
      m.stages[i][j].collect("stage" + std::to_string(i + 1) + ".block" + std::to_string(j),
                             unused, norms);
    }
    if (m.block && i == cfg_.insert_after()) {
      m.block->collect("template", *cfg_.insert_block, unused, norms);
    }
  }
  norms.push_back({"head.bn", &m.head_bn});
  return norms;
}

std::size_t Network::parameter_count() {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

// ---------------------------------------------------------------------------
// Losses and evaluation

LossParts loss_parts(const ForwardResult& result, std::span<const int> labels, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw std::invalid_argument("lambda must lie in [0,1], got " + format_double(lambda));
  }
  LossParts parts;
  parts.main = ad::cross_entropy(result.main_logits, labels);
  if (!result.has_patch_scores()) {
    if (lambda > 0.0) {
      throw std::invalid_argument("lambda > 0 needs patch scores, but the network has no template block");
    }
    parts.total = parts.main;
    return parts;
  }
  parts.aux = ad::cross_entropy_map(result.patch_scores, labels);
  if (lambda == 0.0) {
    parts.total = parts.main;
  } else if (lambda == 1.0) {
    parts.total = parts.aux;
  } else {
    parts.total = ad::add(ad::scalar_mul(parts.main, 1.0 - lambda), ad::scalar_mul(parts.aux, lambda));
  }
  return parts;
}

Tensor total_loss(const ForwardResult& result, std::span<const int> labels, double lambda) {
  return loss_parts(result, labels, lambda).total;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw ad::ShapeError("argmax_rows: expected [N,C], got " + ad::shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  const auto v = logits.data();
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k)
      if (v[i * c + k] > v[i * c + best]) best = k;
    out[i] = static_cast<int>(best);
  }
  return out;
}

double top1_accuracy(const Tensor& logits, std::span<const int> labels) {
  const auto pred = argmax_rows(logits);
  if (pred.size() != labels.size()) {
    throw std::invalid_argument("top1_accuracy: " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(pred.size()) + " rows");
  }
  if (pred.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

EvalResult forward_eval(Network& net, const Tensor& input, std::span<const int> labels) {
  const auto previous = net.mode();
  net.set_mode(ad::NormMode::eval);
  EvalResult r;
  try {
    ad::NoGradGuard guard;
    r.result = net.forward(input);
  } catch (...) {
    net.set_mode(previous);
    throw;
  }
  net.set_mode(previous);
  r.top1 = top1_accuracy(r.result.main_logits, labels);
  return r;
}

void calibrate_norms(Network& net, const Tensor& input) {
  const auto previous = net.mode();
  net.set_mode(ad::NormMode::train);
  {
    ad::NoGradGuard guard;
    net.forward(input);
  }
  net.set_mode(previous);
}

}  // namespace tmb::net
