#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "tmblock/blocks/blocks.hpp"

namespace tmb::train {

class NonFiniteGradientError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Coupled L2: weight_decay * param is added to every gradient.
  double weight_decay = 1e-4;
};

/// One bias-corrected Adam update of `param` in place. `step` counts from 1.
void adam_update(std::span<double> param, std::span<const double> grad, std::span<double> m,
                 std::span<double> v, std::size_t step, const AdamConfig& cfg);

class Adam {
 public:
  Adam(std::vector<blocks::NamedParam> params, AdamConfig cfg);

  /// Applies one update from the accumulated gradients. Throws
  /// NonFiniteGradientError naming the parameter before touching any weight.
  void step();
  void zero_grad();
  std::size_t steps() const { return step_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  std::vector<blocks::NamedParam> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  AdamConfig cfg_;
  std::size_t step_ = 0;
};

}  // namespace tmb::train
