#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

#include "tmblock/autodiff/tensor.hpp"

namespace tmb::ad {

enum class NormMode { train, eval };

class UninitializedStatsError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Per-channel batch normalization parameters and running statistics.
///
/// In train mode the layer normalizes with the biased batch variance and
/// folds the unbiased variance into the running estimate. The very first
/// update copies the batch statistics; later ones use an exponential moving
/// average with weight `momentum` on the new batch.
struct BatchNormState {
  Tensor gamma;
  Tensor beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;
  NormMode mode = NormMode::train;
  bool stats_initialized = false;

  static BatchNormState create(std::size_t channels);
  std::size_t channels() const { return running_mean.size(); }
};

/// input is [N,C] or [N,C,H,W]; statistics are taken over every axis but C.
Tensor batch_norm(const Tensor& input, BatchNormState& state);

}  // namespace tmb::ad
