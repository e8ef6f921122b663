#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>

#include "tmblock/autodiff/tensor.hpp"

namespace tmb::ad {

struct GradcheckOptions {
  double step = 1e-4;
  double rtol = 1e-3;
  double atol = 1e-6;
  /// 0 checks every element; otherwise an evenly strided subset per tensor.
  std::size_t max_elements_per_tensor = 0;
};

struct GradcheckReport {
  bool passed = true;
  std::size_t checked = 0;
  /// Entries whose finite-difference stencil flipped a relu sign.
  std::size_t skipped_kinks = 0;
  double max_abs_error = 0.0;
  double max_rel_error = 0.0;
  std::string first_failure;
};

/// Compares reverse-mode gradients of `loss` with central differences.
/// `loss` must rebuild the graph from the current contents of `params`.
GradcheckReport gradcheck(const std::function<Tensor()>& loss, std::span<Tensor> params,
                          const GradcheckOptions& options = {});

}  // namespace tmb::ad
