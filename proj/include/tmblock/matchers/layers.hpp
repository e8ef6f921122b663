#pragma once

#include <cstddef>
#include <cstdint>

#include "tmblock/autodiff/tensor.hpp"

namespace tmb::match {

/// Margin-augmented soft-max over the channel axis of [N,K] or [N,K,H,W]:
///   out_k = eta * exp(eps a_k) / (exp(eps mu) + sum_k' exp(eps a_k')).
/// The backward pass applies eta * eps * (diag(p) - p p^T).
ad::Tensor margin_softmax_layer(const ad::Tensor& activations, double mu, double eta, double eps);

/// Perturbed-maximizer counterpart: eta times the Monte-Carlo average of the
/// argmax vertex under Gaussian noise of scale 1/eps. The backward pass uses
/// the estimator E[eps * z * ptilde^T] on the same noise, regenerated from the
/// counter-based stream instead of stored.
ad::Tensor perturbed_maximizer_layer(const ad::Tensor& activations, double mu, double eta,
                                     double eps, std::size_t samples, std::uint64_t seed);

/// Bytes held per forward pass by perturbed_maximizer_layer (one winner index
/// per pixel and sample).
std::size_t perturbed_layer_bytes(std::size_t pixels, std::size_t samples);

}  // namespace tmb::match
