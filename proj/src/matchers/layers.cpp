#include "tmblock/matchers/layers.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "tmblock/matchers/solvers.hpp"
#include "tmblock/rng.hpp"

namespace tmb::match {

namespace {

struct ChannelLayout {
  std::size_t n, k, inner;
};

ChannelLayout layout_of(const ad::Tensor& t, const char* op) {
  if (t.rank() != 2 && t.rank() != 4) {
    throw ad::ShapeError(std::string(op) + ": expected [N,K] or [N,K,H,W], got " +
                         ad::shape_str(t.shape()));
  }
  return {t.dim(0), t.dim(1), t.rank() == 4 ? t.dim(2) * t.dim(3) : 1};
}

}  // namespace

ad::Tensor margin_softmax_layer(const ad::Tensor& activations, double mu, double eta, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("margin_softmax_layer: eps must be positive");
  if (!(eta > 0.0)) throw std::invalid_argument("margin_softmax_layer: eta must be positive");
  const auto [n, k, inner] = layout_of(activations, "margin_softmax_layer");
  const auto a = activations.data();
  std::vector<double> p(a.size());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = b * k * inner + i;
      double shift = eps * mu;
      for (std::size_t c = 0; c < k; ++c) shift = std::max(shift, eps * a[base + c * inner]);
      double denom = std::exp(eps * mu - shift);
      for (std::size_t c = 0; c < k; ++c) {
        const double e = std::exp(eps * a[base + c * inner] - shift);
        p[base + c * inner] = e;
        denom += e;
      }
      for (std::size_t c = 0; c < k; ++c) p[base + c * inner] /= denom;
    }
  }
  std::vector<double> out(p.size());
  for (std::size_t j = 0; j < p.size(); ++j) out[j] = eta * p[j];
  return ad::Tensor::make_result(
      activations.shape(), std::move(out), {activations},
      [p = std::move(p), n, k, inner, eta, eps](ad::detail::Node& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = b * k * inner + i;
            double dot = 0.0;
            for (std::size_t c = 0; c < k; ++c) dot += p[base + c * inner] * self.grad[base + c * inner];
            for (std::size_t c = 0; c < k; ++c) {
              const std::size_t idx = base + c * inner;
              in.grad[idx] += eta * eps * p[idx] * (self.grad[idx] - dot);
            }
          }
        }
      });
}

std::size_t perturbed_layer_bytes(std::size_t pixels, std::size_t samples) {
  return pixels * samples * sizeof(std::uint32_t);
}

ad::Tensor perturbed_maximizer_layer(const ad::Tensor& activations, double mu, double eta,
                                     double eps, std::size_t samples, std::uint64_t seed) {
  if (!(eps > 0.0)) throw std::invalid_argument("perturbed_maximizer_layer: eps must be positive");
  if (samples == 0) throw std::invalid_argument("perturbed_maximizer_layer: samples must be >= 1");
  const auto [n, k, inner] = layout_of(activations, "perturbed_maximizer_layer");
  const auto a = activations.data();
  const std::size_t pixels = n * inner;
  std::vector<std::uint32_t> winners(pixels * samples);
  std::vector<double> out(a.size(), 0.0);
  const double weight = eta / static_cast<double>(samples);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t pixel = b * inner + i;
      const std::size_t base = b * k * inner + i;
      const CounterRng rng(combine_keys(seed, pixel));
      for (std::size_t s = 0; s < samples; ++s) {
        const std::size_t w = detail::perturbed_winner(a.data() + base, k, inner, mu, eps, rng, s);
        winners[pixel * samples + s] = static_cast<std::uint32_t>(w);
        if (w > 0) out[base + (w - 1) * inner] += weight;
      }
    }
  }
  return ad::Tensor::make_result(
      activations.shape(), std::move(out), {activations},
      [winners = std::move(winners), n, k, inner, samples, eta, eps, seed](ad::detail::Node& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        // d out_j / d a_i = eta * E[eps * z_i * ptilde_j]
        const double scale = eta * eps / static_cast<double>(samples);
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t pixel = b * inner + i;
            const std::size_t base = b * k * inner + i;
            const CounterRng rng(combine_keys(seed, pixel));
            for (std::size_t s = 0; s < samples; ++s) {
              const std::uint32_t w = winners[pixel * samples + s];
              if (w == 0) continue;
              const double g = self.grad[base + (w - 1) * inner];
              if (g == 0.0) continue;
              const std::uint64_t counter = s * (k + 1);
              for (std::size_t c = 0; c < k; ++c) {
                in.grad[base + c * inner] += scale * g * rng.normal(counter + 1 + c);
              }
            }
          }
        }
      });
}

}  // namespace tmb::match
