#include "tmblock/autodiff/batch_norm.hpp"

#include <cmath>
#include <string>

namespace tmb::ad {

BatchNormState BatchNormState::create(std::size_t channels) {
  BatchNormState s;
  s.gamma = Tensor::full({channels}, 1.0, true);
  s.beta = Tensor::zeros({channels}, true);
  s.running_mean.assign(channels, 0.0);
  s.running_var.assign(channels, 1.0);
  return s;
}

Tensor batch_norm(const Tensor& input, BatchNormState& state) {
  if (input.rank() != 2 && input.rank() != 4) {
    throw ShapeError("batch_norm: expected [N,C] or [N,C,H,W], got " + shape_str(input.shape()));
  }
  const std::size_t n = input.dim(0), c = input.dim(1);
  const std::size_t inner = input.rank() == 4 ? input.dim(2) * input.dim(3) : 1;
  if (c != state.channels() || state.gamma.numel() != c || state.beta.numel() != c) {
    throw ShapeError("batch_norm: input " + shape_str(input.shape()) + " has " + std::to_string(c) +
                     " channels, state has " + std::to_string(state.channels()));
  }
  const std::size_t count = n * inner;
  const auto x = input.data();
  const auto gamma = state.gamma.data();
  const auto beta = state.beta.data();

  std::vector<double> mean(c), inv_std(c);
  if (state.mode == NormMode::train) {
    if (count < 2) {
      throw ShapeError("batch_norm: train mode needs at least 2 values per channel, got " +
                       shape_str(input.shape()));
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < inner; ++i) s += x[(b * c + ch) * inner + i];
      const double m = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < inner; ++i) {
          const double d = x[(b * c + ch) * inner + i] - m;
          ss += d * d;
        }
      const double var = ss / static_cast<double>(count);
      mean[ch] = m;
      inv_std[ch] = 1.0 / std::sqrt(var + state.epsilon);
      const double unbiased = ss / static_cast<double>(count - 1);
      if (!state.stats_initialized) {
        state.running_mean[ch] = m;
        state.running_var[ch] = unbiased;
      } else {
        state.running_mean[ch] = (1.0 - state.momentum) * state.running_mean[ch] + state.momentum * m;
        state.running_var[ch] =
            (1.0 - state.momentum) * state.running_var[ch] + state.momentum * unbiased;
      }
    }
    state.stats_initialized = true;
  } else {
    if (!state.stats_initialized) {
      throw UninitializedStatsError("batch_norm: eval mode with uninitialized running statistics");
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = state.running_mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(state.running_var[ch] + state.epsilon);
    }
  }

  std::vector<double> xhat(x.size()), out(x.size());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t idx = (b * c + ch) * inner + i;
        xhat[idx] = (x[idx] - mean[ch]) * inv_std[ch];
        out[idx] = gamma[ch] * xhat[idx] + beta[ch];
      }

  const bool batch_stats = state.mode == NormMode::train;
  return Tensor::make_result(
      input.shape(), std::move(out), {input, state.gamma, state.beta},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, inner, count,
       batch_stats](detail::Node& self) {
        const auto& dy = self.grad;
        const auto& gam = self.inputs[1]->data;
        std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < inner; ++i) {
              const std::size_t idx = (b * c + ch) * inner + i;
              sum_dy[ch] += dy[idx];
              sum_dy_xhat[ch] += dy[idx] * xhat[idx];
            }
        if (self.inputs[1]->requires_grad) {
          self.inputs[1]->ensure_grad();
          for (std::size_t ch = 0; ch < c; ++ch) self.inputs[1]->grad[ch] += sum_dy_xhat[ch];
        }
        if (self.inputs[2]->requires_grad) {
          self.inputs[2]->ensure_grad();
          for (std::size_t ch = 0; ch < c; ++ch) self.inputs[2]->grad[ch] += sum_dy[ch];
        }
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        const double m = static_cast<double>(count);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const double scale = gam[ch] * inv_std[ch];
            for (std::size_t i = 0; i < inner; ++i) {
              const std::size_t idx = (b * c + ch) * inner + i;
              if (batch_stats) {
                in.grad[idx] += scale * (dy[idx] - sum_dy[ch] / m - xhat[idx] * sum_dy_xhat[ch] / m);
              } else {
                in.grad[idx] += scale * dy[idx];
              }
            }
          }
      });
}

}  // namespace tmb::ad
