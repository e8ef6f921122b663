#pragma once

// Independent reference computations for the unit and acceptance tests.
// Nothing here calls into the code paths it is used to check.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "tmblock/autodiff/tensor.hpp"
#include "tmblock/rng.hpp"

namespace tmb::oracle {

inline ad::Tensor random_tensor(ad::Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                                bool requires_grad = true) {
  std::vector<double> v(ad::shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return ad::Tensor::from(std::move(shape), std::move(v), requires_grad);
}

/// Direct nested-loop convolution with zero padding `pad` on every side.
inline std::vector<double> naive_conv2d(const std::vector<double>& x, std::size_t n, std::size_t c,
                                        std::size_t h, std::size_t w, const std::vector<double>& k,
                                        std::size_t kout, std::size_t kh, std::size_t kw,
                                        const std::vector<double>* bias, std::size_t stride,
                                        std::size_t pad, std::size_t& oh, std::size_t& ow) {
  oh = (h + 2 * pad - kh) / stride + 1;
  ow = (w + 2 * pad - kw) / stride + 1;
  std::vector<double> out(n * kout * oh * ow, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < kout; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          double acc = bias ? (*bias)[o] : 0.0;
          for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long iy = static_cast<long>(y * stride + i) - static_cast<long>(pad);
                const long ix = static_cast<long>(xx * stride + j) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w))
                  continue;
                acc += k[((o * c + ci) * kh + i) * kw + j] *
                       x[((b * c + ci) * h + static_cast<std::size_t>(iy)) * w +
                         static_cast<std::size_t>(ix)];
              }
          out[((b * kout + o) * oh + y) * ow + xx] = acc;
        }
  return out;
}

/// Mean of the in-bounds cells of the window [y - before, y - before + wh)
/// x [x - before_w, ...) around every pixel; output has the input's size.
inline std::vector<double> naive_window_mean(const std::vector<double>& x, std::size_t planes,
                                             std::size_t h, std::size_t w, std::size_t wh,
                                             std::size_t ww) {
  const long before_h = static_cast<long>((wh - 1) / 2);
  const long before_w = static_cast<long>((ww - 1) / 2);
  std::vector<double> out(x.size());
  for (std::size_t p = 0; p < planes; ++p)
    for (long y = 0; y < static_cast<long>(h); ++y)
      for (long xx = 0; xx < static_cast<long>(w); ++xx) {
        double acc = 0.0;
        int count = 0;
        for (long dy = 0; dy < static_cast<long>(wh); ++dy)
          for (long dx = 0; dx < static_cast<long>(ww); ++dx) {
            const long yy = y - before_h + dy;
            const long xxx = xx - before_w + dx;
            if (yy < 0 || xxx < 0 || yy >= static_cast<long>(h) || xxx >= static_cast<long>(w))
              continue;
            acc += x[(p * h + static_cast<std::size_t>(yy)) * w + static_cast<std::size_t>(xxx)];
            ++count;
          }
        out[(p * h + static_cast<std::size_t>(y)) * w + static_cast<std::size_t>(xx)] = acc / count;
      }
  return out;
}

/// Rank positions (0 = largest) of the given values; ties broken by index.
inline std::vector<std::size_t> ranking(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  return idx;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace tmb::oracle
