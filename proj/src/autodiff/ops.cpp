#include "tmblock/autodiff/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace tmb::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

// Products only ever see Eigen-owned (aligned) storage. Over plain vectors the
// vectorized reductions peel a different number of leading elements depending
// on where malloc put the buffer, which changes rounding from run to run.
RowMat owned(const double* p, std::size_t rows, std::size_t cols) {
  return ConstMapMat(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <class Expr>
void store(double* dst, std::size_t rows, std::size_t cols, const Expr& expr, bool accumulate) {
  const RowMat tmp = expr;
  MapMat out(dst, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  if (accumulate) out += tmp;
  else out = tmp;
}

double* grad_of(detail::Node& self, std::size_t i) {
  auto& in = *self.inputs[i];
  if (!in.requires_grad) return nullptr;
  in.ensure_grad();
  return in.grad.data();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got " + shape_str(t.shape()));
  }
}

}  // namespace

std::size_t conv_output_extent(std::size_t in, std::size_t window, std::size_t stride,
                               Padding padding) {
  if (padding == Padding::same) return (in + stride - 1) / stride;
  if (window > in) return 0;
  return (in - window) / stride + 1;
}

std::size_t same_pad_before(std::size_t in, std::size_t window, std::size_t stride) {
  const std::size_t out = (in + stride - 1) / stride;
  const std::size_t needed = (out - 1) * stride + window;
  const std::size_t total = needed > in ? needed - in : 0;
  return total / 2;
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (double* g = grad_of(self, k)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    const auto& av = self.inputs[0]->data;
    const auto& bv = self.inputs[1]->data;
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (double* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

Tensor scalar_mul(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  return Tensor::make_result(a.shape(), std::move(out), {a}, [s](detail::Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += s * self.grad[i];
    }
  });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return Tensor::make_result({1}, {total}, {a}, [](detail::Node& self) {
    if (double* g = grad_of(self, 0)) {
      const double up = self.grad[0];
      for (std::size_t i = 0; i < self.inputs[0]->data.size(); ++i) g[i] += up;
    }
  });
}

Tensor mean(const Tensor& a) {
  return scalar_mul(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor relu(const Tensor& a) {
  KinkMonitor::record(a.data());
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  return Tensor::make_result(a.shape(), std::move(out), {a}, [](detail::Node& self) {
    if (double* g = grad_of(self, 0)) {
      const auto& x = self.inputs[0]->data;
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i] > 0.0) g[i] += self.grad[i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Shape

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return Tensor::make_result(std::move(shape), std::move(out), {a}, [](detail::Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor concat_channels(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape& first = parts[0].shape();
  if (first.size() < 2) throw ShapeError("concat_channels: rank must be >= 2");
  std::size_t channels = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size() && s[0] == first[0];
    for (std::size_t d = 2; ok && d < s.size(); ++d) ok = s[d] == first[d];
    if (!ok) {
      throw ShapeError("concat_channels: non-channel dims differ: " + shape_str(first) + " vs " +
                       shape_str(s));
    }
    channels += s[1];
  }
  const std::size_t batch = first[0];
  std::size_t inner = 1;
  for (std::size_t d = 2; d < first.size(); ++d) inner *= first[d];

  Shape out_shape = first;
  out_shape[1] = channels;
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.dim(1);
    const auto src = p.data();
    for (std::size_t n = 0; n < batch; ++n) {
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(n * c * inner), c * inner,
                  out.begin() + static_cast<std::ptrdiff_t>((n * channels + offset) * inner));
    }
    widths.push_back(c);
    offset += c;
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return Tensor::make_result(
      std::move(out_shape), std::move(out), std::move(inputs),
      [widths, batch, inner, channels](detail::Node& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
          const std::size_t c = widths[k];
          if (double* g = grad_of(self, k)) {
            for (std::size_t n = 0; n < batch; ++n) {
              const double* src = self.grad.data() + (n * channels + off) * inner;
              double* dst = g + n * c * inner;
              for (std::size_t i = 0; i < c * inner; ++i) dst[i] += src[i];
            }
          }
          off += c;
        }
      });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul", "lhs");
  require_rank(b, 2, "matmul", "rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dims differ: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  store(out.data(), m, n, owned(a.data().data(), m, k) * owned(b.data().data(), k, n), false);
  return Tensor::make_result({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    const RowMat g = owned(self.grad.data(), m, n);
    if (double* ga = grad_of(self, 0)) {
      store(ga, m, k, g * owned(self.inputs[1]->data.data(), k, n).transpose(), true);
    }
    if (double* gb = grad_of(self, 1)) {
      store(gb, k, n, owned(self.inputs[0]->data.data(), m, k).transpose() * g, true);
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "linear", "input");
  require_rank(weight, 2, "linear", "weight");
  const std::size_t n = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  if (weight.dim(1) != in) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != out_dim)) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                     shape_str(weight.shape()));
  }
  std::vector<double> out(n * out_dim);
  store(out.data(), n, out_dim,
        owned(x.data().data(), n, in) * owned(weight.data().data(), out_dim, in).transpose(), false);
  MapMat y(out.data(), n, out_dim);
  if (has_bias) {
    const auto b = bias.data();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < out_dim; ++c) y(r, c) += b[c];
  }
  std::vector<Tensor> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return Tensor::make_result(
      {n, out_dim}, std::move(out), std::move(inputs), [n, in, out_dim](detail::Node& self) {
        const RowMat g = owned(self.grad.data(), n, out_dim);
        if (double* gx = grad_of(self, 0)) {
          store(gx, n, in, g * owned(self.inputs[1]->data.data(), out_dim, in), true);
        }
        if (double* gw = grad_of(self, 1)) {
          store(gw, out_dim, in, g.transpose() * owned(self.inputs[0]->data.data(), n, in), true);
        }
        if (self.inputs.size() > 2) {
          if (double* gb = grad_of(self, 2)) {
            for (std::size_t r = 0; r < n; ++r)
              for (std::size_t c = 0; c < out_dim; ++c) gb[c] += g(r, c);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Softmax and losses

Tensor softmax(const Tensor& a, std::size_t axis) {
  const Shape& s = a.shape();
  if (axis >= s.size()) throw ShapeError("softmax: axis out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t len = s[axis];

  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, x[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const double e = std::exp(x[base + k * inner] - mx);
        out[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= z;
    }
  }
  return Tensor::make_result(s, std::move(out), {a}, [outer, inner, len](detail::Node& self) {
    double* g = grad_of(self, 0);
    if (g == nullptr) return;
    const auto& p = self.data;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * len * inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < len; ++k) dot += p[base + k * inner] * self.grad[base + k * inner];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t idx = base + k * inner;
          g[idx] += p[idx] * (self.grad[idx] - dot);
        }
      }
    }
  });
}

namespace {

// Shared kernel for both cross-entropy flavours: scores laid out as
// [N, C, inner] with one label per n; loss averaged over N*inner.
Tensor cross_entropy_impl(const Tensor& scores, std::span<const int> labels, std::size_t inner,
                          const char* op) {
  const std::size_t n = scores.dim(0), c = scores.dim(1);
  if (labels.size() != n) {
    throw ShapeError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for batch " +
                     std::to_string(n));
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw std::out_of_range(std::string(op) + ": label " + std::to_string(labels[i]) +
                              " at index " + std::to_string(i) + " outside [0, " +
                              std::to_string(c) + ")");
    }
  }
  const auto x = scores.data();
  std::vector<double> probs(x.size());
  double total = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = b * c * inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < c; ++k) mx = std::max(mx, x[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        const double e = std::exp(x[base + k * inner] - mx);
        probs[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < c; ++k) probs[base + k * inner] /= z;
      const std::size_t y = static_cast<std::size_t>(labels[b]);
      total += std::log(z) + mx - x[base + y * inner];
    }
  }
  const double count = static_cast<double>(n * inner);
  std::vector<int> label_copy(labels.begin(), labels.end());
  return Tensor::make_result(
      {1}, {total / count}, {scores},
      [probs = std::move(probs), label_copy = std::move(label_copy), n, c, inner,
       count](detail::Node& self) {
        double* g = grad_of(self, 0);
        if (g == nullptr) return;
        const double up = self.grad[0] / count;
        for (std::size_t b = 0; b < n; ++b) {
          const std::size_t y = static_cast<std::size_t>(label_copy[b]);
          for (std::size_t k = 0; k < c; ++k) {
            for (std::size_t i = 0; i < inner; ++i) {
              const std::size_t idx = (b * c + k) * inner + i;
              g[idx] += up * (probs[idx] - (k == y ? 1.0 : 0.0));
            }
          }
        }
      });
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy", "logits");
  return cross_entropy_impl(logits, labels, 1, "cross_entropy");
}

Tensor cross_entropy_map(const Tensor& scores, std::span<const int> labels) {
  require_rank(scores, 4, "cross_entropy_map", "scores");
  return cross_entropy_impl(scores, labels, scores.dim(2) * scores.dim(3), "cross_entropy_map");
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w, k, kh, kw, stride, pad_h, pad_w, out_h, out_w;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t pixels() const { return out_h * out_w; }
};

// cols is [C*kh*kw, N*out_h*out_w]; column index = n * pixels + pixel.
void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const std::size_t width = g.n * g.pixels();
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* row = cols + ((ci * g.kh + i) * g.kw + j) * width;
        for (std::size_t b = 0; b < g.n; ++b) {
          const double* plane = x + (b * g.c + ci) * g.h * g.w;
          double* dst = row + b * g.pixels();
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) -
                                      static_cast<std::ptrdiff_t>(g.pad_h);
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + j) -
                                        static_cast<std::ptrdiff_t>(g.pad_w);
              const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) &&
                                  ix < static_cast<std::ptrdiff_t>(g.w);
              dst[oy * g.out_w + ox] =
                  inside ? plane[static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)]
                         : 0.0;
            }
          }
        }
      }
    }
  }
}

void col2im(const double* cols, const ConvGeometry& g, double* dx) {
  const std::size_t width = g.n * g.pixels();
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* row = cols + ((ci * g.kh + i) * g.kw + j) * width;
        for (std::size_t b = 0; b < g.n; ++b) {
          double* plane = dx + (b * g.c + ci) * g.h * g.w;
          const double* src = row + b * g.pixels();
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) -
                                      static_cast<std::ptrdiff_t>(g.pad_h);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + j) -
                                        static_cast<std::ptrdiff_t>(g.pad_w);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
              plane[static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)] +=
                  src[oy * g.out_w + ox];
            }
          }
        }
      }
    }
  }
}

// [N, K, P] <-> [K, N*P]
void nkp_to_knp(const double* src, std::size_t n, std::size_t k, std::size_t p, double* dst) {
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t kk = 0; kk < k; ++kk)
      std::copy_n(src + (b * k + kk) * p, p, dst + kk * n * p + b * p);
}

void knp_to_nkp(const double* src, std::size_t n, std::size_t k, std::size_t p, double* dst) {
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t kk = 0; kk < k; ++kk)
      std::copy_n(src + kk * n * p + b * p, p, dst + (b * k + kk) * p);
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              Conv2dOptions options) {
  require_rank(input, 4, "conv2d", "input");
  require_rank(kernel, 4, "conv2d", "kernel");
  if (kernel.dim(1) != input.dim(1)) {
    throw ShapeError("conv2d: kernel " + shape_str(kernel.shape()) +
                     " channel count does not match input " + shape_str(input.shape()));
  }
  if (options.stride == 0) throw ShapeError("conv2d: stride must be positive");
  ConvGeometry g{};
  g.n = input.dim(0);
  g.c = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.k = kernel.dim(0);
  g.kh = kernel.dim(2);
  g.kw = kernel.dim(3);
  g.stride = options.stride;
  if (options.padding == Padding::same) {
    if (g.kh % 2 == 0 || g.kw % 2 == 0) {
      throw ShapeError("conv2d: same padding requires odd kernel, got " + shape_str(kernel.shape()));
    }
    g.pad_h = (g.kh - 1) / 2;
    g.pad_w = (g.kw - 1) / 2;
    g.out_h = (g.h + 2 * g.pad_h - g.kh) / g.stride + 1;
    g.out_w = (g.w + 2 * g.pad_w - g.kw) / g.stride + 1;
  } else {
    if (g.kh > g.h || g.kw > g.w) {
      throw ShapeError("conv2d: kernel " + shape_str(kernel.shape()) + " larger than input " +
                       shape_str(input.shape()));
    }
    g.out_h = (g.h - g.kh) / g.stride + 1;
    g.out_w = (g.w - g.kw) / g.stride + 1;
  }
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != g.k)) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match kernel " +
                     shape_str(kernel.shape()));
  }

  const std::size_t width = g.n * g.pixels();
  std::vector<double> cols(g.patch() * width);
  im2col(input.data().data(), g, cols.data());
  std::vector<double> y(g.k * width);
  store(y.data(), g.k, width, owned(kernel.data().data(), g.k, g.patch()) * owned(cols.data(), g.patch(), width),
        false);
  MapMat ym(y.data(), static_cast<Eigen::Index>(g.k), static_cast<Eigen::Index>(width));
  if (has_bias) {
    const auto b = bias.data();
    for (std::size_t kk = 0; kk < g.k; ++kk) ym.row(kk).array() += b[kk];
  }
  std::vector<double> out(y.size());
  knp_to_nkp(y.data(), g.n, g.k, g.pixels(), out.data());

  std::vector<Tensor> inputs{input, kernel};
  if (has_bias) inputs.push_back(bias);
  return Tensor::make_result(
      {g.n, g.k, g.out_h, g.out_w}, std::move(out), std::move(inputs), [g](detail::Node& self) {
        const std::size_t width = g.n * g.pixels();
        std::vector<double> dy(g.k * width);
        nkp_to_knp(self.grad.data(), g.n, g.k, g.pixels(), dy.data());
        const RowMat dym = owned(dy.data(), g.k, width);
        double* gx = grad_of(self, 0);
        double* gk = grad_of(self, 1);
        if (gk != nullptr) {
          std::vector<double> cols(g.patch() * width);
          im2col(self.inputs[0]->data.data(), g, cols.data());
          store(gk, g.k, g.patch(), dym * owned(cols.data(), g.patch(), width).transpose(), true);
        }
        if (gx != nullptr) {
          std::vector<double> dcols(g.patch() * width);
          store(dcols.data(), g.patch(), width,
                owned(self.inputs[1]->data.data(), g.k, g.patch()).transpose() * dym, false);
          col2im(dcols.data(), g, gx);
        }
        if (self.inputs.size() > 2) {
          if (double* gb = grad_of(self, 2)) {
            for (std::size_t kk = 0; kk < g.k; ++kk) {
              double acc = 0.0;
              for (std::size_t j = 0; j < width; ++j) acc += dy[kk * width + j];
              gb[kk] += acc;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Pooling

Tensor avg_pool(const Tensor& input, PoolOptions options) {
  require_rank(input, 4, "avg_pool", "input");
  if (options.window_h == 0 || options.window_w == 0) {
    throw ShapeError("avg_pool: zero-size window");
  }
  if (options.stride == 0) throw ShapeError("avg_pool: stride must be positive");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t wh = options.window_h, ww = options.window_w, s = options.stride;
  std::size_t pad_h = 0, pad_w = 0;
  if (options.padding == Padding::same) {
    pad_h = same_pad_before(h, wh, s);
    pad_w = same_pad_before(w, ww, s);
  } else if (wh > h || ww > w) {
    throw ShapeError("avg_pool: window " + std::to_string(wh) + "x" + std::to_string(ww) +
                     " exceeds input " + shape_str(input.shape()));
  }
  const std::size_t oh = conv_output_extent(h, wh, s, options.padding);
  const std::size_t ow = conv_output_extent(w, ww, s, options.padding);

  // Divisor per output cell, shared by all planes.
  std::vector<double> inv_count(oh * ow);
  struct Range { std::size_t y0, y1, x0, x1; };
  std::vector<Range> ranges(oh * ow);
  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      const std::ptrdiff_t ys = static_cast<std::ptrdiff_t>(oy * s) - static_cast<std::ptrdiff_t>(pad_h);
      const std::ptrdiff_t xs = static_cast<std::ptrdiff_t>(ox * s) - static_cast<std::ptrdiff_t>(pad_w);
      Range r{static_cast<std::size_t>(std::max<std::ptrdiff_t>(ys, 0)),
              static_cast<std::size_t>(std::min<std::ptrdiff_t>(ys + static_cast<std::ptrdiff_t>(wh),
                                                                static_cast<std::ptrdiff_t>(h))),
              static_cast<std::size_t>(std::max<std::ptrdiff_t>(xs, 0)),
              static_cast<std::size_t>(std::min<std::ptrdiff_t>(xs + static_cast<std::ptrdiff_t>(ww),
                                                                static_cast<std::ptrdiff_t>(w)))};
      ranges[oy * ow + ox] = r;
      const double cells = options.border == PoolBorder::count_valid
                               ? static_cast<double>((r.y1 - r.y0) * (r.x1 - r.x0))
                               : static_cast<double>(wh * ww);
      inv_count[oy * ow + ox] = 1.0 / cells;
    }
  }

  const auto x = input.data();
  std::vector<double> out(n * c * oh * ow);
  for (std::size_t p = 0; p < n * c; ++p) {
    const double* plane = x.data() + p * h * w;
    double* dst = out.data() + p * oh * ow;
    for (std::size_t o = 0; o < oh * ow; ++o) {
      const Range& r = ranges[o];
      double acc = 0.0;
      for (std::size_t yy = r.y0; yy < r.y1; ++yy)
        for (std::size_t xx = r.x0; xx < r.x1; ++xx) acc += plane[yy * w + xx];
      dst[o] = acc * inv_count[o];
    }
  }
  return Tensor::make_result(
      {n, c, oh, ow}, std::move(out), {input},
      [ranges = std::move(ranges), inv_count = std::move(inv_count), n, c, h, w, oh,
       ow](detail::Node& self) {
        double* g = grad_of(self, 0);
        if (g == nullptr) return;
        for (std::size_t p = 0; p < n * c; ++p) {
          double* plane = g + p * h * w;
          const double* up = self.grad.data() + p * oh * ow;
          for (std::size_t o = 0; o < oh * ow; ++o) {
            const Range& r = ranges[o];
            const double v = up[o] * inv_count[o];
            for (std::size_t yy = r.y0; yy < r.y1; ++yy)
              for (std::size_t xx = r.x0; xx < r.x1; ++xx) plane[yy * w + xx] += v;
          }
        }
      });
}

Tensor global_avg_pool(const Tensor& input) {
  require_rank(input, 4, "global_avg_pool", "input");
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  const auto x = input.data();
  std::vector<double> out(n * c);
  for (std::size_t p = 0; p < n * c; ++p) {
    double acc = 0.0;
    for (std::size_t i = 0; i < hw; ++i) acc += x[p * hw + i];
    out[p] = acc / static_cast<double>(hw);
  }
  return Tensor::make_result({n, c}, std::move(out), {input}, [n, c, hw](detail::Node& self) {
    double* g = grad_of(self, 0);
    if (g == nullptr) return;
    const double inv = 1.0 / static_cast<double>(hw);
    for (std::size_t p = 0; p < n * c; ++p) {
      const double v = self.grad[p] * inv;
      for (std::size_t i = 0; i < hw; ++i) g[p * hw + i] += v;
    }
  });
}

}  // namespace tmb::ad
