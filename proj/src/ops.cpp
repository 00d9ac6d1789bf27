#include "rmx/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace rmx {

namespace {

using detail::check_finite;
using detail::record;
using detail::should_record;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_rank(const Tensor& t, int rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

// Trailing extent product from `axis` on.
std::int64_t inner_size(const Shape& s, int axis) {
  std::int64_t n = 1;
  for (std::size_t i = static_cast<std::size_t>(axis); i < s.size(); ++i) n *= s[i];
  return n;
}

// Runs `fn(grad_out, grad_in)` only when the output received a gradient and
// the input asked for one.
template <typename Fn>
void if_grad(const Tensor& out, const Tensor& in, Fn&& fn) {
  if (!out.has_grad() || !in.requires_grad()) return;
  fn(out.grad(), in.grad_buffer());
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, const char* op, Fwd fwd, Deriv deriv) {
  Tensor out(x.shape());
  auto xd = x.data();
  auto od = out.data();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = fwd(xd[i]);
  check_finite(out, op);
  if (should_record({&x})) {
    record(op, out, [x, out, deriv]() mutable {
      if_grad(out, x, [&](std::span<const double> g, std::span<double> gx) {
        auto xv = x.data();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xv[i]);
      });
    });
  }
  return out;
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

// --- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  auto ad = a.data(), bd = b.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] + bd[i];
  check_finite(out, "add");
  if (should_record({&a, &b})) {
    record("add", out, [a, b, out]() mutable {
      auto acc = [&](const Tensor& t) {
        if_grad(out, t, [](std::span<const double> g, std::span<double> gt) {
          for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
        });
      };
      acc(a);
      acc(b);
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  auto ad = a.data(), bd = b.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] - bd[i];
  check_finite(out, "sub");
  if (should_record({&a, &b})) {
    record("sub", out, [a, b, out]() mutable {
      if_grad(out, a, [](std::span<const double> g, std::span<double> ga) {
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      });
      if_grad(out, b, [](std::span<const double> g, std::span<double> gb) {
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      });
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  auto ad = a.data(), bd = b.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] * bd[i];
  check_finite(out, "mul");
  if (should_record({&a, &b})) {
    record("mul", out, [a, b, out]() mutable {
      if_grad(out, a, [&](std::span<const double> g, std::span<double> ga) {
        auto bv = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
      });
      if_grad(out, b, [&](std::span<const double> g, std::span<double> gb) {
        auto av = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
      });
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, "scale", [s](double x) { return s * x; }, [s](double) { return s; });
}

Tensor abs(const Tensor& a) {
  return unary(a, "abs", [](double x) { return std::fabs(x); },
               [](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

double gelu_scalar(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

Tensor gelu(const Tensor& x) {
  return unary(x, "gelu", gelu_scalar, [](double v) {
    double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
    return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
  });
}

Tensor silu(const Tensor& x) {
  return unary(x, "silu", [](double v) { return v * sigmoid(v); },
               [](double v) {
                 double s = sigmoid(v);
                 return s * (1.0 + v * (1.0 - s));
               });
}

Tensor softplus(const Tensor& x) {
  return unary(x, "softplus", [](double v) { return v > 30.0 ? v : std::log1p(std::exp(v)); }, sigmoid);
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor out = Tensor::scalar(s);
  check_finite(out, "sum");
  if (should_record({&a})) {
    record("sum", out, [a, out]() mutable {
      if_grad(out, a, [](std::span<const double> g, std::span<double> ga) {
        for (auto& v : ga) v += g[0];
      });
    });
  }
  return out;
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

// --- channel-wise -----------------------------------------------------------

Tensor channel_scale(const Tensor& x, const Tensor& gamma) {
  if (x.rank() < 2 || gamma.numel() != x.dim(1)) {
    throw ShapeError("channel_scale: gamma " + shape_str(gamma.shape()) + " does not match channels of " +
                     shape_str(x.shape()));
  }
  const auto n = x.dim(0), c = x.dim(1), s = inner_size(x.shape(), 2);
  Tensor out(x.shape());
  auto xd = x.data(), gd = gamma.data();
  auto od = out.data();
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const std::size_t base = static_cast<std::size_t>((b * c + ch) * s);
      for (std::int64_t i = 0; i < s; ++i) od[base + i] = xd[base + i] * gd[ch];
    }
  check_finite(out, "channel_scale");
  if (should_record({&x, &gamma})) {
    record("channel_scale", out, [x, gamma, out, n, c, s]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (x.requires_grad()) {
        auto gx = x.grad_buffer();
        auto gd = gamma.data();
        for (std::int64_t b = 0; b < n; ++b)
          for (std::int64_t ch = 0; ch < c; ++ch) {
            const std::size_t base = static_cast<std::size_t>((b * c + ch) * s);
            for (std::int64_t i = 0; i < s; ++i) gx[base + i] += g[base + i] * gd[ch];
          }
      }
      if (gamma.requires_grad()) {
        auto gg = gamma.grad_buffer();
        auto xd = x.data();
        for (std::int64_t b = 0; b < n; ++b)
          for (std::int64_t ch = 0; ch < c; ++ch) {
            const std::size_t base = static_cast<std::size_t>((b * c + ch) * s);
            double acc = 0.0;
            for (std::int64_t i = 0; i < s; ++i) acc += g[base + i] * xd[base + i];
            gg[ch] += acc;
          }
      }
    });
  }
  return out;
}

Tensor channel_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() < 2 || bias.numel() != x.dim(1)) {
    throw ShapeError("channel_bias: bias " + shape_str(bias.shape()) + " does not match channels of " +
                     shape_str(x.shape()));
  }
  const auto n = x.dim(0), c = x.dim(1), s = inner_size(x.shape(), 2);
  Tensor out(x.shape());
  auto xd = x.data(), bd = bias.data();
  auto od = out.data();
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const std::size_t base = static_cast<std::size_t>((b * c + ch) * s);
      for (std::int64_t i = 0; i < s; ++i) od[base + i] = xd[base + i] + bd[ch];
    }
  check_finite(out, "channel_bias");
  if (should_record({&x, &bias})) {
    record("channel_bias", out, [x, bias, out, n, c, s]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (x.requires_grad()) {
        auto gx = x.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad_buffer();
        for (std::int64_t b = 0; b < n; ++b)
          for (std::int64_t ch = 0; ch < c; ++ch) {
            const std::size_t base = static_cast<std::size_t>((b * c + ch) * s);
            double acc = 0.0;
            for (std::int64_t i = 0; i < s; ++i) acc += g[base + i];
            gb[ch] += acc;
          }
      }
    });
  }
  return out;
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const auto& ref = parts.front().shape();
  if (ref.size() < 2) throw ShapeError("concat_channels: inputs need a channel axis, got " + shape_str(ref));
  std::int64_t total_c = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    bool ok = s.size() == ref.size() && s[0] == ref[0];
    for (std::size_t i = 2; ok && i < s.size(); ++i) ok = s[i] == ref[i];
    if (!ok) throw ShapeError("concat_channels: " + shape_str(s) + " incompatible with " + shape_str(ref));
    total_c += s[1];
  }
  const auto n = ref[0], sp = inner_size(ref, 2);
  Shape out_shape = ref;
  out_shape[1] = total_c;
  Tensor out(out_shape);
  auto od = out.data();
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    const auto c = p.dim(1);
    auto pd = p.data();
    for (std::int64_t b = 0; b < n; ++b)
      std::copy_n(pd.begin() + b * c * sp, c * sp, od.begin() + (b * total_c + offset) * sp);
    offset += c;
  }
  if (should_record(parts)) {
    record("concat_channels", out, [parts, out, n, total_c, sp]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      std::int64_t off = 0;
      for (auto& p : parts) {
        const auto c = p.dim(1);
        if (p.requires_grad()) {
          auto gp = p.grad_buffer();
          for (std::int64_t b = 0; b < n; ++b)
            for (std::int64_t i = 0; i < c * sp; ++i) gp[b * c * sp + i] += g[(b * total_c + off) * sp + i];
        }
        off += c;
      }
    });
  }
  return out;
}

// --- convolution ------------------------------------------------------------

namespace {

struct ConvGeom {
  std::int64_t n, cin, h, w, cout, k, stride, pad, ho, wo;
};

void im2col(const double* x, const ConvGeom& g, double* col) {
  // col[(ci*k + ky)*k + kx][oy*wo + ox]
  for (std::int64_t ci = 0; ci < g.cin; ++ci)
    for (std::int64_t ky = 0; ky < g.k; ++ky)
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        double* row = col + ((ci * g.k + ky) * g.k + kx) * g.ho * g.wo;
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          double* dst = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill_n(dst, g.wo, 0.0);
            continue;
          }
          const double* src = x + (ci * g.h + iy) * g.w;
          for (std::int64_t ox = 0; ox < g.wo; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kx;
            dst[ox] = (ix < 0 || ix >= g.w) ? 0.0 : src[ix];
          }
        }
      }
}

void col2im(const double* col, const ConvGeom& g, double* x) {
  for (std::int64_t ci = 0; ci < g.cin; ++ci)
    for (std::int64_t ky = 0; ky < g.k; ++ky)
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        const double* row = col + ((ci * g.k + ky) * g.k + kx) * g.ho * g.wo;
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          double* dst = x + (ci * g.h + iy) * g.w;
          const double* src = row + oy * g.wo;
          for (std::int64_t ox = 0; ox < g.wo; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
}

std::int64_t conv_extent(std::int64_t in, std::int64_t k, std::int64_t stride, std::int64_t pad_before,
                         std::int64_t pad_after, const char* op, const char* axis) {
  const std::int64_t span = in + pad_before + pad_after - k;
  if (span < 0 || span % stride != 0) {
    const std::string pads = pad_before == pad_after
                                 ? "+2*" + std::to_string(pad_before)
                                 : "+" + std::to_string(pad_before) + "+" + std::to_string(pad_after);
    throw ShapeError(std::string(op) + ": output " + axis + " (" + std::to_string(in) + pads + "-" +
                     std::to_string(k) + ")/" + std::to_string(stride) + "+1 is not integral");
  }
  return span / stride + 1;
}

void check_bias(const std::optional<Tensor>& bias, std::int64_t cout, const char* op) {
  if (bias && bias->numel() != cout) {
    throw ShapeError(std::string(op) + ": bias " + shape_str(bias->shape()) + " does not match " +
                     std::to_string(cout) + " output channels");
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const std::optional<Tensor>& bias, int stride,
              int padding) {
  return conv2d(input, weight, bias, stride, padding, padding);
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const std::optional<Tensor>& bias, int stride,
              int padding, int pad_after) {
  require_rank(input, 4, "conv2d", "input");
  require_rank(weight, 4, "conv2d", "weight");
  if (weight.dim(1) != input.dim(1)) {
    throw ShapeError("conv2d: weight expects C_in=" + std::to_string(weight.dim(1)) + " but input " +
                     shape_str(input.shape()) + " has C_in=" + std::to_string(input.dim(1)));
  }
  if (weight.dim(2) != weight.dim(3) || weight.dim(2) % 2 == 0) {
    throw ShapeError("conv2d: kernel must be square with odd extent, got " + shape_str(weight.shape()));
  }
  if (stride < 1 || padding < 0 || pad_after < 0) throw ShapeError("conv2d: stride must be >= 1 and padding >= 0");
  check_bias(bias, weight.dim(0), "conv2d");
  ConvGeom g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), weight.dim(0), weight.dim(2), stride, padding, 0, 0};
  g.ho = conv_extent(g.h, g.k, g.stride, g.pad, pad_after, "conv2d", "height");
  g.wo = conv_extent(g.w, g.k, g.stride, g.pad, pad_after, "conv2d", "width");
  const std::int64_t kdim = g.cin * g.k * g.k, spatial = g.ho * g.wo;
  const bool is_1x1 = g.k == 1 && g.stride == 1 && g.pad == 0 && pad_after == 0;

  Tensor out(Shape{g.n, g.cout, g.ho, g.wo});
  std::vector<double> col(is_1x1 ? 0 : static_cast<std::size_t>(kdim * spatial));
  for (std::int64_t b = 0; b < g.n; ++b) {
    const double* xb = input.ptr() + b * g.cin * g.h * g.w;
    const double* src = xb;
    if (!is_1x1) {
      im2col(xb, g, col.data());
      src = col.data();
    }
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(g.cout), static_cast<int>(spatial),
                static_cast<int>(kdim), 1.0, weight.ptr(), static_cast<int>(kdim), src, static_cast<int>(spatial), 0.0,
                out.ptr() + b * g.cout * spatial, static_cast<int>(spatial));
    if (bias) {
      double* ob = out.ptr() + b * g.cout * spatial;
      for (std::int64_t co = 0; co < g.cout; ++co)
        for (std::int64_t i = 0; i < spatial; ++i) ob[co * spatial + i] += (*bias)[co];
    }
  }
  check_finite(out, "conv2d");

  Tensor bias_t = bias ? *bias : Tensor();
  if (should_record({&input, &weight, bias ? &bias_t : nullptr})) {
    record("conv2d", out, [input, weight, bias_t, out, g, kdim, spatial, is_1x1]() mutable {
      if (!out.has_grad()) return;
      const double* gout = out.grad().data();
      std::vector<double> col(is_1x1 ? 0 : static_cast<std::size_t>(kdim * spatial));
      std::vector<double> dcol(is_1x1 ? 0 : static_cast<std::size_t>(kdim * spatial));
      double* gw = weight.requires_grad() ? weight.grad_buffer().data() : nullptr;
      double* gx = input.requires_grad() ? input.grad_buffer().data() : nullptr;
      for (std::int64_t b = 0; b < g.n; ++b) {
        const double* gb = gout + b * g.cout * spatial;
        const double* xb = input.ptr() + b * g.cin * g.h * g.w;
        if (gw) {
          const double* src = xb;
          if (!is_1x1) {
            im2col(xb, g, col.data());
            src = col.data();
          }
          cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(g.cout), static_cast<int>(kdim),
                      static_cast<int>(spatial), 1.0, gb, static_cast<int>(spatial), src, static_cast<int>(spatial), 1.0,
                      gw, static_cast<int>(kdim));
        }
        if (gx) {
          double* dst = is_1x1 ? gx + b * g.cin * g.h * g.w : dcol.data();
          cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(kdim), static_cast<int>(spatial),
                      static_cast<int>(g.cout), 1.0, weight.ptr(), static_cast<int>(kdim), gb, static_cast<int>(spatial),
                      is_1x1 ? 1.0 : 0.0, dst, static_cast<int>(spatial));
          if (!is_1x1) col2im(dcol.data(), g, gx + b * g.cin * g.h * g.w);
        }
      }
      if (bias_t.defined() && bias_t.requires_grad()) {
        auto gbias = bias_t.grad_buffer();
        for (std::int64_t b = 0; b < g.n; ++b)
          for (std::int64_t co = 0; co < g.cout; ++co) {
            double acc = 0.0;
            const double* gb = gout + (b * g.cout + co) * spatial;
            for (std::int64_t i = 0; i < spatial; ++i) acc += gb[i];
            gbias[co] += acc;
          }
      }
    });
  }
  return out;
}

Tensor depthwise_conv2d(const Tensor& input, const Tensor& weight, const std::optional<Tensor>& bias, int padding) {
  require_rank(input, 4, "depthwise_conv2d", "input");
  require_rank(weight, 4, "depthwise_conv2d", "weight");
  const auto n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (weight.dim(0) != c || weight.dim(1) != 1) {
    throw ShapeError("depthwise_conv2d: weight " + shape_str(weight.shape()) + " must be [" + std::to_string(c) +
                     ",1,k,k] for input " + shape_str(input.shape()));
  }
  const auto k = weight.dim(2);
  if (weight.dim(3) != k || k % 2 == 0) {
    throw ShapeError("depthwise_conv2d: kernel must be square with odd extent, got " + shape_str(weight.shape()));
  }
  check_bias(bias, c, "depthwise_conv2d");
  const auto ho = conv_extent(h, k, 1, padding, padding, "depthwise_conv2d", "height");
  const auto wo = conv_extent(w, k, 1, padding, padding, "depthwise_conv2d", "width");
  const std::int64_t pad = padding;
  Tensor out(Shape{n, c, ho, wo});
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double* x = input.ptr() + (b * c + ch) * h * w;
      const double* kw = weight.ptr() + ch * k * k;
      double* o = out.ptr() + (b * c + ch) * ho * wo;
      const double bv = bias ? (*bias)[ch] : 0.0;
      for (std::int64_t oy = 0; oy < ho; ++oy)
        for (std::int64_t ox = 0; ox < wo; ++ox) {
          double acc = bv;
          for (std::int64_t ky = 0; ky < k; ++ky) {
            const std::int64_t iy = oy - pad + ky;
            if (iy < 0 || iy >= h) continue;
            for (std::int64_t kx = 0; kx < k; ++kx) {
              const std::int64_t ix = ox - pad + kx;
              if (ix < 0 || ix >= w) continue;
              acc += kw[ky * k + kx] * x[iy * w + ix];
            }
          }
          o[oy * wo + ox] = acc;
        }
    }
  check_finite(out, "depthwise_conv2d");
  Tensor bias_t = bias ? *bias : Tensor();
  if (should_record({&input, &weight, bias ? &bias_t : nullptr})) {
    record("depthwise_conv2d", out, [input, weight, bias_t, out, n, c, h, w, k, ho, wo, pad]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      double* gx = input.requires_grad() ? input.grad_buffer().data() : nullptr;
      double* gw = weight.requires_grad() ? weight.grad_buffer().data() : nullptr;
      double* gbias = (bias_t.defined() && bias_t.requires_grad()) ? bias_t.grad_buffer().data() : nullptr;
      for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const double* x = input.ptr() + (b * c + ch) * h * w;
          const double* kw = weight.ptr() + ch * k * k;
          const double* go = g.data() + (b * c + ch) * ho * wo;
          for (std::int64_t oy = 0; oy < ho; ++oy)
            for (std::int64_t ox = 0; ox < wo; ++ox) {
              const double gv = go[oy * wo + ox];
              if (gbias) gbias[ch] += gv;
              for (std::int64_t ky = 0; ky < k; ++ky) {
                const std::int64_t iy = oy - pad + ky;
                if (iy < 0 || iy >= h) continue;
                for (std::int64_t kx = 0; kx < k; ++kx) {
                  const std::int64_t ix = ox - pad + kx;
                  if (ix < 0 || ix >= w) continue;
                  if (gw) gw[ch * k * k + ky * k + kx] += gv * x[iy * w + ix];
                  if (gx) gx[(b * c + ch) * h * w + iy * w + ix] += gv * kw[ky * k + kx];
                }
              }
            }
        }
    });
  }
  return out;
}

Tensor pointwise_conv2d(const Tensor& input, const Tensor& weight, const std::optional<Tensor>& bias) {
  if (input.rank() < 2) throw ShapeError("pointwise_conv2d: input needs [N, C, ...], got " + shape_str(input.shape()));
  const bool w_ok = (weight.rank() == 2) || (weight.rank() == 4 && weight.dim(2) == 1 && weight.dim(3) == 1);
  if (!w_ok) throw ShapeError("pointwise_conv2d: weight must be [C_out, C_in] or [C_out, C_in, 1, 1], got " + shape_str(weight.shape()));
  const auto n = input.dim(0), cin = input.dim(1), cout = weight.dim(0), s = inner_size(input.shape(), 2);
  if (weight.dim(1) != cin) {
    throw ShapeError("pointwise_conv2d: weight expects C_in=" + std::to_string(weight.dim(1)) + " but input " +
                     shape_str(input.shape()) + " has C_in=" + std::to_string(cin));
  }
  check_bias(bias, cout, "pointwise_conv2d");
  Shape out_shape = input.shape();
  out_shape[1] = cout;
  Tensor out(out_shape);
  for (std::int64_t b = 0; b < n; ++b) {
    double* ob = out.ptr() + b * cout * s;
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(cout), static_cast<int>(s),
                static_cast<int>(cin), 1.0, weight.ptr(), static_cast<int>(cin), input.ptr() + b * cin * s,
                static_cast<int>(s), 0.0, ob, static_cast<int>(s));
    if (bias)
      for (std::int64_t co = 0; co < cout; ++co)
        for (std::int64_t i = 0; i < s; ++i) ob[co * s + i] += (*bias)[co];
  }
  check_finite(out, "pointwise_conv2d");
  Tensor bias_t = bias ? *bias : Tensor();
  if (should_record({&input, &weight, bias ? &bias_t : nullptr})) {
    record("pointwise_conv2d", out, [input, weight, bias_t, out, n, cin, cout, s]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.grad().data();
      double* gw = weight.requires_grad() ? weight.grad_buffer().data() : nullptr;
      double* gx = input.requires_grad() ? input.grad_buffer().data() : nullptr;
      double* gbias = (bias_t.defined() && bias_t.requires_grad()) ? bias_t.grad_buffer().data() : nullptr;
      for (std::int64_t b = 0; b < n; ++b) {
        const double* gb = g + b * cout * s;
        if (gw)
          cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(cout), static_cast<int>(cin),
                      static_cast<int>(s), 1.0, gb, static_cast<int>(s), input.ptr() + b * cin * s,
                      static_cast<int>(s), 1.0, gw, static_cast<int>(cin));
        if (gx)
          cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(cin), static_cast<int>(s),
                      static_cast<int>(cout), 1.0, weight.ptr(), static_cast<int>(cin), gb, static_cast<int>(s), 1.0,
                      gx + b * cin * s, static_cast<int>(s));
        if (gbias)
          for (std::int64_t co = 0; co < cout; ++co) {
            double acc = 0.0;
            for (std::int64_t i = 0; i < s; ++i) acc += gb[co * s + i];
            gbias[co] += acc;
          }
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& input, const Tensor& weight, const std::optional<Tensor>& bias) {
  require_rank(weight, 2, "linear", "weight");
  if (input.rank() < 1) throw ShapeError("linear: input must have at least one axis");
  const auto cin = input.dim(-1), cout = weight.dim(0);
  if (weight.dim(1) != cin) {
    throw ShapeError("linear: weight " + shape_str(weight.shape()) + " incompatible with input " +
                     shape_str(input.shape()) + " (last extent " + std::to_string(cin) + ")");
  }
  check_bias(bias, cout, "linear");
  const auto rows = input.numel() / std::max<std::int64_t>(cin, 1);
  Shape out_shape = input.shape();
  out_shape.back() = cout;
  Tensor out(out_shape);
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(rows), static_cast<int>(cout),
              static_cast<int>(cin), 1.0, input.ptr(), static_cast<int>(cin), weight.ptr(), static_cast<int>(cin), 0.0,
              out.ptr(), static_cast<int>(cout));
  if (bias)
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t co = 0; co < cout; ++co) out[r * cout + co] += (*bias)[co];
  check_finite(out, "linear");
  Tensor bias_t = bias ? *bias : Tensor();
  if (should_record({&input, &weight, bias ? &bias_t : nullptr})) {
    record("linear", out, [input, weight, bias_t, out, rows, cin, cout]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.grad().data();
      if (weight.requires_grad())
        cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(cout), static_cast<int>(cin),
                    static_cast<int>(rows), 1.0, g, static_cast<int>(cout), input.ptr(), static_cast<int>(cin), 1.0,
                    weight.grad_buffer().data(), static_cast<int>(cin));
      if (input.requires_grad())
        cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(rows), static_cast<int>(cin),
                    static_cast<int>(cout), 1.0, g, static_cast<int>(cout), weight.ptr(), static_cast<int>(cin), 1.0,
                    input.grad_buffer().data(), static_cast<int>(cin));
      if (bias_t.defined() && bias_t.requires_grad()) {
        auto gb = bias_t.grad_buffer();
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t co = 0; co < cout; ++co) gb[co] += g[r * cout + co];
      }
    });
  }
  return out;
}

// --- normalization ----------------------------------------------------------

Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta, RunningStats& stats, NormMode mode,
                  double momentum) {
  if (input.rank() < 2) throw ShapeError("batch_norm: input needs [N, C, ...], got " + shape_str(input.shape()));
  const auto n = input.dim(0), c = input.dim(1), s = inner_size(input.shape(), 2);
  if (gamma.numel() != c || beta.numel() != c) {
    throw ShapeError("batch_norm: affine parameters " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                     " do not match " + std::to_string(c) + " channels");
  }
  if (mode == NormMode::eval && !stats.populated()) {
    throw Error("batch_norm: eval mode requires populated running statistics");
  }
  if (stats.populated() && static_cast<std::int64_t>(stats.mean.size()) != c) {
    throw ShapeError("batch_norm: running statistics sized " + std::to_string(stats.mean.size()) + " for " +
                     std::to_string(c) + " channels");
  }
  const std::int64_t m = n * s;
  std::vector<double> mu(static_cast<std::size_t>(c)), invstd(static_cast<std::size_t>(c));
  auto xd = input.data();
  if (mode == NormMode::train) {
    if (m < 2) throw ShapeError("batch_norm: training mode needs more than one value per channel");
    if (!stats.populated()) {
      stats.mean.assign(static_cast<std::size_t>(c), 0.0);
      stats.var.assign(static_cast<std::size_t>(c), 1.0);
    }
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t i = 0; i < s; ++i) acc += xd[(b * c + ch) * s + i];
      const double mean = acc / static_cast<double>(m);
      double var = 0.0;
      for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t i = 0; i < s; ++i) {
          const double d = xd[(b * c + ch) * s + i] - mean;
          var += d * d;
        }
      var /= static_cast<double>(m);
      mu[ch] = mean;
      invstd[ch] = 1.0 / std::sqrt(var + kNormEps);
      stats.mean[ch] = (1.0 - momentum) * stats.mean[ch] + momentum * mean;
      stats.var[ch] = (1.0 - momentum) * stats.var[ch] +
                      momentum * var * static_cast<double>(m) / static_cast<double>(m - 1);
    }
  } else {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      mu[ch] = stats.mean[ch];
      invstd[ch] = 1.0 / std::sqrt(stats.var[ch] + kNormEps);
    }
  }
  Tensor out(input.shape());
  Tensor xhat(input.shape());
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t i = 0; i < s; ++i) {
        const auto idx = (b * c + ch) * s + i;
        const double xh = (xd[idx] - mu[ch]) * invstd[ch];
        xhat[idx] = xh;
        out[idx] = gamma[ch] * xh + beta[ch];
      }
  check_finite(out, "batch_norm");
  if (should_record({&input, &gamma, &beta})) {
    const bool training = mode == NormMode::train;
    record("batch_norm", out, [input, gamma, beta, out, xhat, invstd, n, c, s, m, training]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      for (std::int64_t ch = 0; ch < c; ++ch) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::int64_t b = 0; b < n; ++b)
          for (std::int64_t i = 0; i < s; ++i) {
            const auto idx = (b * c + ch) * s + i;
            sum_g += g[idx];
            sum_gx += g[idx] * xhat[idx];
          }
        if (gamma.requires_grad()) gamma.grad_buffer()[ch] += sum_gx;
        if (beta.requires_grad()) beta.grad_buffer()[ch] += sum_g;
        if (!input.requires_grad()) continue;
        auto gx = input.grad_buffer();
        const double k = gamma[ch] * invstd[ch];
        const double inv_m = 1.0 / static_cast<double>(m);
        for (std::int64_t b = 0; b < n; ++b)
          for (std::int64_t i = 0; i < s; ++i) {
            const auto idx = (b * c + ch) * s + i;
            if (training) {
              gx[idx] += k * (g[idx] - inv_m * sum_g - xhat[idx] * inv_m * sum_gx);
            } else {
              gx[idx] += k * g[idx];
            }
          }
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta) {
  if (input.rank() < 2) throw ShapeError("layer_norm: input needs [N, C, ...], got " + shape_str(input.shape()));
  const auto n = input.dim(0), c = input.dim(1), s = inner_size(input.shape(), 2);
  if (gamma.numel() != c || beta.numel() != c) {
    throw ShapeError("layer_norm: affine parameters " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                     " do not match normalized extent " + std::to_string(c));
  }
  Tensor out(input.shape()), xhat(input.shape());
  std::vector<double> invstd(static_cast<std::size_t>(n * s));
  const double* x = input.ptr();
  std::vector<double> mu(static_cast<std::size_t>(s)), var(static_cast<std::size_t>(s));
  for (std::int64_t b = 0; b < n; ++b) {
    std::fill(mu.begin(), mu.end(), 0.0);
    std::fill(var.begin(), var.end(), 0.0);
    const double* xb = x + b * c * s;
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t i = 0; i < s; ++i) mu[i] += xb[ch * s + i];
    for (auto& v : mu) v /= static_cast<double>(c);
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t i = 0; i < s; ++i) {
        const double d = xb[ch * s + i] - mu[i];
        var[i] += d * d;
      }
    for (std::int64_t i = 0; i < s; ++i) invstd[b * s + i] = 1.0 / std::sqrt(var[i] / static_cast<double>(c) + kNormEps);
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t i = 0; i < s; ++i) {
        const auto idx = b * c * s + ch * s + i;
        const double xh = (xb[ch * s + i] - mu[i]) * invstd[b * s + i];
        xhat[idx] = xh;
        out[idx] = gamma[ch] * xh + beta[ch];
      }
  }
  check_finite(out, "layer_norm");
  if (should_record({&input, &gamma, &beta})) {
    record("layer_norm", out, [input, gamma, beta, out, xhat, invstd, n, c, s]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (gamma.requires_grad() || beta.requires_grad()) {
        auto gg = gamma.requires_grad() ? gamma.grad_buffer() : std::span<double>();
        auto gb = beta.requires_grad() ? beta.grad_buffer() : std::span<double>();
        for (std::int64_t b = 0; b < n; ++b)
          for (std::int64_t ch = 0; ch < c; ++ch) {
            double sg = 0.0, sgx = 0.0;
            for (std::int64_t i = 0; i < s; ++i) {
              const auto idx = (b * c + ch) * s + i;
              sg += g[idx];
              sgx += g[idx] * xhat[idx];
            }
            if (!gg.empty()) gg[ch] += sgx;
            if (!gb.empty()) gb[ch] += sg;
          }
      }
      if (!input.requires_grad()) return;
      auto gx = input.grad_buffer();
      std::vector<double> a(static_cast<std::size_t>(s)), bsum(static_cast<std::size_t>(s));
      const double inv_c = 1.0 / static_cast<double>(c);
      for (std::int64_t b = 0; b < n; ++b) {
        std::fill(a.begin(), a.end(), 0.0);
        std::fill(bsum.begin(), bsum.end(), 0.0);
        for (std::int64_t ch = 0; ch < c; ++ch)
          for (std::int64_t i = 0; i < s; ++i) {
            const auto idx = (b * c + ch) * s + i;
            const double gh = g[idx] * gamma[ch];
            a[i] += gh;
            bsum[i] += gh * xhat[idx];
          }
        for (std::int64_t ch = 0; ch < c; ++ch)
          for (std::int64_t i = 0; i < s; ++i) {
            const auto idx = (b * c + ch) * s + i;
            const double gh = g[idx] * gamma[ch];
            gx[idx] += invstd[b * s + i] * (gh - inv_c * a[i] - xhat[idx] * inv_c * bsum[i]);
          }
      }
    });
  }
  return out;
}

Tensor softmax(const Tensor& input, int axis) {
  const int r = input.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("softmax: axis out of range for " + shape_str(input.shape()));
  const auto len = input.dim(axis), inner = inner_size(input.shape(), axis + 1);
  const auto outer = input.numel() / std::max<std::int64_t>(len * inner, 1);
  Tensor out(input.shape());
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      const auto base = o * len * inner + i;
      double mx = -INFINITY;
      for (std::int64_t k = 0; k < len; ++k) mx = std::max(mx, input[base + k * inner]);
      double z = 0.0;
      for (std::int64_t k = 0; k < len; ++k) {
        const double e = std::exp(input[base + k * inner] - mx);
        out[base + k * inner] = e;
        z += e;
      }
      for (std::int64_t k = 0; k < len; ++k) out[base + k * inner] /= z;
    }
  check_finite(out, "softmax");
  if (should_record({&input})) {
    record("softmax", out, [input, out, len, inner, outer]() mutable {
      if_grad(out, input, [&](std::span<const double> g, std::span<double> gx) {
        for (std::int64_t o = 0; o < outer; ++o)
          for (std::int64_t i = 0; i < inner; ++i) {
            const auto base = o * len * inner + i;
            double dot = 0.0;
            for (std::int64_t k = 0; k < len; ++k) dot += g[base + k * inner] * out[base + k * inner];
            for (std::int64_t k = 0; k < len; ++k) {
              const auto idx = base + k * inner;
              gx[idx] += out[idx] * (g[idx] - dot);
            }
          }
      });
    });
  }
  return out;
}

// --- resampling -------------------------------------------------------------

Tensor downsample2(const Tensor& input) {
  require_rank(input, 4, "downsample2", "input");
  const auto n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h % 2 || w % 2) {
    throw ShapeError("downsample2: height and width must be divisible by 2, got " + shape_str(input.shape()));
  }
  const auto ho = h / 2, wo = w / 2;
  Tensor out(Shape{n, c, ho, wo});
  for (std::int64_t p = 0; p < n * c; ++p) {
    const double* x = input.ptr() + p * h * w;
    double* o = out.ptr() + p * ho * wo;
    for (std::int64_t y = 0; y < ho; ++y)
      for (std::int64_t xo = 0; xo < wo; ++xo) {
        const double* r0 = x + 2 * y * w + 2 * xo;
        o[y * wo + xo] = 0.25 * (r0[0] + r0[1] + r0[w] + r0[w + 1]);
      }
  }
  check_finite(out, "downsample2");
  if (should_record({&input})) {
    record("downsample2", out, [input, out, n, c, h, w, ho, wo]() mutable {
      if_grad(out, input, [&](std::span<const double> g, std::span<double> gx) {
        for (std::int64_t p = 0; p < n * c; ++p)
          for (std::int64_t y = 0; y < ho; ++y)
            for (std::int64_t xo = 0; xo < wo; ++xo) {
              const double v = 0.25 * g[p * ho * wo + y * wo + xo];
              double* r0 = gx.data() + p * h * w + 2 * y * w + 2 * xo;
              r0[0] += v;
              r0[1] += v;
              r0[w] += v;
              r0[w + 1] += v;
            }
      });
    });
  }
  return out;
}

namespace {

struct Taps {
  std::vector<std::int64_t> i0, i1;
  std::vector<double> w1;  // weight of i1; i0 gets 1 - w1
};

Taps bilinear_taps(std::int64_t in, std::int64_t out, int factor) {
  Taps t;
  t.i0.resize(static_cast<std::size_t>(out));
  t.i1.resize(static_cast<std::size_t>(out));
  t.w1.resize(static_cast<std::size_t>(out));
  for (std::int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) / factor - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::int64_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const auto i1 = std::min(i0 + 1, in - 1);
    t.i0[o] = i0;
    t.i1[o] = i1;
    t.w1[o] = src - static_cast<double>(i0);
  }
  return t;
}

}  // namespace

Tensor upsample_bilinear(const Tensor& input, int factor) {
  require_rank(input, 4, "upsample_bilinear", "input");
  if (factor < 1) throw ShapeError("upsample_bilinear: factor must be >= 1");
  const auto n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const auto ho = h * factor, wo = w * factor;
  const Taps ty = bilinear_taps(h, ho, factor), tx = bilinear_taps(w, wo, factor);
  Tensor out(Shape{n, c, ho, wo});
  for (std::int64_t p = 0; p < n * c; ++p) {
    const double* x = input.ptr() + p * h * w;
    double* o = out.ptr() + p * ho * wo;
    for (std::int64_t y = 0; y < ho; ++y) {
      const double* r0 = x + ty.i0[y] * w;
      const double* r1 = x + ty.i1[y] * w;
      const double wy = ty.w1[y];
      for (std::int64_t xo = 0; xo < wo; ++xo) {
        const double wx = tx.w1[xo];
        const auto a = tx.i0[xo], b = tx.i1[xo];
        o[y * wo + xo] = (1 - wy) * ((1 - wx) * r0[a] + wx * r0[b]) + wy * ((1 - wx) * r1[a] + wx * r1[b]);
      }
    }
  }
  check_finite(out, "upsample_bilinear");
  if (should_record({&input})) {
    record("upsample_bilinear", out, [input, out, n, c, h, w, ho, wo, ty, tx]() mutable {
      if_grad(out, input, [&](std::span<const double> g, std::span<double> gx) {
        for (std::int64_t p = 0; p < n * c; ++p) {
          double* x = gx.data() + p * h * w;
          const double* go = g.data() + p * ho * wo;
          for (std::int64_t y = 0; y < ho; ++y) {
            double* r0 = x + ty.i0[y] * w;
            double* r1 = x + ty.i1[y] * w;
            const double wy = ty.w1[y];
            for (std::int64_t xo = 0; xo < wo; ++xo) {
              const double v = go[y * wo + xo];
              const double wx = tx.w1[xo];
              const auto a = tx.i0[xo], b = tx.i1[xo];
              r0[a] += (1 - wy) * (1 - wx) * v;
              r0[b] += (1 - wy) * wx * v;
              r1[a] += wy * (1 - wx) * v;
              r1[b] += wy * wx * v;
            }
          }
        }
      });
    });
  }
  return out;
}

// --- index ops ----------------------------------------------------------------

Tensor reshape(const Tensor& input, Shape shape) {
  Tensor out = input.reshaped(std::move(shape));
  if (should_record({&input})) {
    record("reshape", out, [input, out]() mutable {
      if_grad(out, input, [](std::span<const double> g, std::span<double> gx) {
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      });
    });
  }
  return out;
}

Tensor gather(const Tensor& input, IndexMap index, Shape out_shape) {
  if (shape_numel(out_shape) != static_cast<std::int64_t>(index->size())) {
    throw ShapeError("gather: index of length " + std::to_string(index->size()) + " cannot fill " +
                     shape_str(out_shape));
  }
  Tensor out(std::move(out_shape));
  const auto& idx = *index;
  const auto total = input.numel();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= total) throw ShapeError("gather: index out of range");
    out[static_cast<std::int64_t>(i)] = input[idx[i]];
  }
  if (should_record({&input})) {
    record("gather", out, [input, out, index]() mutable {
      if_grad(out, input, [&](std::span<const double> g, std::span<double> gx) {
        const auto& ix = *index;
        for (std::size_t i = 0; i < ix.size(); ++i) gx[static_cast<std::size_t>(ix[i])] += g[i];
      });
    });
  }
  return out;
}

namespace {

std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  const std::int64_t period = 2 * (n - 1);
  std::int64_t m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - m;
}

// Builds a plane-local index map: out plane (oh x ow) reads src plane (h x w).
template <typename RowFn, typename ColFn>
IndexMap plane_map(std::int64_t planes, std::int64_t h, std::int64_t w, std::int64_t oh, std::int64_t ow,
                   RowFn row, ColFn col) {
  auto idx = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(planes * oh * ow));
  std::size_t k = 0;
  for (std::int64_t p = 0; p < planes; ++p)
    for (std::int64_t y = 0; y < oh; ++y)
      for (std::int64_t x = 0; x < ow; ++x) (*idx)[k++] = p * h * w + row(y) * w + col(x);
  return idx;
}

}  // namespace

Tensor pad_reflect(const Tensor& input, std::int64_t pad_bottom, std::int64_t pad_right) {
  require_rank(input, 4, "pad_reflect", "input");
  if (pad_bottom < 0 || pad_right < 0) throw ShapeError("pad_reflect: negative padding");
  if (pad_bottom == 0 && pad_right == 0) return input;
  const auto n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const auto oh = h + pad_bottom, ow = w + pad_right;
  auto idx = plane_map(n * c, h, w, oh, ow, [h](std::int64_t y) { return reflect_index(y, h); },
                       [w](std::int64_t x) { return reflect_index(x, w); });
  return gather(input, idx, Shape{n, c, oh, ow});
}

Tensor crop(const Tensor& input, std::int64_t height, std::int64_t width) {
  require_rank(input, 4, "crop", "input");
  const auto n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (height > h || width > w || height < 0 || width < 0) {
    throw ShapeError("crop: " + std::to_string(height) + "x" + std::to_string(width) + " exceeds " + shape_str(input.shape()));
  }
  if (height == h && width == w) return input;
  auto idx = plane_map(n * c, h, w, height, width, [](std::int64_t y) { return y; }, [](std::int64_t x) { return x; });
  return gather(input, idx, Shape{n, c, height, width});
}

Tensor pixel_shuffle(const Tensor& input, int factor) {
  require_rank(input, 4, "pixel_shuffle", "input");
  const std::int64_t r = factor;
  const auto n = input.dim(0), cr = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (r < 1 || cr % (r * r) != 0) {
    throw ShapeError("pixel_shuffle: channels " + std::to_string(cr) + " not divisible by factor^2=" + std::to_string(r * r));
  }
  const auto c = cr / (r * r);
  auto idx = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(input.numel()));
  std::size_t k = 0;
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t y = 0; y < h * r; ++y)
        for (std::int64_t x = 0; x < w * r; ++x) {
          const auto src_c = ch * r * r + (y % r) * r + (x % r);
          (*idx)[k++] = ((b * cr + src_c) * h + y / r) * w + x / r;
        }
  return gather(input, idx, Shape{n, c, h * r, w * r});
}

// --- DFT --------------------------------------------------------------------

namespace {

struct Twiddle {
  std::vector<double> cos_t, sin_t;  // index (k * j) mod n
  explicit Twiddle(std::int64_t n) : cos_t(static_cast<std::size_t>(n)), sin_t(static_cast<std::size_t>(n)) {
    for (std::int64_t j = 0; j < n; ++j) {
      const double a = 2.0 * std::numbers::pi * static_cast<double>(j) / static_cast<double>(n);
      cos_t[j] = std::cos(a);
      sin_t[j] = std::sin(a);
    }
  }
};

// Separable complex transform of one plane with exponent sign `sign`
// (-1 forward, +1 adjoint). in/out are interleaved as separate re/im arrays.
void transform_plane(const double* in_re, const double* in_im, double* out_re, double* out_im, std::int64_t h,
                     std::int64_t w, const Twiddle& th, const Twiddle& tw, double sign, std::vector<double>& tmp_re,
                     std::vector<double>& tmp_im) {
  tmp_re.assign(static_cast<std::size_t>(h * w), 0.0);
  tmp_im.assign(static_cast<std::size_t>(h * w), 0.0);
  // along W
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t l = 0; l < w; ++l) {
      double re = 0.0, im = 0.0;
      for (std::int64_t x = 0; x < w; ++x) {
        const auto j = (l * x) % w;
        const double c = tw.cos_t[j], s = sign * tw.sin_t[j];
        const double a = in_re[y * w + x], b = in_im ? in_im[y * w + x] : 0.0;
        re += a * c - b * s;
        im += a * s + b * c;
      }
      tmp_re[y * w + l] = re;
      tmp_im[y * w + l] = im;
    }
  // along H
  for (std::int64_t k = 0; k < h; ++k)
    for (std::int64_t l = 0; l < w; ++l) {
      double re = 0.0, im = 0.0;
      for (std::int64_t y = 0; y < h; ++y) {
        const auto j = (k * y) % h;
        const double c = th.cos_t[j], s = sign * th.sin_t[j];
        const double a = tmp_re[y * w + l], b = tmp_im[y * w + l];
        re += a * c - b * s;
        im += a * s + b * c;
      }
      out_re[k * w + l] = re;
      if (out_im) out_im[k * w + l] = im;
    }
}

}  // namespace

Spectrum dft2(const Tensor& input) {
  if (input.rank() < 2) throw ShapeError("dft2: input needs two trailing axes, got " + shape_str(input.shape()));
  const auto h = input.dim(-2), w = input.dim(-1);
  const auto planes = input.numel() / std::max<std::int64_t>(h * w, 1);
  Spectrum out{Tensor(input.shape()), Tensor(input.shape())};
  const Twiddle th(h), tw(w);
  std::vector<double> tr, ti;
  for (std::int64_t p = 0; p < planes; ++p)
    transform_plane(input.ptr() + p * h * w, nullptr, out.real.ptr() + p * h * w, out.imag.ptr() + p * h * w, h, w,
                    th, tw, -1.0, tr, ti);
  check_finite(out.real, "dft2");
  check_finite(out.imag, "dft2");
  if (should_record({&input})) {
    Tensor re = out.real, im = out.imag;
    // Both planes share one backward rule, registered on the imaginary output
    // (recorded last, so it runs first and sees both output gradients).
    detail::record("dft2", re, [] {});
    detail::record("dft2", im, [input, re, im, h, w, planes]() mutable {
      if (!input.requires_grad() || (!re.has_grad() && !im.has_grad())) return;
      const Twiddle th(h), tw(w);
      std::vector<double> zeros(static_cast<std::size_t>(h * w), 0.0), tr, ti;
      std::vector<double> buf(static_cast<std::size_t>(h * w));
      auto gx = input.grad_buffer();
      for (std::int64_t p = 0; p < planes; ++p) {
        const double* gr = re.has_grad() ? re.grad().data() + p * h * w : zeros.data();
        const double* gi = im.has_grad() ? im.grad().data() + p * h * w : zeros.data();
        transform_plane(gr, gi, buf.data(), nullptr, h, w, th, tw, +1.0, tr, ti);
        for (std::int64_t i = 0; i < h * w; ++i) gx[p * h * w + i] += buf[i];
      }
    });
  }
  return out;
}

}  // namespace rmx
