#include "rmx/ssm.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "rmx/ops.hpp"

namespace rmx {

std::string to_string(ScanDirection d) {
  switch (d) {
    case ScanDirection::hf: return "hf";
    case ScanDirection::hb: return "hb";
    case ScanDirection::vf: return "vf";
    case ScanDirection::vb: return "vb";
  }
  return "?";
}

std::vector<std::int64_t> scan_order(ScanDirection dir, std::int64_t height, std::int64_t width) {
  const auto len = height * width;
  std::vector<std::int64_t> order(static_cast<std::size_t>(len));
  const bool vertical = dir == ScanDirection::vf || dir == ScanDirection::vb;
  for (std::int64_t l = 0; l < len; ++l) {
    order[l] = vertical ? (l % height) * width + l / height : l;
  }
  if (dir == ScanDirection::hb || dir == ScanDirection::vb) std::reverse(order.begin(), order.end());
  return order;
}

Tensor to_sequence(const Tensor& x, ScanDirection dir) {
  if (x.rank() != 4) throw ShapeError("to_sequence: expected [N,C,H,W], got " + shape_str(x.shape()));
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto order = scan_order(dir, h, w);
  auto idx = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(x.numel()));
  std::size_t k = 0;
  for (std::int64_t p = 0; p < n * c; ++p)
    for (auto o : order) (*idx)[k++] = p * h * w + o;
  return gather(x, idx, Shape{n, c, h * w});
}

Tensor from_sequence(const Tensor& seq, ScanDirection dir, std::int64_t height, std::int64_t width) {
  if (seq.rank() != 3 || seq.dim(2) != height * width) {
    throw ShapeError("from_sequence: " + shape_str(seq.shape()) + " is not [N,C," + std::to_string(height * width) + "]");
  }
  const auto n = seq.dim(0), c = seq.dim(1), len = height * width;
  const auto order = scan_order(dir, height, width);
  std::vector<std::int64_t> inverse(static_cast<std::size_t>(len));
  for (std::int64_t l = 0; l < len; ++l) inverse[order[l]] = l;
  auto idx = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(seq.numel()));
  std::size_t k = 0;
  for (std::int64_t p = 0; p < n * c; ++p)
    for (auto l : inverse) (*idx)[k++] = p * len + l;
  return gather(seq, idx, Shape{n, c, height, width});
}

namespace {

// [A, B] -> [B, A]
Tensor transpose2d(const Tensor& x) {
  const auto a = x.dim(0), b = x.dim(1);
  auto idx = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(a * b));
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t j = 0; j < a; ++j) (*idx)[i * a + j] = j * b + i;
  return gather(x, idx, Shape{b, a});
}

}  // namespace

Tensor reorder(const Tensor& x, ScanDirection dir) {
  if (x.rank() != 3) throw ShapeError("reorder: expected [C,H,W], got " + shape_str(x.shape()));
  const auto c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor seq = to_sequence(reshape(x, {1, c, h, w}), dir);
  return transpose2d(reshape(seq, {c, h * w}));
}

Tensor inverse_reorder(const Tensor& seq, ScanDirection dir, std::int64_t height, std::int64_t width) {
  if (seq.rank() != 2 || seq.dim(0) != height * width) {
    throw ShapeError("inverse_reorder: " + shape_str(seq.shape()) + " is not [" + std::to_string(height * width) + ",C]");
  }
  const auto c = seq.dim(1);
  Tensor cl = transpose2d(seq);
  return reshape(from_sequence(reshape(cl, {1, c, height * width}), dir, height, width), {c, height, width});
}

// --- parameters ---------------------------------------------------------------

SSMParams SSMParams::standard(std::int64_t channels, std::int64_t state_size) {
  if (state_size < 1) throw ShapeError("SSM state size must be >= 1");
  SSMParams p;
  p.a_log = Tensor({channels, state_size});
  for (std::int64_t c = 0; c < channels; ++c)
    for (std::int64_t n = 0; n < state_size; ++n) p.a_log[c * state_size + n] = std::log(static_cast<double>(n + 1));
  p.d = Tensor({channels}, 1.0);
  p.a_log.set_requires_grad(true);
  p.d.set_requires_grad(true);
  return p;
}

Tensor SSMParams::realized_a() const {
  Tensor a(a_log.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) a[i] = -std::exp(a_log[i]);
  return a;
}

void SSMParams::visit(const std::string& prefix, const Visitor& v) {
  if (!v.param) return;
  v.param(join_name(prefix, "a_log"), a_log);
  v.param(join_name(prefix, "d"), d);
}

SelectiveProjections SelectiveProjections::init(std::int64_t channels, std::int64_t state_size, Rng& rng) {
  SelectiveProjections p;
  p.w_delta = init_uniform({channels, channels}, channels, rng, 0.1);
  p.w_b = init_uniform({state_size, channels}, channels, rng);
  p.w_c = init_uniform({state_size, channels}, channels, rng);
  // softplus(bias) spread log-uniformly over [1e-3, 1e-1]
  p.delta_bias = Tensor({channels});
  std::uniform_real_distribution<double> u(std::log(1e-3), std::log(1e-1));
  for (auto& b : p.delta_bias.data()) {
    const double dt = std::exp(u(rng));
    b = dt + std::log(-std::expm1(-dt));
  }
  p.delta_bias.set_requires_grad(true);
  return p;
}

void SelectiveProjections::visit(const std::string& prefix, const Visitor& v) {
  if (!v.param) return;
  v.param(join_name(prefix, "w_delta"), w_delta);
  v.param(join_name(prefix, "delta_bias"), delta_bias);
  v.param(join_name(prefix, "w_b"), w_b);
  v.param(join_name(prefix, "w_c"), w_c);
}

// --- discretization -----------------------------------------------------------

Discretized discretize_zoh(const Tensor& delta, const Tensor& a, const Tensor& b) {
  if (delta.rank() != 2 || a.rank() != 2 || b.rank() != 3) {
    throw ShapeError("discretize_zoh: expected delta [L,C], A [C,N], B [L,C,N]; got " + shape_str(delta.shape()) +
                     ", " + shape_str(a.shape()) + ", " + shape_str(b.shape()));
  }
  const auto len = delta.dim(0), c = delta.dim(1), n = a.dim(1);
  if (a.dim(0) != c || b.dim(0) != len || b.dim(1) != c || b.dim(2) != n) {
    throw ShapeError("discretize_zoh: inconsistent extents " + shape_str(delta.shape()) + ", " +
                     shape_str(a.shape()) + ", " + shape_str(b.shape()));
  }
  for (double v : delta.data())
    if (!(v > 0)) throw Error("discretize_zoh: delta must be strictly positive, got " + std::to_string(v));
  for (double v : a.data())
    if (!(v < 0)) throw Error("discretize_zoh: A must be strictly negative, got " + std::to_string(v));
  Discretized out{Tensor({len, c, n}), Tensor({len, c, n})};
  for (std::int64_t t = 0; t < len; ++t)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double dt = delta[t * c + ch];
      for (std::int64_t s = 0; s < n; ++s) {
        const auto i = (t * c + ch) * n + s;
        out.a_bar[i] = std::exp(dt * a[ch * n + s]);
        out.b_bar[i] = dt * b[i];
      }
    }
  return out;
}

// --- scan -------------------------------------------------------------------

Tensor selective_scan_core(const Tensor& u, const Tensor& delta, const Tensor& a_log, const Tensor& b,
                           const Tensor& c, const Tensor& d) {
  if (u.rank() != 3) throw ShapeError("selective_scan: u must be [N,C,L], got " + shape_str(u.shape()));
  const auto nb = u.dim(0), ch = u.dim(1), len = u.dim(2);
  if (len < 1) throw ShapeError("selective_scan: sequence length must be >= 1");
  if (delta.shape() != u.shape()) {
    throw ShapeError("selective_scan: delta " + shape_str(delta.shape()) + " vs u " + shape_str(u.shape()));
  }
  if (a_log.rank() != 2 || a_log.dim(0) != ch) {
    throw ShapeError("selective_scan: a_log must be [" + std::to_string(ch) + ",S], got " + shape_str(a_log.shape()));
  }
  const auto ns = a_log.dim(1);
  const Shape bc_shape{nb, ns, len};
  if (b.shape() != bc_shape || c.shape() != bc_shape) {
    throw ShapeError("selective_scan: B/C must be " + shape_str(bc_shape) + ", got " + shape_str(b.shape()) + "/" +
                     shape_str(c.shape()));
  }
  if (d.numel() != ch) throw ShapeError("selective_scan: D must have " + std::to_string(ch) + " entries");

  std::vector<double> a(static_cast<std::size_t>(ch * ns));
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = -std::exp(a_log[static_cast<std::int64_t>(i)]);
  // [N, L, S] copies for contiguous per-step access
  std::vector<double> bt(static_cast<std::size_t>(nb * len * ns)), ct(bt.size());
  for (std::int64_t n = 0; n < nb; ++n)
    for (std::int64_t s = 0; s < ns; ++s)
      for (std::int64_t t = 0; t < len; ++t) {
        bt[(n * len + t) * ns + s] = b[(n * ns + s) * len + t];
        ct[(n * len + t) * ns + s] = c[(n * ns + s) * len + t];
      }

  const bool recording = detail::should_record({&u, &delta, &a_log, &b, &c, &d});
  std::vector<double> hist(recording ? static_cast<std::size_t>(nb * ch * len * ns) : 0);
  Tensor y(u.shape());
  std::vector<double> h(static_cast<std::size_t>(ns));
  for (std::int64_t n = 0; n < nb; ++n)
    for (std::int64_t k = 0; k < ch; ++k) {
      std::fill(h.begin(), h.end(), 0.0);
      const double* ak = a.data() + k * ns;
      const auto row = (n * ch + k) * len;
      for (std::int64_t t = 0; t < len; ++t) {
        const double dt = delta[row + t], ut = u[row + t];
        const double* bv = bt.data() + (n * len + t) * ns;
        const double* cv = ct.data() + (n * len + t) * ns;
        double acc = d[k] * ut;
        for (std::int64_t s = 0; s < ns; ++s) {
          h[s] = std::exp(dt * ak[s]) * h[s] + dt * bv[s] * ut;
          acc += cv[s] * h[s];
        }
        y[row + t] = acc;
        if (recording) std::copy(h.begin(), h.end(), hist.begin() + (row + t) * ns);
      }
    }
  detail::check_finite(y, "selective_scan");

  if (recording) {
    detail::record("selective_scan", y,
                   [u, delta, a_log, b, c, d, y, a = std::move(a), bt = std::move(bt), ct = std::move(ct),
                    hist = std::move(hist), nb, ch, len, ns]() mutable {
                     if (!y.has_grad()) return;
                     auto gy = y.grad();
                     std::vector<double> gu(static_cast<std::size_t>(u.numel()), 0.0), gdelta(gu.size(), 0.0);
                     std::vector<double> ga(a.size(), 0.0), gd(static_cast<std::size_t>(ch), 0.0);
                     std::vector<double> gbt(bt.size(), 0.0), gct(ct.size(), 0.0);
                     std::vector<double> dh(static_cast<std::size_t>(ns));
                     for (std::int64_t n = 0; n < nb; ++n)
                       for (std::int64_t k = 0; k < ch; ++k) {
                         std::fill(dh.begin(), dh.end(), 0.0);
                         const double* ak = a.data() + k * ns;
                         const auto row = (n * ch + k) * len;
                         for (std::int64_t t = len - 1; t >= 0; --t) {
                           const double dy = gy[row + t];
                           const double dt = delta[row + t], ut = u[row + t];
                           const auto step = (n * len + t) * ns;
                           const double* ht = hist.data() + (row + t) * ns;
                           const double* hp = t > 0 ? hist.data() + (row + t - 1) * ns : nullptr;
                           gd[k] += dy * ut;
                           double gut = d[k] * dy, gdt = 0.0;
                           for (std::int64_t s = 0; s < ns; ++s) {
                             dh[s] += ct[step + s] * dy;
                             gct[step + s] += dy * ht[s];
                             const double abar = std::exp(dt * ak[s]);
                             const double hprev = hp ? hp[s] : 0.0;
                             gdt += dh[s] * (ak[s] * abar * hprev + bt[step + s] * ut);
                             ga[k * ns + s] += dh[s] * dt * abar * hprev;
                             gbt[step + s] += dh[s] * dt * ut;
                             gut += dh[s] * dt * bt[step + s];
                             dh[s] *= abar;
                           }
                           gu[row + t] += gut;
                           gdelta[row + t] += gdt;
                         }
                       }
                     auto add_to = [](const Tensor& t, const std::vector<double>& g) {
                       if (!t.requires_grad()) return;
                       auto buf = t.grad_buffer();
                       for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
                     };
                     add_to(u, gu);
                     add_to(delta, gdelta);
                     add_to(d, gd);
                     if (a_log.requires_grad()) {
                       auto buf = a_log.grad_buffer();
                       for (std::size_t i = 0; i < ga.size(); ++i) buf[i] += ga[i] * a[i];  // dA/da_log = A
                     }
                     auto add_bc = [&](const Tensor& t, const std::vector<double>& g) {
                       if (!t.requires_grad()) return;
                       auto buf = t.grad_buffer();
                       for (std::int64_t n = 0; n < nb; ++n)
                         for (std::int64_t s = 0; s < ns; ++s)
                           for (std::int64_t t2 = 0; t2 < len; ++t2)
                             buf[(n * ns + s) * len + t2] += g[(n * len + t2) * ns + s];
                     };
                     add_bc(b, gbt);
                     add_bc(c, gct);
                   });
  }
  return y;
}

Tensor selective_scan(const Tensor& x, const SSMParams& params, const SelectiveProjections& proj) {
  if (x.rank() != 2) throw ShapeError("selective_scan: x must be [L,C], got " + shape_str(x.shape()));
  const auto len = x.dim(0), c = x.dim(1);
  if (params.channels() != c) {
    throw ShapeError("selective_scan: parameters for " + std::to_string(params.channels()) + " channels, input has " +
                     std::to_string(c));
  }
  Tensor u = reshape(transpose2d(x), {1, c, len});
  Tensor delta = softplus(channel_bias(pointwise_conv2d(u, proj.w_delta), proj.delta_bias));
  Tensor bm = pointwise_conv2d(u, proj.w_b);
  Tensor cm = pointwise_conv2d(u, proj.w_c);
  Tensor y = selective_scan_core(u, delta, params.a_log, bm, cm, params.d);
  return transpose2d(reshape(y, {c, len}));
}

// --- LTI oracle -------------------------------------------------------------

LtiSystem lti_from_timesteps(const Tensor& a_bar, const Tensor& b_bar, const Tensor& c) {
  if (a_bar.rank() != 3 || b_bar.shape() != a_bar.shape() || c.shape() != a_bar.shape()) {
    throw ShapeError("lti_from_timesteps: expected matching [L,C,N] tensors, got " + shape_str(a_bar.shape()) + ", " +
                     shape_str(b_bar.shape()) + ", " + shape_str(c.shape()));
  }
  const auto len = a_bar.dim(0), ch = a_bar.dim(1), n = a_bar.dim(2);
  const auto plane = ch * n;
  LtiSystem sys{Tensor({ch, n}), Tensor({ch, n}), Tensor({ch, n})};
  auto collapse = [&](const Tensor& src, Tensor& dst, const char* what) {
    for (std::int64_t i = 0; i < plane; ++i) dst[i] = src[i];
    for (std::int64_t t = 1; t < len; ++t)
      for (std::int64_t i = 0; i < plane; ++i)
        if (src[t * plane + i] != dst[i]) {
          throw Error(std::string("lti_kernel: ") + what + " varies over time (step " + std::to_string(t) +
                      "); the kernel form needs time-invariant parameters");
        }
  };
  collapse(a_bar, sys.a_bar, "a_bar");
  collapse(b_bar, sys.b_bar, "b_bar");
  collapse(c, sys.c, "C");
  return sys;
}

Tensor lti_kernel(const LtiSystem& sys, std::int64_t length) {
  const auto ch = sys.a_bar.dim(0), n = sys.a_bar.dim(1);
  Tensor k({length, ch});
  for (std::int64_t k_ch = 0; k_ch < ch; ++k_ch)
    for (std::int64_t s = 0; s < n; ++s) {
      const auto i = k_ch * n + s;
      double power = 1.0;
      for (std::int64_t l = 0; l < length; ++l) {
        k[l * ch + k_ch] += sys.c[i] * power * sys.b_bar[i];
        power *= sys.a_bar[i];
      }
    }
  return k;
}

Tensor causal_conv(const Tensor& x, const Tensor& kernel) {
  if (x.rank() != 2 || kernel.rank() != 2 || kernel.dim(1) != x.dim(1) || kernel.dim(0) < x.dim(0)) {
    throw ShapeError("causal_conv: x " + shape_str(x.shape()) + " incompatible with kernel " + shape_str(kernel.shape()));
  }
  const auto len = x.dim(0), ch = x.dim(1);
  Tensor y({len, ch});
  for (std::int64_t t = 0; t < len; ++t)
    for (std::int64_t k = 0; k < ch; ++k) {
      double acc = 0.0;
      for (std::int64_t j = 0; j <= t; ++j) acc += kernel[j * ch + k] * x[(t - j) * ch + k];
      y[t * ch + k] = acc;
    }
  return y;
}

}  // namespace rmx
