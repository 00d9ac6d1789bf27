#include "rmx/blocks.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <iostream>

#include "rmx/ops.hpp"

namespace rmx {

// --- RDCNN -------------------------------------------------------------------

RdcnnBlock::RdcnnBlock(std::int64_t channels, Rng& rng)
    : conv3(channels, channels, 3, 1, 1, true, rng),
      bn1(channels),
      bn2(channels),
      dw(channels, 3, rng),
      pw(channels, channels, 1, 1, 0, true, rng),
      channels_(channels) {}

Tensor RdcnnBlock::forward(const Tensor& x, NormMode mode) {
  if (x.rank() != 4 || x.dim(1) != channels_) {
    throw ShapeError("rdcnn: expected " + std::to_string(channels_) + " channels, got " + shape_str(x.shape()));
  }
  Tensor y1 = gelu(bn1.forward(conv3.forward(x), mode));
  Tensor ypw = pw.forward(dw.forward(y1));
  return gelu(add(bn2.forward(ypw, mode), x));
}

void RdcnnBlock::visit(const std::string& prefix, const Visitor& v) {
  conv3.visit(join_name(prefix, "conv3"), v);
  bn1.visit(join_name(prefix, "bn1"), v);
  dw.visit(join_name(prefix, "dw"), v);
  pw.visit(join_name(prefix, "pw"), v);
  bn2.visit(join_name(prefix, "bn2"), v);
}

void RdcnnBlock::account(const std::string& prefix, std::int64_t h, std::int64_t w, CostReport& report) const {
  const double p = static_cast<double>(h * w), c = static_cast<double>(channels_);
  report.add(join_name(prefix, "conv3x3"), conv3.weight.numel() + channels_, conv3.macs(h, w));
  report.add(join_name(prefix, "depthwise3x3"), dw.weight.numel(), 9 * c * p);
  report.add(join_name(prefix, "pointwise1x1"), pw.weight.numel() + channels_, pw.macs(h, w));
  // conv biases, two folded batch norms, two GELUs, residual add
  report.add(join_name(prefix, "bn+gelu+residual"), 4 * channels_, 0,
             c * p * (2 + 2 * op_cost::batch_norm + 2 * op_cost::gelu + 1));
}

std::int64_t RdcnnBlock::closed_form_params(std::int64_t c) { return 9 * c * c + c + 9 * c + c * c + c + 4 * c; }

// --- EMVM --------------------------------------------------------------------

ScanBranch::ScanBranch(std::int64_t channels, std::int64_t state_size, Rng& rng)
    : in_x(channels, channels, false, rng),
      in_z(channels, channels, false, rng),
      out(channels, channels, false, rng),
      ssm(SSMParams::standard(channels, state_size)),
      proj(SelectiveProjections::init(channels, state_size, rng)) {}

Tensor ScanBranch::forward(const Tensor& seq) const {
  Tensor u = in_x.channels(seq);
  Tensor gate = silu(in_z.channels(seq));
  Tensor delta = softplus(channel_bias(pointwise_conv2d(u, proj.w_delta), proj.delta_bias));
  Tensor bm = pointwise_conv2d(u, proj.w_b);
  Tensor cm = pointwise_conv2d(u, proj.w_c);
  Tensor y = selective_scan_core(u, delta, ssm.a_log, bm, cm, ssm.d);
  return out.channels(mul(y, gate));
}

void ScanBranch::visit(const std::string& prefix, const Visitor& v) {
  in_x.visit(join_name(prefix, "in_x"), v);
  in_z.visit(join_name(prefix, "in_z"), v);
  proj.visit(join_name(prefix, "proj"), v);
  ssm.visit(join_name(prefix, "ssm"), v);
  out.visit(join_name(prefix, "out"), v);
}

std::int64_t ScanBranch::param_count() const {
  return in_x.weight.numel() + in_z.weight.numel() + out.weight.numel() + proj.w_delta.numel() +
         proj.delta_bias.numel() + proj.w_b.numel() + proj.w_c.numel() + ssm.a_log.numel() + ssm.d.numel();
}

void ScanBranch::cost(double len, double& macs, double& elementwise) const {
  const double c = static_cast<double>(ssm.channels()), s = static_cast<double>(ssm.state_size());
  // in_x, in_z, w_delta, out (C x C each) and w_b, w_c (S x C)
  macs += len * (4 * c * c + 2 * s * c);
  elementwise += len * (op_cost::scan_state * s * c  // recurrence
                        + 2 * c                      // D skip
                        + c + op_cost::softplus * c  // delta bias and softplus
                        + op_cost::silu * c + c);    // gate and product
}

EmvmBlock::EmvmBlock(std::int64_t channels, const EmvmOptions& options, Rng& rng)
    : norm1(channels),
      norm2(channels),
      gamma1({channels}, 1.0),
      gamma2({channels}, 1.0),
      mlp(channels, static_cast<std::int64_t>(std::llround(options.mlp_ratio * static_cast<double>(channels))), rng),
      channels_(channels),
      options_(options) {
  gamma1.set_requires_grad(true);
  gamma2.set_requires_grad(true);
  if (options.share_scan_params) {
    auto shared = std::make_shared<ScanBranch>(channels, options.state_size, rng);
    scans_.fill(shared);
  } else {
    for (auto& s : scans_) s = std::make_shared<ScanBranch>(channels, options.state_size, rng);
  }
}

Tensor EmvmBlock::forward(const Tensor& x, NormMode) {
  if (x.rank() != 4 || x.dim(1) != channels_) {
    throw ShapeError("emvm: expected " + std::to_string(channels_) + " channels, got " + shape_str(x.shape()));
  }
  const auto h = x.dim(2), w = x.dim(3);
  if (!options_.no_dsm && (h % 2 || w % 2)) {
    throw ShapeError("emvm: height and width must be divisible by 2 for the half-resolution scans, got " +
                     shape_str(x.shape()));
  }
  Tensor xn = norm1.forward(x);
  Tensor y = from_sequence(scan(ScanDirection::hf).forward(to_sequence(xn, ScanDirection::hf)), ScanDirection::hf, h, w);
  Tensor low = options_.no_dsm ? xn : downsample2(xn);
  const auto lh = low.dim(2), lw = low.dim(3);
  for (auto dir : {ScanDirection::hb, ScanDirection::vf, ScanDirection::vb}) {
    Tensor yd = from_sequence(scan(dir).forward(to_sequence(low, dir)), dir, lh, lw);
    y = add(y, options_.no_dsm ? yd : upsample2(yd));
  }
  Tensor z = add(channel_scale(x, gamma1), y);
  return add(channel_scale(z, gamma2), mlp.forward(norm2.forward(z)));
}

void EmvmBlock::visit(const std::string& prefix, const Visitor& v) {
  norm1.visit(join_name(prefix, "norm1"), v);
  if (options_.share_scan_params) {
    scans_[0]->visit(join_name(prefix, "scan"), v);
  } else {
    for (auto d : kAllDirections) scan(d).visit(join_name(prefix, "scan_" + to_string(d)), v);
  }
  if (v.param) {
    v.param(join_name(prefix, "gamma1"), gamma1);
    v.param(join_name(prefix, "gamma2"), gamma2);
  }
  norm2.visit(join_name(prefix, "norm2"), v);
  mlp.visit(join_name(prefix, "mlp"), v);
}

void EmvmBlock::account(const std::string& prefix, std::int64_t h, std::int64_t w, CostReport& report) const {
  const double p = static_cast<double>(h * w), c = static_cast<double>(channels_);
  const double low = options_.no_dsm ? p : p / 4;
  const auto branch_params = scans_[0]->param_count();
  double macs = 0, elem = 0;
  scans_[0]->cost(p, macs, elem);
  report.add(join_name(prefix, "scan_hf(full)"), branch_params, macs, elem);
  for (auto d : {ScanDirection::hb, ScanDirection::vf, ScanDirection::vb}) {
    macs = elem = 0;
    scans_[0]->cost(low, macs, elem);
    const std::string res = options_.no_dsm ? "(full)" : "(half)";
    report.add(join_name(prefix, "scan_" + to_string(d) + res), options_.share_scan_params ? 0 : branch_params, macs, elem);
  }
  // 2x2 average of the normed map, bilinear restore of three branches
  const double resample = options_.no_dsm ? 0 : c * p + 3 * op_cost::bilinear * c * p;
  // norm1, resampling, three-way direction sum, gamma1 scale and residual
  report.add(join_name(prefix, "norm+resample+residual"), 2 * channels_ + channels_, 0,
             op_cost::layer_norm * c * p + resample + 3 * c * p + 2 * c * p);
  const double hidden = static_cast<double>(mlp.hidden());
  // norm2, biases, GELU, gamma2 scale and residual
  report.add(join_name(prefix, "mlp"), mlp.fc1.weight.numel() + mlp.hidden() + mlp.fc2.weight.numel() + channels_ +
                                           2 * channels_ + channels_,
             2 * c * hidden * p,
             op_cost::layer_norm * c * p + hidden * p + c * p + op_cost::gelu * hidden * p + 2 * c * p);
}

// --- MWSA --------------------------------------------------------------------

Tensor window_partition(const Tensor& x, std::int64_t ws) {
  if (x.rank() != 4) throw ShapeError("window_partition: expected [N,C,H,W], got " + shape_str(x.shape()));
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (ws < 1 || h % ws || w % ws) {
    const auto ph = ws > 0 ? (ws - h % ws) % ws : 0, pw = ws > 0 ? (ws - w % ws) % ws : 0;
    throw ShapeError("window_partition: " + std::to_string(h) + "x" + std::to_string(w) +
                     " is not divisible by window " + std::to_string(ws) + "; pad by " + std::to_string(ph) + "x" +
                     std::to_string(pw));
  }
  const auto nh = h / ws, nw = w / ws, t = ws * ws;
  auto idx = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(x.numel()));
  std::size_t k = 0;
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t wy = 0; wy < nh; ++wy)
      for (std::int64_t wx = 0; wx < nw; ++wx)
        for (std::int64_t ty = 0; ty < ws; ++ty)
          for (std::int64_t tx = 0; tx < ws; ++tx)
            for (std::int64_t ch = 0; ch < c; ++ch)
              (*idx)[k++] = ((b * c + ch) * h + wy * ws + ty) * w + wx * ws + tx;
  return gather(x, idx, Shape{n * nh * nw, t, c});
}

Tensor window_merge(const Tensor& windows, std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w,
                    std::int64_t ws) {
  if (ws < 1 || h % ws || w % ws) {
    throw ShapeError("window_merge: " + std::to_string(h) + "x" + std::to_string(w) + " is not divisible by window " +
                     std::to_string(ws));
  }
  const auto nh = h / ws, nw = w / ws, t = ws * ws;
  const Shape expected{n * nh * nw, t, c};
  if (windows.shape() != expected) {
    throw ShapeError("window_merge: expected " + shape_str(expected) + ", got " + shape_str(windows.shape()));
  }
  auto idx = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(windows.numel()));
  std::size_t k = 0;
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x)
          (*idx)[k++] = (((b * nh + y / ws) * nw + x / ws) * t + (y % ws) * ws + x % ws) * c + ch;
  return gather(windows, idx, Shape{n, c, h, w});
}

Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v, std::int64_t heads) {
  if (q.rank() != 3 || k.shape() != q.shape() || v.shape() != q.shape()) {
    throw ShapeError("attention: q/k/v must share a [B,T,C] shape, got " + shape_str(q.shape()) + ", " +
                     shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
  const auto nb = q.dim(0), t = q.dim(1), c = q.dim(2);
  if (heads < 1 || c % heads) {
    throw ShapeError("attention: channels " + std::to_string(c) + " not divisible by heads " + std::to_string(heads));
  }
  const auto dk = c / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dk));
  const int T = static_cast<int>(t), C = static_cast<int>(c), D = static_cast<int>(dk);
  const bool recording = detail::should_record({&q, &k, &v});
  std::vector<double> probs(recording ? static_cast<std::size_t>(nb * heads * t * t) : 0);
  std::vector<double> scratch(static_cast<std::size_t>(t * t));
  Tensor out(q.shape());
  for (std::int64_t b = 0; b < nb; ++b)
    for (std::int64_t hd = 0; hd < heads; ++hd) {
      const auto off = b * t * c + hd * dk;
      double* p = recording ? probs.data() + (b * heads + hd) * t * t : scratch.data();
      cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, T, T, D, sc, q.ptr() + off, C, k.ptr() + off, C, 0.0, p, T);
      for (std::int64_t i = 0; i < t; ++i) {
        double* row = p + i * t;
        const double mx = *std::max_element(row, row + t);
        double z = 0.0;
        for (std::int64_t j = 0; j < t; ++j) z += (row[j] = std::exp(row[j] - mx));
        for (std::int64_t j = 0; j < t; ++j) row[j] /= z;
      }
      cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, T, D, T, 1.0, p, T, v.ptr() + off, C, 0.0, out.ptr() + off, C);
    }
  detail::check_finite(out, "attention");
  if (recording) {
    detail::record("attention", out, [q, k, v, out, probs = std::move(probs), nb, t, c, heads, dk, sc]() mutable {
      if (!out.has_grad()) return;
      const int T = static_cast<int>(t), C = static_cast<int>(c), D = static_cast<int>(dk);
      const double* go = out.grad().data();
      double* gq = q.requires_grad() ? q.grad_buffer().data() : nullptr;
      double* gk = k.requires_grad() ? k.grad_buffer().data() : nullptr;
      double* gv = v.requires_grad() ? v.grad_buffer().data() : nullptr;
      std::vector<double> dp(static_cast<std::size_t>(t * t));
      for (std::int64_t b = 0; b < nb; ++b)
        for (std::int64_t hd = 0; hd < heads; ++hd) {
          const auto off = b * t * c + hd * dk;
          const double* p = probs.data() + (b * heads + hd) * t * t;
          if (gv)
            cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, T, D, T, 1.0, p, T, go + off, C, 1.0, gv + off, C);
          if (!gq && !gk) continue;
          cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, T, T, D, 1.0, go + off, C, v.ptr() + off, C, 0.0,
                      dp.data(), T);
          for (std::int64_t i = 0; i < t; ++i) {
            double dot = 0.0;
            for (std::int64_t j = 0; j < t; ++j) dot += dp[i * t + j] * p[i * t + j];
            for (std::int64_t j = 0; j < t; ++j) dp[i * t + j] = p[i * t + j] * (dp[i * t + j] - dot);
          }
          if (gq)
            cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, T, D, T, sc, dp.data(), T, k.ptr() + off, C, 1.0,
                        gq + off, C);
          if (gk)
            cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, T, D, T, sc, dp.data(), T, q.ptr() + off, C, 1.0,
                        gk + off, C);
        }
    });
  }
  return out;
}

std::int64_t window_schedule(std::int64_t block_index, std::int64_t base, std::int64_t step) {
  if (block_index < 0) throw Error("window_schedule: block index must be >= 0");
  return base + step * block_index;
}

std::int64_t clamp_window(std::int64_t window, std::int64_t h, std::int64_t w) {
  const auto extent = std::min(h, w);
  if (window <= extent) return window;
  static thread_local std::int64_t last_warned = -1;
  if (last_warned != window * 100000 + extent) {
    std::clog << "warning: window " << window << " exceeds feature extent " << h << "x" << w << ", clamped to "
              << extent << '\n';
    last_warned = window * 100000 + extent;
  }
  return extent;
}

std::int64_t default_heads(std::int64_t channels) { return std::max<std::int64_t>(1, channels / 32); }

MwsaBlock::MwsaBlock(std::int64_t channels, std::int64_t window, std::int64_t heads, double mlp_ratio, Rng& rng)
    : norm1(channels),
      norm2(channels),
      wq(channels, channels, true, rng),
      wk(channels, channels, true, rng),
      wv(channels, channels, true, rng),
      wo(channels, channels, true, rng),
      mlp(channels, static_cast<std::int64_t>(std::llround(mlp_ratio * static_cast<double>(channels))), rng),
      channels_(channels),
      window_(window),
      heads_(heads) {
  if (window < 1) throw Error("mwsa: window size must be >= 1");
  if (heads < 1 || channels % heads) {
    throw ShapeError("mwsa: channels " + std::to_string(channels) + " not divisible by heads " + std::to_string(heads));
  }
}

std::int64_t MwsaBlock::effective_window(std::int64_t h, std::int64_t w) const { return clamp_window(window_, h, w); }

Tensor MwsaBlock::window_attention(const Tensor& windows) const {
  return wo.last(attention_core(wq.last(windows), wk.last(windows), wv.last(windows), heads_));
}

Tensor MwsaBlock::forward(const Tensor& x, NormMode) {
  if (x.rank() != 4 || x.dim(1) != channels_) {
    throw ShapeError("mwsa: expected " + std::to_string(channels_) + " channels, got " + shape_str(x.shape()));
  }
  const auto n = x.dim(0), h = x.dim(2), w = x.dim(3);
  const auto ws = effective_window(h, w);
  Tensor attn = window_merge(window_attention(window_partition(norm1.forward(x), ws)), n, channels_, h, w, ws);
  Tensor x1 = add(x, attn);
  return add(x1, mlp.forward(norm2.forward(x1)));
}

void MwsaBlock::visit(const std::string& prefix, const Visitor& v) {
  norm1.visit(join_name(prefix, "norm1"), v);
  wq.visit(join_name(prefix, "wq"), v);
  wk.visit(join_name(prefix, "wk"), v);
  wv.visit(join_name(prefix, "wv"), v);
  wo.visit(join_name(prefix, "wo"), v);
  norm2.visit(join_name(prefix, "norm2"), v);
  mlp.visit(join_name(prefix, "mlp"), v);
}

void MwsaBlock::account(const std::string& prefix, std::int64_t h, std::int64_t w, CostReport& report) const {
  const double p = static_cast<double>(h * w), c = static_cast<double>(channels_);
  const auto ws = std::min({window_, h, w});
  const double t = static_cast<double>(ws * ws);
  report.add(join_name(prefix, "qkvo"), 4 * (channels_ * channels_ + channels_), 4 * c * c * p, 4 * c * p);
  // QK^T and PV, then score scaling and softmax per head
  report.add(join_name(prefix, "attention(w=" + std::to_string(ws) + ")"), 0, 2 * t * c * p,
             static_cast<double>(heads_) * t * p * (1 + op_cost::softmax));
  const double hidden = static_cast<double>(mlp.hidden());
  // two norms, MLP biases and GELU, two residual adds
  report.add(join_name(prefix, "mlp+norms+residuals"),
             mlp.fc1.weight.numel() + mlp.hidden() + mlp.fc2.weight.numel() + channels_ + 4 * channels_,
             2 * c * hidden * p,
             2 * op_cost::layer_norm * c * p + hidden * p + c * p + op_cost::gelu * hidden * p + 2 * c * p);
}

}  // namespace rmx
