#include "rmx/loss.hpp"

#include <cmath>
#include <limits>

#include "rmx/ops.hpp"

namespace rmx {

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

Tensor even_crop(const Tensor& x) {
  const auto h = x.dim(-2), w = x.dim(-1);
  if (h % 2 == 0 && w % 2 == 0) return x;
  return crop(x, h - h % 2, w - w % 2);
}

}  // namespace

std::vector<Tensor> target_pyramid(const Tensor& clean, std::size_t scales) {
  std::vector<Tensor> out;
  if (scales == 0) return out;
  out.push_back(clean);
  for (std::size_t s = 1; s < scales; ++s) {
    const Tensor& prev = out.back();
    if (prev.dim(-2) < 2 || prev.dim(-1) < 2) {
      throw ShapeError("target_pyramid: " + shape_str(clean.shape()) + " too small for " + std::to_string(scales) +
                       " scales");
    }
    out.push_back(downsample2(even_crop(prev)));
  }
  return out;
}

Tensor total_loss(const std::vector<Tensor>& preds, const std::vector<Tensor>& targets, const LossConfig& cfg) {
  if (preds.empty() || preds.size() != targets.size()) {
    throw ShapeError("total_loss: " + std::to_string(preds.size()) + " predictions vs " +
                     std::to_string(targets.size()) + " targets");
  }
  if (cfg.lambda < 0) throw Error("total_loss: lambda must be >= 0");
  Tensor total;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    require_same(preds[i], targets[i], "total_loss");
    const Tensor diff = sub(preds[i], targets[i]);
    Tensor term = sum(abs(diff));
    if (cfg.lambda > 0) {
      const Spectrum f = dft2(diff);
      term = add(term, scale(add(sum(abs(f.real)), sum(abs(f.imag))), cfg.lambda));
    }
    term = scale(term, 1.0 / static_cast<double>(preds[i].numel()));
    total = i == 0 ? term : add(total, term);
  }
  return total;
}

Tensor sr_loss(const Tensor& pred, const Tensor& target) {
  require_same(pred, target, "sr_loss");
  return mean(abs(sub(pred, target)));
}

Tensor rgb_to_ycbcr(const Tensor& rgb) {
  if (rgb.rank() < 3 || rgb.dim(-3) != 3) throw ShapeError("rgb_to_ycbcr: expected [.., 3, H, W], got " + shape_str(rgb.shape()));
  const auto plane = rgb.dim(-2) * rgb.dim(-1);
  const auto images = rgb.numel() / (3 * plane);
  Tensor out(rgb.shape());
  for (std::int64_t n = 0; n < images; ++n) {
    const double* r = rgb.ptr() + n * 3 * plane;
    const double* g = r + plane;
    const double* b = g + plane;
    double* y = out.ptr() + n * 3 * plane;
    double* cb = y + plane;
    double* cr = cb + plane;
    for (std::int64_t i = 0; i < plane; ++i) {
      y[i] = 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
      cb[i] = 0.5 - 0.168736 * r[i] - 0.331264 * g[i] + 0.5 * b[i];
      cr[i] = 0.5 + 0.5 * r[i] - 0.418688 * g[i] - 0.081312 * b[i];
    }
  }
  return out;
}

Tensor to_metric_space(const Tensor& rgb, ColorSpace space) {
  if (space == ColorSpace::rgb) return rgb;
  Tensor ycc = rgb_to_ycbcr(rgb);
  if (space == ColorSpace::ycbcr) return ycc;
  Shape shape = rgb.shape();
  shape[shape.size() - 3] = 1;
  const auto plane = rgb.dim(-2) * rgb.dim(-1);
  Tensor y(shape);
  for (std::int64_t n = 0; n < y.numel() / plane; ++n)
    std::copy_n(ycc.ptr() + n * 3 * plane, plane, y.ptr() + n * plane);
  return y;
}

double psnr(const Tensor& pred, const Tensor& target, double max_val) {
  require_same(pred, target, "psnr");
  double se = 0.0;
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    const double d = pred[i] - target[i];
    se += d * d;
  }
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(max_val * max_val / (se / static_cast<double>(pred.numel())));
}

double ssim(const Tensor& pred, const Tensor& target, const SsimOptions& o) {
  require_same(pred, target, "ssim");
  if (pred.rank() < 2) throw ShapeError("ssim: expected [.., H, W], got " + shape_str(pred.shape()));
  const auto h = pred.dim(-2), w = pred.dim(-1);
  auto win = std::min({o.window, h, w});
  if (win % 2 == 0) --win;
  if (win < 1) throw ShapeError("ssim: empty image");

  std::vector<double> g(static_cast<std::size_t>(win));
  double gs = 0.0;
  for (std::int64_t i = 0; i < win; ++i) {
    const double d = static_cast<double>(i - win / 2);
    g[i] = std::exp(-d * d / (2 * o.sigma * o.sigma));
    gs += g[i];
  }
  for (auto& v : g) v /= gs;

  const double c1 = (o.k1 * o.max_val) * (o.k1 * o.max_val), c2 = (o.k2 * o.max_val) * (o.k2 * o.max_val);
  const auto oh = h - win + 1, ow = w - win + 1;
  const auto planes = pred.numel() / (h * w);
  // separable Gaussian filtering of x, y, x^2, y^2, xy: rows first, then columns
  std::vector<double> rows(static_cast<std::size_t>(5 * h * ow));
  double total = 0.0;
  for (std::int64_t p = 0; p < planes; ++p) {
    const double* x = pred.ptr() + p * h * w;
    const double* y = target.ptr() + p * h * w;
    for (std::int64_t r = 0; r < h; ++r)
      for (std::int64_t c = 0; c < ow; ++c) {
        double m[5] = {0, 0, 0, 0, 0};
        for (std::int64_t k = 0; k < win; ++k) {
          const double a = x[r * w + c + k], b = y[r * w + c + k], wk = g[k];
          m[0] += wk * a;
          m[1] += wk * b;
          m[2] += wk * a * a;
          m[3] += wk * b * b;
          m[4] += wk * a * b;
        }
        for (int q = 0; q < 5; ++q) rows[(q * h + r) * ow + c] = m[q];
      }
    double plane_sum = 0.0;
    for (std::int64_t r = 0; r < oh; ++r)
      for (std::int64_t c = 0; c < ow; ++c) {
        double m[5] = {0, 0, 0, 0, 0};
        for (std::int64_t k = 0; k < win; ++k)
          for (int q = 0; q < 5; ++q) m[q] += g[k] * rows[(q * h + r + k) * ow + c];
        const double mx = m[0], my = m[1];
        const double vx = m[2] - mx * mx, vy = m[3] - my * my, cxy = m[4] - mx * my;
        plane_sum += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      }
    total += plane_sum / static_cast<double>(oh * ow);
  }
  return total / static_cast<double>(planes);
}

}  // namespace rmx
