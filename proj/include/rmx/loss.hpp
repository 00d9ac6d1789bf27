#pragma once

// Training objectives and image-quality metrics.

#include <vector>

#include "rmx/tensor.hpp"

namespace rmx {

struct LossConfig {
  /// Weight of the frequency-domain L1 term.
  double lambda = 0.1;
};

/// Clean-reference pyramid: scale 0 is `clean`, each further scale is the 2x2
/// area average of the previous one (odd extents drop their last row/column).
std::vector<Tensor> target_pyramid(const Tensor& clean, std::size_t scales);

/// Sum over scales of (|P - I|_1 + lambda (|Re F(P - I)|_1 + |Im F(P - I)|_1)) / numel(P).
/// Returns a scalar tensor; differentiable in `preds`.
Tensor total_loss(const std::vector<Tensor>& preds, const std::vector<Tensor>& targets, const LossConfig& cfg = {});

/// Mean absolute error (single-scale objective for super-resolution).
Tensor sr_loss(const Tensor& pred, const Tensor& target);

enum class ColorSpace {
  rgb,
  y,      // luminance of full-range BT.601 YCbCr
  ycbcr,  // all three YCbCr planes
};

/// [.., 3, H, W] RGB in [0,1] -> full-range BT.601 YCbCr in [0,1].
Tensor rgb_to_ycbcr(const Tensor& rgb);
/// Converts to the requested metric space (a single plane for ColorSpace::y).
Tensor to_metric_space(const Tensor& rgb, ColorSpace space);

/// 10 log10(max^2 / MSE); +infinity when the images are identical.
double psnr(const Tensor& pred, const Tensor& target, double max_val = 1.0);

struct SsimOptions {
  std::int64_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double max_val = 1.0;
};

/// Mean local SSIM over valid Gaussian-window positions, averaged over planes.
/// Images smaller than the window use the largest odd window that fits.
double ssim(const Tensor& pred, const Tensor& target, const SsimOptions& options = {});

}  // namespace rmx
