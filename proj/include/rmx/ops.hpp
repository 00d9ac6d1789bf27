#pragma once

// Differentiable primitives. All image tensors are NCHW; sequence tensors are
// [N, C, L]. Every op records a backward rule when a tape is active and any
// input requires grad, and rejects non-finite results.

#include <cstdint>
#include <memory>
#include <optional>
#include <vector>

#include "rmx/tensor.hpp"

namespace rmx {

constexpr double kNormEps = 1e-5;

// --- elementwise ---------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor abs(const Tensor& a);
Tensor gelu(const Tensor& x);      // tanh approximation
Tensor silu(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor sum(const Tensor& a);       // scalar
Tensor mean(const Tensor& a);      // scalar

/// Scalar GELU (tanh form), shared by the op and its tests.
double gelu_scalar(double x);

// --- channel-wise (axis 1 of [N, C, ...]) ----------------------------------
Tensor channel_scale(const Tensor& x, const Tensor& gamma);
Tensor channel_bias(const Tensor& x, const Tensor& bias);
Tensor concat_channels(const std::vector<Tensor>& parts);

// --- convolution ---------------------------------------------------------
/// Cross-correlation. weight [C_out, C_in, k, k], k odd.
Tensor conv2d(const Tensor& input, const Tensor& weight, const std::optional<Tensor>& bias,
              int stride, int padding);
/// As above with separate leading (top/left) and trailing (bottom/right) zero padding.
Tensor conv2d(const Tensor& input, const Tensor& weight, const std::optional<Tensor>& bias,
              int stride, int padding, int pad_after);
/// One k x k filter per channel; weight [C, 1, k, k]. Stride 1.
Tensor depthwise_conv2d(const Tensor& input, const Tensor& weight, const std::optional<Tensor>& bias,
                        int padding);
/// 1x1 channel mixing on [N, C_in, ...]; weight [C_out, C_in] or [C_out, C_in, 1, 1].
Tensor pointwise_conv2d(const Tensor& input, const Tensor& weight, const std::optional<Tensor>& bias = std::nullopt);
/// Linear map over the last axis: [..., C_in] -> [..., C_out]; weight [C_out, C_in].
Tensor linear(const Tensor& input, const Tensor& weight, const std::optional<Tensor>& bias = std::nullopt);

// --- normalization / softmax ------------------------------------------------
struct RunningStats {
  std::vector<double> mean;
  std::vector<double> var;
  bool populated() const { return !mean.empty() && mean.size() == var.size(); }
};

enum class NormMode { train, eval };

/// Per-channel normalization over (N, H, W). Train mode uses batch
/// statistics and updates `stats` with `momentum`; eval mode uses `stats`.
Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta, RunningStats& stats,
                  NormMode mode, double momentum = 0.1);
/// Normalizes over the channel axis at every position of [N, C, ...].
Tensor layer_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta);
Tensor softmax(const Tensor& input, int axis);

// --- resampling ------------------------------------------------------------
/// 2x2 average pooling; H and W must be even.
Tensor downsample2(const Tensor& input);
/// Bilinear upsampling by an integer factor, half-pixel centers (no corner alignment).
Tensor upsample_bilinear(const Tensor& input, int factor);
inline Tensor upsample2(const Tensor& input) { return upsample_bilinear(input, 2); }

// --- index ops -------------------------------------------------------------
/// Differentiable reshape (same element order).
Tensor reshape(const Tensor& input, Shape shape);
using IndexMap = std::shared_ptr<const std::vector<std::int64_t>>;

/// out[i] = input[index[i]] for flat indices; backward scatters-adds.
Tensor gather(const Tensor& input, IndexMap index, Shape out_shape);
/// Reflect-pads the bottom and right edges (mirror without edge repeat, periodic
/// for pads larger than the extent).
Tensor pad_reflect(const Tensor& input, std::int64_t pad_bottom, std::int64_t pad_right);
/// Keeps the top-left H x W region.
Tensor crop(const Tensor& input, std::int64_t height, std::int64_t width);
/// [N, C*r*r, H, W] -> [N, C, H*r, W*r].
Tensor pixel_shuffle(const Tensor& input, int factor);

// --- frequency -------------------------------------------------------------
struct Spectrum {
  Tensor real;
  Tensor imag;
};

/// Unnormalized forward 2D DFT over the two trailing axes of a real tensor.
Spectrum dft2(const Tensor& input);

}  // namespace rmx
