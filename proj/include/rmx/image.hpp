#pragma once

// 8-bit PNG I/O. Images are [3, H, W] tensors in [0, 1].

#include <string>

#include "rmx/tensor.hpp"

namespace rmx {

/// Reads an 8-bit PNG (gray, gray+alpha, RGB, RGBA or palette) as RGB; alpha is dropped.
Tensor load_image(const std::string& path);
/// Writes an RGB 8-bit PNG; values are clamped to [0,1] and rounded half up.
void save_image(const Tensor& image, const std::string& path);

/// round-half-up 8-bit code of a [0,1] value (clamped).
unsigned char quantize8(double v);

}  // namespace rmx
