#pragma once

// Independent brute-force reference implementations. Plain loops over raw
// vectors, sharing no code with the library kernels they are compared to.

#include <cstdint>
#include <vector>

namespace rmx::oracle {

using Vec = std::vector<double>;

/// Direct double-sum DFT of each trailing H x W plane of `x` (planes planes).
void direct_dft2(const Vec& x, std::int64_t planes, std::int64_t h, std::int64_t w, Vec& re, Vec& im);

/// Cross-correlation, zero padding. x [N,Ci,H,W], wt [Co,Ci,k,k].
Vec direct_conv2d(const Vec& x, const Vec& wt, const Vec* bias, std::int64_t n, std::int64_t ci, std::int64_t h,
                  std::int64_t w, std::int64_t co, int k, int stride, int pad);

/// Softmax(QK^T / sqrt(d)) V per window and head; q/k/v [B,T,C].
Vec naive_attention(const Vec& q, const Vec& k, const Vec& v, std::int64_t b, std::int64_t t, std::int64_t c,
                    std::int64_t heads);

/// Diagonal recurrence per channel with constant a_bar, b_bar, c: x [L,C], params [C,N].
Vec lti_recurrence(const Vec& x, const Vec& a_bar, const Vec& b_bar, const Vec& cmat, std::int64_t len,
                   std::int64_t ch, std::int64_t n);

/// Time-varying scan: u, delta [C,L]; a [C,N] (realized, negative); b, c [N,L]; d [C].
Vec selective_recurrence(const Vec& u, const Vec& delta, const Vec& a, const Vec& b, const Vec& c, const Vec& d,
                         std::int64_t ch, std::int64_t len, std::int64_t n);

/// Bias-corrected Adam on a single scalar over a gradient sequence; returns the parameter trace.
Vec adam_scalar(double p0, const Vec& grads, double lr, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8);

/// SSIM of one H x W plane: full 2D Gaussian window at every valid position,
/// moments from centered sums.
double direct_ssim(const Vec& x, const Vec& y, std::int64_t h, std::int64_t w, std::int64_t win, double sigma,
                   double c1, double c2);

/// Mean absolute difference.
double mean_abs_diff(const Vec& a, const Vec& b);

}  // namespace rmx::oracle
