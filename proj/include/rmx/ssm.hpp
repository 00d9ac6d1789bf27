#pragma once

// Selective state-space machinery: ZOH discretization, the selective scan,
// the LTI convolution kernel and the four 2D scan orders.

#include <cstdint>
#include <string>
#include <vector>

#include "rmx/nn.hpp"
#include "rmx/tensor.hpp"

namespace rmx {

enum class ScanDirection { hf, hb, vf, vb };

constexpr ScanDirection kAllDirections[] = {ScanDirection::hf, ScanDirection::hb, ScanDirection::vf, ScanDirection::vb};

std::string to_string(ScanDirection d);

/// order[l] = row-major pixel index visited at sequence position l.
std::vector<std::int64_t> scan_order(ScanDirection dir, std::int64_t height, std::int64_t width);

/// [C, H, W] -> [L = H*W, C]
Tensor reorder(const Tensor& x, ScanDirection dir);
/// [L, C] -> [C, H, W]
Tensor inverse_reorder(const Tensor& seq, ScanDirection dir, std::int64_t height, std::int64_t width);

/// Batched forms used inside blocks: [N, C, H, W] <-> [N, C, L].
Tensor to_sequence(const Tensor& x, ScanDirection dir);
Tensor from_sequence(const Tensor& seq, ScanDirection dir, std::int64_t height, std::int64_t width);

/// Continuous diagonal state matrix (A = -exp(a_log), one row of N states
/// per channel) plus the per-channel skip coefficient D.
struct SSMParams {
  Tensor a_log;  // [C, N]
  Tensor d;      // [C]

  /// A initialized to -(1..N) for every channel, D to 1.
  static SSMParams standard(std::int64_t channels, std::int64_t state_size);
  std::int64_t channels() const { return a_log.dim(0); }
  std::int64_t state_size() const { return a_log.dim(1); }
  /// Realized A = -exp(a_log); every entry strictly negative.
  Tensor realized_a() const;
  void visit(const std::string& prefix, const Visitor& v);
};

/// Input-dependent maps producing delta (per channel), B and C (N-vectors).
struct SelectiveProjections {
  Tensor w_delta;     // [C, C]
  Tensor delta_bias;  // [C]
  Tensor w_b;         // [N, C]
  Tensor w_c;         // [N, C]

  static SelectiveProjections init(std::int64_t channels, std::int64_t state_size, Rng& rng);
  void visit(const std::string& prefix, const Visitor& v);
};

struct Discretized {
  Tensor a_bar;  // [L, C, N]
  Tensor b_bar;  // [L, C, N]
};

/// Zero-order hold: a_bar = exp(delta * A), b_bar = delta * B.
/// delta [L, C] (> 0), a [C, N] (< 0), b [L, C, N].
Discretized discretize_zoh(const Tensor& delta, const Tensor& a, const Tensor& b);

/// Differentiable selective scan over [N, C, L] sequences:
///   h_t = exp(delta_t A) h_{t-1} + delta_t B_t u_t,  y_t = <C_t, h_t> + D u_t,  h_0 = 0.
/// delta [N, C, L], a_log [C, S], b and c [N, S, L] (shared across channels), d [C].
Tensor selective_scan_core(const Tensor& u, const Tensor& delta, const Tensor& a_log, const Tensor& b,
                           const Tensor& c, const Tensor& d);

/// Selective scan of one sequence x [L, C], computing delta, B, C from x.
Tensor selective_scan(const Tensor& x, const SSMParams& params, const SelectiveProjections& proj);

/// Time-invariant discrete system, one (a_bar, b_bar, c) triple per channel and state.
struct LtiSystem {
  Tensor a_bar;  // [C, N]
  Tensor b_bar;  // [C, N]
  Tensor c;      // [C, N]
};

/// Collapses per-timestep parameters ([L, C, N] each) to an LtiSystem; rejects
/// time-varying inputs.
LtiSystem lti_from_timesteps(const Tensor& a_bar, const Tensor& b_bar, const Tensor& c);

/// K[l, ch] = sum_n c * a_bar^l * b_bar, l = 0..length-1.
Tensor lti_kernel(const LtiSystem& sys, std::int64_t length);

/// y[t, ch] = sum_{j<=t} k[j, ch] x[t-j, ch].
Tensor causal_conv(const Tensor& x, const Tensor& kernel);

}  // namespace rmx
