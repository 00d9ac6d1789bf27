#pragma once

// The three block families of the hybrid encoder-decoder.

#include <array>
#include <cstdint>
#include <memory>
#include <string>

#include "rmx/nn.hpp"
#include "rmx/ssm.hpp"

namespace rmx {

class Block {
 public:
  virtual ~Block() = default;
  virtual Tensor forward(const Tensor& x, NormMode mode) = 0;
  virtual void visit(const std::string& prefix, const Visitor& v) = 0;
  /// Parameter and FLOP accounting for an h x w input.
  virtual void account(const std::string& prefix, std::int64_t h, std::int64_t w, CostReport& report) const = 0;
  virtual std::string kind() const = 0;
};

// --- RDCNN -----------------------------------------------------------------

/// conv3x3 -> BN -> GELU -> depthwise3x3 -> pointwise -> BN, residual, GELU.
class RdcnnBlock final : public Block {
 public:
  RdcnnBlock(std::int64_t channels, Rng& rng);
  Tensor forward(const Tensor& x, NormMode mode) override;
  void visit(const std::string& prefix, const Visitor& v) override;
  void account(const std::string& prefix, std::int64_t h, std::int64_t w, CostReport& report) const override;
  std::string kind() const override { return "rdcnn"; }

  /// 9C^2 + C + 9C + C^2 + C + 4C
  static std::int64_t closed_form_params(std::int64_t channels);

  Conv2d conv3;
  BatchNorm2d bn1, bn2;
  DepthwiseConv2d dw;
  Conv2d pw;

 private:
  std::int64_t channels_;
};

// --- EMVM ------------------------------------------------------------------

/// One directional selective-scan branch: Linear -> selective SSM, gated by
/// SiLU(Linear(x)), then an output Linear. Operates on [N, C, L].
class ScanBranch {
 public:
  ScanBranch(std::int64_t channels, std::int64_t state_size, Rng& rng);
  Tensor forward(const Tensor& seq) const;
  void visit(const std::string& prefix, const Visitor& v);
  std::int64_t param_count() const;
  /// MACs and elementwise ops for a sequence of `len` tokens.
  void cost(double len, double& macs, double& elementwise) const;

  Linear in_x, in_z, out;
  SSMParams ssm;
  SelectiveProjections proj;
};

struct EmvmOptions {
  std::int64_t state_size = 8;
  double mlp_ratio = 2.0;
  bool no_dsm = false;             // run hb/vf/vb at full resolution
  bool share_scan_params = false;  // one parameter set for all four directions
};

class EmvmBlock final : public Block {
 public:
  EmvmBlock(std::int64_t channels, const EmvmOptions& options, Rng& rng);
  Tensor forward(const Tensor& x, NormMode mode) override;
  void visit(const std::string& prefix, const Visitor& v) override;
  void account(const std::string& prefix, std::int64_t h, std::int64_t w, CostReport& report) const override;
  std::string kind() const override { return "emvm"; }

  ScanBranch& scan(ScanDirection d) { return *scans_[static_cast<std::size_t>(d)]; }
  const EmvmOptions& options() const { return options_; }
  void set_no_dsm(bool v) { options_.no_dsm = v; }

  LayerNorm norm1, norm2;
  Tensor gamma1, gamma2;
  Mlp mlp;

 private:
  std::int64_t channels_;
  EmvmOptions options_;
  std::array<std::shared_ptr<ScanBranch>, 4> scans_;
};

// --- MWSA ------------------------------------------------------------------

/// [N, C, H, W] -> [N * (H/ws) * (W/ws), ws*ws, C]; windows in row-major
/// order, tokens row-major inside each window.
Tensor window_partition(const Tensor& x, std::int64_t window);
/// Inverse of window_partition for an [N, C, H, W] target.
Tensor window_merge(const Tensor& windows, std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w,
                    std::int64_t window);

/// Scaled dot-product attention per window and head on [B, T, C] projections.
Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v, std::int64_t heads);

/// w_s for the index-th attention block of a stage: base + step * index.
std::int64_t window_schedule(std::int64_t block_index, std::int64_t base = 8, std::int64_t step = 8);
/// Clamps w_s to the feature extent, logging when it does.
std::int64_t clamp_window(std::int64_t window, std::int64_t h, std::int64_t w);

/// heads = C / 32, at least 1.
std::int64_t default_heads(std::int64_t channels);

class MwsaBlock final : public Block {
 public:
  MwsaBlock(std::int64_t channels, std::int64_t window, std::int64_t heads, double mlp_ratio, Rng& rng);
  Tensor forward(const Tensor& x, NormMode mode) override;
  void visit(const std::string& prefix, const Visitor& v) override;
  void account(const std::string& prefix, std::int64_t h, std::int64_t w, CostReport& report) const override;
  std::string kind() const override { return "mwsa"; }

  /// W_O(attention(W_Q x, W_K x, W_V x)) on partitioned windows [B, T, C].
  Tensor window_attention(const Tensor& windows) const;
  std::int64_t window() const { return window_; }
  std::int64_t heads() const { return heads_; }
  std::int64_t effective_window(std::int64_t h, std::int64_t w) const;

  LayerNorm norm1, norm2;
  Linear wq, wk, wv, wo;
  Mlp mlp;

 private:
  std::int64_t channels_, window_, heads_;
};

}  // namespace rmx
