#pragma once

// Parameter-holding layers shared by the blocks.

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "rmx/ops.hpp"
#include "rmx/tensor.hpp"

namespace rmx {

/// Walks every learnable tensor and every batch-norm statistic of a module tree.
struct Visitor {
  std::function<void(const std::string&, Tensor&)> param;
  std::function<void(const std::string&, RunningStats&)> stats;
};

inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

/// One line of a parameter/FLOP report.
struct CostItem {
  std::string name;
  std::int64_t params = 0;
  double macs = 0;         // multiply-accumulates (conv, linear, matmul, scan)
  double elementwise = 0;  // other arithmetic: norms, activations, softmax, residuals, resampling
};

struct CostReport {
  std::vector<CostItem> items;

  void add(std::string name, std::int64_t params, double macs, double elementwise = 0) {
    items.push_back({std::move(name), params, macs, elementwise});
  }
  std::int64_t total_params() const;
  double total_macs() const;
  double total_elementwise() const;
  /// FLOPs with `flops_per_mac` (1 or 2) applied to MACs, plus elementwise work.
  double total_flops(int flops_per_mac = 1) const;
  std::string to_text(int flops_per_mac = 1) const;
};

/// Arithmetic operations per element for the non-matmul work, counting every
/// add, multiply, compare and transcendental call once.
namespace op_cost {
constexpr double gelu = 9;          // 0.5 x (1 + tanh(k (x + 0.044715 x^3)))
constexpr double silu = 4;          // x / (1 + exp(-x))
constexpr double softplus = 3;      // log(1 + exp(x))
constexpr double layer_norm = 7;    // mean, centre, square, variance, scale, affine
constexpr double batch_norm = 2;    // folded scale and shift at inference
constexpr double softmax = 5;       // max, subtract, exp, sum, divide
constexpr double bilinear = 7;      // four weighted taps per output
constexpr double scan_state = 8;    // exp(dA), dB u, a h + b, <c, h> per (token, channel, state)
}  // namespace op_cost

using Rng = std::mt19937_64;

/// uniform(-bound, bound) fill, bound = scale / sqrt(fan_in).
Tensor init_uniform(Shape shape, std::int64_t fan_in, Rng& rng, double scale = 1.0);

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::int64_t cin, std::int64_t cout, int kernel, int stride, int padding, bool bias, Rng& rng);
  /// Leading and trailing padding differ; -1 means same as leading.
  Conv2d(std::int64_t cin, std::int64_t cout, int kernel, int stride, int padding, int pad_after, bool bias, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void visit(const std::string& prefix, const Visitor& v);
  /// MACs for an input of h x w.
  double macs(std::int64_t h, std::int64_t w) const;
  std::int64_t out_extent(std::int64_t in) const { return (in + padding_ + pad_after_ - kernel_) / stride_ + 1; }

  Tensor weight;
  std::optional<Tensor> bias;

 private:
  int kernel_ = 1, stride_ = 1, padding_ = 0, pad_after_ = 0;
};

class DepthwiseConv2d {
 public:
  DepthwiseConv2d() = default;
  DepthwiseConv2d(std::int64_t channels, int kernel, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void visit(const std::string& prefix, const Visitor& v);

  Tensor weight;

 private:
  int kernel_ = 3;
};

/// Channel-mixing linear map. Applied as a 1x1 conv on [N, C, ...] tensors
/// or over the last axis of token tensors.
class Linear {
 public:
  Linear() = default;
  Linear(std::int64_t in, std::int64_t out, bool bias, Rng& rng);
  Tensor channels(const Tensor& x) const { return pointwise_conv2d(x, weight, bias); }
  Tensor last(const Tensor& x) const { return linear(x, weight, bias); }
  void visit(const std::string& prefix, const Visitor& v);
  std::int64_t in_features() const { return weight.dim(1); }
  std::int64_t out_features() const { return weight.dim(0); }

  Tensor weight;
  std::optional<Tensor> bias;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::int64_t channels);
  Tensor forward(const Tensor& x) const { return layer_norm(x, gamma, beta); }
  void visit(const std::string& prefix, const Visitor& v);

  Tensor gamma, beta;
};

class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(std::int64_t channels, double momentum = 0.1);
  Tensor forward(const Tensor& x, NormMode mode);
  void visit(const std::string& prefix, const Visitor& v);

  Tensor gamma, beta;
  RunningStats stats;

 private:
  double momentum_ = 0.1;
};

/// fc1 -> GELU -> fc2 over the channel axis.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::int64_t channels, std::int64_t hidden, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void visit(const std::string& prefix, const Visitor& v);
  std::int64_t hidden() const { return fc1.out_features(); }

  Linear fc1, fc2;
};

std::int64_t count_params(const std::function<void(const Visitor&)>& walk);

}  // namespace rmx
