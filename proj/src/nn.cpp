#include "rmx/nn.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

namespace rmx {

std::int64_t CostReport::total_params() const {
  std::int64_t n = 0;
  for (const auto& i : items) n += i.params;
  return n;
}

double CostReport::total_macs() const {
  double n = 0;
  for (const auto& i : items) n += i.macs;
  return n;
}

double CostReport::total_elementwise() const {
  double n = 0;
  for (const auto& i : items) n += i.elementwise;
  return n;
}

double CostReport::total_flops(int flops_per_mac) const {
  return flops_per_mac * total_macs() + total_elementwise();
}

std::string CostReport::to_text(int flops_per_mac) const {
  std::ostringstream os;
  os << std::left << std::setw(44) << "component" << std::right << std::setw(12) << "params" << std::setw(14)
     << "MACs(M)" << std::setw(14) << "elem(M)" << '\n';
  os << std::fixed << std::setprecision(2);
  for (const auto& i : items) {
    os << std::left << std::setw(44) << i.name << std::right << std::setw(12) << i.params << std::setw(14)
       << i.macs / 1e6 << std::setw(14) << i.elementwise / 1e6 << '\n';
  }
  os << std::left << std::setw(44) << "total" << std::right << std::setw(12) << total_params() << std::setw(14)
     << total_macs() / 1e6 << std::setw(14) << total_elementwise() / 1e6 << '\n';
  os << std::setprecision(4) << "params: " << total_params() / 1e6 << " M\n"
     << "FLOPs (" << flops_per_mac << " per MAC, + elementwise): " << total_flops(flops_per_mac) / 1e9 << " G\n";
  return os.str();
}

Tensor init_uniform(Shape shape, std::int64_t fan_in, Rng& rng, double scale) {
  Tensor t(std::move(shape));
  const double bound = scale / std::sqrt(static_cast<double>(std::max<std::int64_t>(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.data()) v = dist(rng);
  t.set_requires_grad(true);
  return t;
}

namespace {
Tensor trainable(Shape shape, double fill) {
  Tensor t(std::move(shape), fill);
  t.set_requires_grad(true);
  return t;
}
}  // namespace

Conv2d::Conv2d(std::int64_t cin, std::int64_t cout, int kernel, int stride, int padding, bool with_bias, Rng& rng)
    : Conv2d(cin, cout, kernel, stride, padding, padding, with_bias, rng) {}

Conv2d::Conv2d(std::int64_t cin, std::int64_t cout, int kernel, int stride, int padding, int pad_after, bool with_bias,
               Rng& rng)
    : kernel_(kernel), stride_(stride), padding_(padding), pad_after_(pad_after < 0 ? padding : pad_after) {
  const auto fan_in = cin * kernel * kernel;
  weight = init_uniform({cout, cin, kernel, kernel}, fan_in, rng);
  if (with_bias) bias = init_uniform({cout}, fan_in, rng);
}

Tensor Conv2d::forward(const Tensor& x) const { return conv2d(x, weight, bias, stride_, padding_, pad_after_); }

void Conv2d::visit(const std::string& prefix, const Visitor& v) {
  if (v.param) {
    v.param(join_name(prefix, "weight"), weight);
    if (bias) v.param(join_name(prefix, "bias"), *bias);
  }
}

double Conv2d::macs(std::int64_t h, std::int64_t w) const {
  return static_cast<double>(out_extent(h) * out_extent(w)) * static_cast<double>(weight.numel());
}

DepthwiseConv2d::DepthwiseConv2d(std::int64_t channels, int kernel, Rng& rng) : kernel_(kernel) {
  weight = init_uniform({channels, 1, kernel, kernel}, kernel * kernel, rng);
}

Tensor DepthwiseConv2d::forward(const Tensor& x) const { return depthwise_conv2d(x, weight, std::nullopt, kernel_ / 2); }

void DepthwiseConv2d::visit(const std::string& prefix, const Visitor& v) {
  if (v.param) v.param(join_name(prefix, "weight"), weight);
}

Linear::Linear(std::int64_t in, std::int64_t out, bool with_bias, Rng& rng) {
  weight = init_uniform({out, in}, in, rng);
  if (with_bias) bias = init_uniform({out}, in, rng);
}

void Linear::visit(const std::string& prefix, const Visitor& v) {
  if (v.param) {
    v.param(join_name(prefix, "weight"), weight);
    if (bias) v.param(join_name(prefix, "bias"), *bias);
  }
}

LayerNorm::LayerNorm(std::int64_t channels) : gamma(trainable({channels}, 1.0)), beta(trainable({channels}, 0.0)) {}

void LayerNorm::visit(const std::string& prefix, const Visitor& v) {
  if (v.param) {
    v.param(join_name(prefix, "gamma"), gamma);
    v.param(join_name(prefix, "beta"), beta);
  }
}

BatchNorm2d::BatchNorm2d(std::int64_t channels, double momentum)
    : gamma(trainable({channels}, 1.0)), beta(trainable({channels}, 0.0)), momentum_(momentum) {
  stats.mean.assign(static_cast<std::size_t>(channels), 0.0);
  stats.var.assign(static_cast<std::size_t>(channels), 1.0);
}

Tensor BatchNorm2d::forward(const Tensor& x, NormMode mode) { return batch_norm(x, gamma, beta, stats, mode, momentum_); }

void BatchNorm2d::visit(const std::string& prefix, const Visitor& v) {
  if (v.param) {
    v.param(join_name(prefix, "gamma"), gamma);
    v.param(join_name(prefix, "beta"), beta);
  }
  if (v.stats) v.stats(prefix, stats);
}

Mlp::Mlp(std::int64_t channels, std::int64_t hidden, Rng& rng)
    : fc1(channels, hidden, true, rng), fc2(hidden, channels, true, rng) {}

Tensor Mlp::forward(const Tensor& x) const { return fc2.channels(gelu(fc1.channels(x))); }

void Mlp::visit(const std::string& prefix, const Visitor& v) {
  fc1.visit(join_name(prefix, "fc1"), v);
  fc2.visit(join_name(prefix, "fc2"), v);
}

std::int64_t count_params(const std::function<void(const Visitor&)>& walk) {
  std::int64_t n = 0;
  Visitor v;
  v.param = [&n](const std::string&, Tensor& t) { n += t.numel(); };
  walk(v);
  return n;
}

}  // namespace rmx
