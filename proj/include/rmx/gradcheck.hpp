#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "rmx/tensor.hpp"

namespace rmx {

struct GradCheckOptions {
  double step = 1e-5;
  /// Denominator floor: rel = |a - n| / max(|a|, |n|, abs_floor).
  double abs_floor = 1e-6;
  /// Check at most this many coordinates per tensor (0 = all), sampled with `seed`.
  std::int64_t max_coords = 0;
  std::uint64_t seed = 0;
  /// Leaf tensors (typically parameters) checked alongside the input.
  std::vector<Tensor> extra;
};

struct GradCheckReport {
  bool passed = false;
  double max_rel_error = 0.0;
  std::string worst_location;
  std::int64_t checked = 0;
  std::string failure;  // non-empty when a non-finite value aborted the check
};

/// Compares the taped gradient of sum(f(input)) against central differences.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor input, double tolerance,
                           const GradCheckOptions& options = {});

}  // namespace rmx
