#pragma once

// Self-checks behind the `verify` command: finite-difference gradient checks,
// the scan/convolution identity, structural round trips and metric anchors.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace rmx {

struct CheckResult {
  std::string suite;
  std::string name;
  bool passed = false;
  double value = 0;      // measured error (or metric) compared against `tolerance`
  double tolerance = 0;
  std::string detail;
  double seconds = 0;
};

enum class VerifySuite { grads, oracles, all };

/// Max relative gradient error (inputs and every parameter) for each block,
/// a reduced full model, and total_loss.
std::vector<CheckResult> gradient_checks(double tolerance = 1e-3);

/// `systems` random frozen-parameter scans (L <= 64, N <= 8, C <= 4): selective
/// scan recurrence against the materialized-kernel causal convolution.
CheckResult lti_identity_check(int systems = 50, std::uint64_t seed = 0, double tolerance = 1e-9);

/// Exact round trips and identities (zero error required).
std::vector<CheckResult> structural_checks();

/// PSNR of a 0.1 offset, SSIM of identical images, total_loss of perfect predictions.
std::vector<CheckResult> metric_checks();

std::vector<CheckResult> run_verify(VerifySuite suite, const std::function<void(const CheckResult&)>& on_result = {});

}  // namespace rmx
