#include "rmx/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "rmx/ops.hpp"

namespace rmx {

namespace {

std::vector<std::int64_t> pick_coords(std::int64_t n, std::int64_t max_coords, std::mt19937_64& rng) {
  std::vector<std::int64_t> all(static_cast<std::size_t>(n));
  std::iota(all.begin(), all.end(), 0);
  if (max_coords <= 0 || max_coords >= n) return all;
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(static_cast<std::size_t>(max_coords));
  std::sort(all.begin(), all.end());
  return all;
}

std::vector<double> eval(const std::function<Tensor(const Tensor&)>& f, const Tensor& input) {
  Tensor out = f(input);
  return {out.data().begin(), out.data().end()};
}

// Differences are taken per output element before summing, so outputs the
// perturbation does not touch cancel exactly instead of adding round-off.
double central_difference(const std::vector<double>& plus, const std::vector<double>& minus, double step) {
  double s = 0.0, comp = 0.0;
  for (std::size_t i = 0; i < plus.size(); ++i) {
    const double y = (plus[i] - minus[i]) - comp;
    const double t = s + y;
    comp = (t - s) - y;
    s = t;
  }
  if (!std::isfinite(s)) throw NumericError("objective is non-finite");
  return s / (2.0 * step);
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor input, double tolerance,
                           const GradCheckOptions& options) {
  GradCheckReport report;
  std::vector<Tensor> leaves{input};
  leaves.insert(leaves.end(), options.extra.begin(), options.extra.end());
  std::vector<bool> prior_flags;
  for (auto& t : leaves) {
    prior_flags.push_back(t.requires_grad());
    t.zero_grad();
    t.set_requires_grad(true);
  }
  auto restore = [&] {
    for (std::size_t i = 0; i < leaves.size(); ++i) leaves[i].set_requires_grad(prior_flags[i]);
  };

  try {
    Tape tape;
    {
      TapeScope scope(tape);
      Tensor total = sum(f(input));
      tape.backward(total);
    }
    std::vector<Tensor> analytic;
    for (auto& t : leaves) analytic.push_back(t.grad_tensor());
    for (auto& t : leaves) {
      t.zero_grad();
      t.set_requires_grad(false);
    }

    std::mt19937_64 rng(options.seed);
    for (std::size_t li = 0; li < leaves.size(); ++li) {
      auto& leaf = leaves[li];
      for (auto idx : pick_coords(leaf.numel(), options.max_coords, rng)) {
        const double orig = leaf[idx];
        leaf[idx] = orig + options.step;
        const auto fp = eval(f, input);
        leaf[idx] = orig - options.step;
        const auto fm = eval(f, input);
        leaf[idx] = orig;
        const double numeric = central_difference(fp, fm, options.step);
        const double a = analytic[li][idx];
        if (!std::isfinite(a)) throw NumericError("analytic gradient is non-finite");
        const double denom = std::max({std::fabs(a), std::fabs(numeric), options.abs_floor});
        const double rel = std::fabs(a - numeric) / denom;
        ++report.checked;
        if (rel > report.max_rel_error || report.worst_location.empty()) {
          if (rel >= report.max_rel_error) {
            report.max_rel_error = rel;
            report.worst_location = (li == 0 ? std::string("input") : "extra[" + std::to_string(li - 1) + "]") +
                                    "[" + std::to_string(idx) + "]";
          }
        }
      }
    }
    report.passed = report.max_rel_error < tolerance;
  } catch (const NumericError& e) {
    report.passed = false;
    report.failure = e.what();
  }
  restore();
  return report;
}

}  // namespace rmx
