#include "rmx/verify.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <sstream>

#include "rmx/blocks.hpp"
#include "rmx/gradcheck.hpp"
#include "rmx/loss.hpp"
#include "rmx/model.hpp"
#include "rmx/ops.hpp"
#include "rmx/ssm.hpp"

namespace rmx {

namespace {

using Clock = std::chrono::steady_clock;

Tensor uniform_tensor(Shape shape, std::uint64_t seed, double lo, double hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

template <typename Fn>
CheckResult timed(const std::string& suite, const std::string& name, Fn&& fn) {
  const auto t0 = Clock::now();
  CheckResult r;
  try {
    r = fn();
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.suite = suite;
  r.name = name;
  r.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return r;
}

std::vector<Tensor> leaves(const std::function<void(const Visitor&)>& visit) {
  std::vector<Tensor> out;
  visit(Visitor{[&](const std::string&, Tensor& t) { out.push_back(t); }, nullptr});
  return out;
}

CheckResult from_report(const GradCheckReport& rep, double tol) {
  CheckResult r;
  r.passed = rep.passed && rep.max_rel_error < tol;
  r.value = rep.max_rel_error;
  r.tolerance = tol;
  std::ostringstream d;
  d << rep.checked << " coordinates, worst at " << rep.worst_location;
  if (!rep.failure.empty()) d << "; " << rep.failure;
  r.detail = d.str();
  return r;
}

// sum of the output weighted by fixed random factors, so no gradient is uniform
GradCheckReport block_check(Block& b, const Tensor& x, std::int64_t max_coords, double tol, std::uint64_t seed) {
  GradCheckOptions opt;
  opt.extra = leaves([&](const Visitor& v) { b.visit("", v); });
  opt.max_coords = max_coords;
  opt.abs_floor = 1e-4;
  opt.seed = seed;
  std::optional<Tensor> wts;
  return grad_check(
      [&](const Tensor& t) {
        Tensor y = b.forward(t, NormMode::eval);
        if (!wts) wts = uniform_tensor(y.shape(), seed + 1, 0.5, 1.5);
        return mul(y, *wts);
      },
      x, tol, opt);
}

}  // namespace

std::vector<CheckResult> gradient_checks(double tol) {
  std::vector<CheckResult> out;
  out.push_back(timed("grads", "rdcnn", [&] {
    Rng rng(1);
    RdcnnBlock b(4, rng);
    const Tensor x = uniform_tensor({2, 4, 6, 6}, 2, -1, 1);
    b.forward(x, NormMode::train);  // populate running statistics
    return from_report(block_check(b, x, 200, tol, 3), tol);
  }));
  out.push_back(timed("grads", "emvm", [&] {
    Rng rng(4);
    EmvmOptions o;
    o.state_size = 2;
    EmvmBlock b(4, o, rng);
    return from_report(block_check(b, uniform_tensor({1, 4, 8, 8}, 5, -1, 1), 200, tol, 6), tol);
  }));
  out.push_back(timed("grads", "mwsa", [&] {
    Rng rng(7);
    MwsaBlock b(8, 4, 2, 2.0, rng);
    return from_report(block_check(b, uniform_tensor({1, 8, 8, 8}, 8, -1, 1), 200, tol, 9), tol);
  }));
  out.push_back(timed("grads", "model", [&] {
    ModelConfig c;
    c.base_channels = 4;
    c.stages = 2;
    c.blocks_per_stage = 2;
    c.window_base = 4;
    c.window_step = 4;
    c.ssm_state = 2;
    c.mlp_ratio = 1.0;
    c.init_seed = 10;
    Model m(c);
    GradCheckOptions opt;
    opt.extra = leaves([&](const Visitor& v) { m.visit(v); });
    opt.max_coords = 40;
    opt.abs_floor = 1e-4;
    const Tensor w0 = uniform_tensor({1, 3, 16, 16}, 11, 0.5, 1.5), w1 = uniform_tensor({1, 3, 8, 8}, 12, 0.5, 1.5);
    auto rep = grad_check(
        [&](const Tensor& t) {
          auto p = m.forward(t, NormMode::train);
          return add(sum(mul(p.scales[0], w0)), sum(mul(p.scales[1], w1)));
        },
        uniform_tensor({1, 3, 16, 16}, 13, 0, 1), tol, opt);
    return from_report(rep, tol);
  }));
  out.push_back(timed("grads", "total_loss", [&] {
    const auto targets = target_pyramid(uniform_tensor({1, 3, 8, 8}, 14, 0, 1), 3);
    GradCheckOptions opt;
    opt.extra = {uniform_tensor({1, 3, 4, 4}, 15, 0, 1).set_requires_grad(true),
                 uniform_tensor({1, 3, 2, 2}, 16, 0, 1).set_requires_grad(true)};
    const Tensor p1 = opt.extra[0], p2 = opt.extra[1];
    auto rep = grad_check([&](const Tensor& p0) { return total_loss({p0, p1, p2}, targets); },
                          uniform_tensor({1, 3, 8, 8}, 17, 0, 1), tol, opt);
    return from_report(rep, tol);
  }));
  return out;
}

CheckResult lti_identity_check(int systems, std::uint64_t seed, double tol) {
  return timed("oracles", "lti_scan_vs_kernel", [&] {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::int64_t> len_d(1, 64), n_d(1, 8), c_d(1, 4);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    double worst = 0;
    for (int s = 0; s < systems; ++s) {
      const auto len = len_d(rng), n = n_d(rng), ch = c_d(rng);
      Tensor u({1, ch, len}), delta({1, ch, len}), a_log({ch, n}), b({1, n, len}), c({1, n, len}), d({ch});
      for (auto& v : u.data()) v = 2 * unit(rng) - 1;
      for (std::int64_t k = 0; k < ch; ++k) {
        const double dt = 0.01 + 0.99 * unit(rng);
        for (std::int64_t t = 0; t < len; ++t) delta[k * len + t] = dt;
        d[k] = 2 * unit(rng) - 1;
      }
      for (auto& v : a_log.data()) v = std::log(0.1 + 1.9 * unit(rng));
      for (std::int64_t j = 0; j < n; ++j) {
        const double bv = 2 * unit(rng) - 1, cv = 2 * unit(rng) - 1;
        for (std::int64_t t = 0; t < len; ++t) {
          b[j * len + t] = bv;
          c[j * len + t] = cv;
        }
      }
      const Tensor y = selective_scan_core(u, delta, a_log, b, c, d);

      // per-timestep discretization, collapsed to a time-invariant system
      Tensor dl({len, ch}), ul({len, ch}), bl({len, ch, n}), cl({len, ch, n});
      for (std::int64_t t = 0; t < len; ++t)
        for (std::int64_t k = 0; k < ch; ++k) {
          dl[t * ch + k] = delta[k * len + t];
          ul[t * ch + k] = u[k * len + t];
          for (std::int64_t j = 0; j < n; ++j) {
            bl[(t * ch + k) * n + j] = b[j * len + t];
            cl[(t * ch + k) * n + j] = c[j * len + t];
          }
        }
      SSMParams p{a_log, d};
      const auto disc = discretize_zoh(dl, p.realized_a(), bl);
      const Tensor yk = causal_conv(ul, lti_kernel(lti_from_timesteps(disc.a_bar, disc.b_bar, cl), len));
      for (std::int64_t t = 0; t < len; ++t)
        for (std::int64_t k = 0; k < ch; ++k)
          worst = std::max(worst, std::abs(y[k * len + t] - (yk[t * ch + k] + d[k] * ul[t * ch + k])));
    }
    CheckResult r;
    r.value = worst;
    r.tolerance = tol;
    r.passed = worst <= tol;
    r.detail = std::to_string(systems) + " systems";
    return r;
  });
}

std::vector<CheckResult> structural_checks() {
  auto exact = [](double diff, const std::string& detail) {
    CheckResult r;
    r.value = diff;
    r.tolerance = 0;
    r.passed = diff == 0.0;
    r.detail = detail;
    return r;
  };
  auto max_diff = [](const Tensor& a, const Tensor& b) -> double {
    if (a.shape() != b.shape()) return std::numeric_limits<double>::infinity();
    double m = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
  };
  std::vector<CheckResult> out;
  out.push_back(timed("oracles", "window_partition_merge", [&] {
    double worst = 0;
    for (std::int64_t ws : {1, 2, 4, 8}) {
      const Tensor x = uniform_tensor({2, 3, 16, 24}, static_cast<std::uint64_t>(ws), -1, 1);
      worst = std::max(worst, max_diff(window_merge(window_partition(x, ws), 2, 3, 16, 24, ws), x));
    }
    return exact(worst, "windows 1, 2, 4, 8 on 16x24");
  }));
  out.push_back(timed("oracles", "scan_reorder_inverse", [&] {
    double worst = 0;
    const Tensor x = uniform_tensor({5, 7, 9}, 20, -1, 1);
    for (auto dir : {ScanDirection::hf, ScanDirection::hb, ScanDirection::vf, ScanDirection::vb})
      worst = std::max(worst, max_diff(inverse_reorder(reorder(x, dir), dir, 7, 9), x));
    return exact(worst, "four directions on 7x9");
  }));
  out.push_back(timed("oracles", "zero_weight_mwsa_identity", [&] {
    Rng rng(21);
    MwsaBlock b(8, 4, 2, 2.0, rng);
    b.visit("", Visitor{[](const std::string& n, Tensor& t) {
                          if (n.find("norm") == std::string::npos) t.fill(0.0);
                        },
                        nullptr});
    const Tensor x = uniform_tensor({2, 8, 8, 12}, 22, -1, 1);
    return exact(max_diff(b.forward(x, NormMode::eval), x), "8 channels, window 4, 2 heads");
  }));
  out.push_back(timed("oracles", "zero_head_identity", [&] {
    ModelConfig c;
    c.base_channels = 8;
    c.stages = 2;
    c.blocks_per_stage = 2;
    c.window_base = 4;
    c.window_step = 4;
    Model m(c);
    m.zero_heads();
    double worst = 0;
    for (std::int64_t s : {32, 27}) {
      const Tensor x = uniform_tensor({1, 3, s, s}, 23, 0, 1);
      worst = std::max(worst, max_diff(m.forward(x, NormMode::eval).final(), x));
    }
    return exact(worst, "32x32 and 27x27 inputs");
  }));
  return out;
}

std::vector<CheckResult> metric_checks() {
  std::vector<CheckResult> out;
  out.push_back(timed("oracles", "psnr_offset_0.1", [] {
    const Tensor gt = uniform_tensor({1, 3, 32, 32}, 30, 0, 0.9);
    Tensor p = gt.clone();
    for (auto& v : p.data()) v += 0.1;
    CheckResult r;
    const double db = psnr(p, gt);
    r.value = std::abs(db - 20.0);
    r.tolerance = 0.01;
    r.passed = r.value <= r.tolerance;
    r.detail = std::to_string(db) + " dB";
    return r;
  }));
  out.push_back(timed("oracles", "ssim_identical", [] {
    const Tensor a = uniform_tensor({1, 3, 32, 32}, 31, 0, 1);
    CheckResult r;
    r.value = std::abs(ssim(a, a.clone()) - 1.0);
    r.tolerance = 1e-6;
    r.passed = r.value <= r.tolerance;
    return r;
  }));
  out.push_back(timed("oracles", "loss_zero_on_perfect_prediction", [] {
    const auto t = target_pyramid(uniform_tensor({2, 3, 16, 16}, 32, 0, 1), 3);
    std::vector<Tensor> p;
    for (const auto& x : t) p.push_back(x.clone());
    CheckResult r;
    r.value = total_loss(p, t)[0];
    r.tolerance = 0;
    r.passed = r.value == 0.0;
    return r;
  }));
  return out;
}

std::vector<CheckResult> run_verify(VerifySuite suite, const std::function<void(const CheckResult&)>& on_result) {
  std::vector<CheckResult> all;
  auto add_all = [&](std::vector<CheckResult> rs) {
    for (auto& r : rs) {
      if (on_result) on_result(r);
      all.push_back(std::move(r));
    }
  };
  if (suite != VerifySuite::oracles) add_all(gradient_checks());
  if (suite != VerifySuite::grads) {
    add_all({lti_identity_check()});
    add_all(structural_checks());
    add_all(metric_checks());
  }
  return all;
}

}  // namespace rmx
