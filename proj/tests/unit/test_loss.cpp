#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "helpers.hpp"
#include "oracles.hpp"
#include "rmx/gradcheck.hpp"
#include "rmx/loss.hpp"
#include "rmx/ops.hpp"

using namespace rmx;
using rmx::test::random_tensor;

namespace {

oracle::Vec vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("target pyramid extents") {
  auto t = target_pyramid(random_tensor({1, 3, 50, 50}, 1, 0, 1), 3);
  REQUIRE(t.size() == 3);
  CHECK(t[1].shape() == Shape{1, 3, 25, 25});
  CHECK(t[2].shape() == Shape{1, 3, 12, 12});
  Tensor ones({1, 1, 4, 4}, 1.0);
  ones[0] = 5.0;
  CHECK(target_pyramid(ones, 2)[1][0] == doctest::Approx(2.0).epsilon(1e-15));
  CHECK_THROWS_AS(target_pyramid(Tensor({1, 3, 2, 2}), 3), ShapeError);
}

TEST_CASE("perfect predictions give zero loss") {
  const Tensor clean = random_tensor({2, 3, 16, 16}, 2, 0, 1);
  auto t = target_pyramid(clean, 3);
  std::vector<Tensor> p;
  for (auto& x : t) p.push_back(x.clone());
  CHECK(total_loss(p, t)[0] == 0.0);
  CHECK(sr_loss(clean, clean.clone())[0] == 0.0);
}

TEST_CASE("constant offsets") {
  const double c = 0.37;
  const Tensor target = random_tensor({1, 3, 8, 8}, 3, 0, 1);
  Tensor pred = target.clone();
  for (auto& v : pred.data()) v += c;
  CHECK(total_loss({pred}, {target}, LossConfig{0.0})[0] == doctest::Approx(c).epsilon(1e-12));

  Tensor half = target.clone();
  for (auto& v : half.data()) v += 0.5;
  CHECK(sr_loss(half, target)[0] == doctest::Approx(0.5).epsilon(1e-12));

  // P = c, I = 0 on one 6 x 10 plane: only the DC bin is non-zero
  const std::int64_t h = 6, w = 10;
  Tensor p({1, 1, h, w}, c), z({1, 1, h, w}, 0.0);
  const double lambda = 0.1, n = static_cast<double>(h * w);
  const double freq = total_loss({p}, {z}, LossConfig{lambda})[0] - total_loss({p}, {z}, LossConfig{0.0})[0];
  CHECK(freq == doctest::Approx(lambda * c * h * w / n).epsilon(1e-12));
}

TEST_CASE("frequency term matches a direct DFT") {
  const Tensor p = random_tensor({1, 3, 6, 10}, 4, 0, 1), t = random_tensor({1, 3, 6, 10}, 5, 0, 1);
  oracle::Vec d(static_cast<std::size_t>(p.numel())), re, im;
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = p[static_cast<std::int64_t>(i)] - t[static_cast<std::int64_t>(i)];
  oracle::direct_dft2(d, 3, 6, 10, re, im);
  double l1 = 0, fr = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    l1 += std::abs(d[i]);
    fr += std::abs(re[i]) + std::abs(im[i]);
  }
  const double expect = (l1 + 0.25 * fr) / static_cast<double>(d.size());
  CHECK(total_loss({p}, {t}, LossConfig{0.25})[0] == doctest::Approx(expect).epsilon(1e-10));
}

TEST_CASE("sr loss matches elementwise recomputation") {
  const Tensor p = random_tensor({2, 3, 7, 9}, 6, 0, 1), t = random_tensor({2, 3, 7, 9}, 7, 0, 1);
  CHECK(std::abs(sr_loss(p, t)[0] - oracle::mean_abs_diff(vec(p), vec(t))) < 1e-9);
}

TEST_CASE("loss shape errors") {
  const Tensor a({1, 3, 8, 8}), b({1, 3, 8, 6});
  CHECK_THROWS_AS(total_loss({a}, {b}), ShapeError);
  CHECK_THROWS_AS(total_loss({a}, {a, a}), ShapeError);
  CHECK_THROWS_AS(sr_loss(a, b), ShapeError);
}

TEST_CASE("total loss is positive away from the target") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Tensor p = random_tensor({1, 3, 8, 8}, 100 + s, 0, 1);
    Tensor q = p.clone();
    q[static_cast<std::int64_t>(s % 192)] += 1e-6;
    CHECK(total_loss({q}, {p})[0] > 0.0);
  }
}

TEST_CASE("total loss gradient") {
  const Tensor clean = random_tensor({1, 3, 8, 8}, 8, 0, 1);
  const auto targets = target_pyramid(clean, 3);
  const Tensor p1 = random_tensor({1, 3, 4, 4}, 9, 0, 1), p2 = random_tensor({1, 3, 2, 2}, 10, 0, 1);
  GradCheckOptions opt;
  opt.extra = {p1.clone().set_requires_grad(true), p2.clone().set_requires_grad(true)};
  Tensor e1 = opt.extra[0], e2 = opt.extra[1];
  auto rep = grad_check([&](const Tensor& p0) { return total_loss({p0, e1, e2}, targets); },
                        random_tensor({1, 3, 8, 8}, 11, 0, 1), 1e-4, opt);
  INFO(rep.worst_location << " " << rep.max_rel_error);
  CHECK(rep.passed);
}

TEST_CASE("psnr anchors") {
  const Tensor gt = random_tensor({1, 3, 16, 16}, 12, 0, 0.9);
  Tensor pred = gt.clone();
  for (auto& v : pred.data()) v += 0.1;
  CHECK(std::abs(psnr(pred, gt) - 20.0) < 1e-9);
  CHECK(std::isinf(psnr(gt, gt.clone())));
  CHECK(psnr(gt, gt.clone()) > 0);

  // identical pixel permutation of both images
  const Tensor a = random_tensor({1, 3, 8, 8}, 13, 0, 1), b = random_tensor({1, 3, 8, 8}, 14, 0, 1);
  std::vector<std::int64_t> perm(192);
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  std::swap(perm[3], perm[70]);
  Tensor pa(a.shape()), pb(b.shape());
  for (std::int64_t i = 0; i < 192; ++i) {
    pa[i] = a[perm[static_cast<std::size_t>(i)]];
    pb[i] = b[perm[static_cast<std::size_t>(i)]];
  }
  CHECK(psnr(pa, pb) == doctest::Approx(psnr(a, b)).epsilon(1e-12));
}

TEST_CASE("ssim anchors and properties") {
  const Tensor a = random_tensor({1, 3, 24, 20}, 15, 0, 1), b = random_tensor({1, 3, 24, 20}, 16, 0, 1);
  CHECK(std::abs(ssim(a, a.clone()) - 1.0) < 1e-6);
  CHECK(std::abs(ssim(a, b) - ssim(b, a)) < 1e-9);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Tensor x = random_tensor({1, 3, 16, 16}, 200 + s, 0, 1), y = random_tensor({1, 3, 16, 16}, 300 + s, 0, 1);
    const double v = ssim(x, y);
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
    // non-negative and positively related: luminance and structure terms both >= 0
    Tensor near = x.clone();
    for (std::int64_t i = 0; i < near.numel(); ++i) near[i] = std::clamp(x[i] + 0.2 * (y[i] - 0.5), 0.0, 1.0);
    const double r = ssim(x, near);
    CHECK(r >= 0.0);
    CHECK(r <= 1.0);
    Tensor neg = y.clone();
    for (auto& e : neg.data()) e = 1.0 - e;
    const double u = ssim(x, neg);
    CHECK(u >= -1.0);
    CHECK(u <= 1.0);
  }
  Tensor blurred = a.clone();
  for (auto& e : blurred.data()) e = 0.8 * e + 0.1;
  CHECK(ssim(a, blurred) < 1.0);
}

TEST_CASE("ssim matches the direct window oracle") {
  const Tensor a = random_tensor({1, 2, 20, 17}, 17, 0, 1), b = random_tensor({1, 2, 20, 17}, 18, 0, 1);
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double expect = 0.0;
  for (std::int64_t p = 0; p < 2; ++p) {
    oracle::Vec x(a.ptr() + p * 340, a.ptr() + (p + 1) * 340), y(b.ptr() + p * 340, b.ptr() + (p + 1) * 340);
    expect += oracle::direct_ssim(x, y, 20, 17, 11, 1.5, c1, c2) / 2;
  }
  CHECK(std::abs(ssim(a, b) - expect) < 1e-9);

  // smaller than the window: largest odd window that fits
  const Tensor s1 = random_tensor({1, 1, 8, 9}, 19, 0, 1), s2 = random_tensor({1, 1, 8, 9}, 20, 0, 1);
  const double small = oracle::direct_ssim(vec(s1), vec(s2), 8, 9, 7, 1.5, c1, c2);
  CHECK(std::abs(ssim(s1, s2) - small) < 1e-9);
}

TEST_CASE("ycbcr conversion") {
  Tensor white({1, 3, 2, 2}, 1.0);
  auto y = rgb_to_ycbcr(white);
  for (std::int64_t i = 0; i < 4; ++i) {
    CHECK(std::abs(y[i] - 1.0) < 1e-15);
    CHECK(std::abs(y[4 + i] - 0.5) < 1e-15);
    CHECK(std::abs(y[8 + i] - 0.5) < 1e-15);
  }
  Tensor black({3, 2, 2}, 0.0);
  auto k = rgb_to_ycbcr(black);
  CHECK(k[0] == 0.0);
  CHECK(k[4] == 0.5);
  CHECK(to_metric_space(random_tensor({2, 3, 5, 5}, 1, 0, 1), ColorSpace::y).shape() == Shape{2, 1, 5, 5});
  CHECK_THROWS_AS(rgb_to_ycbcr(Tensor({1, 4, 2, 2})), ShapeError);
}
