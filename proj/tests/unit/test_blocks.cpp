#include <cmath>
#include <map>

#include "doctest.h"
#include "helpers.hpp"
#include "oracles.hpp"
#include "rmx/blocks.hpp"
#include "rmx/gradcheck.hpp"
#include "rmx/ops.hpp"

using namespace rmx;
using rmx::test::bit_equal;
using rmx::test::max_abs_diff;
using rmx::test::random_tensor;

namespace {

std::map<std::string, Tensor> params_of(Block& b) {
  std::map<std::string, Tensor> out;
  b.visit("", Visitor{[&](const std::string& n, Tensor& t) { out.emplace(n, t); }, nullptr});
  return out;
}

std::vector<Tensor> leaves(Block& b) {
  std::vector<Tensor> out;
  for (auto& [n, t] : params_of(b)) out.push_back(t);
  return out;
}

// [N,C,H,W] -> [N,C,W,H]
Tensor transpose_hw(const Tensor& x) {
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out({n, c, w, h});
  for (std::int64_t p = 0; p < n * c; ++p)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t xx = 0; xx < w; ++xx) out[(p * w + xx) * h + y] = x[(p * h + y) * w + xx];
  return out;
}

GradCheckReport block_grad(Block& b, const Tensor& x, std::int64_t max_coords = 0) {
  GradCheckOptions opt;
  opt.abs_floor = 1e-6;
  opt.max_coords = max_coords;
  opt.seed = 3;
  opt.extra = leaves(b);
  Tensor wts = random_tensor(x.shape(), 99, 0.5, 1.5);
  return grad_check([&](const Tensor& t) { return mul(b.forward(t, NormMode::eval), wts); }, x, 1e-3, opt);
}

}  // namespace

// --- RDCNN -------------------------------------------------------------------

TEST_CASE("rdcnn zero-weight collapse equals a scalar GELU table") {
  Rng rng(1);
  RdcnnBlock b(4, rng);
  for (auto& [n, t] : params_of(b))
    if (n.find("bn") == std::string::npos) t.fill(0.0);
  const double xs[] = {-3, -1.5, -0.5, 0, 0.25, 1, 2, 3.5};
  const double table[] = {-0.0036373920817729943, -0.10042842301976707, -0.15428599017485606, 0.0,
                          0.149675350701685,      0.8411919906082768,   1.954597694087775,    3.499383802344626};
  Tensor x({1, 4, 1, 2});
  for (int i = 0; i < 8; ++i) x[i] = xs[i];
  Tensor y = b.forward(x, NormMode::eval);
  for (int i = 0; i < 8; ++i) CHECK(y[i] == doctest::Approx(table[i]).epsilon(1e-14));
}

TEST_CASE("rdcnn zero input with zero biases gives zero") {
  Rng rng(2);
  RdcnnBlock b(3, rng);
  b.conv3.bias->fill(0.0);
  b.pw.bias->fill(0.0);
  Tensor y = b.forward(Tensor({2, 3, 5, 4}, 0.0), NormMode::eval);
  for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("rdcnn preserves shape and matches the closed-form parameter count") {
  Rng rng(3);
  for (std::int64_t c : {1, 4, 32, 64}) {
    RdcnnBlock b(c, rng);
    auto n = count_params([&](const Visitor& v) { b.visit("", v); });
    CHECK(n == RdcnnBlock::closed_form_params(c));
    CHECK(n == 9 * c * c + c + 9 * c + c * c + c + 4 * c);
  }
  CHECK(RdcnnBlock::closed_form_params(32) == 10720);
  RdcnnBlock b(2, rng);
  for (auto [h, w] : {std::pair{1, 1}, std::pair{1, 7}, std::pair{5, 3}, std::pair{9, 9}})
    CHECK(b.forward(random_tensor({1, 2, h, w}, 4), NormMode::eval).shape() == Shape{1, 2, h, w});
  CHECK_THROWS_AS(b.forward(random_tensor({1, 3, 4, 4}, 4), NormMode::eval), ShapeError);
}

TEST_CASE("rdcnn receptive field is 5x5") {
  Rng rng(5);
  RdcnnBlock b(3, rng);
  Tensor x = random_tensor({1, 3, 11, 11}, 6);
  Tensor y0 = b.forward(x, NormMode::eval);
  Tensor xp = x.clone();
  xp[(1 * 11 + 5) * 11 + 5] += 1.0;
  Tensor y1 = b.forward(xp, NormMode::eval);
  bool inside_changed = false;
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t yy = 0; yy < 11; ++yy)
      for (std::int64_t xx = 0; xx < 11; ++xx) {
        const auto i = (c * 11 + yy) * 11 + xx;
        const auto cheb = std::max(std::abs(yy - 5), std::abs(xx - 5));
        if (cheb > 2) CHECK(y0[i] == y1[i]);
        if (cheb == 2 && y0[i] != y1[i]) inside_changed = true;
      }
  CHECK(inside_changed);
}

TEST_CASE("rdcnn gradient check") {
  Rng rng(7);
  RdcnnBlock b(8, rng);
  b.forward(random_tensor({2, 8, 8, 8}, 1), NormMode::train);  // populate running stats
  auto rep = block_grad(b, random_tensor({1, 8, 8, 8}, 8), 200);
  INFO(rep.max_rel_error << " at " << rep.worst_location << " " << rep.failure);
  CHECK(rep.passed);
}

// --- EMVM --------------------------------------------------------------------

TEST_CASE("emvm zero-weight collapse is the identity") {
  Rng rng(11);
  EmvmBlock b(4, {}, rng);
  for (auto& [n, t] : params_of(b)) {
    const bool zero = (n.find("scan") != std::string::npos &&
                       (n.find("weight") != std::string::npos || n.find("w_") != std::string::npos)) ||
                      n.find("mlp") != std::string::npos;
    if (zero) t.fill(0.0);
  }
  Tensor x = random_tensor({2, 4, 6, 8}, 12);
  CHECK(bit_equal(b.forward(x, NormMode::eval), x));
}

TEST_CASE("emvm zero input returns the MLP bias response") {
  Rng rng(13);
  EmvmBlock b(4, {}, rng);
  Tensor y = b.forward(Tensor({1, 4, 4, 4}, 0.0), NormMode::eval);
  Tensor bias_resp = b.mlp.forward(Tensor({1, 4, 1, 1}, 0.0));
  CHECK(y.all_finite());
  for (std::int64_t c = 0; c < 4; ++c)
    for (std::int64_t p = 0; p < 16; ++p) CHECK(y[c * 16 + p] == bias_resp[c]);
  for (auto* fc : {&b.mlp.fc1, &b.mlp.fc2}) fc->bias->fill(0.0);
  Tensor y0 = b.forward(Tensor({1, 4, 4, 4}, 0.0), NormMode::eval);
  for (double v : y0.data()) CHECK(v == 0.0);
}

TEST_CASE("emvm preserves shape and rejects odd extents") {
  Rng rng(14);
  EmvmBlock b(4, {}, rng);
  for (auto [h, w] : {std::pair{4, 4}, std::pair{6, 10}, std::pair{16, 4}, std::pair{64, 64}, std::pair{8, 34}})
    CHECK(b.forward(random_tensor({1, 4, h, w}, 15), NormMode::eval).shape() == Shape{1, 4, h, w});
  try {
    b.forward(random_tensor({1, 4, 5, 4}, 1), NormMode::eval);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("divisible by 2") != std::string::npos);
  }
}

TEST_CASE("emvm direction symmetry under transposition") {
  Rng rng(16);
  EmvmOptions opt;
  opt.no_dsm = true;
  EmvmBlock a(4, opt, rng), t(4, opt, rng);
  auto pa = params_of(a), pt = params_of(t);
  const std::map<std::string, std::string> swap{{"scan_hf", "scan_vf"}, {"scan_vf", "scan_hf"},
                                                {"scan_hb", "scan_vb"}, {"scan_vb", "scan_hb"}};
  for (auto& [name, tensor] : pt) {
    std::string src = name;
    for (auto& [from, to] : swap)
      if (name.rfind(from, 0) == 0) src = to + name.substr(from.size());
    tensor.assign(pa.at(src));
  }
  Tensor x = random_tensor({1, 4, 6, 10}, 17);
  Tensor ya = a.forward(x, NormMode::eval);
  Tensor yt = t.forward(transpose_hw(x), NormMode::eval);
  CHECK(max_abs_diff(transpose_hw(yt).data(), ya.data()) < 1e-6);
}

TEST_CASE("emvm half-resolution and full-resolution scans agree on constant input") {
  Rng rng(18);
  EmvmBlock a(4, {}, rng);
  Tensor x({1, 4, 8, 8}, 0.3);
  Tensor y_dsm = a.forward(x, NormMode::eval);
  a.set_no_dsm(true);
  Tensor y_full = a.forward(x, NormMode::eval);
  CHECK(max_abs_diff(y_dsm.data(), y_full.data()) < 1e-6);
}

TEST_CASE("emvm downsampled scans cost less than full resolution") {
  Rng rng(19);
  EmvmOptions o;
  EmvmBlock a(32, o, rng);
  o.no_dsm = true;
  EmvmBlock b(32, o, rng);
  CostReport ra, rb;
  a.account("", 64, 64, ra);
  b.account("", 64, 64, rb);
  CHECK(ra.total_flops() < rb.total_flops());
  CHECK(ra.total_params() == rb.total_params());
  CHECK(ra.total_params() == count_params([&](const Visitor& v) { a.visit("", v); }));
  o.share_scan_params = true;
  EmvmBlock s(32, o, rng);
  CostReport rs;
  s.account("", 64, 64, rs);
  CHECK(rs.total_params() == count_params([&](const Visitor& v) { s.visit("", v); }));
  CHECK(rs.total_params() < ra.total_params());
}

TEST_CASE("emvm gradient checks") {
  Rng rng(20);
  SUBCASE("1x4x8x8") {
    EmvmBlock b(4, {}, rng);
    auto rep = block_grad(b, random_tensor({1, 4, 8, 8}, 21), 150);
    INFO(rep.max_rel_error << " at " << rep.worst_location << " " << rep.failure);
    CHECK(rep.passed);
  }
  SUBCASE("1x8x8x8") {
    EmvmBlock b(8, {}, rng);
    auto rep = block_grad(b, random_tensor({1, 8, 8, 8}, 22), 150);
    INFO(rep.max_rel_error << " at " << rep.worst_location << " " << rep.failure);
    CHECK(rep.passed);
  }
}

// --- MWSA --------------------------------------------------------------------

TEST_CASE("window partition tiles and merges exactly") {
  Tensor x({1, 1, 4, 4});
  for (int i = 0; i < 16; ++i) x[i] = i;
  Tensor w = window_partition(x, 2);
  CHECK(w.shape() == Shape{4, 4, 1});
  const std::vector<double> expect{0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15};
  CHECK(std::vector<double>(w.data().begin(), w.data().end()) == expect);

  Tensor one = window_partition(x, 4);
  CHECK(one.shape() == Shape{1, 16, 1});
  for (int i = 0; i < 16; ++i) CHECK(one[i] == i);

  for (auto [h, wd, ws] : {std::tuple{16, 16, 8}, std::tuple{16, 16, 4}, std::tuple{12, 8, 4}, std::tuple{6, 9, 3},
                           std::tuple{5, 5, 1}}) {
    Tensor r = random_tensor({2, 3, h, wd}, static_cast<std::uint64_t>(h + wd + ws));
    CHECK(bit_equal(window_merge(window_partition(r, ws), 2, 3, h, wd, ws), r));
  }
  try {
    window_partition(random_tensor({1, 1, 10, 12}, 1), 8);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("pad by 6x4") != std::string::npos);
  }
}

TEST_CASE("window attention special cases") {
  Rng rng(30);
  MwsaBlock b(4, 8, 2, 2.0, rng);
  Tensor single = random_tensor({3, 1, 4}, 31);
  Tensor vrow = linear(single, b.wv.weight, b.wv.bias);
  CHECK(max_abs_diff(b.window_attention(single).data(), linear(vrow, b.wo.weight, b.wo.bias).data()) < 1e-12);

  b.wq.weight.fill(0.0);
  b.wq.bias->fill(0.0);
  Tensor win = random_tensor({2, 5, 4}, 32);
  Tensor v = linear(win, b.wv.weight, b.wv.bias);
  Tensor mean_v({2, 5, 4});
  for (std::int64_t w = 0; w < 2; ++w)
    for (std::int64_t c = 0; c < 4; ++c) {
      double m = 0.0;
      for (std::int64_t t = 0; t < 5; ++t) m += v[(w * 5 + t) * 4 + c] / 5.0;
      for (std::int64_t t = 0; t < 5; ++t) mean_v[(w * 5 + t) * 4 + c] = m;
    }
  CHECK(max_abs_diff(b.window_attention(win).data(), linear(mean_v, b.wo.weight, b.wo.bias).data()) < 1e-12);
}

TEST_CASE("attention matches a direct-summation oracle and rows sum to one") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    Tensor q = random_tensor({3, 16, 8}, seed, -2, 2), k = random_tensor({3, 16, 8}, seed + 10, -2, 2);
    Tensor v = random_tensor({3, 16, 8}, seed + 20);
    Tensor out = attention_core(q, k, v, 2);
    auto vec = [](const Tensor& t) { return std::vector<double>(t.data().begin(), t.data().end()); };
    CHECK(max_abs_diff(out.data(), oracle::naive_attention(vec(q), vec(k), vec(v), 3, 16, 8, 2)) < 1e-9);
    Tensor ones = attention_core(q, k, Tensor({3, 16, 8}, 1.0), 2);
    for (double x : ones.data()) CHECK(std::abs(x - 1.0) < 1e-9);
  }
  CHECK_THROWS_AS(attention_core(Tensor({1, 4, 6}), Tensor({1, 4, 6}), Tensor({1, 4, 6}), 4), ShapeError);
}

TEST_CASE("zero-weight mwsa is the identity") {
  Rng rng(33);
  MwsaBlock b(8, 4, 2, 2.0, rng);
  for (auto& [n, t] : params_of(b))
    if (n.find("norm") == std::string::npos) t.fill(0.0);
  Tensor x = random_tensor({2, 8, 8, 12}, 34);
  CHECK(bit_equal(b.forward(x, NormMode::eval), x));
}

TEST_CASE("mwsa has no cross-window interaction") {
  Rng rng(35);
  MwsaBlock b(4, 8, 1, 2.0, rng);
  Tensor x = random_tensor({1, 4, 16, 16}, 36);
  Tensor y = b.forward(x, NormMode::eval);

  // permuting whole windows commutes with the block
  auto swap_windows = [](const Tensor& t) {
    Tensor out = t.clone();
    for (std::int64_t c = 0; c < 4; ++c)
      for (std::int64_t yy = 0; yy < 8; ++yy)
        for (std::int64_t xx = 0; xx < 8; ++xx) {
          const auto a = (c * 16 + yy) * 16 + xx, d = (c * 16 + yy + 8) * 16 + xx + 8;
          std::swap(out[a], out[d]);
        }
    return out;
  };
  CHECK(bit_equal(b.forward(swap_windows(x), NormMode::eval), swap_windows(y)));

  Tensor wins = window_partition(x, 8);
  Tensor base = b.window_attention(wins);
  Tensor pert = wins.clone();
  for (std::int64_t i = 0; i < 64 * 4; ++i) pert[i] += 0.5;
  Tensor moved = b.window_attention(pert);
  bool first_changed = false;
  for (std::int64_t i = 0; i < base.numel(); ++i) {
    if (i < 64 * 4)
      first_changed = first_changed || base[i] != moved[i];
    else
      CHECK(base[i] == moved[i]);
  }
  CHECK(first_changed);
}

TEST_CASE("window schedule and clamp") {
  CHECK(window_schedule(0) == 8);
  CHECK(window_schedule(1) == 16);
  CHECK(window_schedule(2) == 24);
  CHECK(clamp_window(16, 8, 8) == 8);
  CHECK(clamp_window(8, 16, 16) == 8);
  CHECK_THROWS_AS(window_schedule(-1), Error);
  CHECK(default_heads(32) == 1);
  CHECK(default_heads(128) == 4);
  CHECK(default_heads(8) == 1);
  Rng rng(40);
  MwsaBlock b(4, 16, 1, 2.0, rng);
  CHECK(b.forward(random_tensor({1, 4, 8, 8}, 1), NormMode::eval).shape() == Shape{1, 4, 8, 8});
  CHECK_THROWS_AS(MwsaBlock(6, 8, 4, 2.0, rng), ShapeError);
}

TEST_CASE("mwsa gradient checks") {
  Rng rng(41);
  SUBCASE("1x4x16x16 window 8") {
    MwsaBlock b(4, 8, 1, 2.0, rng);
    auto rep = block_grad(b, random_tensor({1, 4, 16, 16}, 42), 150);
    INFO(rep.max_rel_error << " at " << rep.worst_location << " " << rep.failure);
    CHECK(rep.passed);
  }
  SUBCASE("1x8x16x16 two heads") {
    MwsaBlock b(8, 8, 2, 2.0, rng);
    auto rep = block_grad(b, random_tensor({1, 8, 16, 16}, 43), 150);
    INFO(rep.max_rel_error << " at " << rep.worst_location << " " << rep.failure);
    CHECK(rep.passed);
  }
}
