#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "helpers.hpp"
#include "rmx/data.hpp"
#include "rmx/image.hpp"

using namespace rmx;
using rmx::test::bit_equal;
using rmx::test::random_tensor;

namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("rmx_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

double mean_of(const Tensor& t) {
  double s = 0;
  for (double v : t.data()) s += v;
  return s / static_cast<double>(t.numel());
}

// channel 0 holds the row index, channel 1 the column index, channel 2 their sum
Tensor coordinate_grid(std::int64_t h, std::int64_t w) {
  Tensor g({3, h, w});
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      g[(0 * h + y) * w + x] = static_cast<double>(y);
      g[(1 * h + y) * w + x] = static_cast<double>(x);
      g[(2 * h + y) * w + x] = static_cast<double>(x + y);
    }
  return g;
}

}  // namespace

TEST_CASE("zero noise is the identity") {
  const Tensor img = random_tensor({3, 16, 12}, 1, 0, 1);
  auto rng = derive_rng(4);
  CHECK(bit_equal(add_noise(img, 0.0, rng), img));
  DegradeRanges r;
  r.noise_sigma_min = r.noise_sigma_max = 0.0;
  CHECK(bit_equal(synth_degrade(img, "noise", 9, r).degraded, img));
}

TEST_CASE("synthetic degradation is deterministic") {
  const Tensor img = procedural_image(32, 32, 5);
  for (const char* tag : {"rain", "noise", "lowlight", "snow", "downsample2", "rain+noise", "lowlight+noise"}) {
    auto a = synth_degrade(img, tag, 77), b = synth_degrade(img, tag, 77), c = synth_degrade(img, tag, 78);
    INFO(tag);
    CHECK(bit_equal(a.degraded, b.degraded));
    CHECK(a.clamped == b.clamped);
    const bool seeded = std::string(tag) != "downsample2";
    if (seeded) CHECK_FALSE(bit_equal(a.degraded, c.degraded));
    CHECK(*std::min_element(a.degraded.data().begin(), a.degraded.data().end()) >= 0.0);
    CHECK(*std::max_element(a.degraded.data().begin(), a.degraded.data().end()) <= 1.0);
  }
  CHECK(bit_equal(procedural_image(20, 24, 3), procedural_image(20, 24, 3)));
}

TEST_CASE("unknown tags are rejected") {
  const Tensor img({3, 8, 8}, 0.5);
  CHECK_THROWS_AS(synth_degrade(img, "fog", 1), Error);
  CHECK_THROWS_AS(synth_degrade(img, "rain+fog", 1), Error);
  CHECK_THROWS_AS(synth_degrade(img, "downsample1", 1), Error);
  CHECK_THROWS_AS(synth_degrade(img, "downsamplex", 1), Error);
  CHECK(check_tag("downsample4") == 4);
  CHECK(check_tag("downsample2+noise") == 2);
}

TEST_CASE("rain field mass") {
  // unit value per covered pixel and wrapped borders: expected mean equals density
  RainParams p;
  p.density = 0.05;
  p.length = 9;
  double total = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    auto rng = derive_rng(s, 1);
    const auto f = rain_field(64, 64, p, rng);
    double m = 0;
    for (double v : f) m += v;
    CHECK(*std::min_element(f.begin(), f.end()) >= 0.0);
    total += m / f.size();
  }
  CHECK(total / 100 == doctest::Approx(p.density).epsilon(0.03));
}

TEST_CASE("rain on a zero image stays within intensity-density bounds") {
  DegradeRanges g;
  const Tensor zero({3, 64, 64}, 0.0);
  double ratio_sum = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto pair = synth_degrade(zero, "rain", s, g);
    double m = mean_of(pair.degraded);
    CHECK(*std::min_element(pair.degraded.data().begin(), pair.degraded.data().end()) >= 0.0);
    // per image: between the weakest and strongest configured streak fields (sampling slack 2x)
    CHECK(m >= 0.5 * g.rain_intensity_min * g.rain_density_min);
    CHECK(m <= 2.0 * g.rain_intensity_max * g.rain_density_max);
    ratio_sum += m / (0.5 * (g.rain_density_min + g.rain_density_max));
  }
  const double ratio = ratio_sum / 100;
  CHECK(ratio >= g.rain_intensity_min);
  CHECK(ratio <= g.rain_intensity_max);
}

TEST_CASE("other degradations") {
  const Tensor img = procedural_image(32, 32, 2);
  const Tensor dark = low_light(img, 2.0, 0.5);
  for (std::int64_t i = 0; i < img.numel(); ++i) CHECK(dark[i] == doctest::Approx(0.5 * img[i] * img[i]));
  auto ds = synth_degrade(img, "downsample2", 1);
  CHECK(ds.degraded.shape() == Shape{3, 16, 16});
  CHECK(ds.degraded[0] == doctest::Approx((img[0] + img[1] + img[32] + img[33]) / 4).epsilon(1e-15));
  auto odd = synth_degrade(procedural_image(33, 35, 3), "downsample4", 1);
  CHECK(odd.degraded.shape() == Shape{3, 8, 8});
  CHECK(odd.clean.shape() == Shape{3, 32, 32});
  auto snow = synth_degrade(img, "snow", 3);
  CHECK(mean_of(snow.degraded) > mean_of(img));
}

TEST_CASE("flip is an involution and crop of full size is identity") {
  const Tensor img = random_tensor({3, 9, 9}, 3, 0, 1);
  CHECK(bit_equal(hflip(hflip(random_tensor({3, 9, 7}, 4, 0, 1))), random_tensor({3, 9, 7}, 4, 0, 1)));
  DegradedPair p{img, img.clone(), "x", 0, 0};
  auto out = augment(p, AugmentOptions{9, false}, 123);
  CHECK(bit_equal(out.degraded, img));
  CHECK(bit_equal(augment(p, AugmentOptions{0, false}, 5).clean, img));
}

TEST_CASE("augment applies one transform to both members") {
  const Tensor g = coordinate_grid(40, 40);
  DegradedPair p{g, g.clone(), "grid", 0, 0};
  int flips = 0;
  for (std::uint64_t s = 0; s < 40; ++s) {
    auto out = augment(p, AugmentOptions{16, true}, s);
    CHECK(bit_equal(out.degraded, out.clean));
    CHECK(out.clean.shape() == Shape{3, 16, 16});
    // column coordinate decreasing along x means the pair was flipped
    flips += out.clean[16 * 16 + 1] < out.clean[16 * 16];
    CHECK(bit_equal(augment(p, AugmentOptions{16, true}, s).clean, out.clean));
  }
  CHECK(flips > 5);
  CHECK(flips < 35);

  // downsampled pairs: the degraded crop covers the same area
  const Tensor small = area_downsample(g, 2);
  DegradedPair sr{small, g, "downsample2", 0, 0};
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto out = augment(sr, AugmentOptions{16, true}, s);
    CHECK(out.degraded.shape() == Shape{3, 8, 8});
    CHECK(bit_equal(area_downsample(out.clean, 2), out.degraded));
  }
}

TEST_CASE("augment errors name sizes") {
  DegradedPair p{Tensor({3, 8, 8}), Tensor({3, 8, 8}), "x", 0, 0};
  try {
    augment(p, AugmentOptions{16, false}, 0);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("16") != std::string::npos);
    CHECK(std::string(e.what()).find("8x8") != std::string::npos);
  }
}

TEST_CASE("png round trip") {
  const auto dir = scratch("png");
  const Tensor img = random_tensor({3, 13, 17}, 8, 0, 1);
  const auto path = (dir / "a.png").string();
  save_image(img, path);
  const Tensor back = load_image(path);
  REQUIRE(back.shape() == img.shape());
  double worst = 0;
  for (std::int64_t i = 0; i < img.numel(); ++i) worst = std::max(worst, std::abs(back[i] - img[i]));
  CHECK(worst <= 0.5 / 255 + 1e-12);
  // exact codes survive unchanged
  save_image(back, path);
  CHECK(bit_equal(load_image(path), back));
  CHECK(quantize8(0.5 / 255) == 1);
  CHECK(quantize8(1.49999 / 255) == 1);
  CHECK(quantize8(-0.2) == 0);
  CHECK(quantize8(1.7) == 255);
}

TEST_CASE("png errors") {
  const auto dir = scratch("pngerr");
  CHECK_THROWS_AS(load_image((dir / "missing.png").string()), IoError);
  std::ofstream((dir / "bad.png").string()) << "not a png";
  try {
    load_image((dir / "bad.png").string());
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("bad.png") != std::string::npos);
  }
  CHECK_THROWS_AS(save_image(Tensor({3, 4, 4}), (dir / "no/such/dir.png").string()), IoError);
}

TEST_CASE("directory dataset layout and manifest") {
  const auto dir = scratch("dataset");
  SyntheticDataset synth("rain", 4, 16, 3);
  write_dataset(synth, dir.string());
  DirectoryDataset all(dir.string());
  CHECK(all.size() == 4);
  CHECK(all.name(0) == "synth_000000.png");
  auto p = all.get(2);
  const auto ref = synth.get(2);
  for (std::int64_t i = 0; i < p.clean.numel(); ++i) CHECK(std::abs(p.clean[i] - ref.clean[i]) <= 0.5 / 255 + 1e-12);

  std::ofstream(dir / "subset.txt") << "# subset\ndegraded/synth_000003.png\nsynth_000001.png\n";
  DirectoryDataset sub(dir.string(), (dir / "subset.txt").string());
  CHECK(sub.size() == 2);
  CHECK(sub.name(0) == "synth_000003.png");

  fs::remove(dir / "clean" / "synth_000001.png");
  CHECK_THROWS_AS(DirectoryDataset(dir.string()), IoError);
  CHECK_THROWS_AS(DirectoryDataset((dir / "nothing").string()), IoError);
}

TEST_CASE("synthetic dataset spec and reproducibility") {
  auto a = open_dataset("synth:rain:5:24:11");
  auto b = open_dataset("synth:rain:5:24:11");
  REQUIRE(a->size() == 5);
  for (std::size_t i = 0; i < 5; ++i) CHECK(bit_equal(a->get(i).degraded, b->get(i).degraded));
  // a held-out split starting at index 5 does not repeat training images
  auto held = open_dataset("synth:rain:2:24:11:5");
  CHECK_FALSE(bit_equal(held->get(0).clean, a->get(0).clean));
  auto tail = open_dataset("synth:rain:10:24:11");
  CHECK(bit_equal(held->get(1).clean, tail->get(6).clean));
  CHECK_THROWS_AS(open_dataset("synth:rain:x:24"), Error);
  CHECK_THROWS_AS(open_dataset("synth:rain:5"), Error);
  auto [deg, cln] = stack_pairs({a->get(0), a->get(1)});
  CHECK(deg.shape() == Shape{2, 3, 24, 24});
}

TEST_CASE("derived streams are independent of request order") {
  auto a = derive_rng(1, 2, 3);
  auto x = derive_rng(1, 2, 4);
  auto b = derive_rng(1, 2, 3);
  CHECK(a() == b());
  CHECK(x() != derive_rng(1, 2, 3)());
}
