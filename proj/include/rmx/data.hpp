#pragma once

// Paired degraded/clean images: synthetic degradations, augmentation, and
// directory or procedural datasets.

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "rmx/tensor.hpp"

namespace rmx {

/// Independent stream for (seed, a, b): splitmix64 mixing, so stream identity
/// never depends on the order in which streams are requested.
std::mt19937_64 derive_rng(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0);

struct DegradedPair {
  Tensor degraded;  // [3, H, W], or [3, H/r, W/r] after downsampling
  Tensor clean;     // [3, H, W]
  std::string tag;
  std::uint64_t seed = 0;
  /// Pixel values pushed back into [0,1] by the degradation.
  std::int64_t clamped = 0;
};

struct RainParams {
  double density = 0.04;  // expected fraction of pixels covered by streaks
  double intensity = 0.4;
  double angle_deg = 90.0;  // 90 = vertical
  int length = 10;
};
struct SnowParams {
  double density = 0.004;  // flakes per pixel
  double radius_min = 0.8, radius_max = 2.2;
  double brightness = 0.9;
};

/// Sampling ranges used by synth_degrade.
struct DegradeRanges {
  double rain_density_min = 0.02, rain_density_max = 0.06;
  double rain_intensity_min = 0.2, rain_intensity_max = 0.6;
  double rain_angle_min = 70, rain_angle_max = 110;
  int rain_length_min = 6, rain_length_max = 14;
  double noise_sigma_min = 0.02, noise_sigma_max = 0.1;
  double gamma_min = 2.0, gamma_max = 3.0;
  double gain_min = 0.3, gain_max = 0.6;
  double snow_density_min = 0.002, snow_density_max = 0.006;
};

/// Unclamped streak field, >= 0: rasterized streaks with unit value per covered
/// pixel (overlaps add), wrapped at the borders. [H, W].
std::vector<double> rain_field(std::int64_t h, std::int64_t w, const RainParams& p, std::mt19937_64& rng);

// Single degradations of a [3, H, W] image; `clamped` accumulates clipped values.
Tensor add_rain(const Tensor& img, const RainParams& p, std::mt19937_64& rng, std::int64_t* clamped = nullptr);
Tensor add_noise(const Tensor& img, double sigma, std::mt19937_64& rng, std::int64_t* clamped = nullptr);
Tensor low_light(const Tensor& img, double gamma, double gain);
Tensor add_snow(const Tensor& img, const SnowParams& p, std::mt19937_64& rng, std::int64_t* clamped = nullptr);
/// r x r area average; extents are first cropped to multiples of r.
Tensor area_downsample(const Tensor& img, std::int64_t r);

/// Tags: rain, noise, lowlight, snow, downsampleR (R >= 2), or a '+'-joined
/// composite applied left to right (e.g. "rain+noise"). Throws Error for unknown tags.
DegradedPair synth_degrade(const Tensor& clean, const std::string& tag, std::uint64_t seed,
                           const DegradeRanges& ranges = {});
/// Validates a tag without generating anything; returns the downsampling factor (1 if none).
std::int64_t check_tag(const std::string& tag);

/// Smooth procedural clean image in [0,1]: gradients, shapes and texture.
Tensor procedural_image(std::int64_t h, std::int64_t w, std::uint64_t seed);

struct AugmentOptions {
  std::int64_t crop = 0;  // 0 = keep full size
  bool flip = true;
};

Tensor hflip(const Tensor& img);
Tensor crop_at(const Tensor& img, std::int64_t top, std::int64_t left, std::int64_t h, std::int64_t w);
/// One random crop window and one flip decision, applied to both members
/// (crop coordinates scaled for downsampled pairs).
DegradedPair augment(const DegradedPair& pair, const AugmentOptions& opt, std::uint64_t seed);

class Dataset {
 public:
  virtual ~Dataset() = default;
  virtual std::size_t size() const = 0;
  virtual DegradedPair get(std::size_t index) const = 0;
  virtual std::string name(std::size_t index) const = 0;
};

/// root/degraded/NAME.png paired with root/clean/NAME.png. A manifest (one
/// relative path per line, '#' comments) restricts the set; `manifest` empty
/// means root/manifest.txt when present, else every PNG in root/degraded.
class DirectoryDataset final : public Dataset {
 public:
  explicit DirectoryDataset(std::string root, std::string manifest = "");
  std::size_t size() const override { return names_.size(); }
  DegradedPair get(std::size_t index) const override;
  std::string name(std::size_t index) const override { return names_.at(index); }

 private:
  std::string root_;
  std::vector<std::string> names_;
};

/// Procedural clean images degraded with `tag`; pair i depends only on (seed, i).
class SyntheticDataset final : public Dataset {
 public:
  SyntheticDataset(std::string tag, std::size_t count, std::int64_t size, std::uint64_t seed,
                   std::size_t first_index = 0);
  std::size_t size() const override { return count_; }
  DegradedPair get(std::size_t index) const override;
  std::string name(std::size_t index) const override;

 private:
  std::string tag_;
  std::size_t count_;
  std::int64_t size_;
  std::uint64_t seed_;
  std::size_t first_;
};

/// "synth:TAG:COUNT:SIZE[:SEED[:FIRST]]" or a directory path.
std::unique_ptr<Dataset> open_dataset(const std::string& spec, const std::string& manifest = "");

/// Writes every pair as root/degraded/NAME and root/clean/NAME.
void write_dataset(const Dataset& data, const std::string& root);

/// Stacks pairs into [B, 3, h, w] degraded and clean batches (all pairs must share extents).
std::pair<Tensor, Tensor> stack_pairs(const std::vector<DegradedPair>& pairs);

}  // namespace rmx
