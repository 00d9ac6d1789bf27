#include "rmx/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "rmx/image.hpp"

namespace fs = std::filesystem;

namespace rmx {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

void require_image(const Tensor& img, const char* op) {
  if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError(std::string(op) + ": expected [3, H, W], got " + shape_str(img.shape()));
}

double clamp01(double v, std::int64_t* clamped) {
  if (v < 0.0 || v > 1.0) {
    if (clamped) ++*clamped;
    return v < 0.0 ? 0.0 : 1.0;
  }
  return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

// downsampling factor of a single tag, 0 if not a downsample tag
std::int64_t downsample_factor(const std::string& t) {
  const std::string p = "downsample";
  if (t.rfind(p, 0) != 0) return 0;
  const auto digits = t.substr(p.size());
  if (digits.empty() || !std::all_of(digits.begin(), digits.end(), ::isdigit) || digits.size() > 3)
    throw Error("unknown degradation tag '" + t + "' (expected downsampleR with integer R >= 2)");
  const auto r = std::stoll(digits);
  if (r < 2) throw Error("degradation tag '" + t + "': factor must be >= 2");
  return r;
}

}  // namespace

std::mt19937_64 derive_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::uint64_t s = splitmix(seed);
  s = splitmix(s ^ splitmix(a + 0x51ed270b2c4b7a1full));
  s = splitmix(s ^ splitmix(b + 0x2545f4914f6cdd1dull));
  return std::mt19937_64(s);
}

std::vector<double> rain_field(std::int64_t h, std::int64_t w, const RainParams& p, std::mt19937_64& rng) {
  if (p.length < 1 || p.density < 0) throw Error("rain: length must be >= 1 and density >= 0");
  std::vector<double> field(static_cast<std::size_t>(h * w), 0.0);
  const double seed_prob = std::min(1.0, p.density / p.length);
  const double th = p.angle_deg * std::numbers::pi / 180.0;
  const double dx = std::cos(th), dy = std::sin(th);
  std::bernoulli_distribution seed(seed_prob);
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      if (!seed(rng)) continue;
      for (int k = 0; k < p.length; ++k) {
        const auto yy = ((y + std::llround(k * dy)) % h + h) % h;
        const auto xx = ((x + std::llround(k * dx)) % w + w) % w;
        field[static_cast<std::size_t>(yy * w + xx)] += 1.0;
      }
    }
  return field;
}

Tensor add_rain(const Tensor& img, const RainParams& p, std::mt19937_64& rng, std::int64_t* clamped) {
  require_image(img, "add_rain");
  const auto h = img.dim(1), w = img.dim(2);
  const auto field = rain_field(h, w, p, rng);
  Tensor out(img.shape());
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t i = 0; i < h * w; ++i)
      out[c * h * w + i] = clamp01(img[c * h * w + i] + p.intensity * field[static_cast<std::size_t>(i)], clamped);
  return out;
}

Tensor add_noise(const Tensor& img, double sigma, std::mt19937_64& rng, std::int64_t* clamped) {
  require_image(img, "add_noise");
  if (sigma < 0) throw Error("noise: sigma must be >= 0");
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor out(img.shape());
  for (std::int64_t i = 0; i < img.numel(); ++i) out[i] = clamp01(img[i] + sigma * n(rng), clamped);
  return out;
}

Tensor low_light(const Tensor& img, double gamma, double gain) {
  require_image(img, "low_light");
  Tensor out(img.shape());
  for (std::int64_t i = 0; i < img.numel(); ++i) out[i] = gain * std::pow(std::max(0.0, img[i]), gamma);
  return out;
}

Tensor add_snow(const Tensor& img, const SnowParams& p, std::mt19937_64& rng, std::int64_t* clamped) {
  require_image(img, "add_snow");
  const auto h = img.dim(1), w = img.dim(2);
  Tensor out = img.clone();
  const auto flakes = std::llround(p.density * static_cast<double>(h * w));
  for (long long f = 0; f < flakes; ++f) {
    const double cy = uniform(rng, 0, static_cast<double>(h)), cx = uniform(rng, 0, static_cast<double>(w));
    const double r = uniform(rng, p.radius_min, p.radius_max);
    const auto y0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(cy - r - 1));
    const auto y1 = std::min<std::int64_t>(h - 1, static_cast<std::int64_t>(cy + r + 1));
    const auto x0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(cx - r - 1));
    const auto x1 = std::min<std::int64_t>(w - 1, static_cast<std::int64_t>(cx + r + 1));
    for (auto y = y0; y <= y1; ++y)
      for (auto x = x0; x <= x1; ++x) {
        const double d = std::hypot(y + 0.5 - cy, x + 0.5 - cx);
        const double a = std::clamp(r + 0.5 - d, 0.0, 1.0);
        if (a <= 0) continue;
        for (std::int64_t c = 0; c < 3; ++c) {
          double& v = out[(c * h + y) * w + x];
          v = clamp01(v + (p.brightness - v) * a, clamped);
        }
      }
  }
  return out;
}

Tensor area_downsample(const Tensor& img, std::int64_t r) {
  require_image(img, "area_downsample");
  if (r < 1) throw Error("area_downsample: factor must be >= 1");
  const auto h = img.dim(1) / r, w = img.dim(2) / r, W = img.dim(2), H = img.dim(1);
  if (h < 1 || w < 1) throw ShapeError("area_downsample: image " + shape_str(img.shape()) + " smaller than factor");
  Tensor out({3, h, w});
  const double inv = 1.0 / static_cast<double>(r * r);
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        double s = 0.0;
        for (std::int64_t i = 0; i < r; ++i)
          for (std::int64_t j = 0; j < r; ++j) s += img[(c * H + y * r + i) * W + x * r + j];
        out[(c * h + y) * w + x] = s * inv;
      }
  return out;
}

std::int64_t check_tag(const std::string& tag) {
  std::int64_t factor = 1;
  const auto parts = split(tag, '+');
  if (parts.empty()) throw Error("empty degradation tag");
  for (const auto& t : parts) {
    if (t == "rain" || t == "noise" || t == "lowlight" || t == "snow") continue;
    const auto r = downsample_factor(t);
    if (r == 0) throw Error("unknown degradation tag '" + t + "' (known: rain, noise, lowlight, snow, downsampleR)");
    factor *= r;
  }
  return factor;
}

DegradedPair synth_degrade(const Tensor& clean, const std::string& tag, std::uint64_t seed, const DegradeRanges& g) {
  require_image(clean, "synth_degrade");
  check_tag(tag);
  DegradedPair pair;
  pair.tag = tag;
  pair.seed = seed;
  pair.clean = clean;
  Tensor cur = clean;
  const auto parts = split(tag, '+');
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& t = parts[k];
    auto rng = derive_rng(seed, 0xde9adeull, k);
    if (t == "rain") {
      RainParams p;
      p.density = uniform(rng, g.rain_density_min, g.rain_density_max);
      p.intensity = uniform(rng, g.rain_intensity_min, g.rain_intensity_max);
      p.angle_deg = uniform(rng, g.rain_angle_min, g.rain_angle_max);
      p.length = std::uniform_int_distribution<int>(g.rain_length_min, g.rain_length_max)(rng);
      cur = add_rain(cur, p, rng, &pair.clamped);
    } else if (t == "noise") {
      cur = add_noise(cur, uniform(rng, g.noise_sigma_min, g.noise_sigma_max), rng, &pair.clamped);
    } else if (t == "lowlight") {
      const double gamma = uniform(rng, g.gamma_min, g.gamma_max);
      cur = low_light(cur, gamma, uniform(rng, g.gain_min, g.gain_max));
    } else if (t == "snow") {
      SnowParams p;
      p.density = uniform(rng, g.snow_density_min, g.snow_density_max);
      p.brightness = uniform(rng, 0.8, 1.0);
      cur = add_snow(cur, p, rng, &pair.clamped);
    } else {
      cur = area_downsample(cur, downsample_factor(t));
    }
  }
  // the clean member is cropped to an exact multiple of the degraded extent
  const auto r = check_tag(tag);
  if (r > 1) pair.clean = crop_at(clean, 0, 0, cur.dim(1) * r, cur.dim(2) * r);
  pair.degraded = cur;
  return pair;
}

Tensor procedural_image(std::int64_t h, std::int64_t w, std::uint64_t seed) {
  auto rng = derive_rng(seed, 0x1a9eull);
  Tensor img({3, h, w});
  double c0[3], c1[3];
  for (int c = 0; c < 3; ++c) {
    c0[c] = uniform(rng, 0.1, 0.9);
    c1[c] = uniform(rng, 0.1, 0.9);
  }
  const double th = uniform(rng, 0, 2 * std::numbers::pi);
  const double gx = std::cos(th), gy = std::sin(th);
  const double norm = std::abs(gx) * w + std::abs(gy) * h + 1e-9;
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const double t = std::clamp((gx * x + gy * y) / norm + 0.5, 0.0, 1.0);
      for (int c = 0; c < 3; ++c) img[(c * h + y) * w + x] = c0[c] + (c1[c] - c0[c]) * t;
    }

  const int shapes = std::uniform_int_distribution<int>(3, 7)(rng);
  const double extent = static_cast<double>(std::min(h, w));
  for (int s = 0; s < shapes; ++s) {
    const bool disc = uniform(rng, 0, 1) < 0.5;
    const double cy = uniform(rng, 0, static_cast<double>(h)), cx = uniform(rng, 0, static_cast<double>(w));
    const double ry = uniform(rng, 0.08, 0.3) * extent, rx = uniform(rng, 0.08, 0.3) * extent;
    const double alpha = uniform(rng, 0.6, 1.0);
    double col[3];
    for (auto& v : col) v = uniform(rng, 0.05, 0.95);
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const double u = (y + 0.5 - cy) / ry, v = (x + 0.5 - cx) / rx;
        // signed distance-like edge measure in pixels, softened over one pixel
        const double inside = disc ? (1.0 - std::sqrt(u * u + v * v)) * std::min(rx, ry)
                                   : std::min(1.0 - std::abs(u), 1.0 - std::abs(v)) * std::min(rx, ry);
        const double a = alpha * std::clamp(inside + 0.5, 0.0, 1.0);
        if (a <= 0) continue;
        for (int c = 0; c < 3; ++c) {
          double& p = img[(c * h + y) * w + x];
          p += (col[c] - p) * a;
        }
      }
  }

  const double amp = uniform(rng, 0.03, 0.1);
  const double fy = uniform(rng, 0.05, 0.4), fx = uniform(rng, 0.05, 0.4), ph = uniform(rng, 0, 6.28);
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const double t = amp * std::sin(fy * y + fx * x + ph);
      for (int c = 0; c < 3; ++c) {
        double& p = img[(c * h + y) * w + x];
        p = std::clamp(p + t, 0.0, 1.0);
      }
    }
  return img;
}

Tensor hflip(const Tensor& img) {
  const auto w = img.dim(-1);
  Tensor out(img.shape());
  const auto rows = img.numel() / w;
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t x = 0; x < w; ++x) out[r * w + x] = img[r * w + (w - 1 - x)];
  return out;
}

Tensor crop_at(const Tensor& img, std::int64_t top, std::int64_t left, std::int64_t h, std::int64_t w) {
  require_image(img, "crop");
  const auto H = img.dim(1), W = img.dim(2);
  if (top < 0 || left < 0 || h < 1 || w < 1 || top + h > H || left + w > W) {
    throw ShapeError("crop " + std::to_string(h) + "x" + std::to_string(w) + " at (" + std::to_string(top) + ", " +
                     std::to_string(left) + ") does not fit image " + std::to_string(H) + "x" + std::to_string(W));
  }
  Tensor out({3, h, w});
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) out[(c * h + y) * w + x] = img[(c * H + top + y) * W + left + x];
  return out;
}

DegradedPair augment(const DegradedPair& pair, const AugmentOptions& opt, std::uint64_t seed) {
  require_image(pair.clean, "augment");
  require_image(pair.degraded, "augment");
  const auto H = pair.clean.dim(1), W = pair.clean.dim(2);
  const auto r = H / pair.degraded.dim(1);
  if (r < 1 || pair.degraded.dim(1) * r != H || pair.degraded.dim(2) * r != W) {
    throw ShapeError("augment: clean " + shape_str(pair.clean.shape()) + " is not an integer multiple of degraded " +
                     shape_str(pair.degraded.shape()));
  }
  auto rng = derive_rng(seed, 0xa06ull);
  DegradedPair out = pair;
  if (opt.crop > 0) {
    if (opt.crop > H || opt.crop > W) {
      throw ShapeError("augment: crop " + std::to_string(opt.crop) + " larger than image " + std::to_string(H) + "x" +
                       std::to_string(W));
    }
    if (opt.crop % r != 0)
      throw ShapeError("augment: crop " + std::to_string(opt.crop) + " not a multiple of scale " + std::to_string(r));
    const auto cells = opt.crop / r;
    const auto top = std::uniform_int_distribution<std::int64_t>(0, pair.degraded.dim(1) - cells)(rng);
    const auto left = std::uniform_int_distribution<std::int64_t>(0, pair.degraded.dim(2) - cells)(rng);
    out.degraded = crop_at(pair.degraded, top, left, cells, cells);
    out.clean = crop_at(pair.clean, top * r, left * r, opt.crop, opt.crop);
  } else {
    rng.discard(2);
  }
  if (opt.flip && std::bernoulli_distribution(0.5)(rng)) {
    out.degraded = hflip(out.degraded);
    out.clean = hflip(out.clean);
  }
  return out;
}

// --- datasets ----------------------------------------------------------------

DirectoryDataset::DirectoryDataset(std::string root, std::string manifest) : root_(std::move(root)) {
  const fs::path deg = fs::path(root_) / "degraded", cln = fs::path(root_) / "clean";
  if (!fs::is_directory(deg) || !fs::is_directory(cln))
    throw IoError("dataset '" + root_ + "' must contain degraded/ and clean/ directories");
  if (manifest.empty() && fs::exists(fs::path(root_) / "manifest.txt")) manifest = (fs::path(root_) / "manifest.txt").string();
  if (!manifest.empty()) {
    std::ifstream in(manifest);
    if (!in) throw IoError("cannot open manifest '" + manifest + "'");
    std::string line;
    while (std::getline(in, line)) {
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line.erase(0, line.find_first_not_of(" \t\r"));
      line.erase(line.find_last_not_of(" \t\r") + 1);
      if (line.empty()) continue;
      if (line.rfind("degraded/", 0) == 0) line.erase(0, 9);
      names_.push_back(line);
    }
  } else {
    for (const auto& e : fs::directory_iterator(deg))
      if (e.is_regular_file() && e.path().extension() == ".png") names_.push_back(e.path().filename().string());
    std::sort(names_.begin(), names_.end());
  }
  if (names_.empty()) throw IoError("dataset '" + root_ + "' has no images");
  for (const auto& n : names_) {
    if (!fs::exists(deg / n)) throw IoError("dataset '" + root_ + "': missing degraded/" + n);
    if (!fs::exists(cln / n)) throw IoError("dataset '" + root_ + "': missing clean/" + n + " (paired by filename)");
  }
}

DegradedPair DirectoryDataset::get(std::size_t index) const {
  const auto& n = names_.at(index);
  DegradedPair p;
  p.degraded = load_image((fs::path(root_) / "degraded" / n).string());
  p.clean = load_image((fs::path(root_) / "clean" / n).string());
  p.tag = "file";
  return p;
}

SyntheticDataset::SyntheticDataset(std::string tag, std::size_t count, std::int64_t size, std::uint64_t seed,
                                   std::size_t first_index)
    : tag_(std::move(tag)), count_(count), size_(size), seed_(seed), first_(first_index) {
  check_tag(tag_);
  if (count_ == 0) throw Error("synthetic dataset must contain at least one pair");
  if (size_ < 1) throw Error("synthetic image size must be >= 1");
}

DegradedPair SyntheticDataset::get(std::size_t index) const {
  if (index >= count_) throw Error("synthetic dataset index out of range");
  const auto i = first_ + index;
  const Tensor clean = procedural_image(size_, size_, splitmix(seed_ ^ splitmix(i)));
  return synth_degrade(clean, tag_, splitmix(seed_ + 0x5eedull) ^ splitmix(i + 1));
}

std::string SyntheticDataset::name(std::size_t index) const {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "synth_%06zu.png", first_ + index);
  return buf;
}

std::unique_ptr<Dataset> open_dataset(const std::string& spec, const std::string& manifest) {
  if (spec.rfind("synth:", 0) == 0) {
    const auto f = split(spec, ':');
    if (f.size() < 4 || f.size() > 6)
      throw Error("synthetic dataset spec must be synth:TAG:COUNT:SIZE[:SEED[:FIRST]], got '" + spec + "'");
    try {
      const auto count = std::stoull(f[2]);
      const auto size = std::stoll(f[3]);
      const auto seed = f.size() > 4 ? std::stoull(f[4]) : 0ull;
      const auto first = f.size() > 5 ? std::stoull(f[5]) : 0ull;
      return std::make_unique<SyntheticDataset>(f[1], count, size, seed, first);
    } catch (const std::logic_error&) {
      throw Error("bad number in synthetic dataset spec '" + spec + "'");
    }
  }
  return std::make_unique<DirectoryDataset>(spec, manifest);
}

void write_dataset(const Dataset& data, const std::string& root) {
  const fs::path deg = fs::path(root) / "degraded", cln = fs::path(root) / "clean";
  std::error_code ec;
  fs::create_directories(deg, ec);
  fs::create_directories(cln, ec);
  if (ec) throw IoError("cannot create dataset directories under '" + root + "': " + ec.message());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto p = data.get(i);
    save_image(p.degraded, (deg / data.name(i)).string());
    save_image(p.clean, (cln / data.name(i)).string());
  }
}

std::pair<Tensor, Tensor> stack_pairs(const std::vector<DegradedPair>& pairs) {
  if (pairs.empty()) throw Error("stack_pairs: empty batch");
  const Shape ds = pairs.front().degraded.shape(), cs = pairs.front().clean.shape();
  const auto b = static_cast<std::int64_t>(pairs.size());
  Tensor deg({b, ds[0], ds[1], ds[2]}), cln({b, cs[0], cs[1], cs[2]});
  const auto dn = pairs.front().degraded.numel(), cn = pairs.front().clean.numel();
  for (std::int64_t i = 0; i < b; ++i) {
    const auto& p = pairs[static_cast<std::size_t>(i)];
    if (p.degraded.shape() != ds || p.clean.shape() != cs) throw ShapeError("stack_pairs: pairs differ in extent");
    std::copy_n(p.degraded.ptr(), dn, deg.ptr() + i * dn);
    std::copy_n(p.clean.ptr(), cn, cln.ptr() + i * cn);
  }
  return {deg, cln};
}

}  // namespace rmx
