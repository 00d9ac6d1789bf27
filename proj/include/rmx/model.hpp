#pragma once

// The multi-scale encoder-decoder: stem, per-stage block stacks, strided
// downsampling with stem-feature injection, mirrored decoder with additive
// skips, and one prediction head per decoder scale.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "rmx/blocks.hpp"
#include "rmx/config.hpp"
#include "rmx/nn.hpp"

namespace rmx {

enum class Task { restoration, super_resolution };

struct ModelConfig {
  std::int64_t base_channels = 32;
  std::int64_t stages = 3;
  std::int64_t blocks_per_stage = 4;
  std::int64_t window_base = 8;
  std::int64_t window_step = 8;
  std::int64_t ssm_state = 8;
  double mlp_ratio = 2.0;
  bool no_dsm = false;
  bool no_rdcnn = false;
  bool no_mwsa = false;
  bool share_scan_params = false;
  /// Repeating block pattern for M-T stages: E = EMVM, M = MWSA, R = RDCNN.
  std::string block_pattern = "EM";
  Task task = Task::restoration;
  std::int64_t sr_scale = 2;
  std::uint64_t init_seed = 0;

  std::int64_t stage_channels(std::int64_t s) const { return base_channels << s; }
  /// Block kinds ('E', 'M', 'R') of stage s after applying the ablation flags.
  std::string stage_layout(std::int64_t s) const;
  /// Throws ConfigError on invalid combinations.
  void validate() const;
  /// Applies one `key = value` entry; returns false for keys it does not own.
  bool set(const ConfigEntry& e);
  /// Canonical text form (every field, fixed order); parse(to_text()) == *this.
  std::string to_text() const;
  static ModelConfig parse(const std::string& text);
  bool operator==(const ModelConfig&) const = default;
};

/// One prediction per decoder scale, finest first (a single entry in
/// super-resolution mode).
struct Predictions {
  std::vector<Tensor> scales;
  const Tensor& final() const { return scales.front(); }
};

class Model {
 public:
  explicit Model(const ModelConfig& config);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return config_; }
  /// image [N, 3, H, W] in any size; padded internally and cropped back.
  Predictions forward(const Tensor& image, NormMode mode);

  void visit(const Visitor& v);
  std::vector<std::pair<std::string, Tensor>> named_parameters();
  std::int64_t param_count();

  /// Itemized parameters plus MAC/elementwise counts for an h x w input.
  CostReport cost(std::int64_t height, std::int64_t width) const;

  /// Smallest (H', W') >= (H, W) that every stage, downsampler and window divides.
  std::pair<std::int64_t, std::int64_t> padded_extent(std::int64_t height, std::int64_t width) const;

  /// Zeroes the prediction heads (or the SR tail), making the model an identity
  /// (or plain bilinear upscaler).
  void zero_heads();

 private:
  struct Stage {
    std::vector<std::unique_ptr<Block>> blocks;
  };

  std::unique_ptr<Block> make_block(char kind, std::int64_t channels, std::int64_t window, Rng& rng) const;
  Tensor run_stage(Stage& stage, Tensor x, NormMode mode, const std::string& name);
  void account_stage(const Stage& stage, const std::string& name, std::int64_t h, std::int64_t w,
                     CostReport& r) const;

  ModelConfig config_;
  Conv2d stem_;
  std::vector<Stage> encoder_, decoder_;
  std::vector<Conv2d> down_, inject_, up_, heads_;
  Conv2d sr_tail_;
};

}  // namespace rmx
