#pragma once

// Adam with cosine annealing, the deep-supervision training loop,
// evaluation, and training-state checkpoints.

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rmx/checkpoint.hpp"
#include "rmx/config.hpp"
#include "rmx/data.hpp"
#include "rmx/loss.hpp"
#include "rmx/model.hpp"

namespace rmx {

struct TrainConfig {
  double lr_init = 2e-4;
  double lr_min = 1e-6;
  std::int64_t total_steps = 2000;
  std::int64_t batch = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t crop = 64;  // 0 = full images (all must share extents)
  bool flip = true;
  std::uint64_t seed = 0;
  std::int64_t eval_every = 200;  // 0 = only at the end
  double clip_norm = 1.0;         // global L2 gradient norm; 0 disables clipping
  double loss_lambda = 0.1;
  ColorSpace metric_space = ColorSpace::y;
  std::int64_t checkpoint_every = 0;  // 0 = only at the end
  double divergence_factor = 10.0;
  std::int64_t divergence_patience = 100;

  void validate() const;
  bool set(const ConfigEntry& e);
  std::string to_text() const;
  bool operator==(const TrainConfig&) const = default;
};

/// Model and training keys from one flat config; unknown keys are rejected.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  static RunConfig parse(const std::vector<ConfigEntry>& entries);
  std::string to_text() const { return model.to_text() + train.to_text(); }
};

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::int64_t step = 0;
};

/// Bias-corrected Adam. Returns false (and changes nothing) if any gradient is
/// non-finite.
bool adam_step(std::span<Tensor> params, const std::vector<std::vector<double>>& grads, AdamState& state, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

/// lr_min + (lr_init - lr_min)(1 + cos(pi step / total_steps)) / 2; steps
/// outside [0, total_steps] are clamped with a warning on stderr.
double cosine_lr(std::int64_t step, const TrainConfig& cfg);

double global_norm(const std::vector<std::vector<double>>& grads);
/// Scales gradients so their global norm is at most max_norm; returns the norm before clipping.
double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm);

struct ImageScore {
  std::string name;
  double psnr = 0, ssim = 0;
  double input_psnr = std::numeric_limits<double>::quiet_NaN();  // degraded vs clean, when extents match
  double input_ssim = std::numeric_limits<double>::quiet_NaN();
};

struct EvalResult {
  std::vector<ImageScore> images;
  double mean_psnr = 0, mean_ssim = 0;
  double mean_input_psnr = std::numeric_limits<double>::quiet_NaN();
  double mean_input_ssim = std::numeric_limits<double>::quiet_NaN();
};

/// Restores every pair (eval mode) and scores it against the clean image.
/// Infinite PSNRs (exact restorations) are capped at 100 dB in the means.
EvalResult evaluate(Model& model, const Dataset& data, ColorSpace space = ColorSpace::y);

class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

struct TrainState {
  AdamState adam;
  std::int64_t step = 0;  // next step to run
  double initial_loss = std::numeric_limits<double>::quiet_NaN();
  std::int64_t bad_steps = 0;
  double best_psnr = -std::numeric_limits<double>::infinity();
};

struct StepRecord {
  std::int64_t step = 0;
  double lr = 0, loss = 0, grad_norm = 0;
  bool skipped = false;
  std::optional<double> eval_psnr, eval_ssim;
};

struct TrainOptions {
  /// Directory for last.ckpt, best.ckpt and metrics.jsonl; empty = write nothing.
  std::string out_dir;
  /// Stop after this step index even if total_steps is larger (for resume tests); -1 = run to the end.
  std::int64_t stop_after = -1;
  std::function<void(const StepRecord&)> on_step;
  bool quiet = false;
};

struct TrainResult {
  std::vector<double> losses;  // one per executed step
  std::vector<StepRecord> records;
  std::optional<EvalResult> last_eval;
  TrainState state;
};

/// Runs steps state.step .. total_steps-1. The same (config, seed, data) give
/// bit-identical results whether run in one go or resumed from a checkpoint.
TrainResult train(Model& model, const Dataset& train_data, const Dataset* held_out, const TrainConfig& cfg,
                  TrainState state = {}, const TrainOptions& options = {});

/// Model records plus optim.m.*, optim.v.*, optim.step and train.* records.
Checkpoint capture_training(Model& model, const TrainState& state);
/// Restores model and returns the training state (fresh state when the checkpoint has no optimizer records).
TrainState restore_training(Model& model, const Checkpoint& ckpt);

}  // namespace rmx
