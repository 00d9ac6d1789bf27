#include "rmx/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <numbers>
#include <sstream>

#include "json.hpp"
#include "rmx/ops.hpp"

namespace rmx {

namespace {

const char* space_name(ColorSpace s) {
  switch (s) {
    case ColorSpace::rgb:
      return "rgb";
    case ColorSpace::y:
      return "y";
    default:
      return "ycbcr";
  }
}

double finite_or_cap(double psnr_db) { return std::isinf(psnr_db) ? 100.0 : psnr_db; }

Tensor as_batch(const Tensor& img) { return img.reshaped({1, img.dim(0), img.dim(1), img.dim(2)}); }

}  // namespace

// --- TrainConfig ---------------------------------------------------------------

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("invalid train config: " + m); };
  if (!(lr_min >= 0 && lr_min <= lr_init)) fail("need 0 <= lr_min <= lr_init");
  if (total_steps < 1) fail("total_steps must be >= 1");
  if (batch < 1) fail("batch must be >= 1");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) fail("beta1 and beta2 must lie in [0, 1)");
  if (!(eps > 0)) fail("eps must be > 0");
  if (crop < 0) fail("crop must be >= 0");
  if (eval_every < 0 || checkpoint_every < 0) fail("eval_every and checkpoint_every must be >= 0");
  if (!(clip_norm >= 0)) fail("clip_norm must be >= 0");
  if (!(loss_lambda >= 0)) fail("loss_lambda must be >= 0");
  if (!(divergence_factor > 0) || divergence_patience < 1) fail("divergence_factor > 0 and divergence_patience >= 1");
}

bool TrainConfig::set(const ConfigEntry& e) {
  const auto& k = e.key;
  if (k == "lr_init") lr_init = cfg::to_double(e);
  else if (k == "lr_min") lr_min = cfg::to_double(e);
  else if (k == "total_steps") total_steps = cfg::to_int(e);
  else if (k == "batch") batch = cfg::to_int(e);
  else if (k == "beta1") beta1 = cfg::to_double(e);
  else if (k == "beta2") beta2 = cfg::to_double(e);
  else if (k == "eps") eps = cfg::to_double(e);
  else if (k == "crop") crop = cfg::to_int(e);
  else if (k == "flip") flip = cfg::to_bool(e);
  else if (k == "seed") seed = cfg::to_u64(e);
  else if (k == "eval_every") eval_every = cfg::to_int(e);
  else if (k == "clip_norm") clip_norm = cfg::to_double(e);
  else if (k == "loss_lambda") loss_lambda = cfg::to_double(e);
  else if (k == "checkpoint_every") checkpoint_every = cfg::to_int(e);
  else if (k == "divergence_factor") divergence_factor = cfg::to_double(e);
  else if (k == "divergence_patience") divergence_patience = cfg::to_int(e);
  else if (k == "metric_space") {
    if (e.value == "rgb") metric_space = ColorSpace::rgb;
    else if (e.value == "y") metric_space = ColorSpace::y;
    else if (e.value == "ycbcr") metric_space = ColorSpace::ycbcr;
    else throw ConfigError("config line " + std::to_string(e.line) + ": metric_space must be rgb, y or ycbcr");
  } else {
    return false;
  }
  return true;
}

std::string TrainConfig::to_text() const {
  std::ostringstream o;
  o << "lr_init = " << cfg::format(lr_init) << '\n'
    << "lr_min = " << cfg::format(lr_min) << '\n'
    << "total_steps = " << total_steps << '\n'
    << "batch = " << batch << '\n'
    << "beta1 = " << cfg::format(beta1) << '\n'
    << "beta2 = " << cfg::format(beta2) << '\n'
    << "eps = " << cfg::format(eps) << '\n'
    << "crop = " << crop << '\n'
    << "flip = " << (flip ? "true" : "false") << '\n'
    << "seed = " << seed << '\n'
    << "eval_every = " << eval_every << '\n'
    << "clip_norm = " << cfg::format(clip_norm) << '\n'
    << "loss_lambda = " << cfg::format(loss_lambda) << '\n'
    << "metric_space = " << space_name(metric_space) << '\n'
    << "checkpoint_every = " << checkpoint_every << '\n'
    << "divergence_factor = " << cfg::format(divergence_factor) << '\n'
    << "divergence_patience = " << divergence_patience << '\n';
  return o.str();
}

RunConfig RunConfig::parse(const std::vector<ConfigEntry>& entries) {
  RunConfig rc;
  for (const auto& e : entries) {
    if (!rc.model.set(e) && !rc.train.set(e))
      throw ConfigError("config line " + std::to_string(e.line) + ": unknown key '" + e.key + "'");
  }
  rc.model.validate();
  rc.train.validate();
  return rc;
}

// --- optimizer -------------------------------------------------------------------

bool adam_step(std::span<Tensor> params, const std::vector<std::vector<double>>& grads, AdamState& state, double lr,
               double beta1, double beta2, double eps) {
  if (grads.size() != params.size()) throw Error("adam_step: gradient count does not match parameter count");
  for (const auto& g : grads)
    for (double v : g)
      if (!std::isfinite(v)) return false;
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
      state.v.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    if (g.size() != p.size() || m.size() != p.size()) throw ShapeError("adam_step: state shaped unlike parameters");
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
      v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
      const double mhat = m[j] / c1, vhat = v[j] / c2;
      p[j] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
  return true;
}

double cosine_lr(std::int64_t step, const TrainConfig& cfg) {
  if (step < 0 || step > cfg.total_steps) {
    const auto clamped = std::clamp<std::int64_t>(step, 0, cfg.total_steps);
    std::cerr << "warning: cosine_lr step " << step << " outside [0, " << cfg.total_steps << "], clamped to "
              << clamped << '\n';
    step = clamped;
  }
  const double t = static_cast<double>(step) / static_cast<double>(cfg.total_steps);
  return cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

double global_norm(const std::vector<std::vector<double>>& grads) {
  double s = 0.0;
  for (const auto& g : grads)
    for (double v : g) s += v * v;
  return std::sqrt(s);
}

double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm) {
  const double n = global_norm(grads);
  if (max_norm > 0 && n > max_norm) {
    const double f = max_norm / n;
    for (auto& g : grads)
      for (auto& v : g) v *= f;
  }
  return n;
}

// --- evaluation --------------------------------------------------------------------

EvalResult evaluate(Model& model, const Dataset& data, ColorSpace space) {
  if (data.size() == 0) throw Error("evaluate: empty dataset");
  EvalResult r;
  double ip = 0, is = 0;
  bool inputs = true;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto pair = data.get(i);
    const Tensor pred = model.forward(as_batch(pair.degraded), NormMode::eval).final();
    const Tensor clean = as_batch(pair.clean);
    if (pred.shape() != clean.shape()) {
      throw ShapeError("evaluate: prediction " + shape_str(pred.shape()) + " does not match clean image " +
                       shape_str(clean.shape()) + " for " + data.name(i));
    }
    ImageScore s;
    s.name = data.name(i);
    const Tensor pm = to_metric_space(pred, space), cm = to_metric_space(clean, space);
    // metrics are taken on the displayable range
    Tensor pc = pm.clone();
    for (auto& v : pc.data()) v = std::clamp(v, 0.0, 1.0);
    s.psnr = psnr(pc, cm);
    s.ssim = ssim(pc, cm);
    if (pair.degraded.shape() == pair.clean.shape()) {
      const Tensor dm = to_metric_space(as_batch(pair.degraded), space);
      s.input_psnr = psnr(dm, cm);
      s.input_ssim = ssim(dm, cm);
      ip += finite_or_cap(s.input_psnr);
      is += s.input_ssim;
    } else {
      inputs = false;
    }
    r.mean_psnr += finite_or_cap(s.psnr);
    r.mean_ssim += s.ssim;
    r.images.push_back(std::move(s));
  }
  const double n = static_cast<double>(data.size());
  r.mean_psnr /= n;
  r.mean_ssim /= n;
  if (inputs) {
    r.mean_input_psnr = ip / n;
    r.mean_input_ssim = is / n;
  }
  return r;
}

// --- checkpoints of training state -------------------------------------------------------

Checkpoint capture_training(Model& model, const TrainState& state) {
  Checkpoint ckpt = capture_model(model);
  const auto params = model.named_parameters();
  if (!state.adam.m.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      ckpt.put("optim.m." + params[i].first, params[i].second.shape(), state.adam.m[i]);
      ckpt.put("optim.v." + params[i].first, params[i].second.shape(), state.adam.v[i]);
    }
  }
  ckpt.put("optim.step", {}, {static_cast<double>(state.adam.step)});
  ckpt.put("train.step", {}, {static_cast<double>(state.step)});
  ckpt.put("train.initial_loss", {}, {state.initial_loss});
  ckpt.put("train.bad_steps", {}, {static_cast<double>(state.bad_steps)});
  ckpt.put("train.best_psnr", {}, {state.best_psnr});
  return ckpt;
}

TrainState restore_training(Model& model, const Checkpoint& ckpt) {
  restore_model(model, ckpt);
  TrainState st;
  auto scalar = [&](const std::string& n, double fallback) {
    const auto* r = ckpt.find(n);
    return r ? r->values.at(0) : fallback;
  };
  st.step = static_cast<std::int64_t>(scalar("train.step", 0));
  st.initial_loss = scalar("train.initial_loss", std::numeric_limits<double>::quiet_NaN());
  st.bad_steps = static_cast<std::int64_t>(scalar("train.bad_steps", 0));
  st.best_psnr = scalar("train.best_psnr", -std::numeric_limits<double>::infinity());
  st.adam.step = static_cast<std::int64_t>(scalar("optim.step", 0));
  const auto params = model.named_parameters();
  if (ckpt.find("optim.m." + params.front().first)) {
    for (const auto& [name, t] : params) {
      const auto& m = ckpt.at("optim.m." + name);
      const auto& v = ckpt.at("optim.v." + name);
      if (m.shape != t.shape() || v.shape != t.shape())
        throw IoError("checkpoint optimizer state for '" + name + "' is shaped unlike the parameter");
      st.adam.m.push_back(m.values);
      st.adam.v.push_back(v.values);
    }
  }
  return st;
}

// --- training loop ----------------------------------------------------------------

TrainResult train(Model& model, const Dataset& train_data, const Dataset* held_out, const TrainConfig& cfg,
                  TrainState state, const TrainOptions& options) {
  cfg.validate();
  if (train_data.size() == 0) throw Error("train: empty training set");
  namespace fs = std::filesystem;
  const bool sr = model.config().task == Task::super_resolution;
  const auto scales = static_cast<std::size_t>(model.config().stages);
  const auto n_train = static_cast<std::int64_t>(train_data.size());

  std::ofstream log;
  if (!options.out_dir.empty()) {
    std::error_code ec;
    fs::create_directories(options.out_dir, ec);
    const auto path = (fs::path(options.out_dir) / "metrics.jsonl").string();
    log.open(path, state.step == 0 ? std::ios::trunc : std::ios::app);
    if (!log) throw IoError("cannot open metrics log '" + path + "'");
  }
  auto save = [&](const std::string& file) {
    if (options.out_dir.empty()) return;
    write_checkpoint((fs::path(options.out_dir) / file).string(), capture_training(model, state));
  };

  std::map<std::int64_t, std::vector<std::int64_t>> perms;
  auto sample_index = [&](std::int64_t flat) {
    const auto epoch = flat / n_train;
    auto it = perms.find(epoch);
    if (it == perms.end()) {
      std::vector<std::int64_t> p(static_cast<std::size_t>(n_train));
      for (std::int64_t i = 0; i < n_train; ++i) p[static_cast<std::size_t>(i)] = i;
      auto rng = derive_rng(cfg.seed, 0xe90cull, static_cast<std::uint64_t>(epoch));
      for (std::int64_t i = n_train - 1; i > 0; --i)
        std::swap(p[static_cast<std::size_t>(i)],
                  p[static_cast<std::size_t>(std::uniform_int_distribution<std::int64_t>(0, i)(rng))]);
      perms.erase(epoch - 2);
      it = perms.emplace(epoch, std::move(p)).first;
    }
    return it->second[static_cast<std::size_t>(flat % n_train)];
  };

  auto params_named = model.named_parameters();
  std::vector<Tensor> params;
  for (auto& [n, t] : params_named) params.push_back(t);

  TrainResult result;
  const std::int64_t end =
      options.stop_after >= 0 ? std::min(cfg.total_steps, options.stop_after) : cfg.total_steps;
  while (state.step < end) {
    const auto step = state.step;
    std::vector<DegradedPair> pairs;
    for (std::int64_t j = 0; j < cfg.batch; ++j) {
      const auto flat = step * cfg.batch + j;
      const auto idx = sample_index(flat);
      pairs.push_back(augment(train_data.get(static_cast<std::size_t>(idx)), AugmentOptions{cfg.crop, cfg.flip},
                              derive_rng(cfg.seed, 0xa09ull, static_cast<std::uint64_t>(flat))()));
    }
    auto [x, y] = stack_pairs(pairs);

    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      auto preds = model.forward(x, NormMode::train);
      loss = sr ? sr_loss(preds.final(), y)
                : total_loss(preds.scales, target_pyramid(y, scales), LossConfig{cfg.loss_lambda});
    }
    tape.backward(loss);

    std::vector<std::vector<double>> grads;
    for (auto& p : params) {
      grads.emplace_back(p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                      : std::vector<double>(static_cast<std::size_t>(p.numel()), 0.0));
      p.zero_grad();
    }

    StepRecord rec;
    rec.step = step;
    rec.loss = loss[0];
    rec.lr = cosine_lr(step, cfg);
    rec.grad_norm = cfg.clip_norm > 0 ? clip_global_norm(grads, cfg.clip_norm) : global_norm(grads);
    rec.skipped = !std::isfinite(rec.loss) || !adam_step(params, grads, state.adam, rec.lr, cfg.beta1, cfg.beta2,
                                                          cfg.eps);
    if (rec.skipped && !options.quiet)
      std::cerr << "warning: step " << step << " skipped (non-finite loss or gradient)\n";

    if (std::isnan(state.initial_loss) && std::isfinite(rec.loss)) state.initial_loss = rec.loss;
    if (!std::isfinite(rec.loss) || rec.loss > cfg.divergence_factor * state.initial_loss) {
      if (++state.bad_steps >= cfg.divergence_patience) {
        std::ostringstream m;
        m << "training diverged at step " << step << ": loss " << rec.loss << " above " << cfg.divergence_factor
          << "x the initial loss " << state.initial_loss << " for " << state.bad_steps << " consecutive steps";
        throw TrainingDiverged(m.str());
      }
    } else {
      state.bad_steps = 0;
    }
    result.losses.push_back(rec.loss);
    state.step = step + 1;

    const bool last = step + 1 == cfg.total_steps;
    if (held_out && ((cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) || last)) {
      auto ev = evaluate(model, *held_out, cfg.metric_space);
      rec.eval_psnr = ev.mean_psnr;
      rec.eval_ssim = ev.mean_ssim;
      if (ev.mean_psnr > state.best_psnr) {
        state.best_psnr = ev.mean_psnr;
        save("best.ckpt");
      }
      result.last_eval = std::move(ev);
    }

    if (log) {
      nlohmann::json j{{"step", step}, {"lr", rec.lr}, {"loss", rec.loss}, {"grad_norm", rec.grad_norm}};
      if (rec.skipped) j["skipped"] = true;
      if (rec.eval_psnr) {
        j["eval_psnr"] = *rec.eval_psnr;
        j["eval_ssim"] = *rec.eval_ssim;
      }
      log << j.dump() << '\n';
      log.flush();
    }
    if (!options.quiet && (step % 50 == 0 || last || rec.eval_psnr)) {
      std::cout << "step " << step << " lr " << rec.lr << " loss " << rec.loss;
      if (rec.eval_psnr) std::cout << " eval_psnr " << *rec.eval_psnr << " eval_ssim " << *rec.eval_ssim;
      std::cout << std::endl;
    }
    if (options.on_step) options.on_step(rec);
    result.records.push_back(rec);
    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) save("last.ckpt");
  }
  save("last.ckpt");
  result.state = state;
  return result;
}

}  // namespace rmx
