#include "rmx/model.hpp"

#include <algorithm>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "rmx/ops.hpp"

namespace rmx {

// --- ModelConfig -------------------------------------------------------------

std::string ModelConfig::stage_layout(std::int64_t s) const {
  std::string layout;
  for (std::int64_t i = 0; i < blocks_per_stage; ++i) {
    char kind = (s == 0 && !no_rdcnn) ? 'R' : block_pattern[static_cast<std::size_t>(i) % block_pattern.size()];
    if (kind == 'M' && no_mwsa) kind = 'R';
    layout.push_back(kind);
  }
  return layout;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("invalid model config: " + m); };
  if (base_channels < 1) fail("base_channels must be >= 1");
  if (stages < 1 || stages > 6) fail("stages must be in [1, 6]");
  if (blocks_per_stage < 1) fail("blocks_per_stage must be >= 1");
  if (ssm_state < 1) fail("ssm_state must be >= 1");
  if (mlp_ratio <= 0) fail("mlp_ratio must be > 0");
  if (window_base < 1 || window_step < 0) fail("window_base must be >= 1 and window_step >= 0");
  if (block_pattern.empty()) fail("block_pattern must not be empty");
  for (char c : block_pattern)
    if (c != 'E' && c != 'M' && c != 'R') fail("block_pattern may only contain E, M, R; got '" + block_pattern + "'");
  const bool has_mwsa = !no_mwsa && block_pattern.find('M') != std::string::npos;
  if (has_mwsa && blocks_per_stage % static_cast<std::int64_t>(block_pattern.size()) != 0) {
    fail("blocks_per_stage " + std::to_string(blocks_per_stage) + " must be a multiple of the block pattern length " +
         std::to_string(block_pattern.size()) + " so EMVM/MWSA blocks pair up");
  }
  for (std::int64_t s = 0; s < stages; ++s) {
    const auto c = stage_channels(s);
    if (c % default_heads(c) != 0) fail("stage width " + std::to_string(c) + " not divisible by its head count");
  }
  if (task == Task::super_resolution && sr_scale < 2) fail("sr_scale must be >= 2");
}

bool ModelConfig::set(const ConfigEntry& e) {
  const auto& k = e.key;
  if (k == "base_channels") base_channels = cfg::to_int(e);
  else if (k == "stages") stages = cfg::to_int(e);
  else if (k == "blocks_per_stage") blocks_per_stage = cfg::to_int(e);
  else if (k == "window_base") window_base = cfg::to_int(e);
  else if (k == "window_step") window_step = cfg::to_int(e);
  else if (k == "ssm_state") ssm_state = cfg::to_int(e);
  else if (k == "mlp_ratio") mlp_ratio = cfg::to_double(e);
  else if (k == "no_dsm") no_dsm = cfg::to_bool(e);
  else if (k == "no_rdcnn") no_rdcnn = cfg::to_bool(e);
  else if (k == "no_mwsa") no_mwsa = cfg::to_bool(e);
  else if (k == "share_scan_params") share_scan_params = cfg::to_bool(e);
  else if (k == "block_pattern") block_pattern = e.value;
  else if (k == "sr_scale") sr_scale = cfg::to_int(e);
  else if (k == "init_seed") init_seed = cfg::to_u64(e);
  else if (k == "task") {
    if (e.value == "restoration") task = Task::restoration;
    else if (e.value == "super_resolution") task = Task::super_resolution;
    else throw ConfigError("config line " + std::to_string(e.line) + ": task must be restoration or super_resolution");
  } else {
    return false;
  }
  return true;
}

std::string ModelConfig::to_text() const {
  std::ostringstream o;
  o << "base_channels = " << base_channels << '\n'
    << "stages = " << stages << '\n'
    << "blocks_per_stage = " << blocks_per_stage << '\n'
    << "window_base = " << window_base << '\n'
    << "window_step = " << window_step << '\n'
    << "ssm_state = " << ssm_state << '\n'
    << "mlp_ratio = " << cfg::format(mlp_ratio) << '\n'
    << "no_dsm = " << (no_dsm ? "true" : "false") << '\n'
    << "no_rdcnn = " << (no_rdcnn ? "true" : "false") << '\n'
    << "no_mwsa = " << (no_mwsa ? "true" : "false") << '\n'
    << "share_scan_params = " << (share_scan_params ? "true" : "false") << '\n'
    << "block_pattern = " << block_pattern << '\n'
    << "task = " << (task == Task::restoration ? "restoration" : "super_resolution") << '\n'
    << "sr_scale = " << sr_scale << '\n'
    << "init_seed = " << init_seed << '\n';
  return o.str();
}

ModelConfig ModelConfig::parse(const std::string& text) {
  ModelConfig c;
  for (const auto& e : parse_config(text, "<model config>")) {
    if (!c.set(e)) throw ConfigError("unknown model config key '" + e.key + "'");
  }
  c.validate();
  return c;
}

// --- Model -------------------------------------------------------------------

std::unique_ptr<Block> Model::make_block(char kind, std::int64_t channels, std::int64_t window, Rng& rng) const {
  switch (kind) {
    case 'R':
      return std::make_unique<RdcnnBlock>(channels, rng);
    case 'E': {
      EmvmOptions o;
      o.state_size = config_.ssm_state;
      o.mlp_ratio = config_.mlp_ratio;
      o.no_dsm = config_.no_dsm;
      o.share_scan_params = config_.share_scan_params;
      return std::make_unique<EmvmBlock>(channels, o, rng);
    }
    default:
      return std::make_unique<MwsaBlock>(channels, window, default_heads(channels), config_.mlp_ratio, rng);
  }
}

Model::Model(const ModelConfig& config) : config_(config) {
  config_.validate();
  Rng rng(config_.init_seed);
  const auto S = config_.stages, C = config_.base_channels;
  stem_ = Conv2d(3, C, 3, 1, 1, true, rng);

  auto build_stage = [&](std::int64_t s) {
    Stage st;
    std::int64_t m_index = 0;
    for (char kind : config_.stage_layout(s)) {
      const auto ws = kind == 'M' ? window_schedule(m_index++, config_.window_base, config_.window_step) : 0;
      st.blocks.push_back(make_block(kind, config_.stage_channels(s), ws, rng));
    }
    return st;
  };
  for (std::int64_t s = 0; s < S; ++s) {
    if (s > 0) {
      const auto cp = config_.stage_channels(s - 1), cs = config_.stage_channels(s);
      down_.emplace_back(cp, cs, 3, 2, 1, 0, true, rng);
      inject_.emplace_back(cs + C, cs, 1, 1, 0, true, rng);
    }
    encoder_.push_back(build_stage(s));
  }
  decoder_.resize(static_cast<std::size_t>(S));
  for (std::int64_t s = S - 1; s >= 0; --s) {
    decoder_[static_cast<std::size_t>(s)] = build_stage(s);
    if (s < S - 1) up_.emplace_back(config_.stage_channels(s + 1), config_.stage_channels(s), 1, 1, 0, true, rng);
  }
  std::reverse(up_.begin(), up_.end());
  if (config_.task == Task::restoration) {
    for (std::int64_t s = 0; s < S; ++s) heads_.emplace_back(config_.stage_channels(s), 3, 3, 1, 1, true, rng);
  } else {
    sr_tail_ = Conv2d(C, 3 * config_.sr_scale * config_.sr_scale, 3, 1, 1, true, rng);
  }
}

std::pair<std::int64_t, std::int64_t> Model::padded_extent(std::int64_t height, std::int64_t width) const {
  if (height < 1 || width < 1) throw ShapeError("model: image extent must be positive");
  const std::int64_t unit = std::max<std::int64_t>(16, std::int64_t{1} << config_.stages);
  std::vector<std::int64_t> windows;
  for (std::int64_t s = 0; s < config_.stages; ++s) {
    std::int64_t m = 0;
    for (char k : config_.stage_layout(s))
      if (k == 'M') windows.push_back(window_schedule(m++, config_.window_base, config_.window_step) * 100 + s);
  }
  auto fits = [&](std::int64_t h, std::int64_t w) {
    for (auto code : windows) {
      const auto s = code % 100, ws = code / 100;
      const auto hs = h >> s, wsd = w >> s;
      const auto eff = std::min({ws, hs, wsd});
      if (hs % eff || wsd % eff) return false;
    }
    return true;
  };
  const auto h0 = (height + unit - 1) / unit * unit, w0 = (width + unit - 1) / unit * unit;
  std::pair<std::int64_t, std::int64_t> best{0, 0};
  for (std::int64_t h = h0; h <= h0 + 64 * unit; h += unit)
    for (std::int64_t w = w0; w <= w0 + 64 * unit; w += unit) {
      if (best.first && h * w >= best.first * best.second) break;
      if (fits(h, w)) {
        best = {h, w};
        break;
      }
    }
  if (!best.first) throw ShapeError("model: no padded extent fits the window schedule");
  return best;
}

Tensor Model::run_stage(Stage& stage, Tensor x, NormMode mode, const std::string& name) {
  for (std::size_t i = 0; i < stage.blocks.size(); ++i) {
    LayerScope scope(name + ".block" + std::to_string(i) + "(" + stage.blocks[i]->kind() + ")");
    x = stage.blocks[i]->forward(x, mode);
  }
  return x;
}

Predictions Model::forward(const Tensor& image, NormMode mode) {
  if (image.rank() != 4 || image.dim(1) != 3) {
    throw ShapeError("model: expected an [N, 3, H, W] image, got " + shape_str(image.shape()));
  }
  const auto S = config_.stages;
  const auto h = image.dim(2), w = image.dim(3);
  const auto [hp, wp] = padded_extent(h, w);
  Tensor x = (hp == h && wp == w) ? image : pad_reflect(image, hp - h, wp - w);

  Tensor stem;
  {
    LayerScope scope("stem");
    stem = stem_.forward(x);
  }
  std::vector<Tensor> skips;
  Tensor pooled_stem = stem;
  Tensor e = run_stage(encoder_[0], stem, mode, "enc0");
  skips.push_back(e);
  for (std::int64_t s = 1; s < S; ++s) {
    const auto i = static_cast<std::size_t>(s - 1);
    LayerScope scope("enc" + std::to_string(s) + ".entry");
    pooled_stem = downsample2(pooled_stem);
    e = inject_[i].forward(concat_channels({down_[i].forward(e), pooled_stem}));
    e = run_stage(encoder_[static_cast<std::size_t>(s)], e, mode, "enc" + std::to_string(s));
    skips.push_back(e);
  }

  Predictions out;
  std::vector<Tensor> dec(static_cast<std::size_t>(S));
  Tensor d = run_stage(decoder_[static_cast<std::size_t>(S - 1)], skips.back(), mode, "dec" + std::to_string(S - 1));
  dec[static_cast<std::size_t>(S - 1)] = d;
  for (std::int64_t s = S - 2; s >= 0; --s) {
    const auto i = static_cast<std::size_t>(s);
    {
      LayerScope scope("dec" + std::to_string(s) + ".entry");
      d = add(up_[i].forward(upsample2(d)), skips[i]);
    }
    d = run_stage(decoder_[i], d, mode, "dec" + std::to_string(s));
    dec[i] = d;
  }

  if (config_.task == Task::super_resolution) {
    LayerScope scope("sr_tail");
    const auto r = static_cast<int>(config_.sr_scale);
    Tensor hr = add(pixel_shuffle(sr_tail_.forward(dec[0]), r), upsample_bilinear(x, r));
    out.scales.push_back(crop(hr, h * r, w * r));
    return out;
  }
  Tensor base = x;
  for (std::int64_t s = 0; s < S; ++s) {
    LayerScope scope("head" + std::to_string(s));
    if (s > 0) base = downsample2(base);
    Tensor p = add(heads_[static_cast<std::size_t>(s)].forward(dec[static_cast<std::size_t>(s)]), base);
    const auto hs = h >> s, wsd = w >> s;
    out.scales.push_back(hs == p.dim(2) && wsd == p.dim(3) ? p : crop(p, std::max<std::int64_t>(1, hs),
                                                                        std::max<std::int64_t>(1, wsd)));
  }
  return out;
}

void Model::visit(const Visitor& v) {
  stem_.visit("stem", v);
  for (std::size_t s = 0; s < encoder_.size(); ++s) {
    const auto sn = std::to_string(s);
    if (s > 0) {
      down_[s - 1].visit("enc" + sn + ".down", v);
      inject_[s - 1].visit("enc" + sn + ".inject", v);
    }
    for (std::size_t b = 0; b < encoder_[s].blocks.size(); ++b)
      encoder_[s].blocks[b]->visit("enc" + sn + ".block" + std::to_string(b), v);
  }
  for (std::size_t s = decoder_.size(); s-- > 0;) {
    const auto sn = std::to_string(s);
    if (s + 1 < decoder_.size()) up_[s].visit("dec" + sn + ".up", v);
    for (std::size_t b = 0; b < decoder_[s].blocks.size(); ++b)
      decoder_[s].blocks[b]->visit("dec" + sn + ".block" + std::to_string(b), v);
  }
  for (std::size_t s = 0; s < heads_.size(); ++s) heads_[s].visit("head" + std::to_string(s), v);
  if (config_.task == Task::super_resolution) sr_tail_.visit("sr_tail", v);
}

std::vector<std::pair<std::string, Tensor>> Model::named_parameters() {
  std::vector<std::pair<std::string, Tensor>> out;
  visit(Visitor{[&](const std::string& n, Tensor& t) { out.emplace_back(n, t); }, nullptr});
  return out;
}

std::int64_t Model::param_count() {
  return count_params([&](const Visitor& v) { visit(v); });
}

void Model::zero_heads() {
  for (auto& h : heads_) {
    h.weight.fill(0.0);
    if (h.bias) h.bias->fill(0.0);
  }
  if (config_.task == Task::super_resolution) {
    sr_tail_.weight.fill(0.0);
    if (sr_tail_.bias) sr_tail_.bias->fill(0.0);
  }
}

void Model::account_stage(const Stage& stage, const std::string& name, std::int64_t h, std::int64_t w,
                          CostReport& r) const {
  for (std::size_t b = 0; b < stage.blocks.size(); ++b)
    stage.blocks[b]->account(name + ".block" + std::to_string(b) + "(" + stage.blocks[b]->kind() + ")", h, w, r);
}

CostReport Model::cost(std::int64_t height, std::int64_t width) const {
  CostReport r;
  const auto [hp, wp] = padded_extent(height, width);
  const auto S = config_.stages, C = config_.base_channels;
  auto conv_params = [](const Conv2d& c) { return c.weight.numel() + (c.bias ? c.bias->numel() : 0); };
  r.add("stem.conv3x3", conv_params(stem_), stem_.macs(hp, wp), static_cast<double>(C * hp * wp));
  account_stage(encoder_[0], "enc0", hp, wp, r);
  for (std::int64_t s = 1; s < S; ++s) {
    const auto i = static_cast<std::size_t>(s - 1);
    const auto h = hp >> s, w = wp >> s, hprev = hp >> (s - 1), wprev = wp >> (s - 1);
    const auto sn = "enc" + std::to_string(s);
    const auto cs = config_.stage_channels(s);
    r.add(sn + ".down.conv3x3s2", conv_params(down_[i]), down_[i].macs(hprev, wprev), static_cast<double>(cs * h * w));
    // 2x2 average of the stem features (one op per source element), then the 1x1 reduction
    r.add(sn + ".inject.pool+conv1x1", conv_params(inject_[i]), inject_[i].macs(h, w),
          static_cast<double>(C * hprev * wprev + cs * h * w));
    account_stage(encoder_[static_cast<std::size_t>(s)], sn, h, w, r);
  }
  for (std::int64_t s = S - 1; s >= 0; --s) {
    const auto h = hp >> s, w = wp >> s;
    const auto sn = "dec" + std::to_string(s);
    if (s < S - 1) {
      const auto& u = up_[static_cast<std::size_t>(s)];
      const auto cin = config_.stage_channels(s + 1), cout = config_.stage_channels(s);
      // bilinear resize of the coarse map, then 1x1 projection and skip addition
      r.add(sn + ".up.bilinear+conv1x1+skip", conv_params(u), u.macs(h, w),
            static_cast<double>(op_cost::bilinear * cin * h * w + 2 * cout * h * w));
    }
    account_stage(decoder_[static_cast<std::size_t>(s)], sn, h, w, r);
  }
  if (config_.task == Task::super_resolution) {
    const auto k = config_.sr_scale;
    r.add("sr_tail.conv3x3+shuffle+bilinear", conv_params(sr_tail_), sr_tail_.macs(hp, wp),
          static_cast<double>((1 + op_cost::bilinear + 1) * 3 * k * k * hp * wp));
  } else {
    for (std::int64_t s = 0; s < S; ++s) {
      const auto h = hp >> s, w = wp >> s;
      r.add("head" + std::to_string(s) + ".conv3x3+residual", conv_params(heads_[static_cast<std::size_t>(s)]),
            heads_[static_cast<std::size_t>(s)].macs(h, w), static_cast<double>((s > 0 ? 6 : 2) * 3 * h * w));
    }
  }
  return r;
}

}  // namespace rmx
