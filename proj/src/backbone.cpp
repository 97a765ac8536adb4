#include "cfnet/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cfnet/errors.hpp"
#include "cfnet/ops.hpp"
#include "cfnet/rng.hpp"
#include "cfnet/tape.hpp"

namespace cfn {

const char* pooling_name(PoolingType p) {
  switch (p) {
    case PoolingType::Grid: return "grid";
    case PoolingType::Stride: return "stride";
    case PoolingType::Max: return "max";
    case PoolingType::Avg: return "avg";
    case PoolingType::None: return "none";
  }
  return "?";
}

const char* fusion_name(FusionPreset f) {
  switch (f) {
    case FusionPreset::None: return "none";
    case FusionPreset::LateOnly: return "late-only";
    case FusionPreset::OneToOne: return "one-to-one";
    case FusionPreset::MultiStage: return "multi-stage";
    case FusionPreset::SlowFastDet: return "slowfast-det";
  }
  return "?";
}

const char* reduce_mode_name(ReduceMode m) {
  switch (m) {
    case ReduceMode::C: return "c";
    case ReduceMode::CHW: return "chw";
    case ReduceMode::CTHW: return "cthw";
  }
  return "?";
}

void validate_config(const NetworkConfig& cfg) {
  auto bad = [](const std::string& msg) { throw ConfigError("config: " + msg); };
  if (cfg.channels.empty()) bad("at least one stage is required");
  if (cfg.blocks.size() != cfg.channels.size()) {
    bad("blocks and channels must list the same number of stages");
  }
  for (int64_t c : cfg.channels) if (c < 1) bad("stage widths must be >= 1");
  for (int64_t b : cfg.blocks) if (b < 1) bad("block counts must be >= 1");
  if (cfg.in_channels < 1) bad("in_channels must be >= 1");
  if (cfg.num_classes < 1) bad("num_classes must be >= 1");
  if (cfg.head_width < 1) bad("head_width must be >= 1");
  if (cfg.T < 2) bad("T must be >= 2");
  if (cfg.T_prime < cfg.T) bad("T_prime must be >= T");
  if (cfg.input_stride < 1) bad("input_stride must be >= 1");
  if (cfg.coarse_offset < 0) bad("coarse_offset must be >= 0");
  if (cfg.pooling != PoolingType::None) {
    if (cfg.alpha_den < 2) {
      bad("temporal pooling needs an integer downsampling factor >= 2 (alpha = 1/factor)");
    }
    if (cfg.T % cfg.alpha_den != 0) {
      bad("T = " + std::to_string(cfg.T) + " is not divisible by the downsampling factor " +
          std::to_string(cfg.alpha_den));
    }
  }
  if (cfg.fusion != FusionPreset::None && cfg.channels.size() < 2) {
    bad("fusion needs at least two stages");
  }
  if (!(cfg.sigma_div > 0.0)) bad("sigma_div must be > 0");
}

std::string config_summary(const NetworkConfig& cfg) {
  std::ostringstream ss;
  auto list = [&](const std::vector<int64_t>& v) {
    for (size_t i = 0; i < v.size(); ++i) ss << (i ? "," : "") << v[i];
  };
  ss << "channels=";
  list(cfg.channels);
  ss << "\nblocks=";
  list(cfg.blocks);
  ss << "\nin_channels=" << cfg.in_channels << "\nnum_classes=" << cfg.num_classes
     << "\nT=" << cfg.T << "\nT_prime=" << cfg.T_prime << "\nalpha_den=" << cfg.alpha_den
     << "\ninput_stride=" << cfg.input_stride << "\ncoarse_offset=" << cfg.coarse_offset
     << "\npooling=" << pooling_name(cfg.pooling) << "\nfusion=" << fusion_name(cfg.fusion)
     << "\nreduce_mode=" << reduce_mode_name(cfg.reduce_mode)
     << "\nmask=" << (cfg.mask ? 1 : 0) << "\nlearned_centers=" << (cfg.learned_centers ? 1 : 0)
     << "\nsigma_div=" << cfg.sigma_div
     << "\nforce_uniform_grid=" << (cfg.force_uniform_grid ? 1 : 0)
     << "\nhead_width=" << cfg.head_width << "\nseed=" << cfg.seed << "\n";
  return ss.str();
}

uint64_t config_hash(const NetworkConfig& cfg) { return fnv1a64(config_summary(cfg)); }

namespace {

constexpr int64_t kConfWidth1 = 8;
constexpr int64_t kConfWidth2 = 16;

struct ParamSpec {
  std::string name;
  Shape shape;
  bool zero_init;  // otherwise fan-in-scaled normal
  int64_t fan_in;
};

int last_stage(const NetworkConfig& cfg) { return static_cast<int>(cfg.channels.size()); }

bool fused_preset(FusionPreset f) {
  return f == FusionPreset::LateOnly || f == FusionPreset::OneToOne ||
         f == FusionPreset::MultiStage;
}

// Fine levels a given site consumes.
std::vector<int> site_levels(const NetworkConfig& cfg, int site) {
  if (cfg.fusion == FusionPreset::MultiStage) {
    std::vector<int> all;
    for (int l = 2; l <= last_stage(cfg); ++l) all.push_back(l);
    return all;
  }
  return {site};
}

std::vector<int> fusion_sites(const NetworkConfig& cfg) {
  const int S = last_stage(cfg);
  switch (cfg.fusion) {
    case FusionPreset::None: return {};
    case FusionPreset::LateOnly: return {S};
    default: {
      std::vector<int> sites;
      for (int k = 2; k <= S; ++k) sites.push_back(k);
      return sites;
    }
  }
}

// Coarse input width of a stage (1-based). SlowFast laterals concatenate the
// matching fine level after every site, doubling the next consumer's input.
int64_t stage_in_width(const NetworkConfig& cfg, const std::string& stream, int i) {
  if (i == 1) return cfg.channels[0];  // stem output
  int64_t w = cfg.channels[static_cast<size_t>(i - 2)];
  if (stream == "coarse" && cfg.fusion == FusionPreset::SlowFastDet && i >= 3) w *= 2;
  return w;
}

int64_t head_in_width(const NetworkConfig& cfg) {
  int64_t w = cfg.channels.back();
  if (cfg.fusion == FusionPreset::SlowFastDet) w *= 2;
  return w;
}

std::vector<ParamSpec> param_specs(const NetworkConfig& cfg) {
  validate_config(cfg);
  std::vector<ParamSpec> out;
  auto kaiming = [&](std::string name, Shape shape, int64_t fan_in) {
    out.push_back({std::move(name), std::move(shape), false, fan_in});
  };
  auto zeros = [&](std::string name, Shape shape) {
    out.push_back({std::move(name), std::move(shape), true, 0});
  };

  const int S = last_stage(cfg);
  // without fusion there is nothing to consume fine features, so the model
  // is a single coarse stream; stream-only checkpoints stay composable
  std::vector<std::string> streams{"coarse"};
  if (cfg.fusion != FusionPreset::None) streams.emplace_back("fine");
  for (const std::string& stream : streams) {
    kaiming(stream + ".stem.w", {cfg.channels[0], cfg.in_channels, 3}, cfg.in_channels * 3);
    zeros(stream + ".stem.b", {cfg.channels[0]});
    for (int i = 1; i <= S; ++i) {
      const int64_t C = cfg.channels[static_cast<size_t>(i - 1)];
      const int64_t w_in = stage_in_width(cfg, stream, i);
      for (int64_t j = 0; j < cfg.blocks[static_cast<size_t>(i - 1)]; ++j) {
        const int64_t b_in = j == 0 ? w_in : C;
        const std::string pre =
            stream + ".s" + std::to_string(i) + ".b" + std::to_string(j);
        kaiming(pre + ".pw1.w", {C, b_in}, b_in);
        zeros(pre + ".pw1.b", {C});
        kaiming(pre + ".tconv.w", {C, C, 3}, C * 3);
        zeros(pre + ".tconv.b", {C});
        kaiming(pre + ".pw2.w", {C, C}, C);
        zeros(pre + ".pw2.b", {C});
        if (b_in != C) kaiming(pre + ".proj.w", {C, b_in}, b_in);
      }
    }
  }

  if (cfg.pooling == PoolingType::Grid) {
    kaiming("conf.c1.w", {kConfWidth1, cfg.channels[0], 3}, cfg.channels[0] * 3);
    zeros("conf.c1.b", {kConfWidth1});
    kaiming("conf.c2.w", {kConfWidth2, kConfWidth1, 3}, kConfWidth1 * 3);
    zeros("conf.c2.b", {kConfWidth2});
    // zero final layer: the grid starts exactly uniform
    zeros("conf.c3.w", {1, kConfWidth2, 3});
    zeros("conf.c3.b", {1});
  }

  if (fused_preset(cfg.fusion)) {
    std::vector<int> levels_used;
    for (int site : fusion_sites(cfg)) {
      for (int l : site_levels(cfg, site)) {
        if (std::find(levels_used.begin(), levels_used.end(), l) == levels_used.end()) {
          levels_used.push_back(l);
        }
      }
    }
    std::sort(levels_used.begin(), levels_used.end());
    if (cfg.mask) {
      for (int l : levels_used) {
        const int64_t C = cfg.channels[static_cast<size_t>(l - 1)];
        const int64_t hidden = std::max<int64_t>(1, C / 2);
        const std::string pre = "fusion.mask" + std::to_string(l);
        kaiming(pre + ".pw1.w", {hidden, C}, C);
        zeros(pre + ".pw1.b", {hidden});
        // zero gate projection: mask starts at 0.5 everywhere
        zeros(pre + ".pw2.w", {C, hidden});
        zeros(pre + ".pw2.b", {C});
      }
    }
    for (int site : fusion_sites(cfg)) {
      const int64_t C_site = cfg.channels[static_cast<size_t>(site - 1)];
      int64_t C_in = 0;
      for (int l : site_levels(cfg, site)) C_in += cfg.channels[static_cast<size_t>(l - 1)];
      const std::string pre = "fusion.site" + std::to_string(site);
      // zero projections: A starts at 0.5, B at 0
      zeros(pre + ".scale.w", {C_site, C_in});
      zeros(pre + ".scale.b", {C_site});
      zeros(pre + ".shift.w", {C_site, C_in});
      zeros(pre + ".shift.b", {C_site});
    }
  }

  const int64_t h_in = head_in_width(cfg);
  kaiming("head.conv5.w", {cfg.head_width, h_in}, h_in);
  zeros("head.conv5.b", {cfg.head_width});
  kaiming("head.fc1.w", {cfg.head_width, cfg.head_width}, cfg.head_width);
  zeros("head.fc1.b", {cfg.head_width});
  kaiming("head.fc2.w", {cfg.num_classes, cfg.head_width}, cfg.head_width);
  zeros("head.fc2.b", {cfg.num_classes});
  return out;
}

}  // namespace

std::vector<std::string> parameter_names(const NetworkConfig& cfg) {
  std::vector<std::string> names;
  for (auto& s : param_specs(cfg)) names.push_back(s.name);
  std::sort(names.begin(), names.end());
  return names;
}

Model build(const NetworkConfig& cfg) {
  Model m;
  m.cfg = cfg;
  for (auto& s : param_specs(cfg)) {
    Tensor t;
    if (s.zero_init) {
      t = Tensor::zeros(s.shape, /*requires_grad=*/true);
    } else {
      Rng rng = Rng::derive(cfg.seed, s.name);
      const double sigma = std::sqrt(2.0 / static_cast<double>(s.fan_in));
      t = Tensor::randn(s.shape, rng, sigma, /*requires_grad=*/true);
    }
    m.params.emplace(s.name, std::move(t));
  }
  return m;
}

const Tensor& Model::param(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) {
    throw InvariantError("model has no parameter named " + name);
  }
  return it->second;
}

void Model::set_param(const std::string& name, Tensor t) {
  auto it = params.find(name);
  if (it == params.end()) {
    throw InvariantError("model has no parameter named " + name);
  }
  if (t.shape() != it->second.shape()) {
    throw ConfigError("parameter " + name + " expects shape " +
                      shape_str(it->second.shape()) + ", got " + shape_str(t.shape()));
  }
  it->second = std::move(t);
}

void load_params(Model& m, const std::map<std::string, Tensor>& src) {
  std::string missing, extra;
  for (const auto& [name, t] : src) {
    if (!m.params.count(name)) extra += (extra.empty() ? "" : ", ") + name;
  }
  // a stream wholly absent from the source stays at init, so stream-only
  // checkpoints compose; a partially present stream is still an error
  auto present = [&](const char* pre) {
    for (const auto& [name, t] : src)
      if (name.rfind(pre, 0) == 0) return true;
    return false;
  };
  const bool has_coarse = present("coarse.");
  const bool has_fine = present("fine.");
  for (auto& [name, t] : m.params) {
    auto it = src.find(name);
    if (it == src.end()) {
      // fusion and confidence heads may start fresh on top of pretrained streams
      if (name.rfind("fusion.", 0) == 0 || name.rfind("conf.", 0) == 0) continue;
      if (name.rfind("coarse.", 0) == 0 && !has_coarse) continue;
      if (name.rfind("fine.", 0) == 0 && !has_fine) continue;
      missing += (missing.empty() ? "" : ", ") + name;
      continue;
    }
    if (it->second.shape() != t.shape()) {
      throw ConfigError("checkpoint parameter " + name + " has shape " +
                        shape_str(it->second.shape()) + ", model expects " +
                        shape_str(t.shape()));
    }
  }
  if (!missing.empty() || !extra.empty()) {
    std::string msg = "checkpoint does not match the model.";
    if (!missing.empty()) msg += " missing: " + missing + ".";
    if (!extra.empty()) msg += " unexpected: " + extra + ".";
    throw ConfigError(msg);
  }
  for (auto& [name, t] : m.params) {
    auto it = src.find(name);
    if (it == src.end()) continue;
    t = Tensor(it->second.shape(), it->second.values(), /*requires_grad=*/true);
  }
}

namespace {

Tensor pw(const Model& m, const Tensor& x, const std::string& prefix) {
  return conv_pointwise(x, m.param(prefix + ".w"), m.param(prefix + ".b"));
}

Tensor tconv_b(const Model& m, const Tensor& x, const std::string& prefix, int stride) {
  const Tensor& w = m.param(prefix + ".w");
  const Tensor& b = m.param(prefix + ".b");
  return add(conv_temporal(x, w, stride, 1), reshape(b, {b.dim(0), 1, 1, 1}));
}

Tensor res_block(const Model& m, const Tensor& x, const std::string& prefix, int64_t C) {
  Tensor h = relu(pw(m, x, prefix + ".pw1"));
  h = relu(tconv_b(m, h, prefix + ".tconv", 1));
  h = pw(m, h, prefix + ".pw2");
  Tensor skip = x.dim(0) == C
      ? x
      : conv_pointwise(x, m.param(prefix + ".proj.w"), Tensor::zeros({C}));
  return relu(add(h, skip));
}

Tensor run_stage(const Model& m, Tensor x, const std::string& stream, int i) {
  const int64_t C = m.cfg.channels[static_cast<size_t>(i - 1)];
  for (int64_t j = 0; j < m.cfg.blocks[static_cast<size_t>(i - 1)]; ++j) {
    x = res_block(m, x, stream + ".s" + std::to_string(i) + ".b" + std::to_string(j), C);
  }
  return x;
}

// p strictly inside (0,1): a tiny squash keeps a saturated sigmoid off the
// exact endpoints, which the grid construction rejects.
constexpr double kConfGuard = 1e-6;

Tensor confidence_from(const Model& m, const Tensor& stage1_out) {
  const auto strides = stride_factorization(m.cfg.alpha_den);
  Tensor h = relu(tconv_b(m, stage1_out, "conf.c1", static_cast<int>(strides[0])));
  h = relu(tconv_b(m, h, "conf.c2", static_cast<int>(strides[1])));
  h = tconv_b(m, h, "conf.c3", static_cast<int>(strides[2]));
  h = reduce(h, {2, 3}, Reduce::Mean, /*keepdims=*/false);  // [1, N]
  h = reshape(h, {h.dim(1)});
  return add_scalar(mul_scalar(sigmoid(h), 1.0 - 2.0 * kConfGuard), kConfGuard);
}

GridSpec uniform_grid(int64_t T, int64_t factor) {
  return make_grid(Tensor::full({T / factor}, 0.5), T, factor);
}

}  // namespace

ForwardResult forward(const Model& m, const DetectionClip& clip, RunMode mode) {
  const NetworkConfig& cfg = m.cfg;
  const int S = last_stage(cfg);
  const Tensor& feats = clip.features;
  if (!feats.defined() || feats.ndim() != 4) {
    throw ConfigError("forward: clip features must be [C, T, H, W]");
  }
  if (feats.dim(0) != cfg.in_channels) {
    throw ConfigError("forward: clip has " + std::to_string(feats.dim(0)) +
                      " channels, model expects " + std::to_string(cfg.in_channels));
  }
  if (clip.stride != cfg.input_stride) {
    throw ConfigError("forward: clip stride " + std::to_string(clip.stride) +
                      " differs from the configured input stride " +
                      std::to_string(cfg.input_stride));
  }
  const int64_t T_raw = feats.dim(1);
  if (T_raw % cfg.input_stride != 0) {
    throw ConfigError("forward: clip length " + std::to_string(T_raw) +
                      " is not a multiple of input stride " +
                      std::to_string(cfg.input_stride));
  }
  const int64_t spatial_div = int64_t{1} << (S - 1);
  if (feats.dim(2) % spatial_div != 0 || feats.dim(3) % spatial_div != 0) {
    throw ConfigError("forward: spatial size " + std::to_string(feats.dim(2)) + "x" +
                      std::to_string(feats.dim(3)) + " must be divisible by " +
                      std::to_string(spatial_div));
  }

  Tensor fine_in = cfg.input_stride > 1
      ? stride_select_axis1(feats, cfg.input_stride, 0) : feats;
  const int64_t L = fine_in.dim(1);
  if (L > cfg.T_prime) {
    throw ConfigError(
        std::string("forward: strided clip length ") + std::to_string(L) +
        " exceeds the model's maximum T' = " + std::to_string(cfg.T_prime) +
        (mode == RunMode::Train ? "; segment the clip into training windows of at most "
                                : "; segment the clip into evaluation windows of at most ") +
        std::to_string(cfg.T_prime * cfg.input_stride) + " raw frames");
  }
  if (L % cfg.T != 0) {
    throw ConfigError("forward: strided clip length " + std::to_string(L) +
                      " must be a multiple of the coarse length T = " +
                      std::to_string(cfg.T));
  }
  const int64_t rate = L / cfg.T;
  if (cfg.coarse_offset >= rate) {
    throw ConfigError("forward: coarse_offset " + std::to_string(cfg.coarse_offset) +
                      " must be below the coarse sampling rate " + std::to_string(rate));
  }

  Tape* tape = Tape::active();
  auto mark = [&](std::string s) {
    if (tape) tape->mark(std::move(s));
  };

  const bool fuses = fused_preset(cfg.fusion);

  // fine stream: full strided clip, no temporal pooling; only built when a
  // fusion pathway consumes it
  std::vector<Tensor> fine_level(static_cast<size_t>(S) + 1);
  if (cfg.fusion != FusionPreset::None) {
    Tensor f = relu(tconv_b(m, fine_in, "fine.stem", 1));
    f = run_stage(m, f, "fine", 1);
    fine_level[1] = f;
    mark("fine.stage1");
    for (int i = 2; i <= S; ++i) {
      f = pool_spatial_max(f, 2);
      f = run_stage(m, f, "fine", i);
      fine_level[static_cast<size_t>(i)] = f;
      mark("fine.stage" + std::to_string(i));
    }
  }

  // coarse stream: uniform subsample spanning the clip at length T
  Tensor coarse_in = (rate > 1 || cfg.coarse_offset > 0)
      ? stride_select_axis1(fine_in, rate, cfg.coarse_offset) : fine_in;
  Tensor cx = relu(tconv_b(m, coarse_in, "coarse.stem", 1));
  cx = run_stage(m, cx, "coarse", 1);
  mark("coarse.stage1");

  GridSpec spec;
  switch (cfg.pooling) {
    case PoolingType::Grid: {
      Tensor p = cfg.force_uniform_grid
          ? Tensor::full({cfg.T / cfg.alpha_den}, 0.5)
          : confidence_from(m, cx);
      spec = make_grid(p, cfg.T, cfg.alpha_den);
      cx = grid_pool(cx, spec);
      break;
    }
    case PoolingType::Stride:
    case PoolingType::Max:
    case PoolingType::Avg: {
      spec = uniform_grid(cfg.T, cfg.alpha_den);
      const PoolKind kind = cfg.pooling == PoolingType::Stride ? PoolKind::Stride
                          : cfg.pooling == PoolingType::Max    ? PoolKind::Max
                                                               : PoolKind::Avg;
      cx = fixed_pool(cx, kind, cfg.alpha_den);
      break;
    }
    case PoolingType::None:
      spec = uniform_grid(cfg.T, 1);
      break;
  }
  mark("coarse.pool");

  const bool need_bank = fuses && cfg.reduce_mode == ReduceMode::CTHW;
  GaussianBank bank;
  if (need_bank) {
    GridSpec centers_src = spec;
    if (!cfg.learned_centers && cfg.pooling == PoolingType::Grid) {
      centers_src = uniform_grid(cfg.T, cfg.alpha_den);
    }
    const double span_start = static_cast<double>(cfg.coarse_offset);
    const double span_end = static_cast<double>(cfg.coarse_offset + (cfg.T - 1) * rate);
    bank = build_gaussian_bank(centers_src, L, span_start, span_end, cfg.sigma_div);
  }

  std::map<int, Tensor> prepared;
  auto prepare = [&](int l) -> Tensor {
    if (auto it = prepared.find(l); it != prepared.end()) return it->second;
    Tensor xf = fine_level[static_cast<size_t>(l)];
    if (cfg.mask) {
      const std::string pre = "fusion.mask" + std::to_string(l);
      xf = attention_mask(xf, m.param(pre + ".pw1.w"), m.param(pre + ".pw1.b"),
                          m.param(pre + ".pw2.w"), m.param(pre + ".pw2.b"));
    }
    Tensor red = reduce_level(xf, cfg.reduce_mode, need_bank ? &bank : nullptr);
    prepared.emplace(l, red);
    return red;
  };

  const auto sites = fusion_sites(cfg);
  for (int i = 2; i <= S; ++i) {
    cx = pool_spatial_max(cx, 2);
    cx = run_stage(m, cx, "coarse", i);
    mark("coarse.stage" + std::to_string(i));
    if (std::find(sites.begin(), sites.end(), i) == sites.end()) continue;
    mark("fuse.site" + std::to_string(i));
    if (cfg.fusion == FusionPreset::SlowFastDet) {
      const Tensor& lvl = fine_level[static_cast<size_t>(i)];
      Tensor lateral = pool_temporal(lvl, PoolKind::Stride, lvl.dim(1) / cx.dim(1));
      cx = concat_axis0({cx, lateral});
      continue;
    }
    std::vector<Tensor> parts;
    for (int l : site_levels(cfg, i)) parts.push_back(prepare(l));
    Tensor cat = multi_stage_concat(parts);
    if (cfg.reduce_mode != ReduceMode::C) cat = adapt_spatial(cat, cx.dim(2), cx.dim(3));
    const std::string pre = "fusion.site" + std::to_string(i);
    auto [A, B] = scale_shift(cat, m.param(pre + ".scale.w"), m.param(pre + ".scale.b"),
                              m.param(pre + ".shift.w"), m.param(pre + ".shift.b"));
    cx = fuse(cx, A, B);
  }

  mark("head");
  Tensor h = relu(pw(m, cx, "head.conv5"));
  h = reduce(h, {2, 3}, Reduce::Mean, /*keepdims=*/true);
  h = relu(pw(m, h, "head.fc1"));
  h = pw(m, h, "head.fc2");  // [K, N, 1, 1]
  Tensor logits = reshape(h, {cfg.num_classes, h.dim(1)});
  logits = grid_unpool(logits, spec, T_raw);

  return {std::move(logits), std::move(spec)};
}

}  // namespace cfn
