#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>
#include <string>
#include <vector>

#include "cfnet/backbone.hpp"
#include "cfnet/dataio.hpp"
#include "cfnet/errors.hpp"
#include "cfnet/losseval.hpp"
#include "cfnet/ops.hpp"
#include "cfnet/rng.hpp"
#include "cfnet/tape.hpp"

using namespace cfn;

namespace {

// Small enough to keep every forward here under a second.
NetworkConfig tiny_config() {
  NetworkConfig cfg;
  cfg.channels = {4, 6, 8, 10};
  cfg.blocks = {1, 1, 1, 1};
  cfg.in_channels = 3;
  cfg.num_classes = 5;
  cfg.T = 16;
  cfg.T_prime = 32;
  cfg.alpha_den = 4;
  cfg.head_width = 12;
  cfg.seed = 21;
  return cfg;
}

DetectionClip tiny_clip(int64_t T_raw = 32, uint64_t seed = 5, int64_t stride = 1) {
  SynthSpec spec;
  spec.num_clips = 1;
  spec.num_classes = 5;
  spec.T_raw = T_raw;
  spec.channels = 3;
  spec.height = 8;
  spec.width = 8;
  spec.bursts_per_clip = 2;
  spec.dur_lo = 2;
  spec.dur_hi = 4;
  spec.input_stride = stride;
  spec.seed = seed;
  return generate(spec)[0];
}

bool same_values(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.values().data(), b.values().data(),
                     static_cast<size_t>(a.numel()) * 8) == 0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

double grad_norm(const Tensor& t) {
  if (!t.has_grad()) return 0.0;
  double s = 0.0;
  for (double g : t.grad()) s += g * g;
  return std::sqrt(s);
}

Tensor train_logits(Model& m, const DetectionClip& clip, Tape& tape) {
  TapeScope scope(tape);
  return forward(m, clip, RunMode::Train).logits;
}

}  // namespace

TEST_CASE("build is deterministic and name sets track the config") {
  NetworkConfig cfg = tiny_config();

  SUBCASE("same seed and config give identical parameter bytes") {
    Model a = build(cfg);
    Model b = build(cfg);
    REQUIRE(a.params.size() == b.params.size());
    for (const auto& [name, t] : a.params) CHECK(same_values(t, b.params.at(name)));
  }

  SUBCASE("a different seed changes the weights but not the names") {
    NetworkConfig other = cfg;
    other.seed = 22;
    Model a = build(cfg);
    Model b = build(other);
    CHECK(parameter_names(cfg) == parameter_names(other));
    CHECK(!same_values(a.params.at("fine.stem.w"), b.params.at("fine.stem.w")));
  }

  SUBCASE("fusion none excludes every fusion head") {
    NetworkConfig none = cfg;
    none.fusion = FusionPreset::None;
    for (const auto& n : parameter_names(none)) {
      CHECK(n.rfind("fusion.", 0) != 0);
    }
  }

  SUBCASE("grid and stride pooling differ exactly by the confidence head") {
    NetworkConfig grid = cfg;
    grid.pooling = PoolingType::Grid;
    NetworkConfig stride = cfg;
    stride.pooling = PoolingType::Stride;
    auto gn = parameter_names(grid);
    auto sn = parameter_names(stride);
    std::set<std::string> gs(gn.begin(), gn.end()), ss(sn.begin(), sn.end());
    std::vector<std::string> only_grid;
    std::set_difference(gs.begin(), gs.end(), ss.begin(), ss.end(),
                        std::back_inserter(only_grid));
    std::vector<std::string> only_stride;
    std::set_difference(ss.begin(), ss.end(), gs.begin(), gs.end(),
                        std::back_inserter(only_stride));
    CHECK(only_stride.empty());
    REQUIRE(!only_grid.empty());
    for (const auto& n : only_grid) CHECK(n.rfind("conf.", 0) == 0);
  }

  SUBCASE("mask flag controls mask parameters only") {
    NetworkConfig no_mask = cfg;
    no_mask.mask = false;
    auto with = parameter_names(cfg);
    auto without = parameter_names(no_mask);
    CHECK(with.size() > without.size());
    for (const auto& n : without) CHECK(n.find(".mask") == std::string::npos);
  }

  SUBCASE("biases and neutral-start projections are zero") {
    Model m = build(cfg);
    auto all_zero = [&](const std::string& n) {
      for (double v : m.param(n).values()) {
        if (v != 0.0) return false;
      }
      return true;
    };
    CHECK(all_zero("fine.stem.b"));
    CHECK(all_zero("conf.c3.w"));
    CHECK(all_zero("conf.c3.b"));
    CHECK(all_zero("fusion.site4.scale.w"));
    CHECK(all_zero("fusion.site4.shift.b"));
    CHECK(all_zero("fusion.mask2.pw2.w"));
    CHECK(!all_zero("fine.stem.w"));
  }

  SUBCASE("config hash is stable and sensitive") {
    CHECK(config_hash(cfg) == config_hash(tiny_config()));
    NetworkConfig other = cfg;
    other.alpha_den = 2;
    other.T = 16;
    CHECK(config_hash(cfg) != config_hash(other));
  }

  SUBCASE("invalid configs are rejected at build time") {
    NetworkConfig bad = cfg;
    bad.T = 18;  // not divisible by 4
    CHECK_THROWS_AS(build(bad), ConfigError);
    bad = cfg;
    bad.alpha_den = 1;
    CHECK_THROWS_AS(build(bad), ConfigError);
    bad = cfg;
    bad.blocks = {1, 1};
    CHECK_THROWS_AS(build(bad), ConfigError);
    bad = cfg;
    bad.T_prime = 8;
    CHECK_THROWS_AS(build(bad), ConfigError);
  }
}

TEST_CASE("forward obeys the shape contract") {
  SUBCASE("toy detection shape") {
    Model m = build(tiny_config());
    DetectionClip clip = tiny_clip();
    ForwardResult r = forward(m, clip, RunMode::Eval);
    CHECK(r.logits.shape() == Shape{5, 32});
    CHECK(r.grid.T == 16);
    CHECK(r.grid.factor == 4);
    for (double v : r.logits.values()) CHECK(std::isfinite(v));
  }

  SUBCASE("charades-like configuration yields [157, 300]") {
    NetworkConfig cfg;
    cfg.channels = {8, 16, 32, 48};
    cfg.blocks = {1, 1, 1, 1};
    cfg.in_channels = 4;
    cfg.num_classes = 157;
    cfg.T = 30;
    cfg.T_prime = 30;
    cfg.input_stride = 10;
    cfg.pooling = PoolingType::None;
    cfg.fusion = FusionPreset::None;
    cfg.seed = 3;
    Model m = build(cfg);

    Rng rng(17);
    DetectionClip clip;
    clip.clip_id = "shape_check";
    clip.features = Tensor::randn({4, 300, 8, 8}, rng);
    clip.labels = Tensor::zeros({157, 300});
    clip.stride = 10;
    ForwardResult r = forward(m, clip, RunMode::Eval);
    CHECK(r.logits.shape() == Shape{157, 300});
  }

  SUBCASE("forward is deterministic") {
    Model a = build(tiny_config());
    Model b = build(tiny_config());
    DetectionClip clip = tiny_clip();
    CHECK(same_values(forward(a, clip, RunMode::Eval).logits,
                      forward(b, clip, RunMode::Eval).logits));
  }
}

TEST_CASE("forward rejects clips the model cannot consume") {
  Model m = build(tiny_config());

  SUBCASE("too long instructs segmentation") {
    DetectionClip clip = tiny_clip(64);
    CHECK_THROWS_WITH_AS(forward(m, clip, RunMode::Eval), doctest::Contains("segment"),
                         ConfigError);
  }
  SUBCASE("length not a multiple of the coarse length") {
    DetectionClip clip = tiny_clip(24);
    CHECK_THROWS_WITH_AS(forward(m, clip, RunMode::Eval),
                         doctest::Contains("multiple of the coarse length"), ConfigError);
  }
  SUBCASE("channel mismatch") {
    DetectionClip clip = tiny_clip();
    Rng rng(1);
    clip.features = Tensor::randn({2, 32, 8, 8}, rng);
    CHECK_THROWS_AS(forward(m, clip, RunMode::Eval), ConfigError);
  }
  SUBCASE("stride mismatch") {
    DetectionClip clip = tiny_clip();
    clip.stride = 2;
    CHECK_THROWS_AS(forward(m, clip, RunMode::Eval), ConfigError);
  }
  SUBCASE("offset beyond the sampling rate") {
    NetworkConfig cfg = tiny_config();
    cfg.coarse_offset = 2;
    Model off = build(cfg);
    DetectionClip clip = tiny_clip();  // L = 32, rate = 2
    CHECK_THROWS_WITH_AS(forward(off, clip, RunMode::Eval),
                         doctest::Contains("coarse_offset"), ConfigError);
  }
  SUBCASE("indivisible spatial size") {
    DetectionClip clip = tiny_clip();
    Rng rng(1);
    clip.features = Tensor::randn({3, 32, 6, 6}, rng);
    CHECK_THROWS_WITH_AS(forward(m, clip, RunMode::Eval),
                         doctest::Contains("divisible"), ConfigError);
  }
}

TEST_CASE("eval equals train on the same weights and clip") {
  // no length-dependent normalization anywhere: recording a tape must not
  // change a single bit of the values
  Model m = build(tiny_config());
  for (int64_t T_raw : {16, 32}) {
    DetectionClip clip = tiny_clip(T_raw);
    Tensor eval_logits = forward(m, clip, RunMode::Eval).logits;
    Tape tape;
    Tensor train_out = train_logits(m, clip, tape);
    CHECK(max_abs_diff(eval_logits, train_out) <= 1e-9);
  }
}

TEST_CASE("uniform-forced grid reproduces the stride baseline") {
  NetworkConfig grid_cfg = tiny_config();
  grid_cfg.force_uniform_grid = true;
  NetworkConfig stride_cfg = tiny_config();
  stride_cfg.pooling = PoolingType::Stride;

  Model grid_model = build(grid_cfg);
  Model stride_model = build(stride_cfg);
  for (uint64_t seed : {5u, 6u, 7u}) {
    DetectionClip clip = tiny_clip(32, seed);
    Tensor a = forward(grid_model, clip, RunMode::Eval).logits;
    Tensor b = forward(stride_model, clip, RunMode::Eval).logits;
    CHECK(max_abs_diff(a, b) <= 1e-9);
  }
}

TEST_CASE("degenerate single-stream behaviour when nothing is fused") {
  NetworkConfig cfg = tiny_config();
  cfg.pooling = PoolingType::None;
  cfg.fusion = FusionPreset::None;
  Model m = build(cfg);
  DetectionClip clip = tiny_clip();
  Tensor base = forward(m, clip, RunMode::Eval).logits;

  // nothing consumes fine features, so the model carries no fine stream
  for (const auto& n : parameter_names(cfg)) {
    CHECK(n.rfind("fine.", 0) != 0);
  }

  // the coarse stream drives the logits
  Rng rng(99);
  m.set_param("coarse.stem.w",
              Tensor(m.param("coarse.stem.w").shape(),
                     rng.normal_vec(static_cast<size_t>(m.param("coarse.stem.w").numel())),
                     true));
  CHECK(!same_values(base, forward(m, clip, RunMode::Eval).logits));
}

TEST_CASE("fusion presets wire the sites they advertise") {
  DetectionClip clip = tiny_clip();

  SUBCASE("late-only touches only the final stage") {
    NetworkConfig cfg = tiny_config();
    cfg.fusion = FusionPreset::LateOnly;
    Model m = build(cfg);
    Tape tape;
    train_logits(m, clip, tape);
    const auto& log = tape.op_log();
    auto idx = [&](const std::string& needle) {
      auto it = std::find(log.begin(), log.end(), needle);
      REQUIRE(it != log.end());
      return it - log.begin();
    };
    auto last_stage_at = idx("#coarse.stage4");
    auto site_at = idx("#fuse.site4");
    CHECK(site_at > last_stage_at);
    CHECK(std::find(log.begin(), log.end(), "#fuse.site2") == log.end());
    CHECK(std::find(log.begin(), log.end(), "#fuse.site3") == log.end());
    // no fusion computation happens before the last coarse stage
    for (long i = 0; i < last_stage_at; ++i) {
      CHECK(log[static_cast<size_t>(i)] != "calibrate");
    }
    // and it does happen after
    CHECK(std::find(log.begin() + site_at, log.end(), "calibrate") != log.end());
  }

  SUBCASE("multi-stage fuses at every deep stage") {
    Model m = build(tiny_config());
    Tape tape;
    train_logits(m, clip, tape);
    const auto& log = tape.op_log();
    for (const char* mark : {"#fuse.site2", "#fuse.site3", "#fuse.site4"}) {
      CHECK(std::find(log.begin(), log.end(), mark) != log.end());
    }
  }

  SUBCASE("fusion changes the logits once its projections move off zero") {
    Model m = build(tiny_config());
    Tensor neutral = forward(m, clip, RunMode::Eval).logits;
    Rng rng(123);
    const Tensor& w = m.param("fusion.site3.shift.w");
    m.set_param("fusion.site3.shift.w",
                Tensor(w.shape(), rng.normal_vec(static_cast<size_t>(w.numel()), 0.0, 0.5),
                       true));
    CHECK(!same_values(neutral, forward(m, clip, RunMode::Eval).logits));
  }

  SUBCASE("slowfast baseline concatenates laterals without fusion parameters") {
    NetworkConfig cfg = tiny_config();
    cfg.pooling = PoolingType::Stride;
    cfg.fusion = FusionPreset::SlowFastDet;
    for (const auto& n : parameter_names(cfg)) CHECK(n.rfind("fusion.", 0) != 0);
    Model m = build(cfg);
    DetectionClip c = tiny_clip();
    Tensor base = forward(m, c, RunMode::Eval).logits;
    CHECK(base.shape() == Shape{5, 32});
    // laterals make the fine stream matter even without fusion heads
    Rng rng(7);
    const Tensor& w = m.param("fine.stem.w");
    m.set_param("fine.stem.w",
                Tensor(w.shape(), rng.normal_vec(static_cast<size_t>(w.numel())), true));
    CHECK(!same_values(base, forward(m, c, RunMode::Eval).logits));
  }

  SUBCASE("every fusion preset and reduce mode runs end to end") {
    for (FusionPreset preset : {FusionPreset::LateOnly, FusionPreset::OneToOne,
                                FusionPreset::MultiStage}) {
      for (ReduceMode mode : {ReduceMode::C, ReduceMode::CHW, ReduceMode::CTHW}) {
        NetworkConfig cfg = tiny_config();
        cfg.fusion = preset;
        cfg.reduce_mode = mode;
        Model m = build(cfg);
        Tensor out = forward(m, clip, RunMode::Eval).logits;
        CHECK(out.shape() == Shape{5, 32});
        for (double v : out.values()) REQUIRE(std::isfinite(v));
      }
    }
  }
}

TEST_CASE("the grid is trainable end to end") {
  Model m = build(tiny_config());
  DetectionClip clip = tiny_clip();

  Tape tape;
  {
    TapeScope scope(tape);
    ForwardResult r = forward(m, clip, RunMode::Train);
    Tensor loss = detection_loss(r.logits, clip.labels);
    tape.backward(loss);
  }
  // the zero-initialized final projection still receives gradient
  CHECK(grad_norm(m.param("conf.c3.w")) > 0.0);
  CHECK(grad_norm(m.param("head.fc2.w")) > 0.0);
  CHECK(grad_norm(m.param("fusion.site4.scale.w")) > 0.0);

  // once it moves off zero, gradient reaches the whole confidence head
  const Tensor& w3 = m.param("conf.c3.w");
  std::vector<double> stepped = w3.values();
  const auto& g = w3.grad();
  for (size_t i = 0; i < stepped.size(); ++i) stepped[i] -= 0.5 * g[i] - 0.01;
  m.set_param("conf.c3.w", Tensor(w3.shape(), std::move(stepped), true));

  Tape tape2;
  {
    TapeScope scope(tape2);
    ForwardResult r = forward(m, clip, RunMode::Train);
    Tensor loss = detection_loss(r.logits, clip.labels);
    tape2.backward(loss);
  }
  CHECK(grad_norm(m.param("conf.c1.w")) > 0.0);
  CHECK(grad_norm(m.param("conf.c2.w")) > 0.0);

  // and the learned grid now differs from uniform
  ForwardResult r = forward(m, clip, RunMode::Eval);
  bool off_uniform = false;
  for (int64_t i = 0; i < r.grid.p.numel(); ++i) {
    if (std::abs(r.grid.p.at(i) - 0.5) > 1e-12) off_uniform = true;
  }
  CHECK(off_uniform);
}

TEST_CASE("checkpoint round-trip restores the exact model") {
  Model m = build(tiny_config());
  DetectionClip clip = tiny_clip();
  Tensor before = forward(m, clip, RunMode::Eval).logits;

  std::map<std::string, Tensor> snapshot = m.params;

  SUBCASE("full load reproduces the logits") {
    Model fresh = build(tiny_config());
    NetworkConfig other = tiny_config();
    other.seed = 77;
    Model scrambled = build(other);
    load_params(scrambled, snapshot);
    CHECK(same_values(before, forward(scrambled, clip, RunMode::Eval).logits));
    (void)fresh;
  }

  SUBCASE("fusion heads may start fresh on top of pretrained streams") {
    NetworkConfig plain = tiny_config();
    plain.fusion = FusionPreset::None;
    Model streams = build(plain);
    // a coarse-only checkpoint loads into a fused model; fusion params and
    // the whole absent fine stream keep their init
    std::map<std::string, Tensor> src = streams.params;
    Model fused = build(tiny_config());
    Tensor site_w = fused.param("fusion.site4.scale.w");
    Tensor fine_w = fused.param("fine.stem.w");
    load_params(fused, src);
    CHECK(same_values(fused.param("fusion.site4.scale.w"), site_w));
    CHECK(same_values(fused.param("fine.stem.w"), fine_w));
    CHECK(same_values(fused.param("coarse.stem.w"), streams.param("coarse.stem.w")));
  }

  SUBCASE("missing backbone parameters are an error") {
    auto src = snapshot;
    src.erase("head.fc2.w");
    Model fresh = build(tiny_config());
    CHECK_THROWS_WITH_AS(load_params(fresh, src), doctest::Contains("head.fc2.w"),
                         ConfigError);
  }

  SUBCASE("unknown parameters are an error") {
    auto src = snapshot;
    src.emplace("bogus.w", Tensor::zeros({2}));
    Model fresh = build(tiny_config());
    CHECK_THROWS_WITH_AS(load_params(fresh, src), doctest::Contains("bogus.w"),
                         ConfigError);
  }

  SUBCASE("shape mismatch is an error") {
    auto src = snapshot;
    src.at("head.fc2.w") = Tensor::zeros({2, 2});
    Model fresh = build(tiny_config());
    CHECK_THROWS_AS(load_params(fresh, src), ConfigError);
  }
}
