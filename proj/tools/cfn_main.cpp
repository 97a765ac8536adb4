#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cfnet/backbone.hpp"
#include "cfnet/config.hpp"
#include "cfnet/dataio.hpp"
#include "cfnet/errors.hpp"
#include "cfnet/gradcheck.hpp"
#include "cfnet/log.hpp"
#include "cfnet/losseval.hpp"
#include "cfnet/tape.hpp"
#include "cfnet/trainer.hpp"

namespace fs = std::filesystem;
using namespace cfn;

namespace {

std::string hash_hex(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
  return buf;
}

// Loads a checkpoint and refuses one written under a different network
// configuration.
Checkpoint load_matching_checkpoint(const std::string& dir, const NetworkConfig& net) {
  Checkpoint ck = load_checkpoint(dir);
  const std::string expect = hash_hex(config_hash(net));
  if (ck.config_hash != expect) {
    throw ConfigError("checkpoint " + dir + " was written for configuration " +
                      ck.config_hash + ", this run is " + expect);
  }
  return ck;
}

int cmd_generate(const RunConfig& r) {
  SynthSpec train_spec = r.gen;
  SynthSpec val_spec = r.gen;
  val_spec.num_clips = r.gen_val_clips;
  val_spec.index_offset = r.gen.num_clips;  // disjoint clip substreams

  const std::string train_dir = (fs::path(r.out_dir) / "train").string();
  const std::string val_dir = (fs::path(r.out_dir) / "val").string();
  write_dataset(train_dir, generate(train_spec), r.gen.num_classes);
  write_dataset(val_dir, generate(val_spec), r.gen.num_classes);
  std::printf("wrote %" PRId64 " train clips to %s\n", train_spec.num_clips,
              train_dir.c_str());
  std::printf("wrote %" PRId64 " val clips to %s\n", val_spec.num_clips,
              val_dir.c_str());
  return 0;
}

int cmd_train(const RunConfig& r) {
  TrainConfig tc = r.train;
  // `--checkpoint` on train means warm-start composition
  if (tc.init_checkpoint.empty() && !r.checkpoint.empty())
    tc.init_checkpoint = r.checkpoint;
  TrainResult res = run_train(tc);
  if (tc.overfit_steps > 0) {
    std::printf("overfit %zu steps, final loss %.6f\n", res.overfit_losses.size(),
                res.final_train_loss);
  } else {
    std::printf("trained %" PRId64 " epochs, train loss %.6f, val mAP %.6f\n",
                res.epochs_run, res.final_train_loss, res.final_val_map);
  }
  std::printf("checkpoint at %s\n", res.checkpoint_dir.c_str());
  return 0;
}

int cmd_eval(const RunConfig& r) {
  if (r.checkpoint.empty())
    throw ConfigError("eval: --checkpoint (or run.checkpoint) is required");
  const std::string data_dir = r.val_dir.empty() ? r.train_dir : r.val_dir;
  if (data_dir.empty())
    throw ConfigError("eval: data.val_dir or data.train_dir must name a dataset");

  Model m = build(r.net);
  Checkpoint ck = load_matching_checkpoint(r.checkpoint, r.net);
  load_params(m, ck.params);
  std::vector<DetectionClip> clips = load_dataset(data_dir);

  std::vector<EvalMode> modes;
  if (r.eval_both) {
    modes = {EvalMode::AllFrames, EvalMode::Sampled25};
  } else {
    modes = {r.eval_mode};
  }
  fs::create_directories(r.out_dir);
  for (EvalMode mode : modes) {
    EvalReport rep = evaluate(m, clips, mode, r.threads);
    const std::string path =
        (fs::path(r.out_dir) / ("eval_" + eval_mode_name(mode) + ".csv")).string();
    std::ofstream out(path, std::ios::trunc);
    if (!out.good()) throw ConfigError("eval: cannot write " + path);
    write_eval_report_csv(rep, out);
    std::printf("%s mAP %.6f over %zu clips -> %s\n", eval_mode_name(mode).c_str(),
                rep.map, clips.size(), path.c_str());
  }
  return 0;
}

int cmd_gradcheck() {
  bool all_pass = true;
  for (const GradCheckCase& c : standard_gradcheck_cases()) {
    GradCheckResult res = run_gradcheck_case(c);
    std::printf("%-18s seeds %2d  max rel err %.3e  %s\n", res.name.c_str(),
                res.seeds, res.max_err, res.pass ? "pass" : "FAIL");
    all_pass = all_pass && res.pass;
  }
  if (!all_pass) throw NumericError("gradient check failed");
  return 0;
}

int cmd_inspect_grid(const RunConfig& r, const std::string& clip_id) {
  Model m = build(r.net);
  if (!r.checkpoint.empty()) {
    Checkpoint ck = load_matching_checkpoint(r.checkpoint, r.net);
    load_params(m, ck.params);
  }

  DetectionClip clip;
  if (clip_id.empty()) {
    // constant probe clip: the grid of an untrained model comes out uniform
    clip.clip_id = "constant";
    clip.features =
        Tensor::zeros({r.net.in_channels, r.net.T * r.net.input_stride, 8, 8});
    clip.labels = Tensor::zeros({r.net.num_classes, r.net.T * r.net.input_stride});
    clip.stride = r.net.input_stride;
  } else {
    const std::string data_dir = r.val_dir.empty() ? r.train_dir : r.val_dir;
    if (data_dir.empty())
      throw ConfigError("inspect-grid: data.val_dir or data.train_dir must name a dataset");
    bool found = false;
    for (auto& c : load_dataset(data_dir)) {
      if (c.clip_id == clip_id) {
        clip = std::move(c);
        found = true;
        break;
      }
    }
    if (!found)
      throw ConfigError("inspect-grid: clip \"" + clip_id + "\" not found in " + data_dir);
  }

  NoTapeScope no_tape;
  ForwardResult fr = forward(m, clip, RunMode::Eval);
  const GridSpec& g = fr.grid;
  const int64_t L = clip.features.dim(1) / clip.stride;
  const int64_t rate = L / r.net.T;

  std::printf("# cfn.gridspec.v1\n");
  std::printf("t,p,q,s,center\n");
  for (int64_t t = 0; t < g.p.numel(); ++t) {
    // centers live on the fine timeline, tracking the sampled positions
    const double center = r.net.coarse_offset + g.s.at(t) * static_cast<double>(rate);
    std::printf("%" PRId64 ",%.17g,%.17g,%.17g,%.17g\n", t, g.p.at(t), g.q.at(t),
                g.s.at(t), center);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"coarse-fine temporal detection workbench"};
  app.fallthrough();
  app.require_subcommand(1);

  std::string config_path, out, checkpoint, mode, preset, clip_id;
  long long seed = 0;
  int threads = 0;
  auto* o_config = app.add_option("--config", config_path, "configuration file");
  auto* o_seed =
      app.add_option("--seed", seed, "override net.seed, train.seed and gen.seed");
  auto* o_threads = app.add_option("--threads", threads, "evaluation worker threads");
  auto* o_out = app.add_option("--out", out, "output directory (default: out)");
  auto* o_ckpt = app.add_option("--checkpoint", checkpoint, "checkpoint directory");
  auto* o_mode =
      app.add_option("--mode", mode, "evaluation mode: all-frames, sampled-25, all");
  auto* o_preset = app.add_option("--preset", preset, "named configuration shortcut");

  CLI::App* c_generate =
      app.add_subcommand("generate", "write synthetic train/val splits");
  CLI::App* c_train = app.add_subcommand("train", "train a model");
  CLI::App* c_eval = app.add_subcommand("eval", "score a checkpoint on a dataset");
  CLI::App* c_gradcheck = app.add_subcommand(
      "gradcheck", "finite-difference check of every differentiable operator");
  CLI::App* c_inspect = app.add_subcommand(
      "inspect-grid", "dump the temporal sampling grid for one clip as CSV");
  c_inspect->add_option("clip", clip_id,
                        "clip id (omit for a constant probe clip)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    std::vector<KeyValues> layers;
    if (o_preset->count()) layers.push_back(preset_overlay(preset));
    if (o_config->count()) layers.push_back(parse_config_file(config_path));
    KeyValues flags;
    if (o_seed->count()) {
      const std::string s = std::to_string(seed);
      flags["net.seed"] = s;
      flags["train.seed"] = s;
      flags["gen.seed"] = s;
    }
    if (o_threads->count()) flags["run.threads"] = std::to_string(threads);
    if (o_out->count()) flags["run.out"] = out;
    if (o_ckpt->count()) flags["run.checkpoint"] = checkpoint;
    if (o_mode->count()) flags["eval.mode"] = mode;
    if (!flags.empty()) layers.push_back(flags);

    ResolvedConfig rc = resolve_config(layers);
    log_info("resolved configuration:\n" + render_config(rc.resolved));

    if (c_generate->parsed()) return cmd_generate(rc.run);
    if (c_train->parsed()) return cmd_train(rc.run);
    if (c_eval->parsed()) return cmd_eval(rc.run);
    if (c_gradcheck->parsed()) return cmd_gradcheck();
    if (c_inspect->parsed()) return cmd_inspect_grid(rc.run, clip_id);
    return 2;
  } catch (const ConfigError& e) {
    log_error(e.what());
    return 2;
  } catch (const FormatError& e) {
    log_error(e.what());
    return 2;
  } catch (const NumericError& e) {
    log_error(e.what());
    return 3;
  } catch (const InvariantError& e) {
    log_error(e.what());
    return 4;
  } catch (const std::exception& e) {
    log_error(std::string("internal error: ") + e.what());
    return 4;
  }
}
