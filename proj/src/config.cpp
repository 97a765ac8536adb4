#include "cfnet/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "cfnet/errors.hpp"

namespace cfn {
namespace {

std::string trim(const std::string& s) {
  const size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::string join_list(const std::vector<int64_t>& xs) {
  std::ostringstream ss;
  for (size_t i = 0; i < xs.size(); ++i) ss << (i ? "," : "") << xs[i];
  return ss.str();
}

std::string fmt_double(double x) {
  std::ostringstream ss;
  ss << x;
  return ss.str();
}

// Defaults come from the default-constructed structs so the config surface
// can never drift from the code.
KeyValues default_key_values() {
  const NetworkConfig n;
  const TrainConfig t;
  const SynthSpec g;
  KeyValues kv;
  kv["net.channels"] = join_list(n.channels);
  kv["net.blocks"] = join_list(n.blocks);
  kv["net.in_channels"] = std::to_string(n.in_channels);
  kv["net.num_classes"] = std::to_string(n.num_classes);
  kv["net.T"] = std::to_string(n.T);
  kv["net.T_prime"] = std::to_string(n.T_prime);
  kv["net.alpha_den"] = std::to_string(n.alpha_den);
  kv["net.input_stride"] = std::to_string(n.input_stride);
  kv["net.coarse_offset"] = std::to_string(n.coarse_offset);
  kv["net.pooling"] = pooling_name(n.pooling);
  kv["net.fusion"] = fusion_name(n.fusion);
  kv["net.reduce"] = reduce_mode_name(n.reduce_mode);
  kv["net.mask"] = n.mask ? "true" : "false";
  kv["net.learned_centers"] = n.learned_centers ? "true" : "false";
  kv["net.sigma_div"] = fmt_double(n.sigma_div);
  kv["net.force_uniform_grid"] = n.force_uniform_grid ? "true" : "false";
  kv["net.head_width"] = std::to_string(n.head_width);
  kv["net.seed"] = std::to_string(n.seed);

  kv["train.lr"] = fmt_double(t.lr);
  kv["train.momentum"] = fmt_double(t.momentum);
  kv["train.fusion_lr_mult"] = fmt_double(t.fusion_lr_mult);
  kv["train.milestones"] = join_list(t.milestones);
  kv["train.batch_size"] = std::to_string(t.batch_size);
  kv["train.epochs"] = std::to_string(t.epochs);
  kv["train.overfit_steps"] = std::to_string(t.overfit_steps);
  kv["train.seed"] = std::to_string(t.seed);
  kv["train.eval_mode"] = eval_mode_name(t.eval_mode);
  kv["train.eval_every"] = std::to_string(t.eval_every);
  kv["train.init_checkpoint"] = t.init_checkpoint;
  kv["train.resume"] = t.resume ? "true" : "false";

  kv["gen.train_clips"] = std::to_string(g.num_clips);
  kv["gen.val_clips"] = "16";
  kv["gen.num_classes"] = std::to_string(g.num_classes);
  kv["gen.T_raw"] = std::to_string(g.T_raw);
  kv["gen.channels"] = std::to_string(g.channels);
  kv["gen.height"] = std::to_string(g.height);
  kv["gen.width"] = std::to_string(g.width);
  kv["gen.bursts_per_clip"] = std::to_string(g.bursts_per_clip);
  kv["gen.dur_lo"] = std::to_string(g.dur_lo);
  kv["gen.dur_hi"] = std::to_string(g.dur_hi);
  kv["gen.freq_lo"] = fmt_double(g.freq_lo);
  kv["gen.freq_hi"] = fmt_double(g.freq_hi);
  kv["gen.amp"] = fmt_double(g.amp);
  kv["gen.noise"] = fmt_double(g.noise);
  kv["gen.distractors"] = std::to_string(g.distractors_per_clip);
  kv["gen.distractor_freq"] = fmt_double(g.distractor_freq);
  kv["gen.input_stride"] = std::to_string(g.input_stride);
  kv["gen.seed"] = std::to_string(g.seed);

  kv["data.train_dir"] = "";
  kv["data.val_dir"] = "";
  kv["run.out"] = "out";
  kv["run.checkpoint"] = "";
  kv["run.threads"] = "1";
  kv["eval.mode"] = "all-frames";
  return kv;
}

int64_t parse_int(const std::string& key, const std::string& v) {
  char* end = nullptr;
  errno = 0;
  const long long x = std::strtoll(v.c_str(), &end, 10);
  if (v.empty() || errno != 0 || end != v.c_str() + v.size())
    throw ConfigError("config key " + key + ": expected an integer, got \"" + v + "\"");
  return static_cast<int64_t>(x);
}

double parse_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  errno = 0;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || errno != 0 || end != v.c_str() + v.size())
    throw ConfigError("config key " + key + ": expected a number, got \"" + v + "\"");
  return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError("config key " + key + ": expected true or false, got \"" + v + "\"");
}

std::vector<int64_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<int64_t> out;
  if (trim(v).empty()) return out;
  std::istringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_int(key, trim(item)));
  return out;
}

PoolingType parse_pooling(const std::string& v) {
  for (PoolingType p : {PoolingType::Grid, PoolingType::Stride, PoolingType::Max,
                        PoolingType::Avg, PoolingType::None})
    if (v == pooling_name(p)) return p;
  throw ConfigError("config key net.pooling: \"" + v +
                    "\" is not one of grid, stride, max, avg, none");
}

FusionPreset parse_fusion(const std::string& v) {
  for (FusionPreset f : {FusionPreset::None, FusionPreset::LateOnly,
                         FusionPreset::OneToOne, FusionPreset::MultiStage,
                         FusionPreset::SlowFastDet})
    if (v == fusion_name(f)) return f;
  throw ConfigError("config key net.fusion: \"" + v +
                    "\" is not one of none, late-only, one-to-one, multi-stage, slowfast-det");
}

ReduceMode parse_reduce(const std::string& v) {
  for (ReduceMode m : {ReduceMode::C, ReduceMode::CHW, ReduceMode::CTHW})
    if (v == reduce_mode_name(m)) return m;
  throw ConfigError("config key net.reduce: \"" + v + "\" is not one of c, chw, cthw");
}

EvalMode parse_eval_mode(const std::string& key, const std::string& v) {
  if (v == "all-frames") return EvalMode::AllFrames;
  if (v == "sampled-25") return EvalMode::Sampled25;
  throw ConfigError("config key " + key + ": \"" + v +
                    "\" is not one of all-frames, sampled-25");
}

// Stream layouts first, then one preset per ablation row. The table presets
// assume the default scale; file and flag overlays still apply on top.
const std::map<std::string, KeyValues>& preset_table() {
  static const std::map<std::string, KeyValues> table = {
      {"coarse-fine", {}},
      {"coarse-only", {{"net.fusion", "none"}}},
      {"fine-fine", {{"net.pooling", "none"}, {"net.T", "64"}}},
      {"slowfast-det",
       {{"net.fusion", "slowfast-det"}, {"net.pooling", "stride"}, {"net.mask", "false"}}},
      {"table3a-late",
       {{"net.pooling", "none"}, {"net.T", "64"}, {"net.fusion", "late-only"}}},
      {"table3a-one-to-one",
       {{"net.pooling", "none"}, {"net.T", "64"}, {"net.fusion", "one-to-one"}}},
      {"table3a-multi-stage",
       {{"net.pooling", "none"}, {"net.T", "64"}, {"net.fusion", "multi-stage"}}},
      {"table3b-c", {{"net.pooling", "none"}, {"net.T", "64"}, {"net.reduce", "c"}}},
      {"table3b-chw", {{"net.pooling", "none"}, {"net.T", "64"}, {"net.reduce", "chw"}}},
      {"table3b-cthw", {{"net.pooling", "none"}, {"net.T", "64"}, {"net.reduce", "cthw"}}},
      {"table3c-late-none",
       {{"net.pooling", "none"}, {"net.T", "64"}, {"net.fusion", "late-only"},
        {"net.mask", "false"}}},
      {"table3c-late-mask",
       {{"net.pooling", "none"}, {"net.T", "64"}, {"net.fusion", "late-only"},
        {"net.mask", "true"}}},
      {"table3c-none",
       {{"net.pooling", "none"}, {"net.T", "64"}, {"net.fusion", "multi-stage"},
        {"net.mask", "false"}}},
      {"table3c-mask",
       {{"net.pooling", "none"}, {"net.T", "64"}, {"net.fusion", "multi-stage"},
        {"net.mask", "true"}}},
      {"table3d-max", {{"net.fusion", "none"}, {"net.pooling", "max"}}},
      {"table3d-avg", {{"net.fusion", "none"}, {"net.pooling", "avg"}}},
      {"table3d-stride", {{"net.fusion", "none"}, {"net.pooling", "stride"}}},
      {"table3d-grid", {{"net.fusion", "none"}, {"net.pooling", "grid"}}},
      {"table3e-a4", {{"net.fusion", "none"}, {"net.alpha_den", "4"}}},
      {"table3e-a8", {{"net.fusion", "none"}, {"net.alpha_den", "8"}}},
      {"table3e-t64-a4",
       {{"net.fusion", "none"}, {"net.T", "64"}, {"net.alpha_den", "4"}}},
      {"table3e-t64-a8",
       {{"net.fusion", "none"}, {"net.T", "64"}, {"net.alpha_den", "8"}}},
  };
  return table;
}

}  // namespace

KeyValues parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in.good()) throw ConfigError("cannot open config file " + path);
  KeyValues kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(lineno) +
                        ": expected key = value, got \"" + line + "\"");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError(path + ":" + std::to_string(lineno) + ": empty key");
    if (kv.count(key))
      throw ConfigError(path + ":" + std::to_string(lineno) + ": duplicate key " + key);
    kv[key] = value;
  }
  return kv;
}

std::vector<std::string> preset_names() {
  std::vector<std::string> names;
  for (const auto& [name, kv] : preset_table()) names.push_back(name);
  return names;
}

KeyValues preset_overlay(const std::string& name) {
  const auto& table = preset_table();
  auto it = table.find(name);
  if (it == table.end()) {
    std::string valid;
    for (const auto& n : preset_names()) valid += (valid.empty() ? "" : ", ") + n;
    throw ConfigError("unknown preset \"" + name + "\"; valid presets: " + valid);
  }
  return it->second;
}

ResolvedConfig resolve_config(const std::vector<KeyValues>& layers) {
  KeyValues kv = default_key_values();
  for (const auto& layer : layers) {
    for (const auto& [k, v] : layer) {
      if (!kv.count(k)) throw ConfigError("unknown config key: " + k);
      kv[k] = v;
    }
  }

  RunConfig r;
  r.net.channels = parse_list("net.channels", kv["net.channels"]);
  r.net.blocks = parse_list("net.blocks", kv["net.blocks"]);
  r.net.in_channels = parse_int("net.in_channels", kv["net.in_channels"]);
  r.net.num_classes = parse_int("net.num_classes", kv["net.num_classes"]);
  r.net.T = parse_int("net.T", kv["net.T"]);
  r.net.T_prime = parse_int("net.T_prime", kv["net.T_prime"]);
  r.net.alpha_den = parse_int("net.alpha_den", kv["net.alpha_den"]);
  r.net.input_stride = parse_int("net.input_stride", kv["net.input_stride"]);
  r.net.coarse_offset = parse_int("net.coarse_offset", kv["net.coarse_offset"]);
  r.net.pooling = parse_pooling(kv["net.pooling"]);
  r.net.fusion = parse_fusion(kv["net.fusion"]);
  r.net.reduce_mode = parse_reduce(kv["net.reduce"]);
  r.net.mask = parse_bool("net.mask", kv["net.mask"]);
  r.net.learned_centers = parse_bool("net.learned_centers", kv["net.learned_centers"]);
  r.net.sigma_div = parse_double("net.sigma_div", kv["net.sigma_div"]);
  r.net.force_uniform_grid =
      parse_bool("net.force_uniform_grid", kv["net.force_uniform_grid"]);
  r.net.head_width = parse_int("net.head_width", kv["net.head_width"]);
  r.net.seed = static_cast<uint64_t>(parse_int("net.seed", kv["net.seed"]));

  r.train.lr = parse_double("train.lr", kv["train.lr"]);
  r.train.momentum = parse_double("train.momentum", kv["train.momentum"]);
  r.train.fusion_lr_mult =
      parse_double("train.fusion_lr_mult", kv["train.fusion_lr_mult"]);
  r.train.milestones = parse_list("train.milestones", kv["train.milestones"]);
  r.train.batch_size = parse_int("train.batch_size", kv["train.batch_size"]);
  r.train.epochs = parse_int("train.epochs", kv["train.epochs"]);
  r.train.overfit_steps = parse_int("train.overfit_steps", kv["train.overfit_steps"]);
  r.train.seed = parse_int("train.seed", kv["train.seed"]);
  r.train.eval_mode = parse_eval_mode("train.eval_mode", kv["train.eval_mode"]);
  r.train.eval_every = parse_int("train.eval_every", kv["train.eval_every"]);
  r.train.init_checkpoint = kv["train.init_checkpoint"];
  r.train.resume = parse_bool("train.resume", kv["train.resume"]);

  r.gen.num_clips = parse_int("gen.train_clips", kv["gen.train_clips"]);
  r.gen_val_clips = parse_int("gen.val_clips", kv["gen.val_clips"]);
  r.gen.num_classes = parse_int("gen.num_classes", kv["gen.num_classes"]);
  r.gen.T_raw = parse_int("gen.T_raw", kv["gen.T_raw"]);
  r.gen.channels = parse_int("gen.channels", kv["gen.channels"]);
  r.gen.height = parse_int("gen.height", kv["gen.height"]);
  r.gen.width = parse_int("gen.width", kv["gen.width"]);
  r.gen.bursts_per_clip = parse_int("gen.bursts_per_clip", kv["gen.bursts_per_clip"]);
  r.gen.dur_lo = parse_int("gen.dur_lo", kv["gen.dur_lo"]);
  r.gen.dur_hi = parse_int("gen.dur_hi", kv["gen.dur_hi"]);
  r.gen.freq_lo = parse_double("gen.freq_lo", kv["gen.freq_lo"]);
  r.gen.freq_hi = parse_double("gen.freq_hi", kv["gen.freq_hi"]);
  r.gen.amp = parse_double("gen.amp", kv["gen.amp"]);
  r.gen.noise = parse_double("gen.noise", kv["gen.noise"]);
  r.gen.distractors_per_clip = parse_int("gen.distractors", kv["gen.distractors"]);
  r.gen.distractor_freq = parse_double("gen.distractor_freq", kv["gen.distractor_freq"]);
  r.gen.input_stride = parse_int("gen.input_stride", kv["gen.input_stride"]);
  r.gen.seed = static_cast<uint64_t>(parse_int("gen.seed", kv["gen.seed"]));

  r.train_dir = kv["data.train_dir"];
  r.val_dir = kv["data.val_dir"];
  r.out_dir = kv["run.out"];
  r.checkpoint = kv["run.checkpoint"];
  const int64_t threads = parse_int("run.threads", kv["run.threads"]);
  if (threads < 1) throw ConfigError("config key run.threads: must be >= 1");
  r.threads = static_cast<int>(threads);

  const std::string em = kv["eval.mode"];
  if (em == "all") {
    r.eval_both = true;
    r.eval_mode = EvalMode::AllFrames;
  } else {
    r.eval_mode = parse_eval_mode("eval.mode", em);
  }

  r.train.net = r.net;
  r.train.train_dir = r.train_dir;
  r.train.val_dir = r.val_dir;
  r.train.out_dir = r.out_dir;
  r.train.threads = r.threads;

  return {std::move(r), std::move(kv)};
}

std::string render_config(const KeyValues& kv) {
  std::ostringstream ss;
  for (const auto& [k, v] : kv) ss << k << " = " << v << "\n";
  return ss.str();
}

}  // namespace cfn
