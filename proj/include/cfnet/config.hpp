#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cfnet/backbone.hpp"
#include "cfnet/dataio.hpp"
#include "cfnet/losseval.hpp"
#include "cfnet/trainer.hpp"

namespace cfn {

// One layer of flat dotted-key settings. Later layers override earlier ones;
// every key must exist in the built-in defaults or resolution fails.
using KeyValues = std::map<std::string, std::string>;

// Grammar: one `key = value` per line, `#` starts a comment, blank lines are
// skipped. Duplicate keys within a file are an error.
KeyValues parse_config_file(const std::string& path);

// Named configuration shortcuts (stream layouts and the ablation axes).
// Unknown names list the valid ones.
KeyValues preset_overlay(const std::string& name);
std::vector<std::string> preset_names();

// Everything a command needs. `train` carries a copy of `net` and of the
// path/thread settings below, so it can be handed to run_train directly.
struct RunConfig {
  NetworkConfig net;
  TrainConfig train;
  SynthSpec gen;              // training split; val draws the indices after it
  int64_t gen_val_clips = 16;
  std::string train_dir;      // data.train_dir
  std::string val_dir;        // data.val_dir
  std::string out_dir;        // run.out
  std::string checkpoint;     // run.checkpoint
  int threads = 1;            // run.threads
  EvalMode eval_mode = EvalMode::AllFrames;
  bool eval_both = false;     // eval.mode = all
};

struct ResolvedConfig {
  RunConfig run;
  KeyValues resolved;  // the full key set after all overlays
};

// Defaults, then each layer in order. Unknown keys and malformed values are
// config errors naming the key.
ResolvedConfig resolve_config(const std::vector<KeyValues>& layers);

// Echo text for run logs: one sorted `key = value` line each.
std::string render_config(const KeyValues& kv);

}  // namespace cfn
