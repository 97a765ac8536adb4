#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "cfnet/backbone.hpp"
#include "cfnet/dataio.hpp"
#include "cfnet/losseval.hpp"

namespace cfn {

// One training run: data, schedule, output layout. Parameter init is seeded
// by net.seed; `seed` only drives the per-epoch batch order.
struct TrainConfig {
  NetworkConfig net;
  std::string train_dir;
  std::string val_dir;          // empty: skip validation
  std::string out_dir;          // receives metrics.csv and checkpoint/
  std::string init_checkpoint;  // warm-start params; heads may be absent
  bool resume = false;          // continue from out_dir/checkpoint
  double lr = 0.02;
  double momentum = 0.9;
  double fusion_lr_mult = 10.0;  // applies to "fusion." parameters
  // 1-based epochs where lr drops 10x
  std::vector<int64_t> milestones{60, 80};
  int64_t batch_size = 16;
  int64_t epochs = 100;
  int64_t overfit_steps = 0;  // > 0: descend on the first batch only
  int64_t seed = 1;
  int threads = 1;
  EvalMode eval_mode = EvalMode::AllFrames;
  int64_t eval_every = 1;  // epochs between validation passes
};

struct TrainResult {
  int64_t epochs_run = 0;
  double final_train_loss = std::numeric_limits<double>::quiet_NaN();
  double final_val_map = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> overfit_losses;  // per-step losses in overfit mode
  std::string checkpoint_dir;
};

// Forward every clip without gradient tracking and pool the usual report.
// Clips run in parallel when threads > 1; the report is identical either way
// because per-class pooling happens in clip order after the joins.
EvalReport evaluate(const Model& m, const std::vector<DetectionClip>& clips,
                    EvalMode mode, int threads = 1);

// SGD with momentum and a stepped schedule. Appends one metrics row per
// epoch (per step in overfit mode) and checkpoints after every epoch.
// A nonfinite batch loss dumps the sampling grids of the offending batch to
// stderr and raises NumericError.
TrainResult run_train(const TrainConfig& cfg);

}  // namespace cfn
