#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cfnet/dataio.hpp"
#include "cfnet/fusion.hpp"
#include "cfnet/gridpool.hpp"
#include "cfnet/tensor.hpp"

namespace cfn {

enum class PoolingType { Grid, Stride, Max, Avg, None };
enum class FusionPreset { None, LateOnly, OneToOne, MultiStage, SlowFastDet };
enum class RunMode { Train, Eval };

const char* pooling_name(PoolingType p);
const char* fusion_name(FusionPreset f);
const char* reduce_mode_name(ReduceMode m);

// Two-stream detection network. The fine stream runs at full temporal
// resolution; the coarse stream consumes a uniformly strided view of the same
// clip, downsamples it temporally after the first stage, and carries the
// detection head. Fusion injects fine-stream summaries into the coarse stream.
struct NetworkConfig {
  std::vector<int64_t> channels{8, 16, 32, 48};  // stage widths
  std::vector<int64_t> blocks{1, 1, 1, 1};       // residual blocks per stage
  int64_t in_channels = 4;
  int64_t num_classes = 6;
  int64_t T = 32;        // coarse stream temporal length
  int64_t T_prime = 64;  // max strided clip length the fine stream accepts
  int64_t alpha_den = 4; // temporal downsampling factor (alpha = 1/alpha_den)
  int64_t input_stride = 1;
  int64_t coarse_offset = 0;  // phase of the coarse subsample, in [0, L/T)
  PoolingType pooling = PoolingType::Grid;
  FusionPreset fusion = FusionPreset::MultiStage;
  ReduceMode reduce_mode = ReduceMode::CTHW;
  bool mask = true;
  // Gaussian centers track the learned sampling positions; false pins them to
  // the uniform stride positions instead.
  bool learned_centers = true;
  double sigma_div = 8.0;
  // Diagnostic: bypass the confidence head and sample on the uniform grid.
  bool force_uniform_grid = false;
  int64_t head_width = 64;
  uint64_t seed = 1;
};

void validate_config(const NetworkConfig& cfg);

// Stable fingerprint of every field that changes the computation.
uint64_t config_hash(const NetworkConfig& cfg);
std::string config_summary(const NetworkConfig& cfg);

struct Model {
  NetworkConfig cfg;
  std::map<std::string, Tensor> params;

  const Tensor& param(const std::string& name) const;
  void set_param(const std::string& name, Tensor t);
};

// The name set is a pure function of the config (never of the data).
std::vector<std::string> parameter_names(const NetworkConfig& cfg);

// Deterministic init from cfg.seed: fan-in-scaled normals for conv weights,
// zeros for biases, zeros for the confidence head's final conv and all fusion
// projections so the grid starts uniform and fusion starts near-neutral.
Model build(const NetworkConfig& cfg);

// Overwrites matching parameters. Names absent from the source are an error
// unless they belong to a head that is meaningfully trained from scratch on
// top of pretrained streams (fusion.* / conf.*). Unknown source names and
// shape mismatches are errors.
void load_params(Model& m, const std::map<std::string, Tensor>& src);

struct ForwardResult {
  Tensor logits;  // [num_classes, T_raw]
  GridSpec grid;  // temporal sampling plan (uniform for the fixed poolings)
};

// Whole-clip forward. The clip's strided length L must be a multiple of
// cfg.T and at most cfg.T_prime; longer clips must be segmented by the
// caller. Output is interpolated back to the clip's annotation resolution.
ForwardResult forward(const Model& m, const DetectionClip& clip, RunMode mode);

}  // namespace cfn
