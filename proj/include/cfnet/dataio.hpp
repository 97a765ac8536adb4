#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cfnet/tensor.hpp"

namespace cfn {

struct DetectionClip {
  std::string clip_id;
  Tensor features;  // [C, T_raw, H, W]
  Tensor labels;    // [num_classes, T_raw], binary
  int64_t stride = 1;
};

// Synthetic bursty-activity data: low-amplitude noise plus short
// class-specific oscillatory bursts. Class identity lives in the carrier
// frequency and a fixed per-class channel sign pattern, so it is only
// decodable from frames inside a burst window.
struct SynthSpec {
  int64_t num_clips = 60;
  int64_t num_classes = 6;
  int64_t T_raw = 64;
  int64_t channels = 4;
  int64_t height = 16;
  int64_t width = 16;
  int64_t bursts_per_clip = 2;
  int64_t dur_lo = 6;
  int64_t dur_hi = 10;
  double freq_lo = 0.25;
  double freq_hi = 0.5;
  double amp = 2.0;
  double noise = 0.25;
  int64_t distractors_per_clip = 0;  // unlabeled off-pattern bursts
  double distractor_freq = 0.05;
  int64_t input_stride = 1;
  // First global clip index; clip i draws from substream index_offset + i.
  // Splits from one seed use disjoint offset ranges.
  int64_t index_offset = 0;
  uint64_t seed = 1;
};

// Clip i is fully determined by (spec.seed, i); burst windows never overlap
// within a clip, so the labeled frame count equals the summed durations.
std::vector<DetectionClip> generate(const SynthSpec& spec);

// fixed per-class channel sign pattern, independent of the dataset seed
double class_channel_sign(int64_t cls, int64_t channel);

// Tensor container: magic "CFNT", u16 version, u8 dtype (0=f32, 1=f64),
// u8 ndim, ndim u32 dims, little-endian payload.
void write_tensor(const std::string& path, const Tensor& t, bool as_f32 = false);
Tensor read_tensor(const std::string& path);

// One split on disk: clips/<id>.cfnt, annotations.jsonl (one object per
// line: clip_id, num_classes, T_raw, intervals [class, start, end)), and a
// small manifest carrying the stride.
void write_dataset(const std::string& dir,
                   const std::vector<DetectionClip>& clips,
                   int64_t num_classes);
std::vector<DetectionClip> load_dataset(const std::string& dir);

Tensor labels_from_intervals(int64_t num_classes, int64_t T,
                             const std::vector<std::array<int64_t, 3>>& iv);
std::vector<std::array<int64_t, 3>> intervals_from_labels(const Tensor& labels);

struct Checkpoint {
  int64_t epoch = 0;
  std::string config_hash;  // hex
  std::map<std::string, Tensor> params;
  std::map<std::string, Tensor> opt;  // optimizer state, may be empty
};

// Directory of per-parameter containers plus a manifest naming them.
void save_checkpoint(const std::string& dir, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& dir);

}  // namespace cfn
