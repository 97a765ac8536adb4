#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "cfnet/tensor.hpp"

namespace cfn {

// (localization + classification) / 2: per-frame multi-label BCE plus the
// same BCE on temporally mean-pooled logits against any-frame-positive clip
// labels. Labels are a constant binary [K, T] tensor matching the logits.
Tensor detection_loss(const Tensor& logits, const Tensor& labels);

// Mean precision at each positive's rank, scores sorted descending with
// stable original-index tie-breaking. Requires at least one positive.
double average_precision(const std::vector<double>& scores,
                         const std::vector<double>& labels);

enum class EvalMode { AllFrames, Sampled25 };

std::string eval_mode_name(EvalMode mode);

// floor(linspace(0, T-1, n)) without duplicates removed
std::vector<int64_t> sampled_frame_indices(int64_t T, int64_t n);

struct EvalReport {
  std::vector<double> per_class_ap;  // valid where class_present
  std::vector<char> class_present;   // zero-positive classes are absent
  double map = 0.0;
  EvalMode mode = EvalMode::AllFrames;
  int64_t frames_evaluated = 0;
};

// Pools frames from every clip per class, in clip order, then averages AP
// over classes that have at least one positive frame. Optional weights give
// a weighted mean over present classes.
EvalReport compute_eval_report(const std::vector<Tensor>& logits,
                               const std::vector<Tensor>& labels,
                               EvalMode mode,
                               const std::vector<double>* class_weights = nullptr);

// CSV rows (class_id, ap) under a schema comment, then a summary line.
void write_eval_report_csv(const EvalReport& report, std::ostream& out);

}  // namespace cfn
