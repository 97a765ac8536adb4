#include "cfnet/losseval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "cfnet/errors.hpp"
#include "cfnet/ops.hpp"

namespace cfn {

namespace {

// y * softplus(-z) + (1 - y) * softplus(z), elementwise on matching shapes
Tensor bce_elementwise(const Tensor& logits, const Tensor& labels) {
  Tensor pos = mul(labels, softplus(neg(logits)));
  Tensor negw = add_scalar(neg(labels), 1.0);
  return add(pos, mul(negw, softplus(logits)));
}

}  // namespace

Tensor detection_loss(const Tensor& logits, const Tensor& labels) {
  if (logits.ndim() != 2 || labels.ndim() != 2 ||
      logits.shape() != labels.shape())
    throw ConfigError("detection_loss: logits " + shape_str(logits.shape()) +
                      " and labels " + shape_str(labels.shape()) +
                      " must be matching rank-2 tensors");
  for (int64_t i = 0; i < labels.numel(); ++i) {
    const double v = labels.at(i);
    if (v != 0.0 && v != 1.0)
      throw ConfigError("detection_loss: labels must be binary, found " +
                        std::to_string(v));
  }

  Tensor localization = mean_all(bce_elementwise(logits, labels));

  Tensor clip_logits = reduce(logits, {1}, Reduce::Mean);
  Tensor clip_labels = reduce(labels.detach(), {1}, Reduce::Max);
  Tensor classification = mean_all(bce_elementwise(clip_logits, clip_labels));

  return mul_scalar(add(localization, classification), 0.5);
}

double average_precision(const std::vector<double>& scores,
                         const std::vector<double>& labels) {
  const size_t n = scores.size();
  if (n == 0 || labels.size() != n)
    throw ConfigError("average_precision: need matching nonempty arrays");
  size_t positives = 0;
  for (double l : labels) {
    if (l != 0.0 && l != 1.0)
      throw ConfigError("average_precision: labels must be binary");
    if (l == 1.0) ++positives;
  }
  if (positives == 0)
    throw ConfigError("average_precision: no positive labels");

  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return scores[a] > scores[b]; });

  double ap = 0.0;
  size_t hit = 0;
  for (size_t r = 0; r < n; ++r) {
    if (labels[order[r]] == 1.0) {
      ++hit;
      ap += static_cast<double>(hit) / static_cast<double>(r + 1);
    }
  }
  return ap / static_cast<double>(positives);
}

std::string eval_mode_name(EvalMode mode) {
  return mode == EvalMode::AllFrames ? "all-frames" : "sampled-25";
}

std::vector<int64_t> sampled_frame_indices(int64_t T, int64_t n) {
  if (T < 1 || n < 1)
    throw ConfigError("sampled_frame_indices: empty timeline or sample count");
  std::vector<int64_t> idx(static_cast<size_t>(n));
  if (n == 1) {
    idx[0] = 0;
    return idx;
  }
  for (int64_t i = 0; i < n; ++i)
    idx[static_cast<size_t>(i)] = static_cast<int64_t>(
        std::floor(static_cast<double>(i) * static_cast<double>(T - 1) /
                   static_cast<double>(n - 1)));
  return idx;
}

EvalReport compute_eval_report(const std::vector<Tensor>& logits,
                               const std::vector<Tensor>& labels,
                               EvalMode mode,
                               const std::vector<double>* class_weights) {
  if (logits.empty() || logits.size() != labels.size())
    throw ConfigError("compute_eval_report: need matching nonempty clip lists");
  const int64_t K = logits[0].dim(0);

  EvalReport report;
  report.mode = mode;
  report.per_class_ap.assign(static_cast<size_t>(K), 0.0);
  report.class_present.assign(static_cast<size_t>(K), 0);

  std::vector<std::vector<double>> cls_scores(static_cast<size_t>(K));
  std::vector<std::vector<double>> cls_labels(static_cast<size_t>(K));

  for (size_t c = 0; c < logits.size(); ++c) {
    const Tensor& z = logits[c];
    const Tensor& y = labels[c];
    if (z.ndim() != 2 || y.ndim() != 2 || z.shape() != y.shape() ||
        z.dim(0) != K)
      throw ConfigError("compute_eval_report: clip " + std::to_string(c) +
                        " has mismatched shapes " + shape_str(z.shape()) +
                        " vs " + shape_str(y.shape()));
    const int64_t T = z.dim(1);
    std::vector<int64_t> frames;
    if (mode == EvalMode::Sampled25) {
      frames = sampled_frame_indices(T, 25);
    } else {
      frames.resize(static_cast<size_t>(T));
      std::iota(frames.begin(), frames.end(), 0);
    }
    report.frames_evaluated += static_cast<int64_t>(frames.size());
    for (int64_t k = 0; k < K; ++k)
      for (int64_t t : frames) {
        cls_scores[static_cast<size_t>(k)].push_back(z.at(k * T + t));
        cls_labels[static_cast<size_t>(k)].push_back(y.at(k * T + t));
      }
  }

  double sum = 0.0, wsum = 0.0;
  for (int64_t k = 0; k < K; ++k) {
    const auto& l = cls_labels[static_cast<size_t>(k)];
    if (std::none_of(l.begin(), l.end(), [](double v) { return v == 1.0; }))
      continue;
    const double ap = average_precision(cls_scores[static_cast<size_t>(k)], l);
    report.per_class_ap[static_cast<size_t>(k)] = ap;
    report.class_present[static_cast<size_t>(k)] = 1;
    const double w =
        class_weights ? class_weights->at(static_cast<size_t>(k)) : 1.0;
    sum += w * ap;
    wsum += w;
  }
  report.map = wsum > 0.0 ? sum / wsum : 0.0;
  return report;
}

void write_eval_report_csv(const EvalReport& report, std::ostream& out) {
  out << "# cfn.evalreport.v1\n";
  out << "class_id,ap\n";
  for (size_t k = 0; k < report.per_class_ap.size(); ++k) {
    if (!report.class_present[k]) continue;
    out << k << "," << report.per_class_ap[k] << "\n";
  }
  out << "# mode=" << eval_mode_name(report.mode)
      << " frames=" << report.frames_evaluated << " map=" << report.map
      << "\n";
}

}  // namespace cfn
