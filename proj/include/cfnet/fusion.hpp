#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "cfnet/gridpool.hpp"
#include "cfnet/tensor.hpp"

namespace cfn {

// Temporal Gaussian weights centered at each coarse frame's position in the
// fine timeline. Constant during training: gradients flow through the
// features being averaged, never through the centers.
struct GaussianBank {
  std::vector<double> centers;  // [N] positions in [0, T'-1]
  double sigma = 0.0;
  Tensor weights;               // [N, T'] rows peak-normalized to 1
  std::vector<double> row_sums;
};

// How a fine level is collapsed before concatenation: C keeps channels only,
// CHW keeps the spatial map, CTHW keeps a per-coarse-frame temporal profile
// via Gaussian calibration.
enum class ReduceMode { C, CHW, CTHW };

// x * sigmoid(pw2(pw1(x))): two pointwise convolutions then a sigmoid gate.
Tensor attention_mask(const Tensor& x, const Tensor& w1, const Tensor& b1,
                      const Tensor& w2, const Tensor& b2);

// centers = span_start + s_j * (span_end - span_start) / (spec.T - 1),
// sigma = T_prime / sigma_div.
GaussianBank build_gaussian_bank(const GridSpec& spec, int64_t T_prime,
                                 double span_start, double span_end,
                                 double sigma_div = 8.0);

// Same bank geometry from explicit center positions (uniform-center option).
GaussianBank build_gaussian_bank_at(const std::vector<double>& centers,
                                    int64_t T_prime, double sigma_div = 8.0);

// [C, T', H, W] -> [C, N, H, W]: Gaussian-weighted temporal average per
// coarse location; differentiable in x, bank held constant.
Tensor calibrate(const Tensor& x, const GaussianBank& bank);

// Collapse the dimensions a reduce mode drops: C -> [C,1,1,1],
// CHW -> [C,1,H,W], CTHW -> calibrate(x, *bank).
Tensor reduce_level(const Tensor& x, ReduceMode mode, const GaussianBank* bank);

// Max-pool every level to the smallest spatial size present, then
// concatenate along channels; temporal sizes must already agree.
Tensor multi_stage_concat(const std::vector<Tensor>& levels);

// Match x's spatial size to (H, W): max-pool down or nearest-upsample; the
// ratio must be integral in either direction.
Tensor adapt_spatial(const Tensor& x, int64_t H, int64_t W);

// A = sigmoid(pwA(x)), B = pwB(x); one pointwise convolution each.
std::pair<Tensor, Tensor> scale_shift(const Tensor& x, const Tensor& wA,
                                      const Tensor& bA, const Tensor& wB,
                                      const Tensor& bB);

// A * x + B with broadcasting.
Tensor fuse(const Tensor& x, const Tensor& A, const Tensor& B);

}  // namespace cfn
