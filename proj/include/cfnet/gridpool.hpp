#pragma once

#include <cstdint>
#include <vector>

#include "cfnet/ops.hpp"
#include "cfnet/tensor.hpp"

namespace cfn {

// Adaptive temporal sampling grid derived from per-position confidences.
// p lives on the downsampled timeline: N = T / factor entries.
struct GridSpec {
  int64_t T = 0;       // temporal length of the pooled input
  int64_t factor = 1;  // downsampling factor
  Tensor p;            // [N] confidences, strictly inside (0, 1)
  Tensor q;            // [N] cumulative grid; q[N-1] == T
  Tensor s;            // [N] sampling positions, relu(q - 1)
};

// q_t = T * sum_{i<=t}(1 - p_i) / sum_i(1 - p_i), differentiable in p.
// Constant p gives the uniform grid q_t = T * (t+1) / N regardless of the
// constant, so sampling positions land exactly on the stride positions.
Tensor compute_grid(const Tensor& p, int64_t T);

// Validates T % factor == 0 and p length T / factor, then fills q and s.
GridSpec make_grid(const Tensor& p, int64_t T, int64_t factor);

// [C, T, H, W] -> [C, N, H, W] by linear sampling at spec.s.
Tensor grid_pool(const Tensor& x, const GridSpec& spec);

// Uniform-rate counterpart; Stride keeps the last frame of each window.
Tensor fixed_pool(const Tensor& x, PoolKind kind, int64_t factor);

// Fractional indices v_m with linear-interp(q - 1, v_m) == u_m, clamped to
// [0, N-1] with zero gradient where clamped. Differentiable in q.
Tensor inverse_positions(const Tensor& q, const std::vector<double>& u);

// [K, N] -> [K, T_out], T_out >= spec.T: place column j at the uniform
// stride position u_j = (j+1)*factor - 1 by resampling at the grid inverse,
// expand to the original timeline with constant extrapolation past the first
// and last knot, then resize uniformly when T_out exceeds spec.T.
Tensor grid_unpool(const Tensor& y, const GridSpec& spec, int64_t T_out);

// Exactly three conv strides multiplying to factor, smallest first; unit
// strides fill the front when the factor needs fewer.
std::vector<int64_t> stride_factorization(int64_t factor);

}  // namespace cfn
