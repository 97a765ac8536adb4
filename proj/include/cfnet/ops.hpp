#pragma once

#include <vector>

#include "cfnet/tape.hpp"
#include "cfnet/tensor.hpp"

namespace cfn {

// Elementwise binary ops with numpy-style broadcasting (trailing-axis
// alignment; sizes must match or be 1). Shape mismatch errors name both shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);
Tensor neg(const Tensor& x);

Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);   // subgradient 0 at the kink
Tensor softplus(const Tensor& x);

// View with identical element count; shares storage.
Tensor reshape(const Tensor& x, Shape shape);

// Concatenation along axis 0; trailing dims must match.
Tensor concat_axis0(const std::vector<Tensor>& parts);

// [start, start+len) along axis 1 of a rank>=2 tensor.
Tensor slice_axis1(const Tensor& x, int64_t start, int64_t len);

// Elements offset, offset+stride, ... along axis 1.
Tensor stride_select_axis1(const Tensor& x, int64_t stride, int64_t offset);

enum class Reduce { Sum, Mean, Max };

// Reduces over the given axes (unique, in range, non-empty). With
// keepdims=false the reduced axes are removed (possibly yielding rank 0).
// Max ties route the gradient to the lowest flat index.
Tensor reduce(const Tensor& x, std::vector<int> axes, Reduce kind,
              bool keepdims = false);
Tensor mean_all(const Tensor& x);
Tensor sum_all(const Tensor& x);

// Temporal cross-correlation over [C, T, H, W] with weights [C_out, C, k],
// shared across spatial positions. Output length (T + 2*padding - k)/stride + 1.
Tensor conv_temporal(const Tensor& x, const Tensor& w, int stride, int padding);

// Per-position channel mixing: [C, T, H, W] x [C_out, C] + bias [C_out].
Tensor conv_pointwise(const Tensor& x, const Tensor& w, const Tensor& bias);

enum class PoolKind { Max, Avg, Stride };

// Non-overlapping temporal windows of size factor; Stride takes the last
// element of each window. factor must divide T.
Tensor pool_temporal(const Tensor& x, PoolKind kind, int64_t factor);

// Non-overlapping spatial max pooling; factor must divide H and W.
Tensor pool_spatial_max(const Tensor& x, int64_t factor);

// Nearest-neighbor spatial upsampling by an integer factor.
Tensor upsample_spatial_nearest(const Tensor& x, int64_t factor);

// Linear interpolation of [C, T, H, W] at fractional temporal positions
// pos [M] in [0, T-1]; differentiable in x and pos with
// d(out)/d(pos_t) = x[ceil] - x[floor]. pos must be non-decreasing.
Tensor grid_sample(const Tensor& x, const Tensor& pos);

// Same interpolation for [K, N] at positions pos [M]; differentiable in both.
Tensor interp_cols(const Tensor& x, const Tensor& pos);

// Values y [K, M] located at strictly increasing knot positions, evaluated at
// fixed query positions with constant extrapolation outside the knot span.
// Differentiable in y only; the weights are constants.
Tensor interp_knots(const Tensor& y, const std::vector<double>& knots,
                    const std::vector<double>& queries);

}  // namespace cfn
