#include <algorithm>
#include <cmath>
#include <limits>

#include "cfnet/errors.hpp"
#include "cfnet/ops.hpp"

namespace cfn {

namespace {

void require_rank(const char* op, const Tensor& t, int rank) {
  if (t.ndim() != rank)
    throw ConfigError(std::string(op) + ": expected rank " + std::to_string(rank) +
                      ", got " + shape_str(t.shape()));
}

}  // namespace

Tensor conv_temporal(const Tensor& x, const Tensor& w, int stride, int padding) {
  require_rank("conv_temporal", x, 4);
  require_rank("conv_temporal", w, 3);
  const int64_t C = x.dim(0), T = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Co = w.dim(0), Cw = w.dim(1), K = w.dim(2);
  if (Cw != C)
    throw ConfigError("conv_temporal: weight channels " + std::to_string(Cw) +
                      " do not match input channels " + std::to_string(C));
  if (stride < 1 || padding < 0)
    throw ConfigError("conv_temporal: stride must be >= 1 and padding >= 0");
  const int64_t Tp = (T + 2 * padding - K) / stride + 1;
  if (T + 2 * padding < K || Tp < 1)
    throw ConfigError("conv_temporal: input too short (T=" + std::to_string(T) +
                      ", k=" + std::to_string(K) + ", padding=" +
                      std::to_string(padding) + ")");
  const int64_t HW = H * W;

  const auto& xv = x.values();
  const auto& wv = w.values();
  std::vector<double> out(static_cast<size_t>(Co * Tp * HW), 0.0);
  for (int64_t co = 0; co < Co; ++co)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t dk = 0; dk < K; ++dk) {
        const double wk = wv[static_cast<size_t>((co * C + c) * K + dk)];
        for (int64_t tp = 0; tp < Tp; ++tp) {
          const int64_t ts = tp * stride - padding + dk;
          if (ts < 0 || ts >= T) continue;
          const double* src = xv.data() + (c * T + ts) * HW;
          double* dst = out.data() + (co * Tp + tp) * HW;
          for (int64_t i = 0; i < HW; ++i) dst[i] += wk * src[i];
        }
      }

  return detail::make_op(
      "conv_temporal", Shape{Co, Tp, H, W}, std::move(out), {x, w},
      [x, w, stride, padding, C, T, Co, K, Tp, HW](
          const std::vector<double>& og, const std::vector<double*>& gin) {
        const auto& xv = x.values();
        const auto& wv = w.values();
        for (int64_t co = 0; co < Co; ++co)
          for (int64_t c = 0; c < C; ++c)
            for (int64_t dk = 0; dk < K; ++dk) {
              const double wk = wv[static_cast<size_t>((co * C + c) * K + dk)];
              double gw = 0.0;
              for (int64_t tp = 0; tp < Tp; ++tp) {
                const int64_t ts = tp * stride - padding + dk;
                if (ts < 0 || ts >= T) continue;
                const double* g = og.data() + (co * Tp + tp) * HW;
                if (gin[0]) {
                  double* gx = gin[0] + (c * T + ts) * HW;
                  for (int64_t i = 0; i < HW; ++i) gx[i] += wk * g[i];
                }
                if (gin[1]) {
                  const double* src = xv.data() + (c * T + ts) * HW;
                  for (int64_t i = 0; i < HW; ++i) gw += g[i] * src[i];
                }
              }
              if (gin[1]) gin[1][(co * C + c) * K + dk] += gw;
            }
      });
}

Tensor conv_pointwise(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank("conv_pointwise", x, 4);
  require_rank("conv_pointwise", w, 2);
  require_rank("conv_pointwise", bias, 1);
  const int64_t C = x.dim(0), T = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Co = w.dim(0);
  if (w.dim(1) != C)
    throw ConfigError("conv_pointwise: weight channels " + std::to_string(w.dim(1)) +
                      " do not match input channels " + std::to_string(C));
  if (bias.dim(0) != Co)
    throw ConfigError("conv_pointwise: bias size " + std::to_string(bias.dim(0)) +
                      " does not match output channels " + std::to_string(Co));
  const int64_t S = T * H * W;

  const auto& xv = x.values();
  const auto& wv = w.values();
  const auto& bv = bias.values();
  std::vector<double> out(static_cast<size_t>(Co * S));
  for (int64_t co = 0; co < Co; ++co) {
    double* dst = out.data() + co * S;
    std::fill_n(dst, S, bv[static_cast<size_t>(co)]);
    for (int64_t c = 0; c < C; ++c) {
      const double wk = wv[static_cast<size_t>(co * C + c)];
      const double* src = xv.data() + c * S;
      for (int64_t i = 0; i < S; ++i) dst[i] += wk * src[i];
    }
  }

  return detail::make_op(
      "conv_pointwise", Shape{Co, T, H, W}, std::move(out), {x, w, bias},
      [x, w, C, Co, S](const std::vector<double>& og,
                       const std::vector<double*>& gin) {
        const auto& xv = x.values();
        const auto& wv = w.values();
        for (int64_t co = 0; co < Co; ++co) {
          const double* g = og.data() + co * S;
          if (gin[2]) {
            double acc = 0.0;
            for (int64_t i = 0; i < S; ++i) acc += g[i];
            gin[2][co] += acc;
          }
          for (int64_t c = 0; c < C; ++c) {
            if (gin[0]) {
              const double wk = wv[static_cast<size_t>(co * C + c)];
              double* gx = gin[0] + c * S;
              for (int64_t i = 0; i < S; ++i) gx[i] += wk * g[i];
            }
            if (gin[1]) {
              const double* src = xv.data() + c * S;
              double acc = 0.0;
              for (int64_t i = 0; i < S; ++i) acc += g[i] * src[i];
              gin[1][co * C + c] += acc;
            }
          }
        }
      });
}

Tensor pool_temporal(const Tensor& x, PoolKind kind, int64_t factor) {
  require_rank("pool_temporal", x, 4);
  const int64_t C = x.dim(0), T = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (factor < 1 || T % factor != 0)
    throw ConfigError("pool_temporal: factor " + std::to_string(factor) +
                      " does not divide T=" + std::to_string(T));
  if (kind == PoolKind::Stride)
    return stride_select_axis1(x, factor, factor - 1);

  const int64_t Tp = T / factor;
  const int64_t HW = H * W;
  const auto& xv = x.values();
  std::vector<double> out(static_cast<size_t>(C * Tp * HW));
  std::vector<int64_t> argmax;
  if (kind == PoolKind::Max) argmax.assign(out.size(), -1);

  for (int64_t c = 0; c < C; ++c)
    for (int64_t tp = 0; tp < Tp; ++tp)
      for (int64_t i = 0; i < HW; ++i) {
        const int64_t oidx = (c * Tp + tp) * HW + i;
        if (kind == PoolKind::Avg) {
          double acc = 0.0;
          for (int64_t dt = 0; dt < factor; ++dt)
            acc += xv[static_cast<size_t>((c * T + tp * factor + dt) * HW + i)];
          out[static_cast<size_t>(oidx)] = acc / static_cast<double>(factor);
        } else {
          // seed with the first window entry so nonfinite windows stay
          // in-bounds and NaN poisons the max instead of vanishing
          int64_t bi = (c * T + tp * factor) * HW + i;
          double best = xv[static_cast<size_t>(bi)];
          for (int64_t dt = 1; dt < factor; ++dt) {
            const int64_t xi = (c * T + tp * factor + dt) * HW + i;
            if (xv[static_cast<size_t>(xi)] > best) {
              best = xv[static_cast<size_t>(xi)];
              bi = xi;
            }
          }
          out[static_cast<size_t>(oidx)] = best;
          argmax[static_cast<size_t>(oidx)] = bi;
        }
      }

  if (kind == PoolKind::Max) {
    return detail::make_op("pool_temporal_max", Shape{C, Tp, H, W}, std::move(out),
                           {x},
                           [argmax](const std::vector<double>& og,
                                    const std::vector<double*>& gin) {
                             if (!gin[0]) return;
                             for (size_t o = 0; o < og.size(); ++o)
                               gin[0][argmax[o]] += og[o];
                           });
  }
  return detail::make_op(
      "pool_temporal_avg", Shape{C, Tp, H, W}, std::move(out), {x},
      [C, T, Tp, HW, factor](const std::vector<double>& og,
                             const std::vector<double*>& gin) {
        if (!gin[0]) return;
        const double inv = 1.0 / static_cast<double>(factor);
        for (int64_t c = 0; c < C; ++c)
          for (int64_t tp = 0; tp < Tp; ++tp)
            for (int64_t dt = 0; dt < factor; ++dt) {
              const double* g = og.data() + (c * Tp + tp) * HW;
              double* gx = gin[0] + (c * T + tp * factor + dt) * HW;
              for (int64_t i = 0; i < HW; ++i) gx[i] += g[i] * inv;
            }
      });
}

Tensor pool_spatial_max(const Tensor& x, int64_t factor) {
  require_rank("pool_spatial_max", x, 4);
  const int64_t C = x.dim(0), T = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (factor < 1 || H % factor != 0 || W % factor != 0)
    throw ConfigError("pool_spatial_max: factor " + std::to_string(factor) +
                      " does not divide spatial dims " + std::to_string(H) + "x" +
                      std::to_string(W));
  if (factor == 1) return add_scalar(x, 0.0);
  const int64_t Hp = H / factor, Wp = W / factor;
  const auto& xv = x.values();
  std::vector<double> out(static_cast<size_t>(C * T * Hp * Wp));
  std::vector<int64_t> argmax(out.size(), -1);
  for (int64_t ct = 0; ct < C * T; ++ct)
    for (int64_t hp = 0; hp < Hp; ++hp)
      for (int64_t wp = 0; wp < Wp; ++wp) {
        // seed with the first window entry so nonfinite windows stay
        // in-bounds and NaN poisons the max instead of vanishing
        int64_t bi = (ct * H + hp * factor) * W + wp * factor;
        double best = xv[static_cast<size_t>(bi)];
        for (int64_t dh = 0; dh < factor; ++dh)
          for (int64_t dw = 0; dw < factor; ++dw) {
            if (dh == 0 && dw == 0) continue;
            const int64_t xi =
                (ct * H + hp * factor + dh) * W + wp * factor + dw;
            if (xv[static_cast<size_t>(xi)] > best) {
              best = xv[static_cast<size_t>(xi)];
              bi = xi;
            }
          }
        const int64_t oidx = (ct * Hp + hp) * Wp + wp;
        out[static_cast<size_t>(oidx)] = best;
        argmax[static_cast<size_t>(oidx)] = bi;
      }
  return detail::make_op("pool_spatial_max", Shape{C, T, Hp, Wp}, std::move(out),
                         {x},
                         [argmax](const std::vector<double>& og,
                                  const std::vector<double*>& gin) {
                           if (!gin[0]) return;
                           for (size_t o = 0; o < og.size(); ++o)
                             gin[0][argmax[o]] += og[o];
                         });
}

Tensor upsample_spatial_nearest(const Tensor& x, int64_t factor) {
  require_rank("upsample_spatial_nearest", x, 4);
  if (factor < 1) throw ConfigError("upsample_spatial_nearest: factor must be >= 1");
  if (factor == 1) return add_scalar(x, 0.0);
  const int64_t C = x.dim(0), T = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Ho = H * factor, Wo = W * factor;
  const auto& xv = x.values();
  std::vector<double> out(static_cast<size_t>(C * T * Ho * Wo));
  for (int64_t ct = 0; ct < C * T; ++ct)
    for (int64_t ho = 0; ho < Ho; ++ho)
      for (int64_t wo = 0; wo < Wo; ++wo)
        out[static_cast<size_t>((ct * Ho + ho) * Wo + wo)] =
            xv[static_cast<size_t>((ct * H + ho / factor) * W + wo / factor)];
  return detail::make_op(
      "upsample_spatial_nearest", Shape{C, T, Ho, Wo}, std::move(out), {x},
      [C, T, H, W, Ho, Wo, factor](const std::vector<double>& og,
                                   const std::vector<double*>& gin) {
        if (!gin[0]) return;
        for (int64_t ct = 0; ct < C * T; ++ct)
          for (int64_t ho = 0; ho < Ho; ++ho)
            for (int64_t wo = 0; wo < Wo; ++wo)
              gin[0][(ct * H + ho / factor) * W + wo / factor] +=
                  og[static_cast<size_t>((ct * Ho + ho) * Wo + wo)];
      });
}

namespace {

// Shared linear-interpolation kernel over a logical [outer, N, inner] view.
// Differentiable in x and pos; d(out)/d(pos) = x[hi] - x[lo].
Tensor interp_axis1_impl(const char* name, const Tensor& x, const Tensor& pos,
                         int64_t outer, int64_t N, int64_t inner,
                         Shape out_shape) {
  require_rank(name, pos, 1);
  const int64_t M = pos.dim(0);
  const auto& pv = pos.values();
  constexpr double kEdgeTol = 1e-9;  // fp slack at the endpoints only
  std::vector<int64_t> lo(static_cast<size_t>(M));
  std::vector<double> frac(static_cast<size_t>(M));
  for (int64_t m = 0; m < M; ++m) {
    double p = pv[static_cast<size_t>(m)];
    if (p < -kEdgeTol || p > static_cast<double>(N - 1) + kEdgeTol)
      throw InvariantError(std::string(name) + ": position " + std::to_string(p) +
                           " outside [0, " + std::to_string(N - 1) + "]");
    p = std::clamp(p, 0.0, static_cast<double>(N - 1));
    int64_t l = static_cast<int64_t>(std::floor(p));
    if (l > N - 2) l = N - 2;       // p == N-1 uses the last segment with w == 1
    if (N == 1) l = 0;
    lo[static_cast<size_t>(m)] = l;
    frac[static_cast<size_t>(m)] = N == 1 ? 0.0 : p - static_cast<double>(l);
  }

  const auto& xv = x.values();
  std::vector<double> out(static_cast<size_t>(outer * M * inner));
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t m = 0; m < M; ++m) {
      const int64_t l = lo[static_cast<size_t>(m)];
      const int64_t h = std::min(l + 1, N - 1);
      const double w = frac[static_cast<size_t>(m)];
      const double* a = xv.data() + (o * N + l) * inner;
      const double* b = xv.data() + (o * N + h) * inner;
      double* dst = out.data() + (o * M + m) * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] = (1.0 - w) * a[i] + w * b[i];
    }

  return detail::make_op(
      name, std::move(out_shape), std::move(out), {x, pos},
      [x, outer, N, inner, M, lo, frac](const std::vector<double>& og,
                                        const std::vector<double*>& gin) {
        const auto& xv = x.values();
        for (int64_t m = 0; m < M; ++m) {
          const int64_t l = lo[static_cast<size_t>(m)];
          const int64_t h = std::min(l + 1, N - 1);
          const double w = frac[static_cast<size_t>(m)];
          double gpos = 0.0;
          for (int64_t o = 0; o < outer; ++o) {
            const double* g = og.data() + (o * M + m) * inner;
            if (gin[0]) {
              double* ga = gin[0] + (o * N + l) * inner;
              double* gb = gin[0] + (o * N + h) * inner;
              for (int64_t i = 0; i < inner; ++i) {
                ga[i] += (1.0 - w) * g[i];
                gb[i] += w * g[i];
              }
            }
            if (gin[1]) {
              const double* a = xv.data() + (o * N + l) * inner;
              const double* b = xv.data() + (o * N + h) * inner;
              for (int64_t i = 0; i < inner; ++i) gpos += g[i] * (b[i] - a[i]);
            }
          }
          if (gin[1]) gin[1][m] += gpos;
        }
      });
}

}  // namespace

Tensor grid_sample(const Tensor& x, const Tensor& pos) {
  require_rank("grid_sample", x, 4);
  require_rank("grid_sample", pos, 1);
  const auto& pv = pos.values();
  for (size_t m = 1; m < pv.size(); ++m)
    if (pv[m] < pv[m - 1])
      throw ConfigError("grid_sample: positions must be non-decreasing");
  const int64_t C = x.dim(0), T = x.dim(1), H = x.dim(2), W = x.dim(3);
  return interp_axis1_impl("grid_sample", x, pos, C, T, H * W,
                           Shape{C, pos.dim(0), H, W});
}

Tensor interp_cols(const Tensor& x, const Tensor& pos) {
  require_rank("interp_cols", x, 2);
  return interp_axis1_impl("interp_cols", x, pos, x.dim(0), x.dim(1), 1,
                           Shape{x.dim(0), pos.dim(0)});
}

Tensor interp_knots(const Tensor& y, const std::vector<double>& knots,
                    const std::vector<double>& queries) {
  require_rank("interp_knots", y, 2);
  const int64_t K = y.dim(0), M = y.dim(1);
  if (static_cast<int64_t>(knots.size()) != M)
    throw ConfigError("interp_knots: " + std::to_string(knots.size()) +
                      " knots for " + std::to_string(M) + " columns");
  for (size_t j = 1; j < knots.size(); ++j)
    if (!(knots[j] > knots[j - 1]))
      throw InvariantError("interp_knots: knots must be strictly increasing");
  const int64_t Q = static_cast<int64_t>(queries.size());

  // per-query source pair and weight; constant extrapolation outside the span
  std::vector<int64_t> lo(static_cast<size_t>(Q));
  std::vector<double> frac(static_cast<size_t>(Q));
  for (int64_t q = 0; q < Q; ++q) {
    const double u = queries[static_cast<size_t>(q)];
    if (u <= knots.front() || M == 1) {
      lo[static_cast<size_t>(q)] = 0;
      frac[static_cast<size_t>(q)] = 0.0;
    } else if (u >= knots.back()) {
      lo[static_cast<size_t>(q)] = M - 1;
      frac[static_cast<size_t>(q)] = 0.0;
    } else {
      const auto it = std::upper_bound(knots.begin(), knots.end(), u);
      const int64_t j = static_cast<int64_t>(it - knots.begin()) - 1;
      lo[static_cast<size_t>(q)] = j;
      frac[static_cast<size_t>(q)] =
          (u - knots[static_cast<size_t>(j)]) /
          (knots[static_cast<size_t>(j + 1)] - knots[static_cast<size_t>(j)]);
    }
  }

  const auto& yv = y.values();
  std::vector<double> out(static_cast<size_t>(K * Q));
  for (int64_t k = 0; k < K; ++k)
    for (int64_t q = 0; q < Q; ++q) {
      const int64_t l = lo[static_cast<size_t>(q)];
      const int64_t h = std::min(l + 1, M - 1);
      const double w = frac[static_cast<size_t>(q)];
      out[static_cast<size_t>(k * Q + q)] =
          (1.0 - w) * yv[static_cast<size_t>(k * M + l)] +
          w * yv[static_cast<size_t>(k * M + h)];
    }

  return detail::make_op(
      "interp_knots", Shape{K, Q}, std::move(out), {y},
      [K, M, Q, lo, frac](const std::vector<double>& og,
                          const std::vector<double*>& gin) {
        if (!gin[0]) return;
        for (int64_t k = 0; k < K; ++k)
          for (int64_t q = 0; q < Q; ++q) {
            const int64_t l = lo[static_cast<size_t>(q)];
            const int64_t h = std::min(l + 1, M - 1);
            const double w = frac[static_cast<size_t>(q)];
            const double g = og[static_cast<size_t>(k * Q + q)];
            gin[0][k * M + l] += (1.0 - w) * g;
            gin[0][k * M + h] += w * g;
          }
      });
}

}  // namespace cfn
