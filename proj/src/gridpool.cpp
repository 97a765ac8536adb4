#include "cfnet/gridpool.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cfnet/errors.hpp"
#include "cfnet/tape.hpp"

namespace cfn {

Tensor compute_grid(const Tensor& p, int64_t T) {
  if (p.ndim() != 1)
    throw ConfigError("compute_grid: confidences must be rank 1, got " +
                      shape_str(p.shape()));
  const int64_t N = p.dim(0);
  if (T < N || T < 1)
    throw ConfigError("compute_grid: temporal length " + std::to_string(T) +
                      " shorter than grid size " + std::to_string(N));
  const auto& pv = p.values();
  for (int64_t i = 0; i < N; ++i) {
    const double v = pv[static_cast<size_t>(i)];
    if (!(v > 0.0 && v < 1.0))
      throw InvariantError("compute_grid: confidence " + std::to_string(v) +
                           " at index " + std::to_string(i) +
                           " is outside (0, 1)");
  }

  // extended-precision accumulation keeps q within one double rounding of
  // the exact normalized cumulative sum
  std::vector<long double> cuml(static_cast<size_t>(N));
  long double accl = 0.0L;
  for (int64_t i = 0; i < N; ++i) {
    accl += 1.0L - static_cast<long double>(pv[static_cast<size_t>(i)]);
    cuml[static_cast<size_t>(i)] = accl;
  }
  std::vector<double> q(static_cast<size_t>(N));
  std::vector<double> cum(static_cast<size_t>(N));
  for (int64_t i = 0; i < N; ++i) {
    q[static_cast<size_t>(i)] =
        static_cast<double>(static_cast<long double>(T) * cuml[static_cast<size_t>(i)] / accl);
    cum[static_cast<size_t>(i)] = static_cast<double>(cuml[static_cast<size_t>(i)]);
  }
  const double S = static_cast<double>(accl);

  const double Td = static_cast<double>(T);
  return detail::make_op(
      "compute_grid", {N}, std::move(q), {p},
      [cum, S, Td, N](const std::vector<double>& og,
                      const std::vector<double*>& gin) {
        if (!gin[0]) return;
        // dq_t/dp_j = T * (C_t - 1[j<=t] * S) / S^2
        double weighted = 0.0;  // sum_t og_t * C_t
        for (int64_t t = 0; t < N; ++t)
          weighted += og[static_cast<size_t>(t)] * cum[static_cast<size_t>(t)];
        double suffix = 0.0;  // sum_{t>=j} og_t
        for (int64_t j = N - 1; j >= 0; --j) {
          suffix += og[static_cast<size_t>(j)];
          gin[0][j] += Td * (weighted - S * suffix) / (S * S);
        }
      });
}

GridSpec make_grid(const Tensor& p, int64_t T, int64_t factor) {
  if (factor < 1)
    throw ConfigError("make_grid: factor must be positive, got " +
                      std::to_string(factor));
  if (T % factor != 0)
    throw ConfigError("make_grid: temporal length " + std::to_string(T) +
                      " is not divisible by factor " + std::to_string(factor));
  if (p.ndim() != 1 || p.dim(0) != T / factor)
    throw ConfigError("make_grid: expected " + std::to_string(T / factor) +
                      " confidences, got shape " + shape_str(p.shape()));
  GridSpec spec;
  spec.T = T;
  spec.factor = factor;
  spec.p = p;
  spec.q = compute_grid(p, T);
  spec.s = relu(add_scalar(spec.q, -1.0));
  return spec;
}

Tensor grid_pool(const Tensor& x, const GridSpec& spec) {
  if (x.ndim() != 4 || x.dim(1) != spec.T)
    throw ConfigError("grid_pool: input " + shape_str(x.shape()) +
                      " does not match grid length " + std::to_string(spec.T));
  return grid_sample(x, spec.s);
}

Tensor fixed_pool(const Tensor& x, PoolKind kind, int64_t factor) {
  return pool_temporal(x, kind, factor);
}

Tensor inverse_positions(const Tensor& q, const std::vector<double>& u) {
  if (q.ndim() != 1)
    throw ConfigError("inverse_positions: grid must be rank 1, got " +
                      shape_str(q.shape()));
  const int64_t N = q.dim(0);
  const int64_t M = static_cast<int64_t>(u.size());
  if (M < 1) throw ConfigError("inverse_positions: no query positions");
  const auto& qv = q.values();

  if (N == 1) {
    return detail::make_op(
        "inverse_positions", {M}, std::vector<double>(static_cast<size_t>(M), 0.0),
        {q}, [](const std::vector<double>&, const std::vector<double*>&) {});
  }

  std::vector<double> st(static_cast<size_t>(N));
  for (int64_t i = 0; i < N; ++i) st[static_cast<size_t>(i)] = qv[static_cast<size_t>(i)] - 1.0;
  for (int64_t i = 1; i < N; ++i)
    if (!(st[static_cast<size_t>(i)] > st[static_cast<size_t>(i - 1)]))
      throw InvariantError("inverse_positions: grid is not strictly increasing");

  std::vector<double> v(static_cast<size_t>(M));
  std::vector<int64_t> seg(static_cast<size_t>(M));
  std::vector<char> clamped(static_cast<size_t>(M), 0);
  for (int64_t m = 0; m < M; ++m) {
    // last k with st[k] <= u, clamped to a valid segment start
    int64_t k = static_cast<int64_t>(
                    std::upper_bound(st.begin(), st.end(), u[static_cast<size_t>(m)]) -
                    st.begin()) - 1;
    k = std::clamp<int64_t>(k, 0, N - 2);
    const double a = st[static_cast<size_t>(k)], b = st[static_cast<size_t>(k + 1)];
    double raw = static_cast<double>(k) + (u[static_cast<size_t>(m)] - a) / (b - a);
    seg[static_cast<size_t>(m)] = k;
    if (raw < 0.0 || raw > static_cast<double>(N - 1)) {
      clamped[static_cast<size_t>(m)] = 1;
      raw = std::clamp(raw, 0.0, static_cast<double>(N - 1));
    }
    v[static_cast<size_t>(m)] = raw;
  }

  std::vector<double> uq(u);
  return detail::make_op(
      "inverse_positions", {M}, std::move(v), {q},
      [st, seg, clamped, uq, M](const std::vector<double>& og,
                                const std::vector<double*>& gin) {
        if (!gin[0]) return;
        for (int64_t m = 0; m < M; ++m) {
          if (clamped[static_cast<size_t>(m)]) continue;
          const int64_t k = seg[static_cast<size_t>(m)];
          const double a = st[static_cast<size_t>(k)];
          const double b = st[static_cast<size_t>(k + 1)];
          const double d2 = (b - a) * (b - a);
          const double g = og[static_cast<size_t>(m)];
          gin[0][k] += g * (uq[static_cast<size_t>(m)] - b) / d2;
          gin[0][k + 1] += g * (a - uq[static_cast<size_t>(m)]) / d2;
        }
      });
}

Tensor grid_unpool(const Tensor& y, const GridSpec& spec, int64_t T_out) {
  if (y.ndim() != 2)
    throw ConfigError("grid_unpool: expected rank-2 input, got " +
                      shape_str(y.shape()));
  const int64_t N = spec.q.dim(0);
  if (y.dim(1) != N)
    throw ConfigError("grid_unpool: input " + shape_str(y.shape()) +
                      " does not match grid size " + std::to_string(N));
  if (T_out < spec.T)
    throw ConfigError("grid_unpool: T_out " + std::to_string(T_out) +
                      " is shorter than the grid timeline " +
                      std::to_string(spec.T));

  std::vector<double> u(static_cast<size_t>(N));
  for (int64_t j = 0; j < N; ++j)
    u[static_cast<size_t>(j)] =
        static_cast<double>((j + 1) * spec.factor - 1);

  Tensor v = inverse_positions(spec.q, u);
  Tensor yhat = interp_cols(y, v);

  std::vector<double> queries(static_cast<size_t>(spec.T));
  for (int64_t t = 0; t < spec.T; ++t) queries[static_cast<size_t>(t)] = static_cast<double>(t);
  Tensor full = interp_knots(yhat, u, queries);

  if (T_out == spec.T) return full;
  std::vector<double> pos(static_cast<size_t>(T_out));
  const double scale = T_out > 1 ? static_cast<double>(spec.T - 1) / static_cast<double>(T_out - 1) : 0.0;
  for (int64_t i = 0; i < T_out; ++i) pos[static_cast<size_t>(i)] = scale * static_cast<double>(i);
  return interp_cols(full, Tensor({T_out}, std::move(pos)));
}

std::vector<int64_t> stride_factorization(int64_t factor) {
  if (factor < 1)
    throw ConfigError("stride_factorization: factor must be positive, got " +
                      std::to_string(factor));
  std::vector<int64_t> strides;
  int64_t rest = factor;
  while (rest > 1 && strides.size() < 2) {
    int64_t div = rest % 2 == 0 ? 2 : rest % 3 == 0 ? 3 : rest;
    strides.push_back(div);
    rest /= div;
  }
  if (rest > 1) strides.push_back(rest);
  // three convolutions by default; lead with unit strides when the factor
  // needs fewer
  while (strides.size() < 3) strides.insert(strides.begin(), 1);
  std::sort(strides.begin(), strides.end());
  return strides;
}

}  // namespace cfn
