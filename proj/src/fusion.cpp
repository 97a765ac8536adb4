#include "cfnet/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cfnet/errors.hpp"
#include "cfnet/ops.hpp"
#include "cfnet/tape.hpp"

namespace cfn {

Tensor attention_mask(const Tensor& x, const Tensor& w1, const Tensor& b1,
                      const Tensor& w2, const Tensor& b2) {
  Tensor gate = sigmoid(conv_pointwise(conv_pointwise(x, w1, b1), w2, b2));
  return mul(x, gate);
}

GaussianBank build_gaussian_bank_at(const std::vector<double>& centers,
                                    int64_t T_prime, double sigma_div) {
  const int64_t N = static_cast<int64_t>(centers.size());
  if (N < 1) throw ConfigError("gaussian bank: no centers");
  if (T_prime < 1)
    throw ConfigError("gaussian bank: fine length must be positive, got " +
                      std::to_string(T_prime));
  if (!(sigma_div > 0.0))
    throw ConfigError("gaussian bank: sigma divisor must be positive");
  for (double c : centers)
    if (c < 0.0 || c > static_cast<double>(T_prime - 1))
      throw ConfigError("gaussian bank: center " + std::to_string(c) +
                        " outside the fine timeline [0, " +
                        std::to_string(T_prime - 1) + "]");

  GaussianBank bank;
  bank.centers = centers;
  bank.sigma = static_cast<double>(T_prime) / sigma_div;
  const double denom = 2.0 * bank.sigma * bank.sigma;

  std::vector<double> w(static_cast<size_t>(N * T_prime));
  bank.row_sums.assign(static_cast<size_t>(N), 0.0);
  for (int64_t j = 0; j < N; ++j) {
    double peak = 0.0;
    for (int64_t t = 0; t < T_prime; ++t) {
      const double d = static_cast<double>(t) - centers[static_cast<size_t>(j)];
      const double g = std::exp(-d * d / denom);
      w[static_cast<size_t>(j * T_prime + t)] = g;
      peak = std::max(peak, g);
    }
    double sum = 0.0;
    for (int64_t t = 0; t < T_prime; ++t) {
      w[static_cast<size_t>(j * T_prime + t)] /= peak;
      sum += w[static_cast<size_t>(j * T_prime + t)];
    }
    bank.row_sums[static_cast<size_t>(j)] = sum;
  }
  bank.weights = Tensor({N, T_prime}, std::move(w));
  return bank;
}

GaussianBank build_gaussian_bank(const GridSpec& spec, int64_t T_prime,
                                 double span_start, double span_end,
                                 double sigma_div) {
  if (!(span_end > span_start))
    throw ConfigError("gaussian bank: degenerate coarse span [" +
                      std::to_string(span_start) + ", " +
                      std::to_string(span_end) + "]");
  if (span_start < 0.0 || span_end > static_cast<double>(T_prime - 1))
    throw ConfigError("gaussian bank: span [" + std::to_string(span_start) +
                      ", " + std::to_string(span_end) +
                      "] outside the fine timeline [0, " +
                      std::to_string(T_prime - 1) + "]");
  if (spec.T < 2)
    throw ConfigError("gaussian bank: grid timeline too short");

  const int64_t N = spec.s.dim(0);
  const double scale =
      (span_end - span_start) / static_cast<double>(spec.T - 1);
  std::vector<double> centers(static_cast<size_t>(N));
  for (int64_t j = 0; j < N; ++j)
    centers[static_cast<size_t>(j)] = span_start + spec.s.at(j) * scale;
  return build_gaussian_bank_at(centers, T_prime, sigma_div);
}

Tensor calibrate(const Tensor& x, const GaussianBank& bank) {
  if (x.ndim() != 4)
    throw ConfigError("calibrate: expected rank-4 input, got " +
                      shape_str(x.shape()));
  const int64_t N = bank.weights.dim(0), Tp = bank.weights.dim(1);
  if (x.dim(1) != Tp)
    throw ConfigError("calibrate: input has " + std::to_string(x.dim(1)) +
                      " frames but the bank was built for " +
                      std::to_string(Tp));
  const int64_t C = x.dim(0), H = x.dim(2), W = x.dim(3);
  const int64_t HW = H * W;
  const auto& xv = x.values();
  const auto& wv = bank.weights.values();
  const auto row_sums = bank.row_sums;

  std::vector<double> out(static_cast<size_t>(C * N * HW), 0.0);
  for (int64_t c = 0; c < C; ++c)
    for (int64_t j = 0; j < N; ++j) {
      double* o = out.data() + (c * N + j) * HW;
      for (int64_t t = 0; t < Tp; ++t) {
        const double g = wv[static_cast<size_t>(j * Tp + t)] /
                         row_sums[static_cast<size_t>(j)];
        const double* xp = xv.data() + (c * Tp + t) * HW;
        for (int64_t s = 0; s < HW; ++s) o[s] += g * xp[s];
      }
    }

  Tensor weights = bank.weights;  // shared storage kept alive by the closure
  return detail::make_op(
      "calibrate", {C, N, H, W}, std::move(out), {x},
      [weights, row_sums, C, N, Tp, HW](const std::vector<double>& og,
                                        const std::vector<double*>& gin) {
        if (!gin[0]) return;
        const auto& wv = weights.values();
        for (int64_t c = 0; c < C; ++c)
          for (int64_t j = 0; j < N; ++j) {
            const double* o = og.data() + (c * N + j) * HW;
            for (int64_t t = 0; t < Tp; ++t) {
              const double g = wv[static_cast<size_t>(j * Tp + t)] /
                               row_sums[static_cast<size_t>(j)];
              double* xp = gin[0] + (c * Tp + t) * HW;
              for (int64_t s = 0; s < HW; ++s) xp[s] += g * o[s];
            }
          }
      });
}

Tensor reduce_level(const Tensor& x, ReduceMode mode, const GaussianBank* bank) {
  if (x.ndim() != 4)
    throw ConfigError("reduce_level: expected rank-4 input, got " +
                      shape_str(x.shape()));
  switch (mode) {
    case ReduceMode::C:
      return reduce(x, {1, 2, 3}, Reduce::Mean, /*keepdims=*/true);
    case ReduceMode::CHW:
      return reduce(x, {1}, Reduce::Mean, /*keepdims=*/true);
    case ReduceMode::CTHW:
      if (!bank)
        throw ConfigError("reduce_level: CTHW mode needs a gaussian bank");
      return calibrate(x, *bank);
  }
  throw ConfigError("reduce_level: unknown mode");
}

Tensor multi_stage_concat(const std::vector<Tensor>& levels) {
  if (levels.empty()) throw ConfigError("multi_stage_concat: no levels");
  int64_t Hm = levels[0].dim(2), Wm = levels[0].dim(3);
  for (const Tensor& l : levels) {
    if (l.ndim() != 4)
      throw ConfigError("multi_stage_concat: expected rank-4 levels, got " +
                        shape_str(l.shape()));
    if (l.dim(1) != levels[0].dim(1))
      throw ConfigError("multi_stage_concat: temporal sizes differ: " +
                        std::to_string(l.dim(1)) + " vs " +
                        std::to_string(levels[0].dim(1)));
    Hm = std::min(Hm, l.dim(2));
    Wm = std::min(Wm, l.dim(3));
  }
  std::vector<Tensor> pooled;
  pooled.reserve(levels.size());
  for (const Tensor& l : levels) {
    if (l.dim(2) % Hm != 0 || l.dim(3) % Wm != 0 ||
        l.dim(2) / Hm != l.dim(3) / Wm)
      throw ConfigError("multi_stage_concat: spatial size " +
                        std::to_string(l.dim(2)) + "x" +
                        std::to_string(l.dim(3)) +
                        " is not an integer multiple of " +
                        std::to_string(Hm) + "x" + std::to_string(Wm));
    const int64_t k = l.dim(2) / Hm;
    pooled.push_back(k == 1 ? l : pool_spatial_max(l, k));
  }
  return pooled.size() == 1 ? pooled[0] : concat_axis0(pooled);
}

Tensor adapt_spatial(const Tensor& x, int64_t H, int64_t W) {
  if (x.ndim() != 4)
    throw ConfigError("adapt_spatial: expected rank-4 input, got " +
                      shape_str(x.shape()));
  const int64_t h = x.dim(2), w = x.dim(3);
  if (h == H && w == W) return x;
  if (h % H == 0 && w % W == 0 && h / H == w / W)
    return pool_spatial_max(x, h / H);
  if (H % h == 0 && W % w == 0 && H / h == W / w)
    return upsample_spatial_nearest(x, H / h);
  throw ConfigError("adapt_spatial: cannot map " + std::to_string(h) + "x" +
                    std::to_string(w) + " onto " + std::to_string(H) + "x" +
                    std::to_string(W));
}

std::pair<Tensor, Tensor> scale_shift(const Tensor& x, const Tensor& wA,
                                      const Tensor& bA, const Tensor& wB,
                                      const Tensor& bB) {
  return {sigmoid(conv_pointwise(x, wA, bA)), conv_pointwise(x, wB, bB)};
}

Tensor fuse(const Tensor& x, const Tensor& A, const Tensor& B) {
  return add(mul(A, x), B);
}

}  // namespace cfn
