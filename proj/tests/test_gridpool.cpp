#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "cfnet/errors.hpp"
#include "cfnet/gradcheck.hpp"
#include "cfnet/gridpool.hpp"
#include "cfnet/ops.hpp"
#include "cfnet/rng.hpp"
#include "cfnet/tape.hpp"
#include "cfnet/tensor.hpp"
#include "doctest.h"

using namespace cfn;

namespace {

// direct extended-precision evaluation of the normalized cumulative grid
std::vector<double> grid_oracle(const std::vector<double>& p, int64_t T) {
  long double S = 0.0L;
  for (double v : p) S += 1.0L - static_cast<long double>(v);
  std::vector<double> q(p.size());
  long double c = 0.0L;
  for (size_t i = 0; i < p.size(); ++i) {
    c += 1.0L - static_cast<long double>(p[i]);
    q[i] = static_cast<double>(static_cast<long double>(T) * c / S);
  }
  return q;
}

double interp_index(const std::vector<double>& st, double v) {
  const int64_t n = static_cast<int64_t>(st.size());
  int64_t l = std::clamp<int64_t>(static_cast<int64_t>(std::floor(v)), 0, n - 2);
  const double w = v - static_cast<double>(l);
  return (1.0 - w) * st[static_cast<size_t>(l)] + w * st[static_cast<size_t>(l + 1)];
}

// brute-force bisection inverse of the monotone piecewise-linear index map
double inverse_oracle(const std::vector<double>& st, double u) {
  double lo = 0.0, hi = static_cast<double>(st.size() - 1);
  for (int iter = 0; iter < 200; ++iter) {
    const double mid = 0.5 * (lo + hi);
    if (interp_index(st, mid) < u)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

std::vector<double> random_conf(Rng& rng, int64_t n, double lo = 0.05,
                                double hi = 0.95) {
  std::vector<double> p(static_cast<size_t>(n));
  for (auto& v : p) v = rng.uniform(lo, hi);
  return p;
}

}  // namespace

TEST_CASE("uniform confidences give the exact stride grid") {
  Tensor p({4}, {0.5, 0.5, 0.5, 0.5});
  GridSpec spec = make_grid(p, 8, 2);
  const std::vector<double> want_q = {2, 4, 6, 8};
  const std::vector<double> want_s = {1, 3, 5, 7};
  for (int i = 0; i < 4; ++i) {
    CHECK(spec.q.at(i) == doctest::Approx(want_q[static_cast<size_t>(i)]).epsilon(1e-14));
    CHECK(spec.s.at(i) == doctest::Approx(want_s[static_cast<size_t>(i)]).epsilon(1e-14));
  }
  // the constant cancels in the normalization
  for (double c : {0.1, 0.3, 0.9}) {
    GridSpec other = make_grid(Tensor({4}, std::vector<double>(4, c)), 8, 2);
    for (int i = 0; i < 4; ++i)
      CHECK(other.q.at(i) == doctest::Approx(want_q[static_cast<size_t>(i)]).epsilon(1e-13));
  }
}

TEST_CASE("skewed confidences shift the grid toward unconfident frames") {
  GridSpec spec = make_grid(Tensor({4}, {0.9, 0.1, 0.1, 0.1}), 8, 2);
  const std::vector<double> want_q = {2.0 / 7.0 * 1.0, 20.0 / 7.0, 38.0 / 7.0, 8.0};
  for (int i = 0; i < 4; ++i)
    CHECK(std::fabs(spec.q.at(i) - want_q[static_cast<size_t>(i)]) < 1e-12);
  CHECK(spec.s.at(0) == 0.0);  // q[0] < 1 clamps to the first frame
  CHECK(std::fabs(spec.s.at(1) - 13.0 / 7.0) < 1e-12);
  CHECK(std::fabs(spec.s.at(2) - 31.0 / 7.0) < 1e-12);
  CHECK(spec.s.at(3) == doctest::Approx(7.0));

  // a ramp is a fixed point of linear sampling
  std::vector<double> ramp(8);
  for (int i = 0; i < 8; ++i) ramp[static_cast<size_t>(i)] = i;
  Tensor pooled = grid_pool(Tensor({1, 8, 1, 1}, ramp), spec);
  for (int i = 0; i < 4; ++i)
    CHECK(pooled.at(i) == doctest::Approx(spec.s.at(i)).epsilon(1e-12));
}

TEST_CASE("grid matches a high-precision oracle on random confidences") {
  Rng rng(100);
  for (int c = 0; c < 100; ++c) {
    const int64_t factor = 2 + static_cast<int64_t>(rng.uniform_int(0, 2));
    const int64_t N = 2 + static_cast<int64_t>(rng.uniform_int(0, 64 / factor - 2));
    const int64_t T = N * factor;
    auto pv = random_conf(rng, N);
    Tensor q = compute_grid(Tensor({N}, pv), T);
    auto want = grid_oracle(pv, T);
    for (int64_t i = 0; i < N; ++i) {
      CHECK(std::fabs(q.at(i) - want[static_cast<size_t>(i)]) < 1e-12);
      if (i > 0) CHECK(q.at(i) > q.at(i - 1));
    }
    CHECK(std::fabs(q.at(N - 1) - static_cast<double>(T)) < 1e-12);
  }
}

TEST_CASE("confidences outside the open interval are rejected") {
  CHECK_THROWS_AS(compute_grid(Tensor({2}, {0.5, 1.0}), 4), InvariantError);
  CHECK_THROWS_AS(compute_grid(Tensor({2}, {0.0, 0.5}), 4), InvariantError);
  CHECK_THROWS_AS(compute_grid(Tensor({2}, {-0.1, 0.5}), 4), InvariantError);
  CHECK_THROWS_AS(compute_grid(Tensor({2}, {0.5, 1.2}), 4), InvariantError);
  CHECK_THROWS_AS(compute_grid(Tensor({2, 1}, {0.5, 0.5}), 4), ConfigError);
  CHECK_THROWS_AS(make_grid(Tensor({3}, {0.5, 0.5, 0.5}), 7, 2), ConfigError);
  CHECK_THROWS_AS(make_grid(Tensor({3}, {0.5, 0.5, 0.5}), 8, 2), ConfigError);
}

TEST_CASE("uniform grid pooling equals stride pooling on random tensors") {
  Rng rng(200);
  for (int c = 0; c < 100; ++c) {
    const int64_t factor = 2 + static_cast<int64_t>(rng.uniform_int(0, 2));
    const int64_t N = 2 + static_cast<int64_t>(rng.uniform_int(0, 6));
    const int64_t T = N * factor;
    const int64_t C = 1 + static_cast<int64_t>(rng.uniform_int(0, 2));
    const int64_t H = 1 + static_cast<int64_t>(rng.uniform_int(0, 2));
    Tensor x({C, T, H, H}, rng.normal_vec(static_cast<size_t>(C * T * H * H)));
    const double conf = rng.uniform(0.1, 0.9);
    GridSpec spec = make_grid(Tensor({N}, std::vector<double>(static_cast<size_t>(N), conf)), T, factor);
    Tensor a = grid_pool(x, spec);
    Tensor b = fixed_pool(x, PoolKind::Stride, factor);
    REQUIRE(a.shape() == b.shape());
    for (int64_t i = 0; i < a.numel(); ++i)
      CHECK(std::fabs(a.at(i) - b.at(i)) < 1e-12);
  }
}

TEST_CASE("fixed_pool window examples") {
  Tensor x({1, 2, 1, 1}, {1, 3});
  CHECK(fixed_pool(x, PoolKind::Avg, 2).at(0) == 2.0);
  CHECK(fixed_pool(x, PoolKind::Max, 2).at(0) == 3.0);
  CHECK(fixed_pool(x, PoolKind::Stride, 2).at(0) == 3.0);
  CHECK_THROWS_AS(fixed_pool(Tensor::zeros({1, 3, 1, 1}), PoolKind::Avg, 2),
                  ConfigError);
}

TEST_CASE("grid inverse round-trips within 1e-9 and matches bisection") {
  Rng rng(300);
  for (int c = 0; c < 50; ++c) {
    const int64_t N = 3 + static_cast<int64_t>(rng.uniform_int(0, 13));
    const int64_t T = N * 2;
    auto pv = random_conf(rng, N);
    Tensor q = compute_grid(Tensor({N}, pv), T);
    std::vector<double> st(static_cast<size_t>(N));
    for (int64_t j = 0; j < N; ++j) st[static_cast<size_t>(j)] = q.at(j) - 1.0;

    // identity on its own knots
    Tensor v = inverse_positions(q, st);
    for (int64_t j = 0; j < N; ++j)
      CHECK(std::fabs(v.at(j) - static_cast<double>(j)) < 1e-9);

    // interior queries agree with the brute-force bisection inverse
    std::vector<double> u(8);
    for (auto& val : u) val = rng.uniform(st.front(), st.back());
    std::sort(u.begin(), u.end());
    Tensor vi = inverse_positions(q, u);
    for (size_t m = 0; m < u.size(); ++m)
      CHECK(std::fabs(vi.at(static_cast<int64_t>(m)) - inverse_oracle(st, u[m])) < 1e-9);
  }
}

TEST_CASE("unpool places coarse samples at stride positions") {
  GridSpec spec = make_grid(Tensor({4}, std::vector<double>(4, 0.5)), 8, 2);
  Tensor y({1, 4}, {0, 1, 2, 3});
  Tensor out = grid_unpool(y, spec, 8);
  REQUIRE(out.shape() == Shape{1, 8});
  const std::vector<double> want = {0, 0, 0.5, 1, 1.5, 2, 2.5, 3};
  for (int i = 0; i < 8; ++i)
    CHECK(std::fabs(out.at(i) - want[static_cast<size_t>(i)]) < 1e-12);

  // constant rows stay constant under any spec
  GridSpec skew = make_grid(Tensor({4}, {0.2, 0.7, 0.4, 0.6}), 8, 2);
  Tensor flat = grid_unpool(Tensor({2, 4}, std::vector<double>(8, 3.25)), skew, 12);
  for (int64_t i = 0; i < flat.numel(); ++i) CHECK(flat.at(i) == doctest::Approx(3.25));

  CHECK_THROWS_AS(grid_unpool(y, spec, 4), ConfigError);
  CHECK_THROWS_AS(grid_unpool(Tensor({1, 3}, {0, 1, 2}), spec, 8), ConfigError);
}

TEST_CASE("pool then unpool reproduces a ramp on interior frames") {
  std::vector<double> ramp(16);
  for (int i = 0; i < 16; ++i) ramp[static_cast<size_t>(i)] = i;
  Tensor x({1, 16, 1, 1}, ramp);

  SUBCASE("uniform grid") {
    GridSpec spec = make_grid(Tensor({4}, std::vector<double>(4, 0.5)), 16, 4);
    Tensor pooled = grid_pool(x, spec);
    Tensor out = grid_unpool(reshape(pooled, {1, 4}), spec, 16);
    // u = [3, 7, 11, 15]; constant extrapolation flattens frames before u_0
    for (int t = 3; t < 16; ++t)
      CHECK(std::fabs(out.at(t) - static_cast<double>(t)) < 1e-9);
    for (int t = 0; t < 3; ++t) CHECK(std::fabs(out.at(t) - 3.0) < 1e-9);
  }

  SUBCASE("non-uniform grid with all positions past the clamp") {
    Rng rng(17);
    auto pv = random_conf(rng, 4, 0.3, 0.7);
    GridSpec spec = make_grid(Tensor({4}, pv), 16, 4);
    REQUIRE(spec.q.at(0) > 1.0);  // no low-end clamp, sampling is exact
    Tensor pooled = grid_pool(x, spec);
    Tensor out = grid_unpool(reshape(pooled, {1, 4}), spec, 16);
    for (int t = 3; t < 16; ++t)
      CHECK(std::fabs(out.at(t) - static_cast<double>(t)) < 1e-9);
  }
}

TEST_CASE("stride factorization covers the default and awkward factors") {
  CHECK(stride_factorization(1) == std::vector<int64_t>{1, 1, 1});
  CHECK(stride_factorization(2) == std::vector<int64_t>{1, 1, 2});
  CHECK(stride_factorization(4) == std::vector<int64_t>{1, 2, 2});
  CHECK(stride_factorization(8) == std::vector<int64_t>{2, 2, 2});
  CHECK(stride_factorization(6) == std::vector<int64_t>{1, 2, 3});
  CHECK(stride_factorization(12) == std::vector<int64_t>{2, 2, 3});
  CHECK(stride_factorization(16) == std::vector<int64_t>{2, 2, 4});
  CHECK(stride_factorization(5) == std::vector<int64_t>{1, 1, 5});
  CHECK_THROWS_AS(stride_factorization(0), ConfigError);
  for (int64_t f : {1, 2, 3, 4, 5, 6, 8, 12, 16, 24}) {
    auto s = stride_factorization(f);
    int64_t prod = 1;
    for (int64_t v : s) prod *= v;
    CHECK(prod == f);
    CHECK(s.size() == 3);
  }
}

TEST_CASE("grid construction and unpool differentiate cleanly") {
  auto make_p = [](uint64_t seed) {
    Rng rng(seed);
    return std::vector<Tensor>{
        Tensor({6}, random_conf(rng, 6, 0.2, 0.8), true)};
  };

  GradCheckCase grid_case{
      "compute_grid", make_p,
      [](const std::vector<Tensor>& in) {
        Tensor q = compute_grid(in[0], 12);
        return mean_all(mul(q, q));
      }};
  GradCheckResult r1 = run_gradcheck_case(grid_case, 5);
  INFO("compute_grid max_err=" << r1.max_err);
  CHECK(r1.pass);

  GradCheckCase unpool_case{
      "pool_unpool_chain",
      [](uint64_t seed) {
        Rng rng(seed);
        // keep q away from the s-clamp and the inverse's segment boundaries
        std::vector<double> pv = random_conf(rng, 4, 0.35, 0.65);
        Tensor x = Tensor::randn({2, 16, 1, 1}, rng, 1.0, true);
        return std::vector<Tensor>{Tensor({4}, pv, true), x};
      },
      [](const std::vector<Tensor>& in) {
        GridSpec spec = make_grid(in[0], 16, 4);
        Tensor pooled = grid_pool(in[1], spec);
        Tensor out = grid_unpool(reshape(pooled, {2, 4}), spec, 32);
        return mean_all(mul(out, out));
      }};
  GradCheckResult r2 = run_gradcheck_case(unpool_case, 5);
  INFO("pool_unpool max_err=" << r2.max_err);
  CHECK(r2.pass);
}

TEST_CASE("gradients flow from the grid into the confidences") {
  Tensor p({4}, {0.4, 0.6, 0.5, 0.55}, true);
  Tape tape;
  TapeScope scope(tape);
  GridSpec spec = make_grid(p, 8, 2);
  std::vector<double> ramp(8);
  for (int i = 0; i < 8; ++i) ramp[static_cast<size_t>(i)] = i * i;
  Tensor pooled = grid_pool(Tensor({1, 8, 1, 1}, ramp), spec);
  tape.backward(sum_all(pooled));
  REQUIRE(p.has_grad());
  double norm = 0.0;
  for (double g : p.grad()) norm += std::fabs(g);
  CHECK(norm > 1e-6);
}
