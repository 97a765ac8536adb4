#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "cfnet/errors.hpp"
#include "cfnet/fusion.hpp"
#include "cfnet/gradcheck.hpp"
#include "cfnet/gridpool.hpp"
#include "cfnet/ops.hpp"
#include "cfnet/rng.hpp"
#include "cfnet/tape.hpp"
#include "cfnet/tensor.hpp"
#include "doctest.h"

using namespace cfn;

namespace {

GridSpec uniform_spec(int64_t T, int64_t factor) {
  const int64_t N = T / factor;
  return make_grid(Tensor({N}, std::vector<double>(static_cast<size_t>(N), 0.5)),
                   T, factor);
}

// independent summation oracle for the Gaussian-weighted temporal average
double calibrate_oracle(const Tensor& x, const GaussianBank& bank, int64_t c,
                        int64_t j, int64_t h, int64_t w) {
  const int64_t Tp = x.dim(1), H = x.dim(2), W = x.dim(3);
  long double num = 0.0L, den = 0.0L;
  for (int64_t t = 0; t < Tp; ++t) {
    const long double g = bank.weights.at(j * Tp + t);
    num += g * static_cast<long double>(x.at(((c * Tp + t) * H + h) * W + w));
    den += g;
  }
  return static_cast<double>(num / den);
}

}  // namespace

TEST_CASE("attention mask gates with a sigmoid and starts at one half") {
  Rng rng(5);
  Tensor x = Tensor::randn({4, 6, 2, 2}, rng);
  Tensor w1 = Tensor::randn({2, 4}, rng, 0.5);
  Tensor b1 = Tensor::randn({2}, rng, 0.5);
  Tensor w2 = Tensor::zeros({4, 2});
  Tensor b2 = Tensor::zeros({4});
  Tensor y = attention_mask(x, w1, b1, w2, b2);
  REQUIRE(y.shape() == x.shape());
  for (int64_t i = 0; i < y.numel(); ++i)
    CHECK(y.at(i) == doctest::Approx(0.5 * x.at(i)).epsilon(1e-14));

  // live gate stays inside (0, 1)
  Tensor w2r = Tensor::randn({4, 2}, rng, 0.5);
  Tensor b2r = Tensor::randn({4}, rng, 0.5);
  Tensor z = attention_mask(x, w1, b1, w2r, b2r);
  for (int64_t i = 0; i < z.numel(); ++i) {
    if (x.at(i) == 0.0) continue;
    const double gate = z.at(i) / x.at(i);
    CHECK(gate > 0.0);
    CHECK(gate < 1.0);
  }
}

TEST_CASE("gaussian bank geometry on the uniform full-span grid") {
  GridSpec spec = uniform_spec(8, 2);
  GaussianBank bank = build_gaussian_bank(spec, 8, 0.0, 7.0);
  CHECK(bank.sigma == doctest::Approx(1.0));
  REQUIRE(bank.centers.size() == 4);
  const std::vector<double> want_mu = {1, 3, 5, 7};
  for (size_t j = 0; j < 4; ++j)
    CHECK(bank.centers[j] == doctest::Approx(want_mu[j]).epsilon(1e-12));

  const int64_t Tp = 8;
  for (int64_t j = 0; j < 4; ++j) {
    const int64_t mu = static_cast<int64_t>(want_mu[j]);
    CHECK(bank.weights.at(j * Tp + mu) == doctest::Approx(1.0));
    if (mu - 1 >= 0)
      CHECK(bank.weights.at(j * Tp + mu - 1) ==
            doctest::Approx(std::exp(-0.5)).epsilon(1e-12));
    if (mu + 1 < Tp)
      CHECK(bank.weights.at(j * Tp + mu + 1) ==
            doctest::Approx(std::exp(-0.5)).epsilon(1e-12));
    // symmetry about the center up to boundary truncation
    for (int64_t d = 1; d < 8; ++d) {
      if (mu - d < 0 || mu + d >= Tp) break;
      CHECK(bank.weights.at(j * Tp + mu - d) ==
            doctest::Approx(bank.weights.at(j * Tp + mu + d)).epsilon(1e-12));
    }
    for (int64_t t = 0; t < Tp; ++t) {
      CHECK(bank.weights.at(j * Tp + t) > 0.0);
      CHECK(bank.weights.at(j * Tp + t) <= 1.0);
    }
  }

  CHECK_THROWS_AS(build_gaussian_bank(spec, 8, 3.0, 3.0), ConfigError);
  CHECK_THROWS_AS(build_gaussian_bank(spec, 8, -1.0, 7.0), ConfigError);
  CHECK_THROWS_AS(build_gaussian_bank(spec, 8, 0.0, 7.5), ConfigError);
  CHECK_THROWS_AS(build_gaussian_bank(spec, 8, 0.0, 7.0, 0.0), ConfigError);
}

TEST_CASE("offset spans translate the centers") {
  GridSpec spec = uniform_spec(8, 2);
  GaussianBank bank = build_gaussian_bank(spec, 16, 4.0, 11.0);
  const std::vector<double> want_mu = {5, 7, 9, 11};
  for (size_t j = 0; j < 4; ++j)
    CHECK(bank.centers[j] == doctest::Approx(want_mu[j]).epsilon(1e-12));
  CHECK(bank.sigma == doctest::Approx(2.0));
}

TEST_CASE("calibrate is a proper weighted average") {
  Rng rng(9);
  GridSpec spec = make_grid(Tensor({4}, {0.3, 0.6, 0.45, 0.55}), 8, 2);
  GaussianBank bank = build_gaussian_bank(spec, 12, 0.0, 11.0);

  SUBCASE("constants pass through unchanged") {
    Tensor x = Tensor::full({3, 12, 2, 2}, -2.75);
    Tensor y = calibrate(x, bank);
    REQUIRE(y.shape() == Shape{3, 4, 2, 2});
    for (int64_t i = 0; i < y.numel(); ++i)
      CHECK(y.at(i) == doctest::Approx(-2.75).epsilon(1e-12));
  }

  SUBCASE("matches the direct summation oracle") {
    Tensor x = Tensor::randn({2, 12, 2, 3}, rng);
    Tensor y = calibrate(x, bank);
    for (int64_t c = 0; c < 2; ++c)
      for (int64_t j = 0; j < 4; ++j)
        for (int64_t h = 0; h < 2; ++h)
          for (int64_t w = 0; w < 3; ++w)
            CHECK(y.at(((c * 4 + j) * 2 + h) * 3 + w) ==
                  doctest::Approx(calibrate_oracle(x, bank, c, j, h, w))
                      .epsilon(1e-12));
  }

  SUBCASE("row rescaling cancels in the normalized average") {
    Tensor x = Tensor::randn({2, 12, 1, 1}, rng);
    Tensor base = calibrate(x, bank);
    GaussianBank scaled = bank;
    auto wv = bank.weights.values();
    const int64_t Tp = 12, row = 2;
    for (int64_t t = 0; t < Tp; ++t) wv[static_cast<size_t>(row * Tp + t)] *= 7.5;
    scaled.weights = Tensor({4, Tp}, std::move(wv));
    scaled.row_sums[row] *= 7.5;
    Tensor re = calibrate(x, scaled);
    for (int64_t i = 0; i < base.numel(); ++i)
      CHECK(re.at(i) == doctest::Approx(base.at(i)).epsilon(1e-12));
  }

  SUBCASE("a narrow sigma makes each output track its center frame") {
    GaussianBank narrow =
        build_gaussian_bank(uniform_spec(8, 2), 8, 0.0, 7.0, 64.0);
    Tensor x = Tensor::zeros({1, 8, 1, 1});
    for (size_t j = 0; j < narrow.centers.size(); ++j) {
      const int64_t mu =
          static_cast<int64_t>(std::llround(narrow.centers[j]));
      auto xv = x.values();
      xv[static_cast<size_t>(mu)] = 1.0;
      Tensor onehot({1, 8, 1, 1}, std::move(xv));
      Tensor y = calibrate(onehot, narrow);
      CHECK(y.at(static_cast<int64_t>(j)) > 0.99);
    }
  }

  SUBCASE("frame-count mismatch is rejected") {
    CHECK_THROWS_AS(calibrate(Tensor::zeros({1, 8, 1, 1}), bank), ConfigError);
  }
}

TEST_CASE("calibrate treats the bank as constant") {
  Tensor p({4}, {0.4, 0.5, 0.6, 0.5}, true);
  Tensor x = Tensor({1, 8, 1, 1},
                    {0.5, -1.0, 2.0, 0.25, -0.75, 1.5, 0.0, 1.0}, true);
  Tape tape;
  TapeScope scope(tape);
  GridSpec spec = make_grid(p, 8, 2);
  GaussianBank bank = build_gaussian_bank(spec, 8, 0.0, 7.0);
  tape.backward(mean_all(calibrate(x, bank)));
  CHECK(x.has_grad());
  CHECK_FALSE(p.has_grad());  // centers carry no gradient path
}

TEST_CASE("reduce modes collapse the advertised axes") {
  Rng rng(21);
  Tensor x = Tensor::randn({3, 8, 4, 4}, rng);
  CHECK(reduce_level(x, ReduceMode::C, nullptr).shape() == Shape{3, 1, 1, 1});
  CHECK(reduce_level(x, ReduceMode::CHW, nullptr).shape() == Shape{3, 1, 4, 4});
  GaussianBank bank = build_gaussian_bank(uniform_spec(8, 2), 8, 0.0, 7.0);
  CHECK(reduce_level(x, ReduceMode::CTHW, &bank).shape() == Shape{3, 4, 4, 4});
  CHECK_THROWS_AS(reduce_level(x, ReduceMode::CTHW, nullptr), ConfigError);

  // C mode averages everything but channels
  Tensor r = reduce_level(x, ReduceMode::C, nullptr);
  for (int64_t c = 0; c < 3; ++c) {
    double m = 0.0;
    for (int64_t i = 0; i < 8 * 16; ++i) m += x.at(c * 128 + i);
    CHECK(r.at(c) == doctest::Approx(m / 128.0).epsilon(1e-12));
  }
}

TEST_CASE("multi-stage concat pools to the smallest level") {
  Rng rng(31);
  Tensor a = Tensor::randn({2, 4, 4, 4}, rng);
  Tensor b = Tensor::randn({3, 4, 2, 2}, rng);

  Tensor cat = multi_stage_concat({a, b});
  REQUIRE(cat.shape() == Shape{5, 4, 2, 2});

  // window-scan oracle for the pooled half
  for (int64_t c = 0; c < 2; ++c)
    for (int64_t t = 0; t < 4; ++t)
      for (int64_t h = 0; h < 2; ++h)
        for (int64_t w = 0; w < 2; ++w) {
          double m = -1e300;
          for (int64_t dh = 0; dh < 2; ++dh)
            for (int64_t dw = 0; dw < 2; ++dw)
              m = std::max(m, a.at(((c * 4 + t) * 4 + 2 * h + dh) * 4 +
                                   2 * w + dw));
          CHECK(cat.at(((c * 4 + t) * 2 + h) * 2 + w) == m);
        }
  // untouched half is copied through
  for (int64_t i = 0; i < b.numel(); ++i)
    CHECK(cat.at(2 * 4 * 4 + i) == b.at(i));

  // single level passes through untouched
  Tensor solo = multi_stage_concat({b});
  CHECK(&solo.values() == &b.values());

  CHECK_THROWS_AS(multi_stage_concat({a, Tensor::zeros({1, 4, 3, 3})}),
                  ConfigError);
  CHECK_THROWS_AS(multi_stage_concat({a, Tensor::zeros({1, 2, 4, 4})}),
                  ConfigError);
  CHECK_THROWS_AS(multi_stage_concat({}), ConfigError);
}

TEST_CASE("spatial adaptation to a site resolution") {
  Rng rng(41);
  Tensor x = Tensor::randn({2, 3, 4, 4}, rng);
  CHECK(&adapt_spatial(x, 4, 4).values() == &x.values());
  CHECK(adapt_spatial(x, 2, 2).shape() == Shape{2, 3, 2, 2});
  Tensor up = adapt_spatial(x, 8, 8);
  REQUIRE(up.shape() == Shape{2, 3, 8, 8});
  // nearest upsampling replicates blocks
  CHECK(up.at(0) == x.at(0));
  CHECK(up.at(1) == x.at(0));
  CHECK(up.at(8) == x.at(0));
  CHECK_THROWS_AS(adapt_spatial(x, 3, 3), ConfigError);
  CHECK_THROWS_AS(adapt_spatial(x, 8, 4), ConfigError);
}

TEST_CASE("scale and shift projections start neutral and stay bounded") {
  Rng rng(51);
  Tensor x = Tensor::randn({5, 4, 2, 2}, rng);

  Tensor wA = Tensor::zeros({3, 5}), bA = Tensor::zeros({3});
  Tensor wB = Tensor::zeros({3, 5}), bB = Tensor::zeros({3});
  auto [A0, B0] = scale_shift(x, wA, bA, wB, bB);
  REQUIRE(A0.shape() == Shape{3, 4, 2, 2});
  for (int64_t i = 0; i < A0.numel(); ++i) {
    CHECK(A0.at(i) == 0.5);
    CHECK(B0.at(i) == 0.0);
  }

  auto [A, B] = scale_shift(x, Tensor::randn({3, 5}, rng), Tensor::randn({3}, rng),
                            Tensor::randn({3, 5}, rng), Tensor::randn({3}, rng));
  for (int64_t i = 0; i < A.numel(); ++i) {
    CHECK(A.at(i) > 0.0);
    CHECK(A.at(i) < 1.0);
  }
  (void)B;
}

TEST_CASE("fuse applies a broadcast affine transform") {
  Rng rng(61);
  Tensor x = Tensor::randn({3, 4, 2, 2}, rng);

  Tensor ones = Tensor::full({3, 1, 1, 1}, 1.0);
  Tensor zero = Tensor::zeros({3, 1, 1, 1});
  Tensor idn = fuse(x, ones, zero);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(idn.at(i) == x.at(i));

  Tensor b = Tensor::randn({3, 1, 1, 1}, rng);
  Tensor repl = fuse(x, Tensor::zeros({3, 1, 1, 1}), b);
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t i = 0; i < 16; ++i) CHECK(repl.at(c * 16 + i) == b.at(c));

  // scalar-loop oracle with per-channel broadcast
  Tensor A = Tensor::randn({3, 1, 1, 1}, rng);
  Tensor out = fuse(x, A, b);
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t i = 0; i < 16; ++i)
      CHECK(out.at(c * 16 + i) ==
            doctest::Approx(A.at(c) * x.at(c * 16 + i) + b.at(c)).epsilon(1e-14));

  CHECK_THROWS_AS(fuse(x, Tensor::zeros({2, 1, 1, 1}), b), ConfigError);
}

TEST_CASE("full fusion chain differentiates against finite differences") {
  GradCheckCase chain{
      "fusion_chain",
      [](uint64_t seed) {
        Rng rng(seed);
        std::vector<Tensor> in;
        in.push_back(Tensor::randn({3, 8, 2, 2}, rng, 1.0, true));  // fine lvl A
        in.push_back(Tensor::randn({2, 8, 1, 1}, rng, 1.0, true));  // fine lvl B
        in.push_back(Tensor::randn({2, 3}, rng, 0.5, true));        // mask w1
        in.push_back(Tensor::randn({2}, rng, 0.2, true));           // mask b1
        in.push_back(Tensor::randn({3, 2}, rng, 0.5, true));        // mask w2
        in.push_back(Tensor::randn({3}, rng, 0.2, true));           // mask b2
        in.push_back(Tensor::randn({4, 5}, rng, 0.5, true));        // wA
        in.push_back(Tensor::randn({4}, rng, 0.2, true));           // bA
        in.push_back(Tensor::randn({4, 5}, rng, 0.5, true));        // wB
        in.push_back(Tensor::randn({4}, rng, 0.2, true));           // bB
        in.push_back(Tensor::randn({4, 4, 2, 2}, rng, 1.0, true));  // coarse
        return in;
      },
      [](const std::vector<Tensor>& in) {
        GridSpec spec = uniform_spec(8, 2);
        GaussianBank bank = build_gaussian_bank(spec, 8, 0.0, 7.0);
        Tensor masked = attention_mask(in[0], in[2], in[3], in[4], in[5]);
        Tensor lvlA = reduce_level(masked, ReduceMode::CTHW, &bank);
        Tensor lvlB = reduce_level(in[1], ReduceMode::CTHW, &bank);
        Tensor cat = multi_stage_concat({lvlA, lvlB});
        Tensor sited = adapt_spatial(cat, 2, 2);
        auto [A, B] = scale_shift(sited, in[6], in[7], in[8], in[9]);
        Tensor out = fuse(in[10], A, B);
        return mean_all(mul(out, out));
      }};
  GradCheckResult r = run_gradcheck_case(chain, 4);
  INFO("fusion_chain max_err=" << r.max_err);
  CHECK(r.pass);
}
