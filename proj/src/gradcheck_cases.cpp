#include <cmath>
#include <vector>

#include "cfnet/fusion.hpp"
#include "cfnet/gradcheck.hpp"
#include "cfnet/gridpool.hpp"
#include "cfnet/losseval.hpp"
#include "cfnet/ops.hpp"
#include "cfnet/rng.hpp"
#include "cfnet/tensor.hpp"

namespace cfn {

namespace {

// Collapses a tensor to a scalar through fixed, distinct, nonzero weights so
// every output element contributes its own recognizable gradient.
Tensor probe_sum(const Tensor& t, double phase) {
  std::vector<double> w(static_cast<size_t>(t.numel()));
  for (size_t i = 0; i < w.size(); ++i)
    w[i] = 1.5 + std::cos(0.7 * static_cast<double>(i) + phase);
  return sum_all(mul(t, Tensor(t.shape(), std::move(w))));
}

Tensor leaf_randn(Shape shape, Rng& rng, double sigma = 1.0) {
  return Tensor::randn(std::move(shape), rng, sigma, /*requires_grad=*/true);
}

// Uniform leaf on [lo, hi]; margins keep finite-difference probes inside any
// open-interval domain.
Tensor leaf_uniform(Shape shape, Rng& rng, double lo, double hi) {
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v), /*requires_grad=*/true);
}

GradCheckCase case_confidence_head() {
  // Mirrors the network's confidence head for factor 4: two strided temporal
  // convolutions after a full-rate one, spatial mean, then a guarded sigmoid.
  return {
      "confidence_head",
      [](uint64_t seed) {
        Rng rng(seed);
        std::vector<Tensor> in;
        in.push_back(leaf_randn({3, 8, 2, 2}, rng));       // x
        in.push_back(leaf_randn({4, 3, 3}, rng, 0.5));     // w1
        in.push_back(leaf_randn({4}, rng, 0.2));           // b1
        in.push_back(leaf_randn({4, 4, 3}, rng, 0.5));     // w2
        in.push_back(leaf_randn({4}, rng, 0.2));           // b2
        in.push_back(leaf_randn({1, 4, 3}, rng, 0.5));     // w3
        in.push_back(leaf_randn({1}, rng, 0.2));           // b3
        return in;
      },
      [](const std::vector<Tensor>& in) {
        const auto strides = stride_factorization(4);
        auto tconv = [](const Tensor& x, const Tensor& w, const Tensor& b,
                        int64_t stride) {
          return add(conv_temporal(x, w, static_cast<int>(stride), 1),
                     reshape(b, {b.dim(0), 1, 1, 1}));
        };
        Tensor h = relu(tconv(in[0], in[1], in[2], strides[0]));
        h = relu(tconv(h, in[3], in[4], strides[1]));
        h = tconv(h, in[5], in[6], strides[2]);
        h = reduce(h, {2, 3}, Reduce::Mean);
        h = reshape(h, {h.dim(1)});
        Tensor p = add_scalar(mul_scalar(sigmoid(h), 1.0 - 2e-6), 1e-6);
        return probe_sum(p, 0.2);
      },
  };
}

GradCheckCase case_compute_grid() {
  return {
      "compute_grid",
      [](uint64_t seed) {
        Rng rng(seed);
        return std::vector<Tensor>{leaf_uniform({6}, rng, 0.1, 0.9)};
      },
      [](const std::vector<Tensor>& in) {
        return probe_sum(compute_grid(in[0], 12), 0.5);
      },
  };
}

GradCheckCase case_grid_sample() {
  return {
      "grid_sample",
      [](uint64_t seed) {
        Rng rng(seed);
        std::vector<Tensor> in;
        in.push_back(leaf_randn({2, 7, 2, 2}, rng));
        // strictly inside distinct cells, away from the integer knots where
        // the position derivative jumps
        std::vector<double> pos(4);
        const double cells[4] = {0, 2, 3, 5};
        for (size_t i = 0; i < pos.size(); ++i)
          pos[i] = cells[i] + rng.uniform(0.25, 0.75);
        in.push_back(Tensor({4}, std::move(pos), /*requires_grad=*/true));
        return in;
      },
      [](const std::vector<Tensor>& in) {
        return probe_sum(grid_sample(in[0], in[1]), 0.9);
      },
  };
}

GradCheckCase case_grid_unpool() {
  // Checks the whole restore path: grid construction, inverse positions,
  // timeline expansion and the final uniform resize, in both y and p.
  return {
      "grid_unpool",
      [](uint64_t seed) {
        Rng rng(seed);
        std::vector<Tensor> in;
        in.push_back(leaf_randn({2, 4}, rng));             // pooled logits
        in.push_back(leaf_uniform({4}, rng, 0.15, 0.85));  // confidences
        return in;
      },
      [](const std::vector<Tensor>& in) {
        GridSpec spec = make_grid(in[1], 8, 2);
        return probe_sum(grid_unpool(in[0], spec, 16), 1.3);
      },
  };
}

GradCheckCase case_attention_mask() {
  return {
      "attention_mask",
      [](uint64_t seed) {
        Rng rng(seed);
        std::vector<Tensor> in;
        in.push_back(leaf_randn({3, 4, 2, 2}, rng));    // x
        in.push_back(leaf_randn({2, 3}, rng, 0.5));     // w1
        in.push_back(leaf_randn({2}, rng, 0.2));        // b1
        in.push_back(leaf_randn({3, 2}, rng, 0.5));     // w2
        in.push_back(leaf_randn({3}, rng, 0.2));        // b2
        return in;
      },
      [](const std::vector<Tensor>& in) {
        return probe_sum(attention_mask(in[0], in[1], in[2], in[3], in[4]), 1.7);
      },
  };
}

GradCheckCase case_calibrate() {
  return {
      "calibrate",
      [](uint64_t seed) {
        Rng rng(seed);
        return std::vector<Tensor>{leaf_randn({2, 6, 2, 2}, rng)};
      },
      [](const std::vector<Tensor>& in) {
        GaussianBank bank = build_gaussian_bank_at({0.8, 2.4, 4.6}, 6, 3.0);
        return probe_sum(calibrate(in[0], bank), 2.1);
      },
  };
}

GradCheckCase case_scale_shift() {
  return {
      "scale_shift",
      [](uint64_t seed) {
        Rng rng(seed);
        std::vector<Tensor> in;
        in.push_back(leaf_randn({3, 4, 2, 2}, rng));    // x
        in.push_back(leaf_randn({2, 3}, rng, 0.5));     // wA
        in.push_back(leaf_randn({2}, rng, 0.2));        // bA
        in.push_back(leaf_randn({2, 3}, rng, 0.5));     // wB
        in.push_back(leaf_randn({2}, rng, 0.2));        // bB
        return in;
      },
      [](const std::vector<Tensor>& in) {
        auto [A, B] = scale_shift(in[0], in[1], in[2], in[3], in[4]);
        return add(probe_sum(A, 0.3), probe_sum(B, 1.1));
      },
  };
}

GradCheckCase case_fuse() {
  return {
      "fuse",
      [](uint64_t seed) {
        Rng rng(seed);
        std::vector<Tensor> in;
        in.push_back(leaf_randn({2, 3, 2, 2}, rng));  // x
        in.push_back(leaf_randn({2, 3, 1, 1}, rng));  // A, broadcast over H, W
        in.push_back(leaf_randn({2, 3, 1, 1}, rng));  // B
        return in;
      },
      [](const std::vector<Tensor>& in) {
        return probe_sum(fuse(in[0], in[1], in[2]), 2.5);
      },
  };
}

GradCheckCase case_detection_loss() {
  // Labels stay a fixed binary constant: the loss rejects non-binary labels,
  // so they cannot be probed by finite differences. The pattern mixes dense,
  // sparse and empty rows to cover both terms and the empty-clip path.
  static const Tensor labels({3, 5}, {1, 1, 0, 0, 0,
                                      0, 0, 0, 1, 0,
                                      0, 0, 0, 0, 0});
  return {
      "detection_loss",
      [](uint64_t seed) {
        Rng rng(seed);
        return std::vector<Tensor>{leaf_randn({3, 5}, rng, 1.5)};
      },
      [](const std::vector<Tensor>& in) {
        return detection_loss(in[0], labels);
      },
  };
}

}  // namespace

std::vector<GradCheckCase> standard_gradcheck_cases() {
  return {
      case_confidence_head(), case_compute_grid(),  case_grid_sample(),
      case_grid_unpool(),     case_attention_mask(), case_calibrate(),
      case_scale_shift(),     case_fuse(),           case_detection_loss(),
  };
}

}  // namespace cfn
