#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cfnet/tensor.hpp"

namespace cfn {

// Central-difference gradient of a scalar-valued function at x. Runs the
// forward path only (any active tape is suppressed), so it is independent of
// every analytic backward implementation.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        const Tensor& x, double h = 1e-4);

// One named operator under check: make_inputs builds leaf tensors for a seed
// (requires_grad is forced on), forward maps them to a scalar.
struct GradCheckCase {
  std::string name;
  std::function<std::vector<Tensor>(uint64_t seed)> make_inputs;
  std::function<Tensor(const std::vector<Tensor>&)> forward;
};

struct GradCheckResult {
  std::string name;
  double max_err = 0.0;  // |analytic - fd| / max(1, |analytic|, |fd|)
  int seeds = 0;
  bool pass = false;
};

// Error metric: |analytic - fd| / max(1, |analytic|, |fd|). The unit floor
// makes this an absolute tolerance below magnitude 1 and relative above,
// keeping central-difference truncation noise (~1e-8 at h=1e-4) out of the
// verdict for near-zero gradients.
double gradcheck_error(double analytic, double fd);

inline constexpr double kGradCheckStep = 1e-4;
inline constexpr double kGradCheckTol = 1e-4;
inline constexpr int kGradCheckSeeds = 10;

// Runs one case over the given seeds; compares tape gradients of every input
// element against central differences.
GradCheckResult run_gradcheck_case(const GradCheckCase& c,
                                   int seeds = kGradCheckSeeds,
                                   double h = kGradCheckStep,
                                   double tol = kGradCheckTol);

// The standard operator suite checked by the CLI gradcheck command.
std::vector<GradCheckCase> standard_gradcheck_cases();

}  // namespace cfn
