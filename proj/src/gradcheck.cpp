#include "cfnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "cfnet/errors.hpp"
#include "cfnet/tape.hpp"

namespace cfn {

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        const Tensor& x, double h) {
  NoTapeScope no_tape;
  const auto& xv = x.values();
  std::vector<double> g(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) {
    std::vector<double> plus = xv, minus = xv;
    plus[i] += h;
    minus[i] -= h;
    const double fp = f(Tensor(x.shape(), std::move(plus)));
    const double fm = f(Tensor(x.shape(), std::move(minus)));
    g[i] = (fp - fm) / (2.0 * h);
  }
  return Tensor(x.shape(), std::move(g));
}

double gradcheck_error(double analytic, double fd) {
  const double denom = std::max({1.0, std::fabs(analytic), std::fabs(fd)});
  return std::fabs(analytic - fd) / denom;
}

GradCheckResult run_gradcheck_case(const GradCheckCase& c, int seeds, double h,
                                   double tol) {
  GradCheckResult r;
  r.name = c.name;
  r.seeds = seeds;
  for (uint64_t seed = 1; seed <= static_cast<uint64_t>(seeds); ++seed) {
    std::vector<Tensor> inputs = c.make_inputs(seed);
    for (const Tensor& t : inputs)
      if (!t.requires_grad())
        throw InvariantError("gradcheck case " + c.name +
                             " produced a non-differentiable input");

    // analytic gradients via the tape
    Tape tape;
    {
      TapeScope scope(tape);
      Tensor loss = c.forward(inputs);
      tape.backward(loss);
    }

    // central differences, one input at a time with the others fixed
    for (size_t which = 0; which < inputs.size(); ++which) {
      const Tensor& xi = inputs[which];
      auto f = [&](const Tensor& cand) {
        std::vector<Tensor> probe = inputs;
        probe[which] = cand;
        return c.forward(probe).item();
      };
      Tensor fd = finite_diff_grad(f, xi, h);
      const auto& a = xi.grad();
      const auto& d = fd.values();
      for (size_t j = 0; j < a.size(); ++j)
        r.max_err = std::max(r.max_err, gradcheck_error(a[j], d[j]));
    }
  }
  r.pass = r.max_err < tol;
  return r;
}

}  // namespace cfn
