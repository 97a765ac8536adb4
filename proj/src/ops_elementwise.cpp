#include <algorithm>
#include <cmath>
#include <limits>

#include "cfnet/errors.hpp"
#include "cfnet/ops.hpp"

namespace cfn {

namespace {

// walks x sequentially, tracking the out offset with an odometer; owns its
// data so backward closures can hold it by value
struct ReduceWalk {
  Shape xs;
  std::vector<int64_t> ostride;
  int64_t xn;
  template <class F>
  void operator()(F&& f) const {
    std::vector<int64_t> idx(xs.size(), 0);
    int64_t oo = 0;
    for (int64_t xi = 0;;) {
      f(xi, oo);
      if (++xi == xn) break;
      int d = static_cast<int>(xs.size()) - 1;
      for (;;) {
        ++idx[static_cast<size_t>(d)];
        oo += ostride[static_cast<size_t>(d)];
        if (idx[static_cast<size_t>(d)] < xs[static_cast<size_t>(d)]) break;
        oo -= ostride[static_cast<size_t>(d)] * xs[static_cast<size_t>(d)];
        idx[static_cast<size_t>(d)] = 0;
        --d;
      }
    }
  }
};

struct BroadcastPlan {
  Shape out;
  // element strides of each operand aligned to out dims; 0 where broadcast
  std::vector<int64_t> sa, sb;
};

BroadcastPlan plan_broadcast(const char* op, const Shape& a, const Shape& b) {
  const int nd = static_cast<int>(std::max(a.size(), b.size()));
  BroadcastPlan p;
  p.out.assign(nd, 1);
  p.sa.assign(nd, 0);
  p.sb.assign(nd, 0);

  // native element strides, trailing-aligned
  std::vector<int64_t> ea(a.size()), eb(b.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(a.size()) - 1; i >= 0; --i) {
    ea[i] = acc;
    acc *= a[i];
  }
  acc = 1;
  for (int i = static_cast<int>(b.size()) - 1; i >= 0; --i) {
    eb[i] = acc;
    acc *= b[i];
  }

  for (int i = 0; i < nd; ++i) {
    int ia = static_cast<int>(a.size()) - nd + i;
    int ib = static_cast<int>(b.size()) - nd + i;
    int64_t da = ia >= 0 ? a[ia] : 1;
    int64_t db = ib >= 0 ? b[ib] : 1;
    if (da != db && da != 1 && db != 1)
      throw ConfigError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                        shape_str(b) + " are not broadcast-compatible");
    p.out[i] = std::max(da, db);
    if (ia >= 0 && da == p.out[i]) p.sa[i] = ea[ia];
    if (ib >= 0 && db == p.out[i]) p.sb[i] = eb[ib];
    if (da == 1 && p.out[i] != 1 && ia >= 0) p.sa[i] = 0;
    if (db == 1 && p.out[i] != 1 && ib >= 0) p.sb[i] = 0;
  }
  return p;
}

// Walks the broadcast output space, calling f(out_flat, a_offset, b_offset).
template <class F>
void broadcast_walk(const BroadcastPlan& p, F&& f) {
  const int nd = static_cast<int>(p.out.size());
  const int64_t total = shape_numel(p.out);
  if (nd == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<int64_t> idx(nd, 0);
  int64_t offa = 0, offb = 0;
  for (int64_t o = 0;;) {
    f(o, offa, offb);
    if (++o == total) break;
    int d = nd - 1;
    for (;;) {
      ++idx[d];
      offa += p.sa[d];
      offb += p.sb[d];
      if (idx[d] < p.out[d]) break;
      offa -= p.sa[d] * p.out[d];
      offb -= p.sb[d] * p.out[d];
      idx[d] = 0;
      --d;
    }
  }
}

enum class Bin { Add, Sub, Mul, Div };

Tensor binary_op(const char* name, Bin kind, const Tensor& a, const Tensor& b) {
  BroadcastPlan plan = plan_broadcast(name, a.shape(), b.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(static_cast<size_t>(shape_numel(plan.out)));
  switch (kind) {
    case Bin::Add:
      broadcast_walk(plan, [&](int64_t o, int64_t ia, int64_t ib) {
        out[o] = av[ia] + bv[ib];
      });
      break;
    case Bin::Sub:
      broadcast_walk(plan, [&](int64_t o, int64_t ia, int64_t ib) {
        out[o] = av[ia] - bv[ib];
      });
      break;
    case Bin::Mul:
      broadcast_walk(plan, [&](int64_t o, int64_t ia, int64_t ib) {
        out[o] = av[ia] * bv[ib];
      });
      break;
    case Bin::Div:
      broadcast_walk(plan, [&](int64_t o, int64_t ia, int64_t ib) {
        out[o] = av[ia] / bv[ib];
      });
      break;
  }

  return detail::make_op(
      name, plan.out, std::move(out), {a, b},
      [plan, kind, a, b](const std::vector<double>& og,
                         const std::vector<double*>& gin) {
        const auto& av = a.values();
        const auto& bv = b.values();
        double* ga = gin[0];
        double* gb = gin[1];
        broadcast_walk(plan, [&](int64_t o, int64_t ia, int64_t ib) {
          const double g = og[static_cast<size_t>(o)];
          switch (kind) {
            case Bin::Add:
              if (ga) ga[ia] += g;
              if (gb) gb[ib] += g;
              break;
            case Bin::Sub:
              if (ga) ga[ia] += g;
              if (gb) gb[ib] -= g;
              break;
            case Bin::Mul:
              if (ga) ga[ia] += g * bv[static_cast<size_t>(ib)];
              if (gb) gb[ib] += g * av[static_cast<size_t>(ia)];
              break;
            case Bin::Div: {
              const double d = bv[static_cast<size_t>(ib)];
              if (ga) ga[ia] += g / d;
              if (gb) gb[ib] -= g * av[static_cast<size_t>(ia)] / (d * d);
              break;
            }
          }
        });
      });
}

double sigmoid_stable(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op("add", Bin::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op("sub", Bin::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op("mul", Bin::Mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op("div", Bin::Div, a, b); }

Tensor add_scalar(const Tensor& x, double c) {
  std::vector<double> out = x.values();
  for (double& v : out) v += c;
  return detail::make_op("add_scalar", x.shape(), std::move(out), {x},
                         [](const std::vector<double>& og,
                            const std::vector<double*>& gin) {
                           if (!gin[0]) return;
                           for (size_t i = 0; i < og.size(); ++i) gin[0][i] += og[i];
                         });
}

Tensor mul_scalar(const Tensor& x, double c) {
  std::vector<double> out = x.values();
  for (double& v : out) v *= c;
  return detail::make_op("mul_scalar", x.shape(), std::move(out), {x},
                         [c](const std::vector<double>& og,
                             const std::vector<double*>& gin) {
                           if (!gin[0]) return;
                           for (size_t i = 0; i < og.size(); ++i)
                             gin[0][i] += og[i] * c;
                         });
}

Tensor neg(const Tensor& x) { return mul_scalar(x, -1.0); }

Tensor sigmoid(const Tensor& x) {
  auto out = std::make_shared<std::vector<double>>(x.values());
  for (double& v : *out) v = sigmoid_stable(v);
  auto vals = std::shared_ptr<const std::vector<double>>(out);
  return detail::make_op("sigmoid", x.shape(), vals, {x},
                         [vals](const std::vector<double>& og,
                                const std::vector<double*>& gin) {
                           if (!gin[0]) return;
                           for (size_t i = 0; i < og.size(); ++i) {
                             const double y = (*vals)[i];
                             gin[0][i] += og[i] * y * (1.0 - y);
                           }
                         });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out = x.values();
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return detail::make_op("relu", x.shape(), std::move(out), {x},
                         [x](const std::vector<double>& og,
                             const std::vector<double*>& gin) {
                           if (!gin[0]) return;
                           const auto& xv = x.values();
                           for (size_t i = 0; i < og.size(); ++i)
                             if (xv[i] > 0.0) gin[0][i] += og[i];
                         });
}

Tensor softplus(const Tensor& x) {
  std::vector<double> out = x.values();
  for (double& v : out)
    v = v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
  return detail::make_op("softplus", x.shape(), std::move(out), {x},
                         [x](const std::vector<double>& og,
                             const std::vector<double*>& gin) {
                           if (!gin[0]) return;
                           const auto& xv = x.values();
                           for (size_t i = 0; i < og.size(); ++i)
                             gin[0][i] += og[i] * sigmoid_stable(xv[i]);
                         });
}

Tensor reshape(const Tensor& x, Shape shape) {
  for (int64_t d : shape)
    if (d <= 0) throw ConfigError("reshape: dims must be positive, got " + shape_str(shape));
  if (shape_numel(shape) != x.numel())
    throw ConfigError("reshape: " + shape_str(x.shape()) + " to " +
                      shape_str(shape) + " changes element count");
  return detail::make_op("reshape", std::move(shape), x.impl()->values, {x},
                         [](const std::vector<double>& og,
                            const std::vector<double*>& gin) {
                           if (!gin[0]) return;
                           for (size_t i = 0; i < og.size(); ++i) gin[0][i] += og[i];
                         });
}

Tensor concat_axis0(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ConfigError("concat_axis0: no inputs");
  const Shape& first = parts[0].shape();
  if (first.empty()) throw ConfigError("concat_axis0: rank-0 input");
  Shape out_shape = first;
  int64_t total0 = 0;
  for (const Tensor& t : parts) {
    const Shape& s = t.shape();
    if (s.size() != first.size() ||
        !std::equal(s.begin() + 1, s.end(), first.begin() + 1))
      throw ConfigError("concat_axis0: incompatible shapes " + shape_str(first) +
                        " and " + shape_str(s));
    total0 += s[0];
  }
  out_shape[0] = total0;

  std::vector<double> out;
  out.reserve(static_cast<size_t>(shape_numel(out_shape)));
  for (const Tensor& t : parts)
    out.insert(out.end(), t.values().begin(), t.values().end());

  std::vector<size_t> sizes;
  for (const Tensor& t : parts) sizes.push_back(t.values().size());

  return detail::make_op("concat_axis0", std::move(out_shape), std::move(out),
                         parts,
                         [sizes](const std::vector<double>& og,
                                 const std::vector<double*>& gin) {
                           size_t off = 0;
                           for (size_t p = 0; p < sizes.size(); ++p) {
                             if (gin[p])
                               for (size_t i = 0; i < sizes[p]; ++i)
                                 gin[p][i] += og[off + i];
                             off += sizes[p];
                           }
                         });
}

namespace {

// Axis-1 view parameters for rank>=2 tensors: [outer, N, inner].
struct Axis1View {
  int64_t outer, n, inner;
};

Axis1View axis1_view(const char* op, const Tensor& x) {
  const Shape& s = x.shape();
  if (s.size() < 2)
    throw ConfigError(std::string(op) + ": need rank >= 2, got " + shape_str(s));
  int64_t inner = 1;
  for (size_t i = 2; i < s.size(); ++i) inner *= s[i];
  return {s[0], s[1], inner};
}

}  // namespace

Tensor slice_axis1(const Tensor& x, int64_t start, int64_t len) {
  Axis1View v = axis1_view("slice_axis1", x);
  if (start < 0 || len < 1 || start + len > v.n)
    throw ConfigError("slice_axis1: [" + std::to_string(start) + ", " +
                      std::to_string(start + len) + ") out of range for axis size " +
                      std::to_string(v.n));
  Shape out_shape = x.shape();
  out_shape[1] = len;
  const auto& xv = x.values();
  std::vector<double> out(static_cast<size_t>(v.outer * len * v.inner));
  for (int64_t o = 0; o < v.outer; ++o)
    for (int64_t t = 0; t < len; ++t)
      std::copy_n(xv.begin() + ((o * v.n + start + t) * v.inner), v.inner,
                  out.begin() + ((o * len + t) * v.inner));

  return detail::make_op("slice_axis1", std::move(out_shape), std::move(out), {x},
                         [v, start, len](const std::vector<double>& og,
                                         const std::vector<double*>& gin) {
                           if (!gin[0]) return;
                           for (int64_t o = 0; o < v.outer; ++o)
                             for (int64_t t = 0; t < len; ++t) {
                               const double* src = og.data() + (o * len + t) * v.inner;
                               double* dst = gin[0] + (o * v.n + start + t) * v.inner;
                               for (int64_t i = 0; i < v.inner; ++i) dst[i] += src[i];
                             }
                         });
}

Tensor stride_select_axis1(const Tensor& x, int64_t stride, int64_t offset) {
  Axis1View v = axis1_view("stride_select_axis1", x);
  if (stride < 1 || offset < 0 || offset >= v.n)
    throw ConfigError("stride_select_axis1: bad stride " + std::to_string(stride) +
                      " or offset " + std::to_string(offset) + " for axis size " +
                      std::to_string(v.n));
  const int64_t count = (v.n - 1 - offset) / stride + 1;
  Shape out_shape = x.shape();
  out_shape[1] = count;
  const auto& xv = x.values();
  std::vector<double> out(static_cast<size_t>(v.outer * count * v.inner));
  for (int64_t o = 0; o < v.outer; ++o)
    for (int64_t t = 0; t < count; ++t)
      std::copy_n(xv.begin() + ((o * v.n + offset + t * stride) * v.inner), v.inner,
                  out.begin() + ((o * count + t) * v.inner));

  return detail::make_op(
      "stride_select_axis1", std::move(out_shape), std::move(out), {x},
      [v, stride, offset, count](const std::vector<double>& og,
                                 const std::vector<double*>& gin) {
        if (!gin[0]) return;
        for (int64_t o = 0; o < v.outer; ++o)
          for (int64_t t = 0; t < count; ++t) {
            const double* src = og.data() + (o * count + t) * v.inner;
            double* dst = gin[0] + (o * v.n + offset + t * stride) * v.inner;
            for (int64_t i = 0; i < v.inner; ++i) dst[i] += src[i];
          }
      });
}

Tensor reduce(const Tensor& x, std::vector<int> axes, Reduce kind, bool keepdims) {
  const Shape& xs = x.shape();
  if (axes.empty()) throw ConfigError("reduce: empty axis list");
  std::sort(axes.begin(), axes.end());
  if (std::adjacent_find(axes.begin(), axes.end()) != axes.end())
    throw ConfigError("reduce: duplicate axes");
  for (int a : axes)
    if (a < 0 || a >= static_cast<int>(xs.size()))
      throw ConfigError("reduce: axis " + std::to_string(a) + " out of range for " +
                        shape_str(xs));

  std::vector<bool> reduced(xs.size(), false);
  for (int a : axes) reduced[static_cast<size_t>(a)] = true;

  Shape out_shape;
  for (size_t i = 0; i < xs.size(); ++i) {
    if (!reduced[i])
      out_shape.push_back(xs[i]);
    else if (keepdims)
      out_shape.push_back(1);
  }
  const int64_t out_n = shape_numel(out_shape);

  // out element strides aligned to x dims (0 on reduced dims)
  std::vector<int64_t> ostride(xs.size(), 0);
  {
    int64_t acc = 1;
    for (int i = static_cast<int>(xs.size()) - 1; i >= 0; --i) {
      if (!reduced[static_cast<size_t>(i)]) {
        ostride[static_cast<size_t>(i)] = acc;
        acc *= xs[static_cast<size_t>(i)];
      }
    }
  }

  int64_t count = 1;
  for (int a : axes) count *= xs[static_cast<size_t>(a)];

  const auto& xv = x.values();

  const ReduceWalk walk{xs, ostride, x.numel()};

  std::vector<double> out;
  std::vector<int64_t> argmax;  // Max only: source flat index per out element
  switch (kind) {
    case Reduce::Sum:
    case Reduce::Mean: {
      out.assign(static_cast<size_t>(out_n), 0.0);
      walk([&](int64_t xi, int64_t oo) { out[static_cast<size_t>(oo)] += xv[static_cast<size_t>(xi)]; });
      if (kind == Reduce::Mean)
        for (double& v : out) v /= static_cast<double>(count);
      break;
    }
    case Reduce::Max: {
      out.assign(static_cast<size_t>(out_n),
                 -std::numeric_limits<double>::infinity());
      argmax.assign(static_cast<size_t>(out_n), -1);
      // strict > keeps the lowest flat index on ties
      walk([&](int64_t xi, int64_t oo) {
        if (xv[static_cast<size_t>(xi)] > out[static_cast<size_t>(oo)]) {
          out[static_cast<size_t>(oo)] = xv[static_cast<size_t>(xi)];
          argmax[static_cast<size_t>(oo)] = xi;
        }
      });
      break;
    }
  }

  const char* name = kind == Reduce::Sum   ? "reduce_sum"
                     : kind == Reduce::Mean ? "reduce_mean"
                                            : "reduce_max";
  if (kind == Reduce::Max) {
    return detail::make_op(name, std::move(out_shape), std::move(out), {x},
                           [argmax](const std::vector<double>& og,
                                    const std::vector<double*>& gin) {
                             if (!gin[0]) return;
                             for (size_t o = 0; o < og.size(); ++o)
                               gin[0][argmax[o]] += og[o];
                           });
  }
  const double scale = kind == Reduce::Mean ? 1.0 / static_cast<double>(count) : 1.0;
  return detail::make_op(name, std::move(out_shape), std::move(out), {x},
                         [walk, scale](const std::vector<double>& og,
                                       const std::vector<double*>& gin) {
                           if (!gin[0]) return;
                           walk([&](int64_t xi, int64_t oo) {
                             gin[0][xi] += og[static_cast<size_t>(oo)] * scale;
                           });
                         });
}

Tensor mean_all(const Tensor& x) {
  if (x.ndim() == 0) return add_scalar(x, 0.0);
  std::vector<int> axes(static_cast<size_t>(x.ndim()));
  for (size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int>(i);
  return reduce(x, axes, Reduce::Mean, false);
}

Tensor sum_all(const Tensor& x) {
  if (x.ndim() == 0) return add_scalar(x, 0.0);
  std::vector<int> axes(static_cast<size_t>(x.ndim()));
  for (size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int>(i);
  return reduce(x, axes, Reduce::Sum, false);
}

}  // namespace cfn
