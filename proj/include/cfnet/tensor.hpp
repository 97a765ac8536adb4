#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace cfn {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;
class Rng;

namespace detail {

struct TensorImpl {
  Shape shape;
  std::shared_ptr<const std::vector<double>> values;
  bool requires_grad = false;
  // Lazily allocated by backward; the only mutable state a tensor carries.
  std::unique_ptr<std::vector<double>> grad;
  // Tape that recorded the op producing this tensor; null for leaves.
  const Tape* producer = nullptr;
};

}  // namespace detail

// Dense row-major f64 tensor. Values are immutable once constructed; copies
// share storage. Rank 0 (empty shape) is a scalar with one element.
class Tensor {
 public:
  Tensor() = default;  // undefined tensor

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, double sigma = 1.0,
                      bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const;
  int ndim() const { return static_cast<int>(shape().size()); }
  int64_t dim(int axis) const;
  int64_t numel() const;
  const std::vector<double>& values() const;
  double at(int64_t flat) const { return values()[static_cast<size_t>(flat)]; }
  double item() const;  // requires numel() == 1

  bool requires_grad() const;
  bool has_grad() const;
  const std::vector<double>& grad() const;  // throws if no grad populated
  void clear_grad() const;

  // Same values, detached from gradient tracking. Shares storage.
  Tensor detach() const;

  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }
  static Tensor wrap(std::shared_ptr<detail::TensorImpl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
  }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

}  // namespace cfn
