#include "cfnet/tensor.hpp"

#include <sstream>

#include "cfnet/errors.hpp"
#include "cfnet/rng.hpp"

namespace cfn {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << "]";
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  for (int64_t d : shape) {
    if (d <= 0)
      throw ConfigError("tensor dims must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != static_cast<int64_t>(values.size()))
    throw ConfigError("tensor shape " + shape_str(shape) + " expects " +
                      std::to_string(shape_numel(shape)) + " values, got " +
                      std::to_string(values.size()));
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->values = std::make_shared<const std::vector<double>>(std::move(values));
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)), 0.0);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)), value);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<double>{value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double sigma, bool requires_grad) {
  auto v = rng.normal_vec(static_cast<size_t>(shape_numel(shape)), 0.0, sigma);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

static const detail::TensorImpl& deref(const std::shared_ptr<detail::TensorImpl>& p) {
  if (!p) throw InvariantError("use of an undefined tensor");
  return *p;
}

const Shape& Tensor::shape() const { return deref(impl_).shape; }

int64_t Tensor::dim(int axis) const {
  const Shape& s = shape();
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw ConfigError("axis " + std::to_string(axis) + " out of range for " +
                      shape_str(s));
  return s[static_cast<size_t>(axis)];
}

int64_t Tensor::numel() const { return shape_numel(shape()); }

const std::vector<double>& Tensor::values() const { return *deref(impl_).values; }

double Tensor::item() const {
  if (numel() != 1)
    throw ConfigError("item() requires a single-element tensor, got " +
                      shape_str(shape()));
  return values()[0];
}

bool Tensor::requires_grad() const { return deref(impl_).requires_grad; }

bool Tensor::has_grad() const { return deref(impl_).grad != nullptr; }

const std::vector<double>& Tensor::grad() const {
  const auto& im = deref(impl_);
  if (!im.grad)
    throw InvariantError("tensor has no populated gradient");
  return *im.grad;
}

void Tensor::clear_grad() const {
  deref(impl_);
  impl_->grad.reset();
}

Tensor Tensor::detach() const {
  const auto& im = deref(impl_);
  auto copy = std::make_shared<detail::TensorImpl>();
  copy->shape = im.shape;
  copy->values = im.values;
  return wrap(std::move(copy));
}

}  // namespace cfn
