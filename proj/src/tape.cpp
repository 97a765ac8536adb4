#include "cfnet/tape.hpp"

#include <cmath>
#include <unordered_map>

#include "cfnet/errors.hpp"

namespace cfn {

namespace {

thread_local Tape* g_active_tape = nullptr;

std::vector<double>& ensure_grad(detail::TensorImpl& im) {
  if (!im.grad)
    im.grad = std::make_unique<std::vector<double>>(
        static_cast<size_t>(shape_numel(im.shape)), 0.0);
  return *im.grad;
}

}  // namespace

Tape* Tape::active() { return g_active_tape; }

void Tape::mark(const std::string& label) { log_.push_back("#" + label); }

void Tape::backward(const Tensor& loss) {
  if (consumed_)
    throw InvariantError("backward already ran on this tape; call reset() first");
  if (!loss.defined()) throw ConfigError("backward on an undefined tensor");
  if (loss.numel() != 1)
    throw ConfigError("backward requires a scalar loss, got shape " +
                      shape_str(loss.shape()));
  auto impl = loss.impl();
  if (impl->producer != this)
    throw ConfigError("loss is not attached to this tape");

  // propagate in pass-local buffers so grads left over from an earlier
  // backward never feed this one; fold into persistent grads at the end
  std::unordered_map<const detail::TensorImpl*, size_t> index;
  std::vector<std::shared_ptr<detail::TensorImpl>> impls;
  std::vector<std::vector<double>> bufs;
  auto buffer_of = [&](const std::shared_ptr<detail::TensorImpl>& im) -> size_t {
    auto [it, fresh] = index.emplace(im.get(), impls.size());
    if (fresh) {
      impls.push_back(im);
      bufs.emplace_back(static_cast<size_t>(shape_numel(im->shape)), 0.0);
    }
    return it->second;
  };
  bufs[buffer_of(impl)][0] = 1.0;

  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& n = *it;
    auto found = index.find(n.out.get());
    if (found == index.end()) continue;  // not reachable from the loss
    const size_t oi = found->second;
    // resolve indices before taking pointers: buffer_of may grow bufs
    std::vector<size_t> gidx(n.in.size(), SIZE_MAX);
    for (size_t i = 0; i < n.in.size(); ++i)
      if (n.in[i]->requires_grad) gidx[i] = buffer_of(n.in[i]);
    std::vector<double*> gin(n.in.size(), nullptr);
    for (size_t i = 0; i < n.in.size(); ++i)
      if (gidx[i] != SIZE_MAX) gin[i] = bufs[gidx[i]].data();
    n.backprop(bufs[oi], gin);
  }
  for (size_t i = 0; i < impls.size(); ++i) {
    auto& g = ensure_grad(*impls[i]);
    for (size_t j = 0; j < g.size(); ++j) g[j] += bufs[i][j];
  }
  consumed_ = true;
}

TapeScope::TapeScope(Tape& tape) {
  if (g_active_tape)
    throw InvariantError("a tape is already active on this thread");
  g_active_tape = &tape;
}

TapeScope::~TapeScope() { g_active_tape = nullptr; }

NoTapeScope::NoTapeScope() : saved_(g_active_tape) { g_active_tape = nullptr; }

NoTapeScope::~NoTapeScope() { g_active_tape = saved_; }

namespace detail {

Tensor make_op(const char* name, Shape shape,
               std::shared_ptr<const std::vector<double>> values,
               const std::vector<Tensor>& inputs, BackwardFn backward) {
  if (shape_numel(shape) != static_cast<int64_t>(values->size()))
    throw InvariantError(std::string(name) + ": output shape " +
                         shape_str(shape) + " does not match value count " +
                         std::to_string(values->size()));
#ifndef NDEBUG
  for (double v : *values)
    if (!std::isfinite(v))
      throw NumericError(std::string(name) + ": nonfinite value in output");
#endif

  Tape* tape = Tape::active();
  bool track = false;
  if (tape) {
    for (const Tensor& t : inputs) {
      if (!t.defined()) throw InvariantError(std::string(name) + ": undefined input");
      const auto* im = t.impl().get();
      if (im->producer && im->producer != tape)
        throw InvariantError(std::string(name) + ": input belongs to another tape");
      track = track || im->requires_grad;
    }
  }

  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->values = std::move(values);

  if (track) {
    impl->requires_grad = true;
    impl->producer = tape;
    Tape::Node node;
    node.out = impl;
    node.in.reserve(inputs.size());
    for (const Tensor& t : inputs) node.in.push_back(t.impl());
    node.backprop = std::move(backward);
    tape->nodes_.push_back(std::move(node));
    tape->log_.emplace_back(name);
  }
  return Tensor::wrap(std::move(impl));
}

Tensor make_op(const char* name, Shape shape, std::vector<double> values,
               const std::vector<Tensor>& inputs, BackwardFn backward) {
  return make_op(name, std::move(shape),
                 std::make_shared<const std::vector<double>>(std::move(values)),
                 inputs, std::move(backward));
}

}  // namespace detail

}  // namespace cfn
