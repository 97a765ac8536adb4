#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cfnet/tensor.hpp"

namespace cfn {

namespace detail {

// Accumulates into per-input grad buffers; an entry is null when that input
// does not require grad.
using BackwardFn = std::function<void(const std::vector<double>& out_grad,
                                      const std::vector<double*>& in_grads)>;

// Creates the result tensor for an op. If a tape is active and any input
// requires grad, the op is recorded and the result requires grad; otherwise
// the result is a plain value (pure inference).
Tensor make_op(const char* name, Shape shape,
               std::shared_ptr<const std::vector<double>> values,
               const std::vector<Tensor>& inputs, BackwardFn backward);

Tensor make_op(const char* name, Shape shape, std::vector<double> values,
               const std::vector<Tensor>& inputs, BackwardFn backward);

}  // namespace detail

// Reverse-mode tape. Ops append nodes in construction order, which is a valid
// topological order by construction; backward() visits each node exactly once
// in reverse. Single-owner, single-threaded.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
  // requires-grad tensor reachable from the loss. The loss must be a scalar
  // produced by an op recorded on this tape. A second call without reset()
  // is an error.
  void backward(const Tensor& loss);

  // Permits another backward pass; gradients keep accumulating.
  void reset() { consumed_ = false; }

  bool consumed() const { return consumed_; }
  size_t num_nodes() const { return nodes_.size(); }

  // Structural marker in the op log (prefixed with '#'); used by tests that
  // assert where in the graph certain op families occur.
  void mark(const std::string& label);
  const std::vector<std::string>& op_log() const { return log_; }

  // Tape recording ops on the current thread, or null.
  static Tape* active();

 private:
  friend class TapeScope;
  friend class NoTapeScope;
  friend Tensor detail::make_op(const char*, Shape,
                                std::shared_ptr<const std::vector<double>>,
                                const std::vector<Tensor>&, detail::BackwardFn);

  struct Node {
    std::shared_ptr<detail::TensorImpl> out;
    std::vector<std::shared_ptr<detail::TensorImpl>> in;
    detail::BackwardFn backprop;
  };

  std::vector<Node> nodes_;
  std::vector<std::string> log_;
  bool consumed_ = false;
};

// RAII: makes a tape active on this thread. Nesting is an error; tapes are
// single-owner.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
};

// RAII: suppresses any active tape so enclosed ops run as pure values. Used
// by finite differencing so the oracle stays independent of the backward path.
class NoTapeScope {
 public:
  NoTapeScope();
  ~NoTapeScope();
  NoTapeScope(const NoTapeScope&) = delete;
  NoTapeScope& operator=(const NoTapeScope&) = delete;

 private:
  Tape* saved_;
};

}  // namespace cfn
