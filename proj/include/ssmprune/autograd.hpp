#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "ssmprune/tensor.hpp"

namespace ssmprune {

class Tape;

/// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Explicit operation tape for reverse-mode differentiation. Nodes are
/// recorded in topological order; backward() walks them in exact reverse
/// recording order. A tape is single-threaded; separate tapes are independent.
class Tape {
 public:
  // Receives the gradient flowing into the node and pushes contributions to
  // its inputs through Tape::accumulate.
  using Backward = std::function<void(const Tensor& grad_out, Tape& tape)>;

  Var leaf(Tensor value);
  Var record(Tensor value, std::vector<std::size_t> inputs, Backward backward);

  std::size_t size() const noexcept { return nodes_.size(); }
  const Tensor& value(std::size_t id) const;

  void accumulate(std::size_t id, const Tensor& grad);

  /// Seeds d(loss)/d(loss) = 1 and propagates. Loss must be a one-element
  /// node recorded on this tape.
  void backward(Var loss);

  /// Gradient of the last backward() loss with respect to v. Nodes the
  /// loss does not depend on get zeros.
  Tensor grad(Var v) const;

  bool is_leaf(std::size_t id) const { return !nodes_.at(id).backward; }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    Backward backward;
  };

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

// Differentiable counterparts of the tensor operations.
namespace ad {

Var matmul(Var a, Var b);
Var transpose(Var a);
Var conv1d_depthwise_causal(Var x, Var w, Var bias);
Var silu(Var x);
Var softplus(Var x);
Var exp(Var x);
Var mul(Var a, Var b);
Var add(Var a, Var b);
Var rmsnorm(Var x, Var weight, float eps, std::int64_t group_size = 0, std::int64_t divisor = 0);
Var slice_cols(Var a, std::int64_t begin, std::int64_t end);
Var reshape(Var a, Shape shape);
Var add_row_bias(Var a, Var bias);
Var sum(Var a);
Var embedding_lookup(Var table, std::span<const std::uint32_t> ids);
Var cross_entropy_mean(Var logits, std::span<const std::uint32_t> targets);

}  // namespace ad

}  // namespace ssmprune
