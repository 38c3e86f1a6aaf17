#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "lhc/tensor.hpp"

namespace lhc {

class Tape;

// Lightweight handle into a Tape. Node ids are assigned in creation order,
// which is a topological order of the computation graph (an op can only
// consume nodes that already exist), so the reverse sweep in backward() is a
// reverse-topological replay.
struct Var {
  Tape* tape = nullptr;
  std::int32_t id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
  const std::vector<std::size_t>& shape() const { return value().shape(); }
};

class Tape {
 public:
  // Backward callbacks read the output gradient via grad_at(out_id) and push
  // contributions into their inputs with accumulate().
  using Backward = std::function<void(Tape&, std::int32_t out_id)>;

  // Records a node with no producing op (parameter or input).
  Var leaf(Tensor value);

  // Records one op application. Every output has exactly one producing op.
  Var make_node(std::vector<Var> inputs, Tensor value, Backward backward);

  std::size_t node_count() const { return nodes_.size(); }
  const Tensor& value_at(std::int32_t id) const { return nodes_[id].value; }

  // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse creation order.
  // Throws ShapeError if the loss is not a scalar. Nodes the loss does not
  // depend on are skipped; their gradients read back as zeros.
  void backward(Var loss);

  // Gradient of the last backward() target w.r.t. the given node; a zero
  // tensor of the node's shape if the node was never reached.
  const Tensor& grad(Var v) const;
  const Tensor& grad_at(std::int32_t id) const;
  bool has_grad(std::int32_t id) const { return touched_[id]; }

  // Elementwise add into the gradient slot of node `id` (shape-checked).
  void accumulate(std::int32_t id, const Tensor& g);

  void reset_grads();

 private:
  struct Node {
    Tensor value;
    std::vector<std::int32_t> inputs;
    Backward backward;  // empty for leaves
  };

  void check_id(std::int32_t id) const;

  std::vector<Node> nodes_;
  // Gradient slots parallel nodes_; allocated lazily (mutable so grad() can
  // materialize the zeros of an untouched node without copying).
  mutable std::vector<Tensor> grads_;
  std::vector<bool> touched_;
};

}  // namespace lhc
