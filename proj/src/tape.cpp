#include "lhc/tape.hpp"

namespace lhc {

const Tensor& Var::value() const {
  if (!valid()) throw Error("use of an unbound Var");
  return tape->value_at(id);
}

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr});
  grads_.emplace_back();
  touched_.push_back(false);
  return Var{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Tape::make_node(std::vector<Var> inputs, Tensor value, Backward backward) {
  std::vector<std::int32_t> ids;
  ids.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (v.tape != this) throw Error("op input bound to a different tape");
    check_id(v.id);
    ids.push_back(v.id);
  }
  nodes_.push_back(Node{std::move(value), std::move(ids), std::move(backward)});
  grads_.emplace_back();
  touched_.push_back(false);
  return Var{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw Error("backward target bound to a different tape");
  check_id(loss.id);
  if (nodes_[loss.id].value.size() != 1) {
    throw ShapeError("backward target must be scalar, got " +
                     nodes_[loss.id].value.shape_str());
  }
  reset_grads();
  grads_[loss.id] = Tensor(nodes_[loss.id].value.shape());
  grads_[loss.id][0] = 1.0;
  touched_[loss.id] = true;

  // Creation order is topological, so a single reverse pass suffices: by the
  // time a node is visited, every consumer has already deposited its share.
  for (std::int32_t id = loss.id; id >= 0; --id) {
    if (!touched_[id] || !nodes_[id].backward) continue;
    nodes_[id].backward(*this, id);
  }
}

const Tensor& Tape::grad(Var v) const {
  if (v.tape != this) throw Error("grad() on a Var from a different tape");
  return grad_at(v.id);
}

const Tensor& Tape::grad_at(std::int32_t id) const {
  check_id(id);
  if (!touched_[id]) {
    // Untouched: report zeros of the node's shape.
    grads_[id] = Tensor(nodes_[id].value.shape());
  }
  return grads_[id];
}

void Tape::accumulate(std::int32_t id, const Tensor& g) {
  check_id(id);
  const Tensor& v = nodes_[id].value;
  if (!v.same_shape(g)) {
    throw ShapeError("gradient shape " + g.shape_str() +
                     " does not match node shape " + v.shape_str());
  }
  if (!touched_[id]) {
    grads_[id] = g;
    touched_[id] = true;
    return;
  }
  std::span<double> acc = grads_[id].data();
  std::span<const double> add = g.data();
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += add[i];
}

void Tape::reset_grads() {
  for (std::size_t i = 0; i < grads_.size(); ++i) {
    grads_[i] = Tensor{};
    touched_[i] = false;
  }
}

void Tape::check_id(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
    throw Error("node id " + std::to_string(id) + " not on this tape");
  }
}

}  // namespace lhc
