#include "multirep/tape.hpp"

#include <stdexcept>
#include <string>

namespace multirep {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::dense: return "dense";
    case OpKind::conv2d: return "conv2d";
    case OpKind::relu: return "relu";
    case OpKind::global_avg_pool: return "global_avg_pool";
    case OpKind::flatten: return "flatten";
    case OpKind::add: return "add";
    case OpKind::channel_shift: return "channel_shift";
    case OpKind::scale: return "scale";
    case OpKind::sum: return "sum";
    case OpKind::weighted_sum: return "weighted_sum";
    case OpKind::sum_squares: return "sum_squares";
    case OpKind::softmax_cross_entropy: return "softmax_cross_entropy";
    case OpKind::sigmoid_cross_entropy: return "sigmoid_cross_entropy";
  }
  return "unknown";
}

const Tensor& Var::value() const {
  if (tape == nullptr) throw std::logic_error("Var is not bound to a tape");
  return tape->value(*this);
}

Var Tape::constant(Tensor value) {
  return push(OpKind::leaf, std::move(value), {}, nullptr);
}

Var Tape::variable(Tensor value) {
  Var v = push(OpKind::leaf, std::move(value), {}, nullptr);
  nodes_[v.id].needs_grad = true;
  nodes_[v.id].value.set_requires_grad(true);
  return v;
}

void Tape::check_owned(Var v) const {
  if (v.tape != this || v.id >= nodes_.size()) {
    throw std::logic_error("variable does not belong to this tape");
  }
}

const Tensor& Tape::value(Var v) const {
  check_owned(v);
  return nodes_[v.id].value;
}

std::span<const float> Tape::grad(Var v) const {
  check_owned(v);
  return nodes_[v.id].grad;
}

bool Tape::needs_grad(Var v) const {
  check_owned(v);
  return nodes_[v.id].needs_grad;
}

Var Tape::push(OpKind kind, Tensor value, std::vector<std::size_t> inputs, Backprop backprop) {
  bool needs = false;
  for (std::size_t in : inputs) needs = needs || nodes_.at(in).needs_grad;
  Node node;
  node.value = std::move(value);
  node.needs_grad = needs && record_;
  if (node.needs_grad) node.backprop = std::move(backprop);
  const std::size_t id = nodes_.size();
  nodes_.push_back(std::move(node));
  records_.push_back(OpRecord{kind, std::move(inputs), id});
  return Var{this, id};
}

std::vector<float>& Tape::grad_accumulator(std::size_t id) {
  Node& n = nodes_.at(id);
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0f);
  return n.grad;
}

void Tape::backward(Var loss) {
  check_owned(loss);
  if (nodes_[loss.id].value.size() != 1) {
    throw ShapeError("backward needs a scalar loss, got shape " + shape_str(nodes_[loss.id].value.shape()));
  }
  const float one = 1.0f;
  backward(loss, std::span<const float>(&one, 1));
}

void Tape::backward(Var out, std::span<const float> upstream) {
  check_owned(out);
  if (!record_) throw std::logic_error("backward on a tape that was not recording");
  if (!nodes_[out.id].needs_grad) {
    throw std::logic_error("backward before forward: output does not depend on any variable");
  }
  if (upstream.size() != nodes_[out.id].value.size()) {
    throw ShapeError("upstream gradient of " + std::to_string(upstream.size()) + " values for output " +
                     shape_str(nodes_[out.id].value.shape()));
  }
  for (Node& n : nodes_) n.grad.clear();
  grad_accumulator(out.id).assign(upstream.begin(), upstream.end());
  run_backward(out.id);
}

void Tape::run_backward(std::size_t from) {
  for (std::size_t i = from + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || !n.backprop || n.grad.empty()) continue;
    n.backprop(*this, i);
  }
}

}  // namespace multirep
