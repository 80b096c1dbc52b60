// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

#include "stagediff/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "stagediff/error.hpp"

namespace stagediff {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace ag {

Buffer& Node::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), real(0));
  return grad;
}

Var Var::constant(Shape shape, Buffer values) {
  check(numel(shape) == values.size(), ErrorCode::kShapeMismatch,
        "tensor data size does not match shape " + shape_str(shape));
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  return Var(std::move(n));
}

Var Var::constant(Shape shape, const std::vector<real>& values) {
  return constant(std::move(shape), Buffer(values.begin(), values.end()));
}

Var Var::constant(Shape shape, std::initializer_list<real> values) { return constant(std::move(shape), Buffer(values)); }

Var Var::zeros(Shape shape) {
  Buffer v(numel(shape), real(0));
  return constant(std::move(shape), std::move(v));
}

Var Var::parameter(Shape shape, Buffer values) {
  Var v = constant(std::move(shape), std::move(values));
  v.set_requires_grad(true);
  return v;
}

Var Var::parameter(Shape shape, std::initializer_list<real> values) { return parameter(std::move(shape), Buffer(values)); }

Var Var::parameter(Shape shape, const std::vector<real>& values) {
  return parameter(std::move(shape), Buffer(values.begin(), values.end()));
}

real Var::item() const {
  check(size() == 1, ErrorCode::kShapeMismatch, "item() on non-scalar " + shape_str(shape()));
  return node_->value[0];
}

void Var::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), real(0));
}

Var Var::detach() const { return constant(node_->shape, node_->value); }

Var make_result(Shape shape, Buffer value, std::vector<Var> inputs,
                std::function<void(const Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool needs = std::any_of(inputs.begin(), inputs.end(),
                           [](const Var& v) { return v.defined() && v.requires_grad(); });
  if (needs) {
    n->requires_grad = true;
    for (auto& v : inputs)
      if (v.defined()) n->inputs.push_back(v.ptr());
    n->backward_fn = std::move(backward);
  }
  return Var(std::move(n));
}

void backward(const Var& loss) {
  check(loss.size() == 1, ErrorCode::kShapeMismatch, "backward() needs a scalar loss");
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS; nodes without a backward closure are leaves.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer()[0] += real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  // Interior gradients are not needed after the sweep.
  for (Node* n : order)
    if (n->backward_fn) Buffer().swap(n->grad);
}

}  // namespace ag
}  // namespace stagediff
