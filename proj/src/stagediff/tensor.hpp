// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

// Reverse-mode automatic differentiation over dense NCHW tensors.
//
// A Var is a shared handle to a graph node. Operations record their inputs and
// a backward closure only when at least one input requires a gradient, so
// inference through frozen or constant weights allocates no tape.

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace stagediff {

#ifdef STAGEDIFF_REAL_DOUBLE
using real = double;
#else
using real = float;
#endif

using Shape = std::vector<int>;

// Tensor storage is 64-byte aligned so vectorized kernels take the same code
// path (and produce the same rounding) wherever a buffer lands on the heap.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using Buffer = std::vector<real, AlignedAllocator<real>>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace ag {

struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(const Node&)> backward_fn;

  Buffer& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Shape shape, Buffer values);
  static Var constant(Shape shape, const std::vector<real>& values);
  static Var constant(Shape shape, std::initializer_list<real> values);
  static Var zeros(Shape shape);
  static Var parameter(Shape shape, Buffer values);
  static Var parameter(Shape shape, const std::vector<real>& values);
  static Var parameter(Shape shape, std::initializer_list<real> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i)); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const real> data() const { return node_->value; }
  std::span<real> mutable_data() { return node_->value; }
  real item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  std::span<const real> grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad();

  // Drops the tape behind this value and returns a constant with the same data.
  Var detach() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Builds an op result. `inputs` are retained and `backward` is installed only
// if some input requires a gradient.
Var make_result(Shape shape, Buffer value, std::vector<Var> inputs,
                std::function<void(const Node&)> backward);

// Seeds d(loss)/d(loss) = 1 and runs every backward closure reachable from
// `loss` in reverse topological order. Gradients accumulate into leaves.
void backward(const Var& loss);

}  // namespace ag

using ag::Var;

}  // namespace stagediff
