#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "kdse/tensor.hpp"

namespace kdse::inline KDSE_PRECISION {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One vertex of the dynamic tape. Non-leaf nodes drop their gradient,
/// closure and parent links once their backward pass has run.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward;

  /// Adds g into grad, allocating on first use. g must match value's shape.
  void accumulate(Tensor g);
  bool is_leaf() const noexcept { return parents.empty(); }
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const noexcept { return node_ != nullptr; }

  const Shape& shape() const { return node_->value.shape(); }
  Index dim(int axis) const { return node_->value.dim(axis); }
  int rank() const { return node_->value.rank(); }
  Index numel() const { return node_->value.numel(); }
  /// Value of a one-element tensor.
  Real item() const;

  const NodePtr& node() const noexcept { return node_; }
  void zero_grad();

 private:
  NodePtr node_;
};

/// Leaf that accumulates gradients.
Var parameter(Tensor value);
/// Leaf that never does.
Var constant(Tensor value);

bool grad_enabled() noexcept;

/// Disables tape recording in its scope (thread-local).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

using BackwardFn = std::function<void(Node& self)>;

/// Wraps an op result. Records parents and the closure only when recording
/// is on and some input requires a gradient.
Var make_result(Tensor value, std::vector<Var> inputs, BackwardFn fn);

/// Reverse sweep from a one-element root.
void backward(const Var& root);

}  // namespace kdse::inline KDSE_PRECISION
