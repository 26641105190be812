#include "kdse/autograd.hpp"

#include <stdexcept>
#include <unordered_set>

namespace kdse::inline KDSE_PRECISION {

namespace {
thread_local bool t_grad_enabled = true;
}

void Node::accumulate(Tensor g) {
  if (g.shape() != value.shape()) {
    throw std::logic_error("gradient shape " + shape_str(g.shape()) + " does not match value " +
                           shape_str(value.shape()));
  }
  if (grad.empty()) {
    // Take ownership only when nobody else can observe the buffer.
    grad = g.shares_storage(value) ? g.clone() : std::move(g);
    return;
  }
  Real* dst = grad.data();
  const Real* src = g.data();
  const Index n = grad.numel();
  for (Index i = 0; i < n; ++i) dst[i] += src[i];
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Real Var::item() const {
  if (numel() != 1) throw std::logic_error("item() on tensor of shape " + shape_str(shape()));
  return value()[0];
}

void Var::zero_grad() {
  if (node_) node_->grad = Tensor();
}

Var parameter(Tensor value) { return Var(std::move(value), true); }
Var constant(Tensor value) { return Var(std::move(value), false); }

bool grad_enabled() noexcept { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

Var make_result(Tensor value, std::vector<Var> inputs, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool needs = false;
  if (t_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(fn);
  }
  return Var(std::move(node));
}

void backward(const Var& root) {
  if (!root.defined() || root.numel() != 1) {
    throw std::logic_error("backward() needs a one-element root");
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order. The order holds
  // owning pointers because unlinking parents below may drop the last
  // reference to a node that is still queued.
  std::vector<NodePtr> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<NodePtr, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      const NodePtr& p = node->parents[next++];
      if (p->requires_grad && visited.insert(p.get()).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->accumulate(Tensor(root.shape(), Real(1)));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node& node = **it;
    if (node.is_leaf()) continue;
    if (node.backward && !node.grad.empty()) node.backward(node);
    node.backward = nullptr;
    node.parents.clear();
    node.grad = Tensor();
    it->reset();
  }
}

}  // namespace kdse::inline KDSE_PRECISION
