#include "efl/nn/autograd.hpp"

#include "efl/error.hpp"

#include <unordered_set>

namespace efl::nn {

namespace {
thread_local bool g_grad_enabled = true;
}

Tensor& Node::ensure_grad() {
  if (grad.size() != value.size() || grad.shape() != value.shape()) grad = Tensor::zeros_like(value);
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

double Var::item() const {
  EFL_CHECK(node_->value.size() == 1, Errc::shape_mismatch, "item() on non-scalar " + node_->value.shape_str());
  return node_->value[0];
}

void Var::zero_grad() const {
  if (node_ && !node_->grad.empty()) node_->grad.fill(0.0);
}

Var make_var(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
  Var out(std::move(value), false);
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->parents.reserve(parents.size());
  for (auto& p : parents) out.node_->parents.push_back(p.node_);
  out.node_->backward_fn = std::move(backward_fn);
  return out;
}

void backward(const Var& root) {
  EFL_CHECK(root.defined() && root.value().size() == 1, Errc::shape_mismatch, "backward() needs a scalar root");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS yields a topological order without recursion.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  // Interior gradients are not needed once propagated.
  for (Node* n : order) {
    if (n->backward_fn) n->grad = Tensor();
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

}  // namespace efl::nn
