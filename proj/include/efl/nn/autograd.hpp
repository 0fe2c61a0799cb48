#pragma once

#include "efl/nn/tensor.hpp"

#include <functional>
#include <memory>
#include <vector>

namespace efl::nn {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor& ensure_grad();
};

// Handle onto a node of the dynamic computation graph. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  Tensor& mutable_grad() { return node_->ensure_grad(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }

  const std::vector<int>& shape() const { return node_->value.shape(); }
  int rows() const { return node_->value.rows(); }
  int cols() const { return node_->value.cols(); }
  double item() const;

  void zero_grad() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  friend Var make_var(Tensor, std::vector<Var>, std::function<void(Node&)>);
  std::shared_ptr<Node> node_;
};

// Builds an op result. The backward closure receives the result node and
// reads parents through Node::parents in the same order they were passed.
Var make_var(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);

// Reverse-mode sweep from a scalar root. Gradients accumulate into leaves.
void backward(const Var& root);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace efl::nn
