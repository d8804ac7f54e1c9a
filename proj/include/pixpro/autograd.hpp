#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "pixpro/tensor.hpp"

namespace pixpro {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents that require it.
  std::function<void(Node&)> backward;

  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

/// Handle to a node of the reverse-mode graph. Copies share the node.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Var leaf(Tensor<T> value, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad = Tensor<T>(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  Node<T>* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
void require_finite(const Tensor<T>& t, const std::string& op) {
  if (!t.all_finite()) throw NumericError("non-finite value produced by op '" + op + "'");
}

/// Creates an op node. The backward closure is dropped when no input needs a gradient,
/// so momentum-branch forwards never retain a graph.
template <typename T>
Var<T> make_node(Tensor<T> value, std::string op, std::vector<Var<T>> inputs,
                 std::function<void(Node<T>&)> backward) {
  detail::require_finite(value, op);
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = std::move(op);
  bool any = false;
  for (const auto& v : inputs) any = any || v.requires_grad();
  if (any) {
    n->requires_grad = true;
    for (auto& v : inputs) n->parents.push_back(v.ptr());
    n->backward = std::move(backward);
  }
  return Var<T>(std::move(n));
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every leaf that
/// requires them; intermediate buffers are released as the sweep passes them.
template <typename T>
void backward(const Var<T>& loss) {
  if (loss.value().numel() != 1)
    throw Error("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node<T>* p = n->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && !n->grad.empty()) {
      n->backward(*n);
      n->grad = Tensor<T>();
    }
  }
}

/// Gradients of `loss` with respect to `leaves`, in order. Leaves the loss does not
/// reach get a zero tensor. Existing leaf gradients are cleared first.
template <typename T>
std::vector<Tensor<T>> grad_eval(const Var<T>& loss, std::vector<Var<T>> leaves) {
  for (auto& l : leaves) l.zero_grad();
  backward(loss);
  std::vector<Tensor<T>> out;
  out.reserve(leaves.size());
  for (auto& l : leaves) out.push_back(l.has_grad() ? l.grad() : Tensor<T>(l.shape()));
  return out;
}

}  // namespace pixpro
