#ifndef SFDA_AUTOGRAD_HPP
#define SFDA_AUTOGRAD_HPP

#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "sfda/tensor.hpp"

namespace sfda {

class Variable;

/// Node of the define-by-run graph. `backward_fn` reads this node's grad and
/// accumulates into the parents' grads.
struct VarNode {
  Tensor value;
  Tensor grad;  // allocated on demand, same shape as value
  bool requires_grad = false;
  std::vector<Variable> parents;
  std::function<void(VarNode&)> backward_fn;
};

bool grad_enabled();

/// Reverse-mode autodiff handle with shared-node semantics.
class Variable {
 public:
  Variable() = default;
  explicit Variable(Tensor value, bool requires_grad = false)
      : node_(std::make_shared<VarNode>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& value() { return node_->value; }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  Tensor& grad() {
    if (node_->grad.empty() && node_->value.numel() > 0) node_->grad = Tensor(node_->value.shape());
    return node_->grad;
  }
  const Tensor& grad_view() const { return node_->grad; }

  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.zero();
  }

  /// Same value, no graph history.
  Variable detach() const { return Variable(node_->value, false); }

  double scalar() const {
    if (node_->value.numel() != 1) throw std::logic_error("scalar() on non-scalar variable");
    return node_->value[0];
  }

  void backward();

  std::shared_ptr<VarNode> node() const { return node_; }
  VarNode* raw() const { return node_.get(); }

 private:
  std::shared_ptr<VarNode> node_;
};

/// Disables graph construction for the enclosed scope (inference passes).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Builds an op node. Parents and the closure are dropped when grads are
/// globally disabled or no parent needs them.
Variable make_op(Tensor value, std::vector<Variable> parents, std::function<void(VarNode&)> backward_fn);

/// += contribution into a parent's grad buffer (allocates if needed).
void accumulate_grad(Variable& parent, const double* g, int64_t n);

}  // namespace sfda

#endif  // SFDA_AUTOGRAD_HPP
