#include "sfda/autograd.hpp"

#include <algorithm>

namespace sfda {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Variable make_op(Tensor value, std::vector<Variable> parents, std::function<void(VarNode&)> backward_fn) {
  bool need = false;
  if (g_grad_enabled) {
    for (const auto& p : parents)
      if (p.requires_grad()) {
        need = true;
        break;
      }
  }
  Variable out(std::move(value), need);
  if (need) {
    out.node()->parents = std::move(parents);
    out.node()->backward_fn = std::move(backward_fn);
  }
  return out;
}

void accumulate_grad(Variable& parent, const double* g, int64_t n) {
  Tensor& dst = parent.grad();
  if (dst.numel() != n) throw std::logic_error("accumulate_grad: size mismatch");
  double* d = dst.data();
  for (int64_t i = 0; i < n; ++i) d[i] += g[i];
}

void Variable::backward() {
  if (!node_) throw std::logic_error("backward on empty variable");
  if (node_->value.numel() != 1) throw std::logic_error("backward() requires a scalar root");

  // Iterative post-order DFS: children appear before parents in `order`.
  std::vector<VarNode*> order;
  std::unordered_set<VarNode*> visited;
  struct Frame {
    VarNode* n;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({node_.get(), 0});
  visited.insert(node_.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.n->parents.size()) {
      VarNode* p = f.n->parents[f.next_parent++].raw();
      if (p && p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  grad().fill(1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    VarNode* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

}  // namespace sfda
