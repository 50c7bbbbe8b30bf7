#include "dualcycle/nn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace dualcycle::nn {

TensorPtr make_tensor(std::vector<int> shape, bool requires_grad) {
  auto t = std::make_shared<Tensor>();
  t->shape = std::move(shape);
  t->value.assign(t->numel(), 0.0);
  t->requires_grad = requires_grad;
  return t;
}

TensorPtr make_param(std::vector<int> shape, const std::string& name) {
  auto t = make_tensor(std::move(shape), true);
  t->name = name;
  return t;
}

TensorPtr constant_like(const TensorPtr& t, double v) {
  auto c = make_tensor(t->shape, false);
  std::fill(c->value.begin(), c->value.end(), v);
  return c;
}

TensorPtr detach(const TensorPtr& t) {
  auto c = make_tensor(t->shape, false);
  c->value = t->value;
  return c;
}

void backward(const TensorPtr& root) {
  if (root->numel() != 1) throw NnError("backward: root must be a scalar");

  // Iterative post-order DFS over parents.
  std::vector<TensorPtr> order;
  std::unordered_set<Tensor*> visited;
  std::vector<std::pair<TensorPtr, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorPtr parent = node->parents[next++];
      if (visited.insert(parent.get()).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto& t : order) t->ensure_grad();
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

void Adam::step(const std::vector<TensorPtr>& params) {
  for (const auto& p : params) {
    if (p->name.empty()) throw NnError("Adam: parameter without a name");
    p->ensure_grad();
    State& s = states_[p->name];
    if (s.m.empty()) {
      s.m.assign(p->value.size(), 0.0);
      s.v.assign(p->value.size(), 0.0);
    }
    if (s.m.size() != p->value.size()) throw NnError("Adam: state size mismatch for " + p->name);
    ++s.t;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(s.t));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(s.t));
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double g = p->grad[i];
      s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g;
      s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g * g;
      p->value[i] -= lr_ * (s.m[i] / bc1) / (std::sqrt(s.v[i] / bc2) + eps_);
    }
  }
}

void Adam::zero_grad(const std::vector<TensorPtr>& params) {
  for (const auto& p : params) {
    p->ensure_grad();
    std::fill(p->grad.begin(), p->grad.end(), 0.0);
  }
}

const Adam::State* Adam::state_for(const std::string& name) const {
  auto it = states_.find(name);
  return it == states_.end() ? nullptr : &it->second;
}

void Adam::restore_state(const std::string& name, State s) {
  states_[name] = std::move(s);
}

}  // namespace dualcycle::nn
