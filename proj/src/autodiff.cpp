#include "watchped/autodiff.hpp"

#include <algorithm>
#include <stdexcept>
#include <unordered_set>

namespace watchped::ad {

Var Var::constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var Var::parameter(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

const Tensor& Var::value() const { return node_->value; }
Tensor& Var::mutable_value() { return node_->value; }

const Tensor& Var::grad() const { return node_->grad_buffer(); }

bool Var::requires_grad() const { return node_->requires_grad; }
void Var::set_requires_grad(bool on) { node_->requires_grad = on; }

double Var::item() const {
  if (node_->value.size() != 1) {
    throw ShapeError("item() needs a single-element tensor, got " + shape_string(node_->value.shape()));
  }
  return node_->value[0];
}

void Var::zero_grad() {
  if (!node_->grad.empty()) node_->grad.data().setZero();
}

void Var::backward() const {
  if (node_->value.size() != 1) throw ShapeError("backward() needs a scalar output");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order of the subgraph.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].node();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  // Interior gradients are scratch space for this pass.
  for (Node* n : order) {
    if (n->backward_fn) n->grad = Tensor::zeros(n->value.shape());
  }
  node_->grad_buffer().data().array() += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad =
      std::any_of(parents.begin(), parents.end(), [](const Var& p) { return p.requires_grad(); });
  if (node->requires_grad) {
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return Var(std::move(node));
}

Var ParamSet::add(const std::string& name, Tensor value) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  Var v = Var::parameter(std::move(value));
  entries_.push_back({name, v});
  return v;
}

const Var& ParamSet::at(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e.var;
  }
  throw std::out_of_range("unknown parameter: " + name);
}

bool ParamSet::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.name == name; });
}

Index ParamSet::scalar_count() const {
  Index n = 0;
  for (const auto& e : entries_) n += e.var.value().size();
  return n;
}

void ParamSet::zero_grad() {
  for (auto& e : entries_) e.var.zero_grad();
}

void ParamSet::freeze_prefixes(const std::vector<std::string>& prefixes, bool frozen) {
  for (auto& e : entries_) {
    for (const auto& p : prefixes) {
      if (e.name.rfind(p, 0) == 0) e.var.set_requires_grad(!frozen);
    }
  }
}

}  // namespace watchped::ad
