#pragma once

#include "watchped/tensor.hpp"

#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace watchped::ad {

struct Node;

/// Handle to a node of the reverse-mode graph. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  /// Leaf that never receives gradient.
  static Var constant(Tensor value);
  /// Leaf that accumulates gradient (a trainable parameter).
  static Var parameter(Tensor value);

  bool valid() const { return static_cast<bool>(node_); }
  const Tensor& value() const;
  Tensor& mutable_value();
  const Tensor& grad() const;
  bool requires_grad() const;
  void set_requires_grad(bool on);
  const Shape& shape() const { return value().shape(); }
  double item() const;

  void zero_grad();
  /// Backpropagates from this scalar node; gradients accumulate into leaves.
  void backward() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<Var> parents;
  /// Reads this->grad and accumulates into parents' grads.
  std::function<void(Node&)> backward_fn;

  Tensor& grad_buffer() {
    if (grad.empty()) grad = Tensor::zeros(value.shape());
    return grad;
  }
};

/// Builds an interior node. requires_grad is inferred from the parents.
Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);

/// Ordered, named set of trainable parameters.
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Var var;
  };

  Var add(const std::string& name, Tensor value);
  const Var& at(const std::string& name) const;
  bool contains(const std::string& name) const;
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }
  Index scalar_count() const;

  void zero_grad();
  /// Turns gradient tracking off (or back on) for names starting with any prefix.
  void freeze_prefixes(const std::vector<std::string>& prefixes, bool frozen = true);

 private:
  std::vector<Entry> entries_;
};

/// Evaluation-mode switch and dropout randomness for a forward pass.
struct ForwardContext {
  bool training = false;
  double dropout_rate = 0.0;
  std::mt19937_64* rng = nullptr;
};

}  // namespace watchped::ad
