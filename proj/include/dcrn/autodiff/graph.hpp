#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "dcrn/autodiff/tensor.hpp"

namespace dcrn::ad {

/// Named trainable tensors plus one gradient buffer per tensor, kept in
/// registration order.
class ParameterStore {
 public:
  void add(const std::string& name, Tensor init);
  bool contains(const std::string& name) const;
  std::size_t index(const std::string& name) const;

  Tensor& value(const std::string& name) { return values_[index(name)]; }
  const Tensor& value(const std::string& name) const { return values_[index(name)]; }
  Tensor& grad(const std::string& name) { return grads_[index(name)]; }
  const Tensor& grad(const std::string& name) const { return grads_[index(name)]; }

  Tensor& value(std::size_t i) { return values_[i]; }
  const Tensor& value(std::size_t i) const { return values_[i]; }
  Tensor& grad(std::size_t i) { return grads_[i]; }
  const Tensor& grad(std::size_t i) const { return grads_[i]; }
  const std::string& name(std::size_t i) const { return names_[i]; }
  const std::vector<std::string>& names() const { return names_; }

  std::size_t size() const { return names_.size(); }
  std::size_t scalar_count() const;
  void zero_grad();

  /// Sum of squared gradient entries over parameters whose name starts with
  /// `prefix` (all parameters for an empty prefix).
  double grad_norm_squared(const std::string& prefix = {}) const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::vector<Tensor> grads_;
  std::unordered_map<std::string, std::size_t> lookup_;
};

class Graph;

/// Handle to a node on a Graph.
struct Var {
  Graph* graph = nullptr;
  int id = -1;

  bool valid() const { return graph != nullptr && id >= 0; }
  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

/// Tape of operations recorded in topological (creation) order.
///
/// Parameters enter as leaves bound to a ParameterStore. `backward` walks the
/// tape in reverse and writes one gradient per registered parameter into the
/// store; parameters not reachable from the loss receive zeros. Nodes created
/// from detached or constant inputs carry no backward function.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, int self)>;

  explicit Graph(ParameterStore* store = nullptr, bool grad_enabled = true);

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  /// Trainable leaf; repeated calls with the same name return the same node.
  Var parameter(const std::string& name);
  /// Leaf holding the current parameter value without gradient flow; cached
  /// per name like `parameter`.
  Var frozen(const std::string& name);

  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn);
  Var record(Tensor value, const std::vector<Var>& parents, BackwardFn fn);

  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
  bool requires_grad(Var v) const { return requires_grad(v.id); }

  /// Upstream gradient of a node during backward (empty if none arrived).
  const Tensor& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  /// Zero-initialized accumulator for a parent's gradient; null when the
  /// parent does not require a gradient.
  Tensor* grad_sink(int id);

  bool grad_enabled() const { return grad_enabled_; }
  ParameterStore* store() const { return store_; }
  std::size_t node_count() const { return nodes_.size(); }

  void backward(Var loss);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    bool needs_grad = false;
    long param_index = -1;
  };

  Var push(Node node);

  ParameterStore* store_;
  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::unordered_map<std::string, int> param_nodes_;
  std::unordered_map<std::string, int> frozen_nodes_;
};

}  // namespace dcrn::ad
