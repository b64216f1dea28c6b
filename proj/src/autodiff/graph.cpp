#include "dcrn/autodiff/graph.hpp"

#include <stdexcept>

namespace dcrn::ad {

void ParameterStore::add(const std::string& name, Tensor init) {
  if (lookup_.count(name)) throw std::invalid_argument("parameter '" + name + "' already registered");
  lookup_.emplace(name, names_.size());
  names_.push_back(name);
  grads_.emplace_back(init.shape(), 0.0);
  values_.push_back(std::move(init));
}

bool ParameterStore::contains(const std::string& name) const { return lookup_.count(name) > 0; }

std::size_t ParameterStore::index(const std::string& name) const {
  auto it = lookup_.find(name);
  if (it == lookup_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& g : grads_) g.fill(0.0);
}

double ParameterStore::grad_norm_squared(const std::string& prefix) const {
  double acc = 0.0;
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i].compare(0, prefix.size(), prefix) != 0) continue;
    for (double g : grads_[i].values()) acc += g * g;
  }
  return acc;
}

const Tensor& Var::value() const { return graph->value(id); }

Graph::Graph(ParameterStore* store, bool grad_enabled)
    : store_(store), grad_enabled_(grad_enabled) {}

Var Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Graph::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Graph::parameter(const std::string& name) {
  if (!store_) throw std::logic_error("graph: parameter '" + name + "' requested without a store");
  if (auto it = param_nodes_.find(name); it != param_nodes_.end()) return Var{this, it->second};
  const std::size_t idx = store_->index(name);
  Node n;
  n.value = store_->value(idx);
  n.needs_grad = grad_enabled_;
  n.param_index = static_cast<long>(idx);
  Var v = push(std::move(n));
  param_nodes_.emplace(name, v.id);
  return v;
}

Var Graph::frozen(const std::string& name) {
  if (!store_) throw std::logic_error("graph: parameter '" + name + "' requested without a store");
  if (auto it = frozen_nodes_.find(name); it != frozen_nodes_.end()) return Var{this, it->second};
  Var v = constant(store_->value(name));
  frozen_nodes_.emplace(name, v.id);
  return v;
}

Var Graph::record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
  return record(std::move(value), std::vector<Var>(parents), std::move(fn));
}

Var Graph::record(Tensor value, const std::vector<Var>& parents, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  if (grad_enabled_) {
    for (const Var& p : parents) {
      if (p.graph != this) throw std::logic_error("graph: operand recorded on a different graph");
      if (nodes_[static_cast<std::size_t>(p.id)].needs_grad) n.needs_grad = true;
    }
  }
  if (n.needs_grad) n.backward = std::move(fn);
  return push(std::move(n));
}

Tensor* Graph::grad_sink(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.needs_grad) return nullptr;
  if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
  return &n.grad;
}

void Graph::backward(Var loss) {
  if (loss.graph != this) throw std::logic_error("backward: loss belongs to another graph");
  const Tensor& lv = value(loss.id);
  if (lv.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + to_string(lv.shape()));
  }
  if (store_) store_->zero_grad();
  for (auto& n : nodes_) n.grad = Tensor();
  if (!nodes_[static_cast<std::size_t>(loss.id)].needs_grad) return;
  nodes_[static_cast<std::size_t>(loss.id)].grad = Tensor(lv.shape(), 1.0);

  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) continue;
    if (n.backward) n.backward(*this, id);
    if (n.param_index >= 0 && store_) {
      Tensor& dst = store_->grad(static_cast<std::size_t>(n.param_index));
      auto src = nodes_[static_cast<std::size_t>(id)].grad.values();
      auto out = dst.values();
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += src[i];
    }
  }
}

}  // namespace dcrn::ad
