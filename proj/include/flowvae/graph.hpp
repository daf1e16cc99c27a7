#pragma once

#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flowvae/errors.hpp"
#include "flowvae/tensor.hpp"

namespace flowvae {

/// A named parameter tensor with its gradient accumulator. Non-trainable
/// params hold fixed buffers (e.g. a permutation) that are checkpointed but
/// never updated by the optimizer.
template <class T>
struct Param {
  Param(std::string id, Tensor<T> init, bool is_trainable = true)
      : name(std::move(id)), value(std::move(init)), grad(value.shape()), trainable(is_trainable) {}

  void zero_grad() { std::fill(grad.values().begin(), grad.values().end(), T(0)); }

  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable;
};

/// Owns every Param of a model in registration order. Pointers handed out by
/// add() stay valid for the registry's lifetime, including across moves.
template <class T>
class ParamRegistry {
 public:
  Param<T>* add(const std::string& name, Tensor<T> init, bool trainable = true) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name " + name);
    params_.push_back(std::make_unique<Param<T>>(name, std::move(init), trainable));
    index_[name] = params_.size() - 1;
    return params_.back().get();
  }

  Param<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }

  std::vector<Param<T>*> all() const {
    std::vector<Param<T>*> out;
    for (const auto& p : params_) out.push_back(p.get());
    return out;
  }

  std::vector<Param<T>*> trainable() const {
    std::vector<Param<T>*> out;
    for (const auto& p : params_)
      if (p->trainable) out.push_back(p.get());
    return out;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

 private:
  std::vector<std::unique_ptr<Param<T>>> params_;
  std::map<std::string, std::size_t> index_;
};

template <class T>
class Graph;

/// Handle to a node in a Graph.
template <class T>
struct Var {
  Graph<T>* graph = nullptr;
  int id = -1;

  const Tensor<T>& value() const { return graph->value(id); }
  const Shape& shape() const { return value().shape(); }
  int dim(int i) const { return value().dim(i); }
};

/// Records one forward pass as a list of nodes, each holding its value and a
/// closure that pushes its output gradient to its inputs. backward() walks
/// the list in reverse and finally adds leaf gradients into their Params.
/// With gradients disabled only values are kept.
template <class T>
class Graph {
 public:
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  // When set, uninitialized actnorm layers initialize themselves from the
  // batch they see instead of raising.
  bool data_init() const { return data_init_; }
  void set_data_init(bool on) { data_init_ = on; }

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, {}); }

  Var<T> param(Param<T>& p) {
    Var<T> v = push(p.value, grad_enabled_ && p.trainable, {});
    nodes_[v.id].param = &p;
    return v;
  }

  using BackwardFn = std::function<void(const Tensor<T>& out_grad)>;

  /// Adds an op result. `fn` receives the output gradient and must call
  /// accumulate() for each parent that requires a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn fn) {
    return record(std::move(value), std::span<const Var<T>>(parents.begin(), parents.size()), std::move(fn));
  }

  Var<T> record(Tensor<T> value, std::span<const Var<T>> parents, BackwardFn fn) {
    bool rg = false;
    if (grad_enabled_)
      for (const auto& p : parents) rg = rg || nodes_[p.id].requires_grad;
    return push(std::move(value), rg, rg ? std::move(fn) : BackwardFn{});
  }

  const Tensor<T>& value(int id) const { return nodes_[id].value; }
  bool requires_grad(Var<T> v) const { return nodes_[v.id].requires_grad; }

  /// Adds `g` into the gradient of `v` (no-op if `v` needs none).
  void accumulate(Var<T> v, const Tensor<T>& g) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
      n.grad = g;
      return;
    }
    T* dst = n.grad.data();
    const T* src = g.data();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += src[i];
  }

  // Mutable gradient buffer for `v`, allocated zeroed on first use.
  Tensor<T>& grad_buffer(Var<T> v) {
    Node& n = nodes_[v.id];
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  /// Reverse pass from a single-element output.
  void backward(Var<T> loss) {
    if (!grad_enabled_) throw ConfigError("backward on a graph without gradients");
    if (nodes_[loss.id].value.size() != 1) throw ConfigError("backward requires a scalar output");
    if (!nodes_[loss.id].requires_grad) return;
    nodes_[loss.id].grad = Tensor<T>(nodes_[loss.id].value.shape(), T(1));
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.fn) n.fn(n.grad);
      if (n.param) {
        T* dst = n.param->grad.data();
        for (std::size_t k = 0; k < n.grad.size(); ++k) dst[k] += n.grad[k];
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    BackwardFn fn;
    bool requires_grad = false;
    Param<T>* param = nullptr;
  };

  Var<T> push(Tensor<T> value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), {}, std::move(fn), requires_grad, nullptr});
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  std::deque<Node> nodes_;
  bool grad_enabled_;
  bool data_init_ = false;
};

}  // namespace flowvae
