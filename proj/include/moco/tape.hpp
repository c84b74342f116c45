#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "moco/tensor.hpp"

namespace moco {

template <class T>
class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
template <class T>
class Var {
 public:
  Var() = default;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const { return id_; }
  Tape<T>& tape() const { return *tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape<T>;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <class T>
using Gradients = std::map<std::string, Tensor<T>>;

// Reverse-mode tape. Every primitive records a pure forward function of its
// parents (used for replay) and an adjoint that scatters output gradients into
// the parents. Single writer; not thread-safe.
template <class T>
class Tape {
 public:
  using Inputs = std::vector<const Tensor<T>*>;

  // Collects parent gradients inside an adjoint. wants(i) is false for parents
  // that do not lead to any parameter, so adjoints can skip that work.
  class GradSink {
   public:
    bool wants(std::size_t i) const { return tape_.nodes_[parents_[i]].requires_grad; }
    void add(std::size_t i, const Tensor<T>& g) {
      if (wants(i)) tape_.accumulate(parents_[i], g);
    }

   private:
    friend class Tape;
    GradSink(Tape& tape, const std::vector<std::size_t>& parents) : tape_(tape), parents_(parents) {}
    Tape& tape_;
    const std::vector<std::size_t>& parents_;
  };

  using ForwardFn = std::function<Tensor<T>(const Inputs&)>;
  using BackwardFn = std::function<void(const Inputs&, const Tensor<T>& out, const Tensor<T>& grad, GradSink&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push_leaf(std::move(value), {}, false); }

  Var<T> param(const std::string& name, Tensor<T> value) {
    if (param_ids_.count(name)) throw ConfigError("parameter registered twice: " + name);
    auto v = push_leaf(std::move(value), name, true);
    param_ids_[name] = v.id();
    return v;
  }

  Var<T> record(std::string op, std::vector<std::size_t> parents, ForwardFn forward, BackwardFn backward) {
    Node n;
    n.op = std::move(op);
    n.parents = std::move(parents);
    for (auto p : n.parents) n.requires_grad = n.requires_grad || nodes_.at(p).requires_grad;
    n.value = forward(inputs_of(n.parents));
    n.forward = std::move(forward);
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }

  // Hash of the discrete choices (activation signs, pooling winners, sampling
  // cells) made by piecewise primitives. Two evaluations with equal signatures
  // lie on the same smooth piece. Collected only when enabled.
  void track_branches(bool on) { track_branches_ = on; }
  bool tracking_branches() const { return track_branches_; }
  void note_branch(std::uint64_t h) {
    branch_signature_ ^= h + 0x9e3779b97f4a7c15ULL + (branch_signature_ << 6) + (branch_signature_ >> 2);
  }
  std::uint64_t branch_signature() const { return branch_signature_; }
  std::size_t size() const { return nodes_.size(); }
  const std::string& op(std::size_t id) const { return nodes_.at(id).op; }

  // Accumulates d(loss)/d(node) for every parameter reachable from `loss`.
  Gradients<T> backward(const Var<T>& loss) {
    if (loss.tape_ != this) throw InternalError("backward: loss recorded on another tape");
    if (loss.value().size() != 1) throw DimensionError("backward: loss must be a scalar");
    for (auto& n : nodes_) n.grad = Tensor<T>();
    nodes_[loss.id()].grad = Tensor<T>(loss.shape(), T{1});
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.grad.empty() || !n.backward || !n.requires_grad) continue;
      if (n.grad.shape() != n.value.shape())
        throw InternalError("tape replay mismatch: gradient shape " + shape_str(n.grad.shape()) + " at op '" + n.op +
                            "' with value shape " + shape_str(n.value.shape()));
      GradSink sink(*this, n.parents);
      n.backward(inputs_of(n.parents), n.value, n.grad, sink);
      if (id != loss.id()) n.grad = Tensor<T>();  // release intermediate adjoints early
    }
    Gradients<T> out;
    for (const auto& [name, id] : param_ids_) {
      const Node& n = nodes_[id];
      out[name] = n.grad.empty() ? Tensor<T>(n.value.shape()) : n.grad;
    }
    return out;
  }

  // Recomputes every recorded primitive from its parents; throws InternalError
  // unless the result is bit-identical to what was recorded.
  void replay_check() const {
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
      const Node& n = nodes_[id];
      if (!n.forward) continue;
      if (!(n.forward(inputs_of(n.parents)) == n.value))
        throw InternalError("tape replay mismatch at node " + std::to_string(id) + " ('" + n.op + "')");
    }
  }

 private:
  struct Node {
    std::string op;
    std::vector<std::size_t> parents;
    Tensor<T> value;
    Tensor<T> grad;
    ForwardFn forward;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var<T> push_leaf(Tensor<T> value, std::string name, bool requires_grad) {
    Node n;
    n.op = name.empty() ? "constant" : "param:" + name;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  Inputs inputs_of(const std::vector<std::size_t>& parents) const {
    Inputs in;
    in.reserve(parents.size());
    for (auto p : parents) in.push_back(&nodes_.at(p).value);
    return in;
  }

  void accumulate(std::size_t id, const Tensor<T>& g) {
    Node& n = nodes_[id];
    if (g.shape() != n.value.shape())
      throw InternalError("tape replay mismatch: adjoint of shape " + shape_str(g.shape()) + " for node '" + n.op +
                          "' of shape " + shape_str(n.value.shape()));
    if (n.grad.empty())
      n.grad = g;
    else
      n.grad += g;
  }

  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> param_ids_;
  bool track_branches_ = false;
  std::uint64_t branch_signature_ = 0;
};

template <class T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

}  // namespace moco
