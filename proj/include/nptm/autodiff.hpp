#pragma once

// Reverse-mode automatic differentiation over a Wengert list.
//
// A Tape owns every node recorded during a computation. Nodes are appended in
// evaluation order, so the node index is a topological order and a reverse
// sweep visits each node exactly once. The tape can be swept several times
// with different output seeds (vector-Jacobian products against the same
// recorded forward pass).

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "nptm/ops.hpp"
#include "nptm/tensor.hpp"

namespace nptm {

// Counts full network evaluations and full reverse traversals through a
// network. Counters only ever increase.
struct PassCounter {
  std::size_t forward = 0;
  std::size_t backward = 0;

  friend bool operator==(const PassCounter&, const PassCounter&) = default;
};

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  int id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Gradients {
 public:
  // Zero tensor when `v` did not influence the root.
  Tensor wrt(const Var& v) const;
  bool reached(const Var& v) const;

 private:
  friend class Tape;
  std::vector<Tensor> grads_;
  std::vector<bool> present_;
  std::vector<Shape> shapes_;
};

class Tape {
 public:
  // Receives the upstream gradient, the node's own value, the parents' values
  // and one accumulator per parent (nullptr when the parent needs no gradient).
  using BackwardFn = std::function<void(const Tensor& grad_out, const Tensor& out,
                                        std::span<const Tensor* const> parents,
                                        std::span<Tensor* const> parent_grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);  // leaf that requires a gradient

  Var record(Tensor value, std::vector<int> parents, BackwardFn backward);

  // Scalar root, seed 1.
  Gradients backward(const Var& root);
  // Vector-Jacobian product: propagate `seed` from `output`.
  Gradients backward(const Var& output, const Tensor& seed);

  // Marks nodes recorded while the scope is alive as belonging to one network
  // evaluation; the counter receives one forward on entry and one backward
  // per reverse sweep that passes through any of those nodes.
  class NetworkScope {
   public:
    NetworkScope(Tape& tape, PassCounter* counter);
    ~NetworkScope();
    NetworkScope(const NetworkScope&) = delete;
    NetworkScope& operator=(const NetworkScope&) = delete;

   private:
    Tape& tape_;
    int previous_;
  };

  std::size_t node_count() const { return nodes_.size(); }
  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

 private:
  struct Node {
    Tensor value;
    std::vector<int> parents;
    BackwardFn backward;
    bool requires_grad = false;
    int network = -1;
  };

  std::vector<Node> nodes_;
  std::vector<PassCounter*> networks_;
  int current_network_ = -1;
};

// Differentiable operations. All operands must live on the same tape.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var mul(const Var& a, const Var& b);
Var matmul(const Var& a, const Var& b);
Var affine(const Var& weight, const Var& x, const Var& bias);
Var conv2d(const Var& input, const Var& weight, const Var& bias, ops::Conv2dGeometry g);
Var relu(const Var& x);
Var max_pool2d(const Var& x, std::size_t k);
Var sum(const Var& x);
Var mean(const Var& x);
Var l2_norm(const Var& x);  // derivative taken as zero at the origin
Var reshape(const Var& x, Shape shape);
Var concat(std::span<const Var> parts);  // flattens and concatenates
Var max_all(const Var& x);              // ties resolve to the smallest index
Var index_select(const Var& x, std::vector<std::size_t> indices);
Var log_softmax(const Var& x);
Var channel_normalize(const Var& x);

}  // namespace nptm
