#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "pnet/tensor.hpp"

namespace pnet {

class Tape;
struct Gradients;

// Raised when a forward value leaves the finite range.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
};

// Reverse-mode rule for one node. `out_grad` is dL/d(node); the rule
// accumulates into its inputs through Tape::accumulate.
using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Records a derived node. `backward` may be empty when no input requires
  // gradients; it is dropped in that case anyway.
  Var push(const char* op, Tensor value, std::vector<int> inputs, BackwardFn backward);

  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  const char* op(int id) const { return nodes_[static_cast<std::size_t>(id)].op; }
  std::size_t size() const { return nodes_.size(); }

  // Adds `g` into the pending gradient of node `id` (no-op for constants).
  void accumulate(int id, const Tensor& g);
  // Adds `scale * g[i]` elementwise without allocating a temporary.
  void accumulate(int id, std::span<const Real> g, Real scale = Real(1));
  std::span<Real> grad_buffer(int id);

  // Reverse sweep from `root`; see pnet::backward.
  struct Gradients run_backward(int root);

 private:
  struct Node {
    const char* op = "leaf";
    Tensor value;
    std::vector<int> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_leaf = false;
    Tensor grad;  // empty until something flows in
  };
  std::deque<Node> nodes_;  // deque: references to values stay valid across push
};

struct Gradients {
  std::unordered_map<int, Tensor> by_leaf;

  // Gradient with respect to `v`, zeros of the right shape if none flowed.
  Tensor of(Var v) const;
  bool has(Var v) const { return by_leaf.count(v.id) != 0; }
};

// Runs reverse-mode differentiation from a scalar root. Every node is visited
// at most once, in reverse tape order. Throws ShapeError on a non-scalar root.
Gradients backward(Tape& tape, Var root);

// ---- primitives ---------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, Real c);
Var add_bias(Var x, Var bias);        // x [..., n] + bias [n]
Var matmul(Var a, Var b);             // [m,k] x [k,n]
Var linear(Var x, Var w, Var bias);   // x [b,in], w [out,in], bias [out] -> x w^T + bias
Var relu(Var x);
Var gelu(Var x);  // exact: x * Phi(x)
Var sigmoid(Var x);
Var log(Var x);
Var exp(Var x);
Var sum(Var x);
Var mean(Var x);
Var reshape(Var x, Shape shape);
Var concat(const std::vector<Var>& parts, std::size_t axis);  // rank 1 or 2
Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end);
Var gather_rows(Var x, std::vector<std::size_t> rows);
// Elementwise select(mask, a, b); the gradient reaches `a` only where mask is
// set and `b` only where it is clear. Both are exact zeros elsewhere.
Var where(std::span<const std::uint8_t> mask, Var a, Var b);
Var softmax(Var logits);      // row-wise
Var log_softmax(Var logits);  // row-wise, max-shifted
Var group_mean_rows(Var x, std::size_t group);  // [n*g, k] -> [n, k]
// log of the mean of exp over each group of rows, max-shifted: [n*g, k] -> [n, k]
Var group_log_mean_exp(Var x, std::size_t group);
Var pick(Var x, std::span<const int> cols);           // [n, k] -> [n], x[i, cols[i]]

// Mean negative log-likelihood of integer labels under row-wise softmax.
Var softmax_cross_entropy(Var logits, std::span<const int> labels);

// ---- finite differences -------------------------------------------------

// max_i |(f(x+h e_i) - f(x-h e_i))/2h - g_i| / (|g_i| + 1e-12)
double finite_diff_check(const std::function<double(const Tensor&)>& f, const Tensor& point,
                         const Tensor& gradient, double step);

// Same check for a function built on a tape: the gradient comes from
// backward() and the probes from forward-only re-evaluations.
using TapeFunction = std::function<Var(Tape&, Var)>;
double finite_diff_check(const TapeFunction& f, const Tensor& point, double step);
double evaluate(const TapeFunction& f, const Tensor& point);
Tensor gradient(const TapeFunction& f, const Tensor& point);

}  // namespace pnet
