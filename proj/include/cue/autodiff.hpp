#pragma once

// Tape-based reverse-mode differentiation over Tensor values.
//
// Nodes are appended in evaluation order, so the tape is already a
// topological order; backward() walks it once in reverse. A tape and its Vars
// belong to one thread.

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "cue/tensor.hpp"

namespace cue::ad {

class Tape;

class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  int id() const noexcept { return id_; }

  const Tensor& value() const;
  // Valid after Tape::backward; zeros for nodes the loss does not reach.
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
  bool needs_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value);
  Var constant(Tensor value);

  // Requires a single-element loss; seeds its gradient with 1.
  void backward(const Var& loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  const Tensor& value(int id) const { return nodes_[id].value; }
  const Tensor& grad(int id) const { return nodes_[id].grad; }
  Tensor& grad_mut(int id) { return nodes_[id].grad; }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }

  // Appends an op result. needs_grad is inherited from the parents.
  Var push(Tensor value, std::initializer_list<Var> parents, BackwardFn backward);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// Elementwise, same shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, const Var& b);

Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var neg(const Var& a);
Var square(const Var& a);
Var sqrt(const Var& a);
Var tanh(const Var& a);
Var softplus(const Var& a);
Var relu(const Var& a);
Var clamp_min(const Var& a, double lo);
Var std_normal_log_cdf(const Var& a);
// Multiplies by a constant tensor of the same shape (dropout masks, noise).
Var mul_const(const Var& a, const Tensor& c);

// Matrix ops on 2-D tensors.
Var matmul(const Var& a, const Var& b);
// a[N x H] + bias[H] broadcast over rows.
Var add_bias(const Var& a, const Var& bias);
Var l2_normalize_rows(const Var& a);
Var gather_rows(const Var& a, std::span<const std::size_t> rows);
Var slice_cols(const Var& a, std::size_t start, std::size_t count);
// N x D -> (N)
Var row_sum(const Var& a);

Var sum(const Var& a);
Var mean(const Var& a);
// Mean softmax cross-entropy of logits[N x C] against integer labels.
Var cross_entropy(const Var& logits, std::span<const int> labels);

}  // namespace cue::ad
