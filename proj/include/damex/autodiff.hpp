// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode differentiation over Matrix values.
//
// A Tape records every operation in creation order. backward() sweeps the
// records in reverse index order, which is a valid topological order, so the
// gradient accumulation order is fixed and results are bitwise reproducible.
// Nodes that do not depend on any leaf are marked constant and skipped.
#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "damex/matrix.hpp"

namespace damex {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  const Matrix& value() const;
  const Matrix& grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Backward rule: reads grad(self) and accumulates into parent gradients.
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Matrix value);
  Var constant(Matrix value);
  Var record(Matrix value, std::vector<std::size_t> parents, Backward backward);

  const Matrix& value(std::size_t id) const { return nodes_.at(id).value; }
  const Matrix& grad(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Adds `delta` into the gradient of node `id` if that node requires one.
  void accumulate(std::size_t id, const Matrix& delta);
  /// Mutable gradient access for rules that scatter element-wise.
  Matrix& grad_mut(std::size_t id);

  /// Populates gradients of every node with respect to a scalar root.
  /// Throws ContractError for a non-scalar root.
  void backward(Var root);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::vector<std::size_t> parents;
    Backward backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
  bool grads_ready_ = false;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }
inline const Matrix& Var::grad() const { return tape_->grad(id_); }

namespace ad {

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var a, double factor);
/// a (R x C) plus a 1 x C row broadcast over every row.
Var add_row(Var a, Var row);
/// a minus a 1x1 scalar node broadcast over every entry.
Var sub_scalar(Var a, Var s);
/// Scales row r of a (R x C) by s(r, 0), s is R x 1.
Var mul_rows(Var a, Var s);
Var sum(Var a);
Var mean(Var a);
/// Column sums: R x C -> 1 x C.
Var sum_rows(Var a);
Var gather_rows(Var a, std::span<const std::size_t> rows);
/// Entry (r, cols[r]) for each row: R x C -> R x 1.
Var pick(Var a, std::span<const std::size_t> cols);
Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
/// log(max(a, floor)); gradient is zero where the clamp is active.
Var log_clamped(Var a, double floor);
/// Exact GELU, x * Phi(x).
Var gelu(Var a);
/// Element-wise CDF of N(0, sigma^2).
Var normal_cdf(Var a, double sigma);
/// sum(a .* weights) for a constant weight matrix.
Var weighted_sum(Var a, const Matrix& weights);

}  // namespace ad

double gelu(double x);
double gelu_derivative(double x);

}  // namespace damex
