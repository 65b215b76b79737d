// SPDX-License-Identifier: Apache-2.0
#include "damex/feedforward.hpp"

#include <cmath>

#include "damex/error.hpp"

namespace damex {

namespace {

Matrix gaussian(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (double& v : m.data()) v = dist(rng);
  return m;
}

void add_row_inplace(Matrix& m, const Matrix& row) {
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) m(r, c) += row(0, c);
}

}  // namespace

FeedForward FeedForward::random(std::size_t dim, std::size_t hidden, std::mt19937_64& rng,
                                double out_scale) {
  FeedForward ff;
  ff.w_in = gaussian(dim, hidden, 1.0 / std::sqrt(static_cast<double>(dim)), rng);
  ff.b_in = Matrix(1, hidden);
  ff.w_out = gaussian(hidden, dim, out_scale / std::sqrt(static_cast<double>(hidden)), rng);
  ff.b_out = Matrix(1, dim);
  return ff;
}

FeedForward FeedForward::zeros(std::size_t dim, std::size_t hidden) {
  return {Matrix(dim, hidden), Matrix(1, hidden), Matrix(hidden, dim), Matrix(1, dim)};
}

FeedForwardVars bind(Tape& tape, const FeedForward& ff, bool trainable) {
  auto make = [&](const Matrix& m) { return trainable ? tape.leaf(m) : tape.constant(m); };
  return {make(ff.w_in), make(ff.b_in), make(ff.w_out), make(ff.b_out)};
}

double activate(Activation act, double x) { return act == Activation::gelu ? gelu(x) : x; }

double activate_derivative(Activation act, double x) {
  return act == Activation::gelu ? gelu_derivative(x) : 1.0;
}

Matrix apply(const FeedForward& ff, const Matrix& x, Activation act, Matrix* pre, Matrix* hidden) {
  if (x.cols() != ff.dim()) throw ShapeError("feed-forward input dimension mismatch");
  Matrix z = matmul(x, ff.w_in);
  add_row_inplace(z, ff.b_in);
  Matrix a = z;
  for (double& v : a.data()) v = activate(act, v);
  Matrix out = matmul(a, ff.w_out);
  add_row_inplace(out, ff.b_out);
  if (pre != nullptr) *pre = std::move(z);
  if (hidden != nullptr) *hidden = std::move(a);
  return out;
}

Var apply(const FeedForwardVars& ff, Var x, Activation act) {
  if (x.cols() != ff.w_in.rows()) throw ShapeError("feed-forward input dimension mismatch");
  Var z = ad::add_row(ad::matmul(x, ff.w_in), ff.b_in);
  Var a = act == Activation::gelu ? ad::gelu(z) : z;
  return ad::add_row(ad::matmul(a, ff.w_out), ff.b_out);
}

}  // namespace damex
