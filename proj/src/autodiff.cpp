// SPDX-License-Identifier: Apache-2.0
#include "damex/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "damex/error.hpp"

namespace damex {

namespace {

std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_same_shape(const char* op, Var a, Var b) {
  if (!a.value().same_shape(b.value())) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.value()) + " vs " +
                     shape_str(b.value()));
  }
}

void require_same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands live on different tapes");
}

}  // namespace

Var Tape::leaf(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, {}, {}, true});
  grads_ready_ = false;
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, {}, {}, false});
  grads_ready_ = false;
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, std::vector<std::size_t> parents, Backward backward) {
  const bool needs = std::any_of(parents.begin(), parents.end(),
                                 [this](std::size_t p) { return nodes_.at(p).requires_grad; });
  nodes_.push_back(Node{std::move(value), {}, std::move(parents),
                        needs ? std::move(backward) : Backward{}, needs});
  grads_ready_ = false;
  return Var(this, nodes_.size() - 1);
}

const Matrix& Tape::grad(std::size_t id) const {
  if (!grads_ready_) throw ContractError("gradients requested before backward()");
  return nodes_.at(id).grad;
}

Matrix& Tape::grad_mut(std::size_t id) { return nodes_.at(id).grad; }

void Tape::accumulate(std::size_t id, const Matrix& delta) {
  Node& node = nodes_.at(id);
  if (!node.requires_grad) return;
  auto dst = node.grad.data();
  auto src = delta.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::backward(Var root) {
  if (&root.tape() != this) throw ContractError("root belongs to another tape");
  const Matrix& rv = value(root.id());
  if (rv.rows() != 1 || rv.cols() != 1) {
    throw ContractError("backward() needs a scalar root, got " + shape_str(rv));
  }
  for (Node& node : nodes_) node.grad = Matrix(node.value.rows(), node.value.cols());
  grads_ready_ = true;
  nodes_[root.id()].grad(0, 0) = 1.0;
  for (std::size_t id = root.id() + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (node.requires_grad && node.backward) node.backward(*this, id);
  }
}

double gelu(double x) { return x * std_normal_cdf(x); }

double gelu_derivative(double x) { return std_normal_cdf(x) + x * std_normal_pdf(x); }

namespace ad {

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  Matrix out = damex::matmul(a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (t.requires_grad(ia)) t.accumulate(ia, damex::matmul(g, damex::transpose(t.value(ib))));
    if (t.requires_grad(ib)) t.accumulate(ib, damex::matmul(damex::transpose(t.value(ia)), g));
  });
}

Var transpose(Var a) {
  const std::size_t ia = a.id();
  return a.tape().record(damex::transpose(a.value()), {ia}, [ia](Tape& t, std::size_t self) {
    t.accumulate(ia, damex::transpose(t.grad(self)));
  });
}

Var add(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape("add", a, b);
  Matrix out = a.value();
  auto dst = out.data();
  auto rhs = b.value().data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += rhs[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Matrix g = t.grad(self);
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

Var sub(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape("sub", a, b);
  Matrix out = a.value();
  auto dst = out.data();
  auto rhs = b.value().data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] -= rhs[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    Matrix g = t.grad(self);
    t.accumulate(ia, g);
    for (double& v : g.data()) v = -v;
    t.accumulate(ib, g);
  });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape("mul", a, b);
  Matrix out = a.value();
  auto dst = out.data();
  auto rhs = b.value().data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] *= rhs[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& va = t.value(ia);
    const Matrix& vb = t.value(ib);
    if (t.requires_grad(ia)) {
      Matrix d(g.rows(), g.cols());
      for (std::size_t i = 0; i < d.size(); ++i) d.data()[i] = g.data()[i] * vb.data()[i];
      t.accumulate(ia, d);
    }
    if (t.requires_grad(ib)) {
      Matrix d(g.rows(), g.cols());
      for (std::size_t i = 0; i < d.size(); ++i) d.data()[i] = g.data()[i] * va.data()[i];
      t.accumulate(ib, d);
    }
  });
}

Var div(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape("div", a, b);
  Matrix out = a.value();
  auto dst = out.data();
  auto rhs = b.value().data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] /= rhs[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& va = t.value(ia);
    const Matrix& vb = t.value(ib);
    if (t.requires_grad(ia)) {
      Matrix d(g.rows(), g.cols());
      for (std::size_t i = 0; i < d.size(); ++i) d.data()[i] = g.data()[i] / vb.data()[i];
      t.accumulate(ia, d);
    }
    if (t.requires_grad(ib)) {
      Matrix d(g.rows(), g.cols());
      for (std::size_t i = 0; i < d.size(); ++i) {
        const double q = vb.data()[i];
        d.data()[i] = -g.data()[i] * va.data()[i] / (q * q);
      }
      t.accumulate(ib, d);
    }
  });
}

Var scale(Var a, double factor) {
  Matrix out = a.value();
  for (double& v : out.data()) v *= factor;
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, factor](Tape& t, std::size_t self) {
    Matrix g = t.grad(self);
    for (double& v : g.data()) v *= factor;
    t.accumulate(ia, g);
  });
}

Var add_row(Var a, Var row) {
  require_same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError("add_row: row " + shape_str(row.value()) + " for " + shape_str(a.value()));
  }
  Matrix out = a.value();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += row.value()(0, c);
  const std::size_t ia = a.id(), ir = row.id();
  return a.tape().record(std::move(out), {ia, ir}, [ia, ir](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    t.accumulate(ia, g);
    if (t.requires_grad(ir)) {
      Matrix d(1, g.cols());
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) d(0, c) += g(r, c);
      t.accumulate(ir, d);
    }
  });
}

Var sub_scalar(Var a, Var s) {
  require_same_tape(a, s);
  const double sv = s.value().scalar();
  Matrix out = a.value();
  for (double& v : out.data()) v -= sv;
  const std::size_t ia = a.id(), is = s.id();
  return a.tape().record(std::move(out), {ia, is}, [ia, is](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    t.accumulate(ia, g);
    double total = 0.0;
    for (double v : g.data()) total += v;
    t.accumulate(is, Matrix(1, 1, -total));
  });
}

Var mul_rows(Var a, Var s) {
  require_same_tape(a, s);
  if (s.rows() != a.rows() || s.cols() != 1) {
    throw ShapeError("mul_rows: scale " + shape_str(s.value()) + " for " + shape_str(a.value()));
  }
  Matrix out = a.value();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (double& v : out.row(r)) v *= s.value()(r, 0);
  const std::size_t ia = a.id(), is = s.id();
  return a.tape().record(std::move(out), {ia, is}, [ia, is](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& va = t.value(ia);
    const Matrix& vs = t.value(is);
    if (t.requires_grad(ia)) {
      Matrix d = g;
      for (std::size_t r = 0; r < d.rows(); ++r)
        for (double& v : d.row(r)) v *= vs(r, 0);
      t.accumulate(ia, d);
    }
    if (t.requires_grad(is)) {
      Matrix d(vs.rows(), 1);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) d(r, 0) += g(r, c) * va(r, c);
      t.accumulate(is, d);
    }
  });
}

Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  const std::size_t ia = a.id();
  return a.tape().record(Matrix(1, 1, total), {ia}, [ia](Tape& t, std::size_t self) {
    const Matrix& va = t.value(ia);
    t.accumulate(ia, Matrix(va.rows(), va.cols(), t.grad(self)(0, 0)));
  });
}

Var mean(Var a) {
  if (a.value().empty()) throw ShapeError("mean of an empty matrix");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var sum_rows(Var a) {
  const Matrix& va = a.value();
  Matrix out(1, va.cols());
  for (std::size_t r = 0; r < va.rows(); ++r)
    for (std::size_t c = 0; c < va.cols(); ++c) out(0, c) += va(r, c);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& va = t.value(ia);
    Matrix d(va.rows(), va.cols());
    for (std::size_t r = 0; r < d.rows(); ++r)
      for (std::size_t c = 0; c < d.cols(); ++c) d(r, c) = g(0, c);
    t.accumulate(ia, d);
  });
}

Var gather_rows(Var a, std::span<const std::size_t> rows) {
  const Matrix& va = a.value();
  Matrix out(rows.size(), va.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= va.rows()) throw ShapeError("gather_rows: row index out of range");
    std::copy(va.row(rows[i]).begin(), va.row(rows[i]).end(), out.row(i).begin());
  }
  const std::size_t ia = a.id();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return a.tape().record(std::move(out), {ia}, [ia, idx](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix& dst = t.grad_mut(ia);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < g.cols(); ++c) dst(idx[i], c) += g(i, c);
  });
}

Var pick(Var a, std::span<const std::size_t> cols) {
  const Matrix& va = a.value();
  if (cols.size() != va.rows()) throw ShapeError("pick: one column index per row required");
  Matrix out(va.rows(), 1);
  for (std::size_t r = 0; r < va.rows(); ++r) {
    if (cols[r] >= va.cols()) throw ShapeError("pick: column index out of range");
    out(r, 0) = va(r, cols[r]);
  }
  const std::size_t ia = a.id();
  std::vector<std::size_t> idx(cols.begin(), cols.end());
  return a.tape().record(std::move(out), {ia}, [ia, idx](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix& dst = t.grad_mut(ia);
    for (std::size_t r = 0; r < idx.size(); ++r) dst(r, idx[r]) += g(r, 0);
  });
}

Var softmax_rows(Var a) {
  const std::size_t ia = a.id();
  return a.tape().record(damex::softmax_rows(a.value()), {ia}, [ia](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& p = t.value(self);
    Matrix d(p.rows(), p.cols());
    for (std::size_t r = 0; r < p.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < p.cols(); ++c) dot += g(r, c) * p(r, c);
      for (std::size_t c = 0; c < p.cols(); ++c) d(r, c) = p(r, c) * (g(r, c) - dot);
    }
    t.accumulate(ia, d);
  });
}

Var log_softmax_rows(Var a) {
  const Matrix& va = a.value();
  Matrix out(va.rows(), va.cols());
  for (std::size_t r = 0; r < va.rows(); ++r) {
    const auto row = va.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (double v : row) total += std::exp(v - mx);
    const double lse = mx + std::log(total);
    for (std::size_t c = 0; c < va.cols(); ++c) out(r, c) = va(r, c) - lse;
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& lp = t.value(self);
    Matrix d(lp.rows(), lp.cols());
    for (std::size_t r = 0; r < lp.rows(); ++r) {
      double gsum = 0.0;
      for (std::size_t c = 0; c < lp.cols(); ++c) gsum += g(r, c);
      for (std::size_t c = 0; c < lp.cols(); ++c) d(r, c) = g(r, c) - std::exp(lp(r, c)) * gsum;
    }
    t.accumulate(ia, d);
  });
}

Var log_clamped(Var a, double floor) {
  Matrix out = a.value();
  for (double& v : out.data()) v = std::log(std::max(v, floor));
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, floor](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& va = t.value(ia);
    Matrix d(va.rows(), va.cols());
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double x = va.data()[i];
      d.data()[i] = x > floor ? g.data()[i] / x : 0.0;
    }
    t.accumulate(ia, d);
  });
}

Var gelu(Var a) {
  Matrix out = a.value();
  for (double& v : out.data()) v = damex::gelu(v);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& va = t.value(ia);
    Matrix d(va.rows(), va.cols());
    for (std::size_t i = 0; i < d.size(); ++i)
      d.data()[i] = g.data()[i] * gelu_derivative(va.data()[i]);
    t.accumulate(ia, d);
  });
}

Var normal_cdf(Var a, double sigma) {
  Matrix out = a.value();
  for (double& v : out.data()) v = damex::normal_cdf(v, sigma);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, sigma](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& va = t.value(ia);
    Matrix d(va.rows(), va.cols());
    for (std::size_t i = 0; i < d.size(); ++i)
      d.data()[i] = g.data()[i] * damex::normal_pdf(va.data()[i], sigma);
    t.accumulate(ia, d);
  });
}

Var weighted_sum(Var a, const Matrix& weights) {
  if (!a.value().same_shape(weights)) throw ShapeError("weighted_sum: shape mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) total += a.value().data()[i] * weights.data()[i];
  const std::size_t ia = a.id();
  return a.tape().record(Matrix(1, 1, total), {ia}, [ia, weights](Tape& t, std::size_t self) {
    Matrix d = weights;
    const double g = t.grad(self)(0, 0);
    for (double& v : d.data()) v *= g;
    t.accumulate(ia, d);
  });
}

}  // namespace ad
}  // namespace damex
