// SPDX-License-Identifier: Apache-2.0
#include "damex/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "damex/error.hpp"

namespace damex {

double evaluate_loss(const LossBuilder& f, std::span<const Matrix> params) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const Matrix& p : params) vars.push_back(tape.constant(p));
  const double v = f(tape, vars).value().scalar();
  if (!std::isfinite(v)) throw EvaluationError("loss is not finite at the evaluation point");
  return v;
}

std::vector<Matrix> analytic_gradients(const LossBuilder& f, std::span<const Matrix> params,
                                       double* value) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const Matrix& p : params) vars.push_back(tape.leaf(p));
  const Var root = f(tape, vars);
  const double v = root.value().scalar();
  if (!std::isfinite(v)) throw EvaluationError("loss is not finite at the evaluation point");
  if (value != nullptr) *value = v;
  tape.backward(root);
  std::vector<Matrix> grads;
  grads.reserve(vars.size());
  for (const Var& v : vars) grads.push_back(v.grad());
  return grads;
}

GradCheckResult finite_diff_check(const LossBuilder& f, std::span<const Matrix> params, double eps,
                                  const GradientTamper& tamper) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw ParameterError("eps must lie in [1e-7, 1e-3]");
  std::vector<Matrix> grads = analytic_gradients(f, params);
  if (tamper) tamper(grads);

  std::vector<Matrix> probe(params.begin(), params.end());
  GradCheckResult result;
  for (std::size_t p = 0; p < probe.size(); ++p) {
    for (std::size_t i = 0; i < probe[p].size(); ++i) {
      const double saved = probe[p].data()[i];
      probe[p].data()[i] = saved + eps;
      const double up = evaluate_loss(f, probe);
      probe[p].data()[i] = saved - eps;
      const double down = evaluate_loss(f, probe);
      probe[p].data()[i] = saved;

      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = grads[p].data()[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic - numeric) / denom;
      ++result.coordinates;
      if (rel > result.max_relative_error || result.coordinates == 1) {
        result.max_relative_error = rel;
        result.worst_param = p;
        result.worst_index = i;
        result.worst_analytic = analytic;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

GradCheckResult finite_diff_check(const std::function<Var(Tape&, Var)>& f, const Matrix& theta,
                                  double eps) {
  const LossBuilder wrapped = [&f](Tape& tape, std::span<const Var> params) {
    return f(tape, params[0]);
  };
  return finite_diff_check(wrapped, std::span<const Matrix>(&theta, 1), eps);
}

}  // namespace damex
