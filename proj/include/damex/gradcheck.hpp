// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "damex/autodiff.hpp"

namespace damex {

/// Builds a scalar loss on `tape` from leaves bound to the parameters.
using LossBuilder = std::function<Var(Tape& tape, std::span<const Var> params)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
};

/// Optional hook applied to the analytic gradients before comparison. Used
/// as a negative control to make sure corrupted gradients are detected.
using GradientTamper = std::function<void(std::vector<Matrix>& grads)>;

/// Compares reverse-mode gradients against central differences
/// (f(t + eps) - f(t - eps)) / 2eps, coordinate by coordinate. The relative
/// error denominator is max(|analytic|, |numeric|, 1e-8).
///
/// Throws ParameterError when eps is outside [1e-7, 1e-3] and EvaluationError
/// when the loss is non-finite at any evaluation point.
GradCheckResult finite_diff_check(const LossBuilder& f, std::span<const Matrix> params, double eps,
                                  const GradientTamper& tamper = {});

GradCheckResult finite_diff_check(const std::function<Var(Tape&, Var)>& f, const Matrix& theta,
                                  double eps);

/// Reverse-mode gradients of f at params.
std::vector<Matrix> analytic_gradients(const LossBuilder& f, std::span<const Matrix> params,
                                       double* value = nullptr);

double evaluate_loss(const LossBuilder& f, std::span<const Matrix> params);

}  // namespace damex
