// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference verification of every loss on randomized small
// instances: importance, load, load_balancing, damex, task and the full
// model objective (every parameter of a dense block, an MoE block and the
// classification head) on a 4-token batch.
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace damex {

struct GradSuiteOptions {
  std::uint64_t seed = 0;
  double eps = 1e-5;
  std::size_t instances = 100;
  double tolerance = 1e-4;
  /// Negative control: perturbs the analytic gradient of the named check.
  std::string corrupt;
};

struct GradSuiteCheck {
  std::string name;
  double max_relative_error = 0.0;
  std::size_t instances = 0;
  bool passed = false;
  /// Coordinate behind max_relative_error, for diagnosing failures near the
  /// finite-difference noise floor.
  std::size_t worst_instance = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

std::vector<GradSuiteCheck> run_gradcheck_suite(const GradSuiteOptions& options);

const std::vector<std::string>& gradcheck_names();

}  // namespace damex
