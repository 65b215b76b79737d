// SPDX-License-Identifier: Apache-2.0
//
// Router: logits = x W_r^T, probabilities = row softmax of the logits, and
// deterministic top-k selection (ties go to the lower expert index).
//
// No noise is added to the logits. gate_noise only sets the smoothing width
// of the load loss.
#pragma once

#include <cstddef>
#include <vector>

#include "damex/autodiff.hpp"
#include "damex/matrix.hpp"
#include "damex/token_batch.hpp"

namespace damex {

struct RouterParams {
  Matrix weights;  // E x D
  double gate_noise = 1.0;

  std::size_t num_experts() const noexcept { return weights.rows(); }
  /// Throws ParameterError for non-finite weights or negative gate noise.
  void validate() const;
};

struct ExpertChoice {
  std::size_t expert = 0;
  double probability = 0.0;
  bool operator==(const ExpertChoice&) const = default;
};

using TopK = std::vector<std::vector<ExpertChoice>>;

struct GateOutput {
  Matrix logits;  // T x E
  Matrix probs;   // T x E
  TopK topk;      // per token, length k, descending probability
};

/// Throws ShapeError if the token dimension differs from the router's.
GateOutput gate(const TokenBatch& tokens, const RouterParams& router, std::size_t k = 1);
GateOutput gate(const Matrix& features, const RouterParams& router, std::size_t k = 1);

/// Throws ParameterError unless 1 <= k <= E.
TopK select_top_k(const Matrix& probs, std::size_t k);
TopK select_top_k(const GateOutput& gate, std::size_t k);

struct GateVars {
  Var logits;
  Var probs;
};

/// Differentiable router on a tape; tokens is T x D, weights is E x D.
GateVars gate(Var tokens, Var weights);

}  // namespace damex
