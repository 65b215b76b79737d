// SPDX-License-Identifier: Apache-2.0
#include "damex/gating.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "damex/error.hpp"

namespace damex {

void RouterParams::validate() const {
  if (!all_finite(weights)) throw ParameterError("router weights must be finite");
  if (!(gate_noise >= 0.0)) throw ParameterError("gate_noise must be >= 0");
}

TopK select_top_k(const Matrix& probs, std::size_t k) {
  const std::size_t experts = probs.cols();
  if (k < 1 || k > experts) {
    throw ParameterError("k=" + std::to_string(k) + " outside [1, " + std::to_string(experts) + "]");
  }
  TopK out(probs.rows());
  std::vector<std::size_t> order(experts);
  for (std::size_t t = 0; t < probs.rows(); ++t) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return probs(t, a) > probs(t, b); });
    out[t].reserve(k);
    for (std::size_t r = 0; r < k; ++r) out[t].push_back({order[r], probs(t, order[r])});
  }
  return out;
}

TopK select_top_k(const GateOutput& gate, std::size_t k) { return select_top_k(gate.probs, k); }

GateOutput gate(const Matrix& features, const RouterParams& router, std::size_t k) {
  if (features.cols() != router.weights.cols()) {
    throw ShapeError("token dimension " + std::to_string(features.cols()) +
                     " does not match router dimension " + std::to_string(router.weights.cols()));
  }
  GateOutput out;
  out.logits = matmul(features, transpose(router.weights));
  out.probs = softmax_rows(out.logits);
  out.topk = select_top_k(out.probs, k);
  return out;
}

GateOutput gate(const TokenBatch& tokens, const RouterParams& router, std::size_t k) {
  return gate(tokens.features, router, k);
}

GateVars gate(Var tokens, Var weights) {
  if (tokens.cols() != weights.cols()) {
    throw ShapeError("token dimension " + std::to_string(tokens.cols()) +
                     " does not match router dimension " + std::to_string(weights.cols()));
  }
  const Var logits = ad::matmul(tokens, ad::transpose(weights));
  return {logits, ad::softmax_rows(logits)};
}

}  // namespace damex
