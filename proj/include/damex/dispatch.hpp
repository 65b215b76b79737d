// SPDX-License-Identifier: Apache-2.0
//
// Capacity-constrained dispatch of tokens to expert buffers and the weighted
// combine y = sum_i p_i(x) e_i(x) over the experts a token reached.
//
// Buffers fill first-come-first-served in batch order. A token whose expert
// buffer is full is dropped for that expert; a fully dropped token yields a
// zero vector so only the residual path carries it forward.
#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "damex/autodiff.hpp"
#include "damex/feedforward.hpp"
#include "damex/gating.hpp"
#include "damex/mapping.hpp"

namespace damex {

enum class DispatchMode { router_argmax, forced_mapping };

/// Expert evaluation for a fixed plan. Results are bitwise identical under
/// both policies: experts are computed independently and combined in
/// ascending expert order.
enum class ExecutionPolicy { serial, parallel };

struct RoutingConfig {
  std::size_t num_experts = 2;
  std::size_t k = 1;
  double capacity_factor = 1.25;
  DispatchMode dispatch_mode = DispatchMode::router_argmax;

  /// Throws ParameterError unless E >= 1, 1 <= k <= E and f > 0.
  void validate() const;
  bool operator==(const RoutingConfig&) const = default;
};

/// C = ceil(f * k * T / E).
std::size_t capacity(std::size_t tokens, const RoutingConfig& cfg);

inline constexpr std::size_t kDroppedSlot = std::numeric_limits<std::size_t>::max();

struct Assignment {
  std::size_t expert = 0;
  double weight = 0.0;  // gating probability p_expert(x)
  std::size_t slot = kDroppedSlot;

  bool dropped() const noexcept { return slot == kDroppedSlot; }
  bool operator==(const Assignment&) const = default;
};

struct DispatchPlan {
  std::size_t num_experts = 0;
  std::size_t capacity = 0;
  std::vector<std::vector<Assignment>> tokens;  // per token, in top-k rank order
  std::vector<std::size_t> occupancy;           // per expert

  std::size_t num_tokens() const noexcept { return tokens.size(); }
  /// True when every assignment of the token was dropped.
  bool dropped(std::size_t token) const;
  std::size_t dropped_assignments() const;
  /// Highest-ranked expert chosen for the token, whether or not it was dropped.
  std::size_t selected_expert(std::size_t token) const { return tokens.at(token).front().expert; }
  /// Token indices held by each expert, in slot order.
  std::vector<std::vector<std::size_t>> expert_buffers() const;

  bool operator==(const DispatchPlan&) const = default;
};

/// router_argmax: top-k from the gate probabilities. forced_mapping: the
/// expert is drawn uniformly (seeded) from the token's mapped experts and the
/// combine weight is still the router probability; requires k = 1.
///
/// Throws ConfigError when forced_mapping has no mapping (or k != 1),
/// MappingError for unmapped datasets and ContractError on size mismatches.
DispatchPlan build_plan(const GateOutput& gate, const RoutingConfig& cfg,
                        const MappingTable* mapping, std::span<const int> dataset_ids,
                        std::uint64_t seed = 0);

struct ExpertSet {
  std::vector<FeedForward> experts;
  Activation activation = Activation::gelu;

  std::size_t size() const noexcept { return experts.size(); }
};

/// Differentiable dispatch/combine. `probs` is the T x E router output whose
/// entries scale each expert's output; gradients flow into the tokens, the
/// probabilities and every expert parameter.
Var moe_forward(Var tokens, Var probs, std::span<const FeedForwardVars> experts, Activation act,
                const DispatchPlan& plan, ExecutionPolicy policy = ExecutionPolicy::serial);

/// Value-level combine using the plan's stored weights.
Matrix moe_forward(const Matrix& tokens, const ExpertSet& experts, const DispatchPlan& plan,
                   ExecutionPolicy policy = ExecutionPolicy::serial);

struct DispatchStats {
  std::vector<std::size_t> counts;  // per expert
  std::size_t dropped = 0;          // dropped assignments
  double drop_rate = 0.0;           // dropped / (T * k)
  double occupancy_cov = 0.0;       // population std / mean of counts
};

DispatchStats dispatch_stats(const DispatchPlan& plan);

}  // namespace damex
