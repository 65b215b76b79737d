// SPDX-License-Identifier: Apache-2.0
//
// Task and auxiliary routing losses. Every function records on a tape so the
// result can be differentiated; the Matrix overloads evaluate values only.
//
//   importance      Var(I)/Mean(I)^2, I_i = sum_x p_i(x)
//   load            Var(L)/Mean(L)^2, L_i = sum_x Phi(p_i(x)), Phi ~ N(0, (noise/E)^2)
//   load_balancing  (importance + load) / 2
//   damex           mean_x of -sum_i q_i(x) log p_i(x), q uniform over h(dataset(x))
//
// Variances are population variances over the E experts. Only rows listed
// in `rows` (the foreground mask, usually) enter a loss.
#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "damex/autodiff.hpp"
#include "damex/mapping.hpp"

namespace damex {

enum class AuxMode { load_balancing, damex, both };

/// How a dataset mapped to several experts becomes a routing target: a soft
/// uniform distribution, or one expert sampled uniformly per token.
enum class DamexTargets { soft, sampled };

struct LossConfig {
  double aux_weight = 0.1;
  AuxMode aux_mode = AuxMode::damex;
  double gate_noise = 1.0;
  bool foreground_only = true;
  DamexTargets damex_targets = DamexTargets::soft;

  bool uses_load_balancing() const noexcept { return aux_mode != AuxMode::damex; }
  bool uses_damex() const noexcept { return aux_mode != AuxMode::load_balancing; }
  /// Throws ParameterError for a negative weight or non-positive gate noise
  /// while the load loss is active.
  void validate() const;
  bool operator==(const LossConfig&) const = default;
};

std::string to_string(AuxMode mode);
/// Throws ConfigError for unknown names.
AuxMode parse_aux_mode(const std::string& name);
std::string to_string(DamexTargets targets);
DamexTargets parse_damex_targets(const std::string& name);

struct LossBundle {
  double task = 0.0;
  double importance = 0.0;
  double load = 0.0;
  double load_balancing = 0.0;
  double damex = 0.0;
  double total = 0.0;
};

inline constexpr double kLogClamp = 1e-12;

/// Throws DegenerateBatchError when `rows` is empty.
Var importance_loss(Var probs, std::span<const std::size_t> rows);
/// Throws ParameterError when gate_noise <= 0.
Var load_loss(Var probs, double gate_noise, std::span<const std::size_t> rows);
Var load_balancing_loss(Var importance, Var load);
/// Throws MappingError for a dataset without a mapping entry. With a
/// sampler, each token's target is one expert drawn uniformly from its entry.
Var damex_loss(Var probs, std::span<const int> dataset_ids, const MappingTable& mapping,
               std::span<const std::size_t> rows, std::mt19937_64* sampler = nullptr);
/// Mean softmax cross-entropy of class logits against labels over `rows`.
Var task_loss(Var logits, std::span<const std::optional<int>> labels,
              std::span<const std::size_t> rows);

double importance_loss(const Matrix& probs, std::span<const std::size_t> rows);
double load_loss(const Matrix& probs, double gate_noise, std::span<const std::size_t> rows);
double load_balancing_loss(double importance, double load);
double damex_loss(const Matrix& probs, std::span<const int> dataset_ids,
                  const MappingTable& mapping, std::span<const std::size_t> rows);

/// Auxiliary terms of one MoE layer.
struct LayerAux {
  Var importance;
  Var load;
  Var damex;
  bool has_load = false;
  bool has_damex = false;
};

/// Computes every auxiliary term available for one layer: importance always,
/// load when gate_noise > 0, damex when a mapping is given.
LayerAux layer_aux_losses(Var probs, std::span<const int> dataset_ids, const MappingTable* mapping,
                          std::span<const std::size_t> rows, const LossConfig& cfg,
                          std::mt19937_64* sampler = nullptr);

struct TotalLoss {
  Var total;
  LossBundle bundle;
};

/// total = task + aux_weight * aux, where aux is load_balancing, damex or
/// their sum, each averaged over the MoE layers. Throws when the active mode
/// needs a term the layers do not carry.
TotalLoss total_loss(Var task, std::span<const LayerAux> layers, const LossConfig& cfg);

}  // namespace damex
