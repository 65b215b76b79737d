// SPDX-License-Identifier: Apache-2.0
//
// Routing analysis over evaluated MoE layers.
//   purity       share of a dataset's masked tokens whose top expert is mapped to it
//   utilization  per dataset, the mean router probability vector
//   collapse     1 - H(expert usage) / ln E; 0 for uniform usage, 1 for a single expert
#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <vector>

#include "damex/dispatch.hpp"
#include "damex/mapping.hpp"

namespace damex {

/// Purity per dataset that has at least one row in `rows`.
std::map<int, double> routing_purity(const DispatchPlan& plan, std::span<const int> dataset_ids,
                                     const MappingTable& mapping, std::span<const std::size_t> rows);

std::vector<std::map<int, double>> routing_purity(std::span<const DispatchPlan> plans,
                                                  std::span<const int> dataset_ids,
                                                  const MappingTable& mapping,
                                                  std::span<const std::size_t> rows);

struct UtilizationMatrix {
  std::vector<int> datasets;  // row order
  Matrix weights;             // |D| x E
  std::vector<bool> present;  // false when the dataset had no masked token
};

/// Rows follow the mapping's dataset order; unmapped dataset ids in the
/// batch raise MappingError.
UtilizationMatrix utilization_matrix(const Matrix& probs, std::span<const int> dataset_ids,
                                     const MappingTable& mapping, std::span<const std::size_t> rows);

/// Usage counts every top-k selection of the masked tokens, dropped or not.
/// A single-expert layer scores 0.
double collapse_score(const DispatchPlan& plan, std::span<const std::size_t> rows);
std::vector<double> collapse_score(std::span<const DispatchPlan> plans,
                                   std::span<const std::size_t> rows);

}  // namespace damex
