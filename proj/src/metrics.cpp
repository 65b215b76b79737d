// SPDX-License-Identifier: Apache-2.0
#include "damex/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "damex/error.hpp"

namespace damex {

std::map<int, double> routing_purity(const DispatchPlan& plan, std::span<const int> dataset_ids,
                                     const MappingTable& mapping, std::span<const std::size_t> rows) {
  std::map<int, std::pair<std::size_t, std::size_t>> tally;  // hits, total
  for (std::size_t t : rows) {
    const int d = dataset_ids[t];
    auto& [hits, total] = tally[d];
    hits += mapping.maps_to(d, plan.selected_expert(t)) ? 1 : 0;
    ++total;
  }
  std::map<int, double> out;
  for (const auto& [d, ht] : tally) {
    out[d] = static_cast<double>(ht.first) / static_cast<double>(ht.second);
  }
  return out;
}

std::vector<std::map<int, double>> routing_purity(std::span<const DispatchPlan> plans,
                                                  std::span<const int> dataset_ids,
                                                  const MappingTable& mapping,
                                                  std::span<const std::size_t> rows) {
  std::vector<std::map<int, double>> out;
  for (const DispatchPlan& p : plans) out.push_back(routing_purity(p, dataset_ids, mapping, rows));
  return out;
}

UtilizationMatrix utilization_matrix(const Matrix& probs, std::span<const int> dataset_ids,
                                     const MappingTable& mapping, std::span<const std::size_t> rows) {
  UtilizationMatrix u;
  u.datasets = mapping.dataset_ids();
  std::map<int, std::size_t> index;
  for (std::size_t i = 0; i < u.datasets.size(); ++i) index[u.datasets[i]] = i;
  u.weights = Matrix(u.datasets.size(), probs.cols());
  std::vector<std::size_t> counts(u.datasets.size(), 0);
  for (std::size_t t : rows) {
    const auto it = index.find(dataset_ids[t]);
    if (it == index.end()) {
      throw MappingError("dataset " + std::to_string(dataset_ids[t]) + " is unmapped");
    }
    ++counts[it->second];
    for (std::size_t e = 0; e < probs.cols(); ++e) u.weights(it->second, e) += probs(t, e);
  }
  u.present.resize(u.datasets.size());
  for (std::size_t i = 0; i < u.datasets.size(); ++i) {
    u.present[i] = counts[i] > 0;
    if (!u.present[i]) continue;
    for (double& v : u.weights.row(i)) v /= static_cast<double>(counts[i]);
  }
  return u;
}

double collapse_score(const DispatchPlan& plan, std::span<const std::size_t> rows) {
  if (plan.num_experts < 2) return 0.0;
  std::vector<double> usage(plan.num_experts, 0.0);
  double total = 0.0;
  for (std::size_t t : rows) {
    for (const Assignment& a : plan.tokens.at(t)) {
      usage[a.expert] += 1.0;
      total += 1.0;
    }
  }
  if (total == 0.0) return 0.0;
  double entropy = 0.0;
  for (double u : usage) {
    if (u == 0.0) continue;
    const double p = u / total;
    entropy -= p * std::log(p);
  }
  const double score = 1.0 - entropy / std::log(static_cast<double>(plan.num_experts));
  return std::clamp(score, 0.0, 1.0);
}

std::vector<double> collapse_score(std::span<const DispatchPlan> plans,
                                   std::span<const std::size_t> rows) {
  std::vector<double> out;
  for (const DispatchPlan& p : plans) out.push_back(collapse_score(p, rows));
  return out;
}

}  // namespace damex
