// SPDX-License-Identifier: Apache-2.0
//
// The dataset -> expert mapping. A dataset may own one expert, share an
// expert with other datasets, or spread over several experts with equal
// probability.
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "damex/keyvalue.hpp"

namespace damex {

class MappingTable {
 public:
  MappingTable() = default;
  explicit MappingTable(std::size_t num_experts) : num_experts_(num_experts) {}

  /// Adds an entry. Expert ids are stored in ascending order. Throws
  /// MappingError for an empty list, an out-of-range or repeated expert id,
  /// or a dataset that is already mapped.
  void assign(int dataset_id, std::vector<std::size_t> experts);

  bool contains(int dataset_id) const { return entries_.contains(dataset_id); }
  /// Throws MappingError when the dataset is unmapped.
  const std::vector<std::size_t>& experts_for(int dataset_id) const;
  bool maps_to(int dataset_id, std::size_t expert) const;

  std::size_t num_experts() const noexcept { return num_experts_; }
  std::size_t num_datasets() const noexcept { return entries_.size(); }
  std::vector<int> dataset_ids() const;
  const std::map<int, std::vector<std::size_t>>& entries() const noexcept { return entries_; }

  bool operator==(const MappingTable&) const = default;

 private:
  std::size_t num_experts_ = 0;
  std::map<int, std::vector<std::size_t>> entries_;
};

/// Reads `dataset.<id>.experts = <e>[,<e>...]` lines. Any other key is an error.
MappingTable parse_mapping(std::string_view text, std::size_t num_experts);
/// Builds a table from the `dataset.*` entries of an already-lexed config;
/// other keys are ignored. Errors carry the source line.
MappingTable parse_mapping(std::span<const ConfigEntry> entries, std::size_t num_experts);

std::string serialize_mapping(const MappingTable& table);

/// Length-E distribution: uniform over the mapped experts, zero elsewhere.
std::vector<double> target_distribution(const MappingTable& table, int dataset_id);

/// Random-assignment baseline: each dataset keeps its entry size but draws
/// its experts uniformly without replacement.
MappingTable randomize_mapping(const MappingTable& table, std::uint64_t seed);

}  // namespace damex
