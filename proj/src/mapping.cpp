// SPDX-License-Identifier: Apache-2.0
#include "damex/mapping.hpp"

#include <algorithm>
#include <charconv>
#include <numeric>
#include <random>
#include <sstream>

#include "damex/error.hpp"

namespace damex {

namespace {

bool parse_int(std::string_view s, long long& out) {
  s = trim(s);
  if (s.empty()) return false;
  const auto* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

}  // namespace

void MappingTable::assign(int dataset_id, std::vector<std::size_t> experts) {
  if (experts.empty()) throw MappingError("dataset " + std::to_string(dataset_id) + ": empty entry");
  if (entries_.contains(dataset_id)) {
    throw MappingError("dataset " + std::to_string(dataset_id) + " mapped twice");
  }
  std::sort(experts.begin(), experts.end());
  for (std::size_t i = 0; i < experts.size(); ++i) {
    if (experts[i] >= num_experts_) {
      throw MappingError("dataset " + std::to_string(dataset_id) + ": expert " +
                         std::to_string(experts[i]) + " out of range for " +
                         std::to_string(num_experts_) + " experts");
    }
    if (i > 0 && experts[i] == experts[i - 1]) {
      throw MappingError("dataset " + std::to_string(dataset_id) + ": expert " +
                         std::to_string(experts[i]) + " listed twice");
    }
  }
  entries_.emplace(dataset_id, std::move(experts));
}

const std::vector<std::size_t>& MappingTable::experts_for(int dataset_id) const {
  const auto it = entries_.find(dataset_id);
  if (it == entries_.end()) throw MappingError("dataset " + std::to_string(dataset_id) + " is unmapped");
  return it->second;
}

bool MappingTable::maps_to(int dataset_id, std::size_t expert) const {
  const auto& experts = experts_for(dataset_id);
  return std::binary_search(experts.begin(), experts.end(), expert);
}

std::vector<int> MappingTable::dataset_ids() const {
  std::vector<int> ids;
  ids.reserve(entries_.size());
  for (const auto& [id, _] : entries_) ids.push_back(id);
  return ids;
}

MappingTable parse_mapping(std::span<const ConfigEntry> entries, std::size_t num_experts) {
  MappingTable table(num_experts);
  for (const ConfigEntry& e : entries) {
    if (!e.key.starts_with("dataset.")) continue;
    const auto parts = split(e.key, '.');
    long long id = 0;
    if (parts.size() != 3 || parts[2] != "experts" || !parse_int(parts[1], id)) {
      throw ConfigError("expected `dataset.<id>.experts`, got `" + e.key + "`", e.line);
    }
    if (table.contains(static_cast<int>(id))) {
      throw ConfigError("duplicate mapping for dataset " + std::to_string(id), e.line);
    }
    std::vector<std::size_t> experts;
    if (!trim(e.value).empty()) {
      for (const std::string& tok : split(e.value, ',')) {
        long long ex = 0;
        if (!parse_int(tok, ex) || ex < 0) {
          throw ConfigError("bad expert id `" + tok + "`", e.line);
        }
        experts.push_back(static_cast<std::size_t>(ex));
      }
    }
    try {
      table.assign(static_cast<int>(id), std::move(experts));
    } catch (const MappingError& err) {
      throw ConfigError(err.what(), e.line);
    }
  }
  return table;
}

MappingTable parse_mapping(std::string_view text, std::size_t num_experts) {
  const auto entries = parse_key_values(text);
  for (const ConfigEntry& e : entries) {
    if (!e.key.starts_with("dataset.")) throw ConfigError("unexpected key `" + e.key + "`", e.line);
  }
  return parse_mapping(std::span<const ConfigEntry>(entries), num_experts);
}

std::string serialize_mapping(const MappingTable& table) {
  std::ostringstream out;
  for (const auto& [id, experts] : table.entries()) {
    out << "dataset." << id << ".experts = ";
    for (std::size_t i = 0; i < experts.size(); ++i) out << (i ? "," : "") << experts[i];
    out << '\n';
  }
  return out.str();
}

std::vector<double> target_distribution(const MappingTable& table, int dataset_id) {
  const auto& experts = table.experts_for(dataset_id);
  std::vector<double> q(table.num_experts(), 0.0);
  const double mass = 1.0 / static_cast<double>(experts.size());
  // The last mapped expert takes the remainder so that a left-to-right sum is
  // exactly 1 for every entry size (n * (1/n) is not always 1 in binary).
  double assigned = 0.0;
  for (std::size_t i = 0; i + 1 < experts.size(); ++i) {
    q[experts[i]] = mass;
    assigned += mass;
  }
  q[experts.back()] = 1.0 - assigned;
  return q;
}

MappingTable randomize_mapping(const MappingTable& table, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  MappingTable out(table.num_experts());
  std::vector<std::size_t> pool(table.num_experts());
  for (const auto& [id, experts] : table.entries()) {
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    std::shuffle(pool.begin(), pool.end(), rng);
    out.assign(id, std::vector<std::size_t>(pool.begin(), pool.begin() + experts.size()));
  }
  return out;
}

}  // namespace damex
