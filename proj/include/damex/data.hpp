// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multi-dataset mixtures and the token CSV format.
//
// A foreground token of class c from dataset d is drawn as
//   domain_offset(d) + mean(c) + spread(c) * N(0, I),
// a background token as domain_offset(d) + background_spread * N(0, I).
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "damex/config.hpp"
#include "damex/token_batch.hpp"

namespace damex {

struct ClassCluster {
  int label = 0;
  std::vector<double> mean;
  double spread = 1.0;
};

struct DatasetSpec {
  int dataset_id = 0;
  std::size_t num_train = 0;  // foreground training tokens
  std::size_t num_eval = 0;   // foreground evaluation tokens
  std::vector<ClassCluster> classes;
  std::vector<double> domain_offset;
  double background_fraction = 0.2;  // share of background tokens in the split
  double background_spread = 1.0;

  /// Throws ConfigError for empty class lists, non-positive counts or
  /// spreads, or inconsistent dimensions.
  void validate(std::size_t dim) const;
};

struct Mixture {
  TokenBatch train;
  TokenBatch eval;
};

/// Deterministic for a given seed. Foreground classes are balanced
/// round-robin within each dataset; each split is shuffled.
Mixture generate_mixture(std::span<const DatasetSpec> specs, std::uint64_t seed);

/// Presets: `domains` (shared labels, separate domain offsets), `divergent`
/// (shared offset, disjoint labels) and `limited` (a large dataset plus a
/// minority dataset with `shots` foreground training tokens).
std::vector<DatasetSpec> preset_specs(const std::string& preset, std::size_t dim,
                                      const DataConfig& data);

/// Builds the mixture a run config describes (preset or CSV files).
Mixture load_mixture(const RunConfig& config);

/// Header `dataset_id,foreground,label,f0..f{D-1}`, label empty for background.
std::string tokens_to_csv(const TokenBatch& batch);
/// Throws ConfigError with the offending line.
TokenBatch tokens_from_csv(std::string_view text);
void write_tokens_csv(const std::string& path, const TokenBatch& batch);
TokenBatch read_tokens_csv(const std::string& path);

}  // namespace damex
