// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "damex/config.hpp"
#include "damex/data.hpp"
#include "damex/losses.hpp"
#include "damex/metrics.hpp"
#include "damex/model.hpp"

namespace damex {

/// splitmix64 step: independent seeds for the streams of one run.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

/// Fixed-rate SGD, or Adam (beta1 0.9, beta2 0.999, eps 1e-8).
class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& cfg) : kind_(cfg.optimizer), lr_(cfg.lr) {}
  void step(const std::vector<NamedParam>& params, const std::vector<Matrix>& grads);

 private:
  OptimizerKind kind_;
  double lr_;
  std::size_t t_ = 0;
  std::vector<Matrix> m_, v_;
};

/// Draws batches that mix datasets in proportion to their size, with at
/// least one token from every dataset. Each dataset's pool is walked in a
/// shuffled order that is reshuffled when exhausted.
class BatchSampler {
 public:
  BatchSampler(const TokenBatch& pool, std::size_t batch, std::uint64_t seed);
  TokenBatch next();
  const std::map<int, std::size_t>& quotas() const noexcept { return quota_; }

 private:
  const TokenBatch& pool_;
  std::mt19937_64 rng_;
  std::map<int, std::vector<std::size_t>> rows_;
  std::map<int, std::size_t> cursor_;
  std::map<int, std::size_t> quota_;
};

struct StepRecord {
  std::size_t step = 0;
  LossBundle losses;
  double drop_rate = 0.0;  // mean over MoE layers
};

struct EvalRecord {
  std::size_t step = 0;
  std::map<int, double> accuracy;              // per dataset, foreground tokens
  std::vector<std::map<int, double>> purity;   // per MoE layer
  std::vector<UtilizationMatrix> utilization;  // per MoE layer
  std::vector<double> collapse;                // per MoE layer
  std::vector<double> drop_rate;               // per MoE layer

  /// Mean purity over layers and datasets.
  double mean_purity() const;
  double max_collapse() const;
};

struct RunMetrics {
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;

  /// Long format: kind,step,layer,dataset,expert,metric,value.
  std::string to_csv() const;
};

/// Evaluates with router dispatch on the whole batch. Purity and
/// utilization are skipped when the mapping is empty.
EvalRecord evaluate(const Model& model, const TokenBatch& batch, const MappingTable& mapping,
                    std::size_t step = 0);

struct TrainResult {
  Model model;
  RunMetrics metrics;
};

/// Mini-batch training, deterministic for (config, data, seed). Throws
/// NumericalError (carrying a CSV dump of the batch) on a non-finite loss
/// or gradient, and ConfigError when the data does not fit the config.
TrainResult train(const RunConfig& config, const Mixture& data, std::uint64_t seed);

/// Checkpoint text: `DAMEX-CKPT v1`, the resolved config, then one
/// name/shape/values record per parameter with 17 significant digits.
std::string checkpoint_text(const RunConfig& config, const Model& model);

struct Checkpoint {
  RunConfig config;
  Model model;
};

/// Throws ConfigError on malformed input.
Checkpoint parse_checkpoint(std::string_view text);
void save_checkpoint(const std::string& path, const RunConfig& config, const Model& model);
Checkpoint load_checkpoint(const std::string& path);

/// Throws ConfigError when a dataset id in the batch has no mapping entry
/// or a label falls outside the model's label space.
void check_batch(const TokenBatch& batch, const RunConfig& config);

}  // namespace damex
