// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: a `key = value` file with `model.*`, `loss.*`,
// `data.*`, `train.*` and `dataset.<id>.experts` keys. Unknown keys are
// rejected with their line number.
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

#include "damex/dispatch.hpp"
#include "damex/feedforward.hpp"
#include "damex/losses.hpp"
#include "damex/mapping.hpp"

namespace damex {

struct ModelConfig {
  std::size_t dim = 16;
  std::size_t hidden = 32;
  std::size_t blocks = 4;
  std::size_t classes = 8;
  RoutingConfig routing;
  Activation activation = Activation::gelu;
  ExecutionPolicy execution = ExecutionPolicy::serial;
  double router_init = 0.01;  // std of the router weights at init
  double out_init = 0.05;     // scale of the second-layer weights at init

  /// Blocks with odd index (1, 3, ...) are MoE blocks.
  static bool is_moe_block(std::size_t block) noexcept { return block % 2 == 1; }
  std::size_t moe_layers() const noexcept { return blocks / 2; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

enum class OptimizerKind { sgd, adam };

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch = 64;
  double lr = 1e-2;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::sgd;
  std::size_t eval_every = 0;  // 0: evaluate once, after the last step
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct DataConfig {
  std::string preset = "domains";  // domains | limited | divergent | csv
  std::uint64_t seed = 0;
  std::size_t shots = 50;
  std::size_t train_per_dataset = 1000;
  std::size_t eval_per_dataset = 500;
  std::string train_csv;
  std::string eval_csv;
  void validate() const;
  bool operator==(const DataConfig&) const = default;
};

struct RunConfig {
  ModelConfig model;
  LossConfig loss;
  DataConfig data;
  TrainConfig train;
  MappingTable mapping{2};

  /// Cross-section checks, e.g. mapping built for model.experts.
  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

/// Throws ConfigError (with line number where one applies).
RunConfig parse_run_config(std::string_view text);
RunConfig load_run_config(const std::string& path);

/// Every key with its effective value; parse_run_config(to_text(c)) == c.
std::string to_text(const RunConfig& config);

std::string format_double(double v);

std::string to_string(DispatchMode mode);
std::string to_string(OptimizerKind kind);

}  // namespace damex
