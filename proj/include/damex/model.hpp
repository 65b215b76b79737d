// SPDX-License-Identifier: Apache-2.0
//
// Toy model: L residual blocks over token features, every second block an
// MoE block, followed by a linear head over the union label space.
//   dense block: h <- h + ffn(h)
//   MoE block:   h <- h + moe(h)
#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "damex/autodiff.hpp"
#include "damex/config.hpp"
#include "damex/dispatch.hpp"
#include "damex/gating.hpp"
#include "damex/losses.hpp"
#include "damex/token_batch.hpp"

namespace damex {

struct Block {
  bool moe = false;
  FeedForward dense;                 // dense blocks
  Matrix router;                     // MoE blocks: E x D
  std::vector<FeedForward> experts;  // MoE blocks

  bool operator==(const Block&) const = default;
};

struct NamedParam {
  std::string name;
  Matrix* value;
};

struct NamedConstParam {
  std::string name;
  const Matrix* value;
};

class Model {
 public:
  Model() = default;
  explicit Model(ModelConfig config);

  static Model init(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  std::vector<Block>& blocks() noexcept { return blocks_; }
  const std::vector<Block>& blocks() const noexcept { return blocks_; }
  Matrix& head_weights() noexcept { return head_w_; }
  Matrix& head_bias() noexcept { return head_b_; }
  const Matrix& head_weights() const noexcept { return head_w_; }
  const Matrix& head_bias() const noexcept { return head_b_; }

  /// Parameters in a fixed canonical order with stable names.
  std::vector<NamedParam> parameters();
  std::vector<NamedConstParam> parameters() const;

  bool operator==(const Model&) const = default;

 private:
  ModelConfig config_;
  std::vector<Block> blocks_;
  Matrix head_w_;  // D x C
  Matrix head_b_;  // 1 x C
};

/// Parameters bound to a tape, in the order of Model::parameters().
struct ModelVars {
  std::vector<Var> flat;
};

ModelVars bind(Tape& tape, const Model& model, bool trainable);

struct LayerRouting {
  std::size_t block = 0;
  GateVars gate;
  GateOutput values;
  DispatchPlan plan;
};

struct ForwardPass {
  Var logits;
  std::vector<LayerRouting> layers;
};

struct ForwardOptions {
  const MappingTable* mapping = nullptr;  // required for forced_mapping
  std::uint64_t dispatch_seed = 0;
  bool force_router_argmax = false;       // evaluation always uses the router
};

/// Throws ShapeError when the batch dimension differs from the model's.
ForwardPass forward(const Model& model, const ModelVars& vars, Var input, const TokenBatch& batch,
                    const ForwardOptions& options = {});

struct EvalForward {
  Matrix logits;
  std::vector<GateOutput> gates;
  std::vector<DispatchPlan> plans;
};

/// Value-level forward (router dispatch unless options say otherwise).
EvalForward predict(const Model& model, const TokenBatch& batch, ForwardOptions options = {});

struct StepLoss {
  TotalLoss loss;
  ForwardPass pass;
};

/// Task loss on foreground tokens plus the configured auxiliary terms.
/// Throws DegenerateBatchError when the batch has no foreground token.
StepLoss compute_loss(const Model& model, const ModelVars& vars, Var input, const TokenBatch& batch,
                      const LossConfig& loss, const MappingTable* mapping,
                      const ForwardOptions& options, std::mt19937_64* target_sampler = nullptr);

}  // namespace damex
