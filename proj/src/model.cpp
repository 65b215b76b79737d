// SPDX-License-Identifier: Apache-2.0
#include "damex/model.hpp"

#include <cmath>
#include <string>

#include "damex/error.hpp"

namespace damex {

Model::Model(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const std::size_t d = config_.dim, h = config_.hidden, e = config_.routing.num_experts;
  for (std::size_t b = 0; b < config_.blocks; ++b) {
    Block block;
    block.moe = ModelConfig::is_moe_block(b);
    if (block.moe) {
      block.router = Matrix(e, d);
      block.experts.assign(e, FeedForward::zeros(d, h));
    } else {
      block.dense = FeedForward::zeros(d, h);
    }
    blocks_.push_back(std::move(block));
  }
  head_w_ = Matrix(d, config_.classes);
  head_b_ = Matrix(1, config_.classes);
}

Model Model::init(const ModelConfig& config, std::uint64_t seed) {
  Model m(config);
  std::mt19937_64 rng(seed);
  const std::size_t d = config.dim, h = config.hidden;
  for (Block& block : m.blocks_) {
    if (block.moe) {
      std::normal_distribution<double> dist(0.0, config.router_init);
      for (double& v : block.router.data()) v = dist(rng);
      for (FeedForward& ff : block.experts) ff = FeedForward::random(d, h, rng, config.out_init);
    } else {
      block.dense = FeedForward::random(d, h, rng, config.out_init);
    }
  }
  std::normal_distribution<double> head(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
  for (double& v : m.head_w_.data()) v = head(rng);
  return m;
}

std::vector<NamedParam> Model::parameters() {
  std::vector<NamedParam> out;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    Block& block = blocks_[b];
    const std::string prefix = "block" + std::to_string(b) + ".";
    auto add_ff = [&](const std::string& p, FeedForward& ff) {
      out.push_back({p + "w_in", &ff.w_in});
      out.push_back({p + "b_in", &ff.b_in});
      out.push_back({p + "w_out", &ff.w_out});
      out.push_back({p + "b_out", &ff.b_out});
    };
    if (block.moe) {
      out.push_back({prefix + "router", &block.router});
      for (std::size_t e = 0; e < block.experts.size(); ++e) {
        add_ff(prefix + "expert" + std::to_string(e) + ".", block.experts[e]);
      }
    } else {
      add_ff(prefix + "ffn.", block.dense);
    }
  }
  out.push_back({"head.w", &head_w_});
  out.push_back({"head.b", &head_b_});
  return out;
}

std::vector<NamedConstParam> Model::parameters() const {
  std::vector<NamedConstParam> out;
  for (const NamedParam& p : const_cast<Model*>(this)->parameters()) out.push_back({p.name, p.value});
  return out;
}

ModelVars bind(Tape& tape, const Model& model, bool trainable) {
  ModelVars vars;
  for (const NamedConstParam& p : model.parameters()) {
    vars.flat.push_back(trainable ? tape.leaf(*p.value) : tape.constant(*p.value));
  }
  return vars;
}

ForwardPass forward(const Model& model, const ModelVars& vars, Var input, const TokenBatch& batch,
                    const ForwardOptions& options) {
  const ModelConfig& cfg = model.config();
  if (input.cols() != cfg.dim) {
    throw ShapeError("batch dimension " + std::to_string(input.cols()) + " but model expects " +
                     std::to_string(cfg.dim));
  }
  if (input.rows() != batch.size()) throw ShapeError("input rows do not match the batch");
  RoutingConfig routing = cfg.routing;
  if (options.force_router_argmax) routing.dispatch_mode = DispatchMode::router_argmax;

  ForwardPass pass;
  Var h = input;
  std::size_t next = 0;
  for (std::size_t b = 0; b < model.blocks().size(); ++b) {
    const Block& block = model.blocks()[b];
    if (!block.moe) {
      const FeedForwardVars ff{vars.flat[next], vars.flat[next + 1], vars.flat[next + 2],
                               vars.flat[next + 3]};
      next += 4;
      h = ad::add(h, apply(ff, h, cfg.activation));
      continue;
    }
    const Var router = vars.flat[next++];
    std::vector<FeedForwardVars> experts;
    for (std::size_t e = 0; e < block.experts.size(); ++e, next += 4) {
      experts.push_back({vars.flat[next], vars.flat[next + 1], vars.flat[next + 2], vars.flat[next + 3]});
    }
    LayerRouting layer;
    layer.block = b;
    layer.gate = gate(h, router);
    layer.values.logits = layer.gate.logits.value();
    layer.values.probs = layer.gate.probs.value();
    layer.values.topk = select_top_k(layer.values.probs, routing.k);
    layer.plan = build_plan(layer.values, routing, options.mapping, batch.dataset_ids,
                            options.dispatch_seed + b);
    const Var y =
        moe_forward(h, layer.gate.probs, experts, cfg.activation, layer.plan, cfg.execution);
    h = ad::add(h, y);
    pass.layers.push_back(std::move(layer));
  }
  pass.logits = ad::add_row(ad::matmul(h, vars.flat[next]), vars.flat[next + 1]);
  return pass;
}

EvalForward predict(const Model& model, const TokenBatch& batch, ForwardOptions options) {
  Tape tape;
  const ModelVars vars = bind(tape, model, false);
  const Var input = tape.constant(batch.features);
  ForwardPass pass = forward(model, vars, input, batch, options);
  EvalForward out;
  out.logits = pass.logits.value();
  for (LayerRouting& l : pass.layers) {
    out.gates.push_back(std::move(l.values));
    out.plans.push_back(std::move(l.plan));
  }
  return out;
}

StepLoss compute_loss(const Model& model, const ModelVars& vars, Var input, const TokenBatch& batch,
                      const LossConfig& loss, const MappingTable* mapping,
                      const ForwardOptions& options, std::mt19937_64* target_sampler) {
  StepLoss out;
  out.pass = forward(model, vars, input, batch, options);
  const auto fg_rows = batch.foreground_rows();
  const auto aux_rows = loss.foreground_only ? fg_rows : batch.all_rows();
  const Var task = task_loss(out.pass.logits, batch.labels, fg_rows);
  std::vector<LayerAux> aux;
  for (const LayerRouting& l : out.pass.layers) {
    aux.push_back(layer_aux_losses(l.gate.probs, batch.dataset_ids, mapping, aux_rows, loss,
                                   target_sampler));
  }
  out.loss = total_loss(task, aux, loss);
  return out;
}

}  // namespace damex
