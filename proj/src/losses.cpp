// SPDX-License-Identifier: Apache-2.0
#include "damex/losses.hpp"

#include <string>

#include "damex/error.hpp"

namespace damex {

namespace {

void require_rows(std::span<const std::size_t> rows, const char* loss) {
  if (rows.empty()) throw DegenerateBatchError(std::string(loss) + ": no tokens selected by the mask");
}

/// Var(v)/Mean(v)^2 of a 1 x E row, population variance.
// Var(v)/Mean(v)^2 over the columns of a 1 x E row. The variance is taken
// of v - v[0], which leaves it unchanged mathematically but makes it exactly
// zero whenever all entries are equal (the mean of E copies of x is not
// always x in floating point).
Var squared_cv(Var v) {
  const double e = static_cast<double>(v.cols());
  const Var m = ad::scale(ad::sum(v), 1.0 / e);
  const std::size_t first[] = {0};
  const Var shifted = ad::sub_scalar(v, ad::pick(v, first));
  const Var centered = ad::sub_scalar(shifted, ad::scale(ad::sum(shifted), 1.0 / e));
  const Var var = ad::scale(ad::sum(ad::mul(centered, centered)), 1.0 / e);
  return ad::div(var, ad::mul(m, m));
}

template <typename Fn>
double eval_value(const Matrix& probs, Fn&& fn) {
  Tape tape;
  return fn(tape.constant(probs)).value().scalar();
}

}  // namespace

void LossConfig::validate() const {
  if (!(aux_weight >= 0.0)) throw ParameterError("aux_weight must be >= 0");
  if (uses_load_balancing() && !(gate_noise > 0.0)) {
    throw ParameterError("gate_noise must be > 0 when the load loss is active");
  }
}

std::string to_string(AuxMode mode) {
  switch (mode) {
    case AuxMode::load_balancing: return "load_balancing";
    case AuxMode::damex: return "damex";
    case AuxMode::both: return "both";
  }
  return "damex";
}

std::string to_string(DamexTargets targets) {
  return targets == DamexTargets::sampled ? "sampled" : "soft";
}

DamexTargets parse_damex_targets(const std::string& name) {
  if (name == "soft") return DamexTargets::soft;
  if (name == "sampled") return DamexTargets::sampled;
  throw ConfigError("unknown damex_targets `" + name + "`");
}

AuxMode parse_aux_mode(const std::string& name) {
  if (name == "load_balancing") return AuxMode::load_balancing;
  if (name == "damex") return AuxMode::damex;
  if (name == "both") return AuxMode::both;
  throw ConfigError("unknown aux_mode `" + name + "`");
}

Var importance_loss(Var probs, std::span<const std::size_t> rows) {
  require_rows(rows, "importance_loss");
  return squared_cv(ad::sum_rows(ad::gather_rows(probs, rows)));
}

Var load_loss(Var probs, double gate_noise, std::span<const std::size_t> rows) {
  if (!(gate_noise > 0.0)) throw ParameterError("load_loss: gate_noise must be > 0");
  require_rows(rows, "load_loss");
  const double sigma = gate_noise / static_cast<double>(probs.cols());
  return squared_cv(ad::sum_rows(ad::normal_cdf(ad::gather_rows(probs, rows), sigma)));
}

Var load_balancing_loss(Var importance, Var load) { return ad::scale(ad::add(importance, load), 0.5); }

Var damex_loss(Var probs, std::span<const int> dataset_ids, const MappingTable& mapping,
               std::span<const std::size_t> rows, std::mt19937_64* sampler) {
  require_rows(rows, "damex_loss");
  if (dataset_ids.size() != probs.rows()) throw ShapeError("damex_loss: one dataset id per token");
  Matrix targets(rows.size(), probs.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (mapping.num_experts() != probs.cols()) {
      throw MappingError("mapping and router disagree on expert count");
    }
    const int dataset = dataset_ids[rows[i]];
    if (sampler != nullptr) {
      const auto& experts = mapping.experts_for(dataset);
      std::uniform_int_distribution<std::size_t> dist(0, experts.size() - 1);
      targets(i, experts[dist(*sampler)]) = 1.0;
    } else {
      const auto q = target_distribution(mapping, dataset);
      std::copy(q.begin(), q.end(), targets.row(i).begin());
    }
  }
  const Var logp = ad::log_clamped(ad::gather_rows(probs, rows), kLogClamp);
  return ad::scale(ad::weighted_sum(logp, targets), -1.0 / static_cast<double>(rows.size()));
}

Var task_loss(Var logits, std::span<const std::optional<int>> labels,
              std::span<const std::size_t> rows) {
  require_rows(rows, "task_loss");
  if (labels.size() != logits.rows()) throw ShapeError("task_loss: one label slot per token");
  std::vector<std::size_t> cols(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& label = labels[rows[i]];
    if (!label || *label < 0 || static_cast<std::size_t>(*label) >= logits.cols()) {
      throw ContractError("task_loss: token " + std::to_string(rows[i]) + " has no valid label");
    }
    cols[i] = static_cast<std::size_t>(*label);
  }
  const Var logp = ad::pick(ad::log_softmax_rows(ad::gather_rows(logits, rows)), cols);
  return ad::scale(ad::sum(logp), -1.0 / static_cast<double>(rows.size()));
}

double importance_loss(const Matrix& probs, std::span<const std::size_t> rows) {
  return eval_value(probs, [&](Var p) { return importance_loss(p, rows); });
}

double load_loss(const Matrix& probs, double gate_noise, std::span<const std::size_t> rows) {
  return eval_value(probs, [&](Var p) { return load_loss(p, gate_noise, rows); });
}

double load_balancing_loss(double importance, double load) { return (importance + load) / 2.0; }

double damex_loss(const Matrix& probs, std::span<const int> dataset_ids,
                  const MappingTable& mapping, std::span<const std::size_t> rows) {
  return eval_value(probs, [&](Var p) { return damex_loss(p, dataset_ids, mapping, rows); });
}

LayerAux layer_aux_losses(Var probs, std::span<const int> dataset_ids, const MappingTable* mapping,
                          std::span<const std::size_t> rows, const LossConfig& cfg,
                          std::mt19937_64* sampler) {
  LayerAux aux;
  aux.importance = importance_loss(probs, rows);
  if (cfg.gate_noise > 0.0) {
    aux.load = load_loss(probs, cfg.gate_noise, rows);
    aux.has_load = true;
  }
  if (mapping != nullptr) {
    aux.damex = damex_loss(probs, dataset_ids, *mapping, rows,
                           cfg.damex_targets == DamexTargets::sampled ? sampler : nullptr);
    aux.has_damex = true;
  }
  return aux;
}

TotalLoss total_loss(Var task, std::span<const LayerAux> layers, const LossConfig& cfg) {
  cfg.validate();
  Tape& tape = task.tape();
  TotalLoss out;
  out.bundle.task = task.value().scalar();
  Var total = task;
  if (layers.empty()) {
    out.bundle.total = out.bundle.task;
    out.total = total;
    return out;
  }
  const bool weighted = cfg.aux_weight > 0.0;
  if (weighted && cfg.uses_load_balancing() && !layers.front().has_load) {
    throw ParameterError("load-balancing loss needs gate_noise > 0");
  }
  if (weighted && cfg.uses_damex() && !layers.front().has_damex) {
    throw ConfigError("damex loss requires a dataset-expert mapping");
  }
  const double inv_layers = 1.0 / static_cast<double>(layers.size());
  auto layer_mean = [&](auto member) {
    Var acc = tape.constant(Matrix(1, 1, 0.0));
    for (const LayerAux& l : layers) acc = ad::add(acc, member(l));
    return ad::scale(acc, inv_layers);
  };

  const Var importance = layer_mean([](const LayerAux& l) { return l.importance; });
  out.bundle.importance = importance.value().scalar();
  Var aux = tape.constant(Matrix(1, 1, 0.0));
  if (layers.front().has_load) {
    const Var load = layer_mean([](const LayerAux& l) { return l.load; });
    const Var balancing = load_balancing_loss(importance, load);
    out.bundle.load = load.value().scalar();
    out.bundle.load_balancing = balancing.value().scalar();
    if (cfg.uses_load_balancing()) aux = ad::add(aux, balancing);
  }
  if (layers.front().has_damex) {
    const Var dmx = layer_mean([](const LayerAux& l) { return l.damex; });
    out.bundle.damex = dmx.value().scalar();
    if (cfg.uses_damex()) aux = ad::add(aux, dmx);
  }
  total = ad::add(task, ad::scale(aux, cfg.aux_weight));
  out.bundle.total = total.value().scalar();
  out.total = total;
  return out;
}

}  // namespace damex
