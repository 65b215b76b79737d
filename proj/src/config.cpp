// SPDX-License-Identifier: Apache-2.0
#include "damex/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "damex/error.hpp"

namespace damex {

namespace {

std::size_t to_count(const ConfigEntry& e) {
  std::size_t v = 0;
  const auto* end = e.value.data() + e.value.size();
  const auto [ptr, ec] = std::from_chars(e.value.data(), end, v);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("`" + e.key + "` expects a non-negative integer, got `" + e.value + "`",
                      e.line);
  }
  return v;
}

double to_double(const ConfigEntry& e) {
  double v = 0.0;
  const auto* end = e.value.data() + e.value.size();
  const auto [ptr, ec] = std::from_chars(e.value.data(), end, v);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("`" + e.key + "` expects a number, got `" + e.value + "`", e.line);
  }
  return v;
}

bool to_bool(const ConfigEntry& e) {
  if (e.value == "true" || e.value == "1") return true;
  if (e.value == "false" || e.value == "0") return false;
  throw ConfigError("`" + e.key + "` expects true or false, got `" + e.value + "`", e.line);
}

using Setter = std::function<void(RunConfig&, const ConfigEntry&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"model.dim", [](RunConfig& c, const ConfigEntry& e) { c.model.dim = to_count(e); }},
      {"model.hidden", [](RunConfig& c, const ConfigEntry& e) { c.model.hidden = to_count(e); }},
      {"model.blocks", [](RunConfig& c, const ConfigEntry& e) { c.model.blocks = to_count(e); }},
      {"model.classes", [](RunConfig& c, const ConfigEntry& e) { c.model.classes = to_count(e); }},
      {"model.experts",
       [](RunConfig& c, const ConfigEntry& e) { c.model.routing.num_experts = to_count(e); }},
      {"model.k", [](RunConfig& c, const ConfigEntry& e) { c.model.routing.k = to_count(e); }},
      {"model.capacity_factor",
       [](RunConfig& c, const ConfigEntry& e) { c.model.routing.capacity_factor = to_double(e); }},
      {"model.dispatch_mode",
       [](RunConfig& c, const ConfigEntry& e) {
         if (e.value == "router_argmax") {
           c.model.routing.dispatch_mode = DispatchMode::router_argmax;
         } else if (e.value == "forced_mapping") {
           c.model.routing.dispatch_mode = DispatchMode::forced_mapping;
         } else {
           throw ConfigError("unknown dispatch_mode `" + e.value + "`", e.line);
         }
       }},
      {"model.activation",
       [](RunConfig& c, const ConfigEntry& e) {
         if (e.value == "gelu") {
           c.model.activation = Activation::gelu;
         } else if (e.value == "linear") {
           c.model.activation = Activation::linear;
         } else {
           throw ConfigError("unknown activation `" + e.value + "`", e.line);
         }
       }},
      {"model.parallel_experts",
       [](RunConfig& c, const ConfigEntry& e) {
         c.model.execution = to_bool(e) ? ExecutionPolicy::parallel : ExecutionPolicy::serial;
       }},
      {"model.router_init",
       [](RunConfig& c, const ConfigEntry& e) { c.model.router_init = to_double(e); }},
      {"model.out_init", [](RunConfig& c, const ConfigEntry& e) { c.model.out_init = to_double(e); }},
      {"loss.aux_weight", [](RunConfig& c, const ConfigEntry& e) { c.loss.aux_weight = to_double(e); }},
      {"loss.aux_mode",
       [](RunConfig& c, const ConfigEntry& e) {
         try {
           c.loss.aux_mode = parse_aux_mode(e.value);
         } catch (const ConfigError& err) {
           throw ConfigError(err.what(), e.line);
         }
       }},
      {"loss.damex_targets",
       [](RunConfig& c, const ConfigEntry& e) {
         try {
           c.loss.damex_targets = parse_damex_targets(e.value);
         } catch (const ConfigError& err) {
           throw ConfigError(err.what(), e.line);
         }
       }},
      {"loss.gate_noise", [](RunConfig& c, const ConfigEntry& e) { c.loss.gate_noise = to_double(e); }},
      {"loss.foreground_only",
       [](RunConfig& c, const ConfigEntry& e) { c.loss.foreground_only = to_bool(e); }},
      {"data.preset", [](RunConfig& c, const ConfigEntry& e) { c.data.preset = e.value; }},
      {"data.seed", [](RunConfig& c, const ConfigEntry& e) { c.data.seed = to_count(e); }},
      {"data.shots", [](RunConfig& c, const ConfigEntry& e) { c.data.shots = to_count(e); }},
      {"data.train_per_dataset",
       [](RunConfig& c, const ConfigEntry& e) { c.data.train_per_dataset = to_count(e); }},
      {"data.eval_per_dataset",
       [](RunConfig& c, const ConfigEntry& e) { c.data.eval_per_dataset = to_count(e); }},
      {"data.train_csv", [](RunConfig& c, const ConfigEntry& e) { c.data.train_csv = e.value; }},
      {"data.eval_csv", [](RunConfig& c, const ConfigEntry& e) { c.data.eval_csv = e.value; }},
      {"train.steps", [](RunConfig& c, const ConfigEntry& e) { c.train.steps = to_count(e); }},
      {"train.batch", [](RunConfig& c, const ConfigEntry& e) { c.train.batch = to_count(e); }},
      {"train.lr", [](RunConfig& c, const ConfigEntry& e) { c.train.lr = to_double(e); }},
      {"train.seed", [](RunConfig& c, const ConfigEntry& e) { c.train.seed = to_count(e); }},
      {"train.eval_every",
       [](RunConfig& c, const ConfigEntry& e) { c.train.eval_every = to_count(e); }},
      {"train.optimizer",
       [](RunConfig& c, const ConfigEntry& e) {
         if (e.value == "sgd") {
           c.train.optimizer = OptimizerKind::sgd;
         } else if (e.value == "adam") {
           c.train.optimizer = OptimizerKind::adam;
         } else {
           throw ConfigError("unknown optimizer `" + e.value + "`", e.line);
         }
       }},
  };
  return table;
}

}  // namespace

void ModelConfig::validate() const {
  if (dim == 0 || hidden == 0) throw ConfigError("model.dim and model.hidden must be positive");
  if (blocks < 2) throw ConfigError("model.blocks must be >= 2 so that one block is MoE");
  if (classes == 0) throw ConfigError("model.classes must be positive");
  if (!(router_init >= 0.0) || !(out_init >= 0.0)) {
    throw ConfigError("model init scales must be non-negative");
  }
  try {
    routing.validate();
  } catch (const ParameterError& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
}

void TrainConfig::validate() const {
  if (batch == 0) throw ConfigError("train.batch must be positive");
  if (!(lr > 0.0)) throw ConfigError("train.lr must be positive");
}

void DataConfig::validate() const {
  if (preset != "domains" && preset != "limited" && preset != "divergent" && preset != "csv") {
    throw ConfigError("unknown data.preset `" + preset + "`");
  }
  if (preset == "csv" && train_csv.empty()) throw ConfigError("data.preset = csv needs data.train_csv");
  if (train_per_dataset == 0 || eval_per_dataset == 0 || shots == 0) {
    throw ConfigError("data counts must be positive");
  }
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  data.validate();
  try {
    loss.validate();
  } catch (const ParameterError& e) {
    throw ConfigError(std::string("loss: ") + e.what());
  }
  if (mapping.num_experts() != model.routing.num_experts) {
    throw ConfigError("mapping was built for a different expert count");
  }
  if (loss.uses_damex() && loss.aux_weight > 0.0 && mapping.num_datasets() == 0) {
    throw ConfigError("aux_mode uses the damex loss but no dataset.<id>.experts entries are given");
  }
  if (model.routing.dispatch_mode == DispatchMode::forced_mapping && mapping.num_datasets() == 0) {
    throw ConfigError("forced_mapping dispatch needs dataset.<id>.experts entries");
  }
}

RunConfig parse_run_config(std::string_view text) {
  const auto entries = parse_key_values(text);
  RunConfig cfg;
  for (const ConfigEntry& e : entries) {
    if (e.key.starts_with("dataset.")) continue;
    const auto it = setters().find(e.key);
    if (it == setters().end()) throw ConfigError("unknown key `" + e.key + "`", e.line);
    it->second(cfg, e);
  }
  cfg.mapping = parse_mapping(std::span<const ConfigEntry>(entries), cfg.model.routing.num_experts);
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file `" + path + "`");
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_run_config(buf.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::string to_string(DispatchMode mode) {
  return mode == DispatchMode::forced_mapping ? "forced_mapping" : "router_argmax";
}

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::adam ? "adam" : "sgd"; }

std::string to_text(const RunConfig& c) {
  std::ostringstream out;
  out << "model.dim = " << c.model.dim << '\n'
      << "model.hidden = " << c.model.hidden << '\n'
      << "model.blocks = " << c.model.blocks << '\n'
      << "model.classes = " << c.model.classes << '\n'
      << "model.experts = " << c.model.routing.num_experts << '\n'
      << "model.k = " << c.model.routing.k << '\n'
      << "model.capacity_factor = " << format_double(c.model.routing.capacity_factor) << '\n'
      << "model.dispatch_mode = " << to_string(c.model.routing.dispatch_mode) << '\n'
      << "model.activation = " << (c.model.activation == Activation::gelu ? "gelu" : "linear") << '\n'
      << "model.parallel_experts = "
      << (c.model.execution == ExecutionPolicy::parallel ? "true" : "false") << '\n'
      << "model.router_init = " << format_double(c.model.router_init) << '\n'
      << "model.out_init = " << format_double(c.model.out_init) << '\n'
      << "loss.aux_weight = " << format_double(c.loss.aux_weight) << '\n'
      << "loss.aux_mode = " << to_string(c.loss.aux_mode) << '\n'
      << "loss.damex_targets = " << to_string(c.loss.damex_targets) << '\n'
      << "loss.gate_noise = " << format_double(c.loss.gate_noise) << '\n'
      << "loss.foreground_only = " << (c.loss.foreground_only ? "true" : "false") << '\n'
      << "data.preset = " << c.data.preset << '\n'
      << "data.seed = " << c.data.seed << '\n'
      << "data.shots = " << c.data.shots << '\n'
      << "data.train_per_dataset = " << c.data.train_per_dataset << '\n'
      << "data.eval_per_dataset = " << c.data.eval_per_dataset << '\n';
  if (!c.data.train_csv.empty()) out << "data.train_csv = " << c.data.train_csv << '\n';
  if (!c.data.eval_csv.empty()) out << "data.eval_csv = " << c.data.eval_csv << '\n';
  out << "train.steps = " << c.train.steps << '\n'
      << "train.batch = " << c.train.batch << '\n'
      << "train.lr = " << format_double(c.train.lr) << '\n'
      << "train.seed = " << c.train.seed << '\n'
      << "train.optimizer = " << to_string(c.train.optimizer) << '\n'
      << "train.eval_every = " << c.train.eval_every << '\n'
      << serialize_mapping(c.mapping);
  return out.str();
}

}  // namespace damex
