// SPDX-License-Identifier: Apache-2.0
#include "damex/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "damex/error.hpp"

namespace damex {

namespace {

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

void Optimizer::step(const std::vector<NamedParam>& params, const std::vector<Matrix>& grads) {
  if (params.size() != grads.size()) throw ContractError("optimizer: parameter/gradient count mismatch");
  if (kind_ == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto p = params[i].value->data();
      const auto g = grads[i].data();
      for (std::size_t j = 0; j < p.size(); ++j) p[j] -= lr_ * g[j];
    }
    return;
  }
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  if (m_.empty()) {
    for (const Matrix& g : grads) {
      m_.emplace_back(g.rows(), g.cols());
      v_.emplace_back(g.rows(), g.cols());
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].value->data();
    const auto g = grads[i].data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
      v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
      p[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
    }
  }
}

BatchSampler::BatchSampler(const TokenBatch& pool, std::size_t batch, std::uint64_t seed)
    : pool_(pool), rng_(seed) {
  if (pool.size() == 0) throw ConfigError("training set is empty");
  for (std::size_t t = 0; t < pool.size(); ++t) rows_[pool.dataset_ids[t]].push_back(t);
  if (batch < rows_.size()) throw ConfigError("batch is smaller than the number of datasets");

  // Largest-remainder apportionment with a floor of one token per dataset.
  const double total = static_cast<double>(pool.size());
  std::vector<std::pair<double, int>> remainders;
  std::size_t assigned = 0;
  for (const auto& [id, rows] : rows_) {
    const double exact = static_cast<double>(batch) * static_cast<double>(rows.size()) / total;
    const auto base = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(exact)));
    quota_[id] = base;
    assigned += base;
    remainders.emplace_back(exact - std::floor(exact), id);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < batch; i = (i + 1) % remainders.size()) {
    ++quota_[remainders[i].second];
    ++assigned;
  }
  while (assigned > batch) {
    auto largest = std::max_element(quota_.begin(), quota_.end(),
                                    [](const auto& a, const auto& b) { return a.second < b.second; });
    --largest->second;
    --assigned;
  }
  for (auto& [id, rows] : rows_) {
    std::shuffle(rows.begin(), rows.end(), rng_);
    cursor_[id] = 0;
  }
}

TokenBatch BatchSampler::next() {
  std::vector<std::size_t> picked;
  for (auto& [id, rows] : rows_) {
    for (std::size_t i = 0; i < quota_[id]; ++i) {
      std::size_t& cur = cursor_[id];
      if (cur == rows.size()) {
        std::shuffle(rows.begin(), rows.end(), rng_);
        cur = 0;
      }
      picked.push_back(rows[cur++]);
    }
  }
  std::shuffle(picked.begin(), picked.end(), rng_);
  return pool_.subset(picked);
}

double EvalRecord::mean_purity() const {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& layer : purity)
    for (const auto& [_, v] : layer) {
      total += v;
      ++n;
    }
  return n == 0 ? 0.0 : total / static_cast<double>(n);
}

double EvalRecord::max_collapse() const {
  return collapse.empty() ? 0.0 : *std::max_element(collapse.begin(), collapse.end());
}

std::string RunMetrics::to_csv() const {
  std::ostringstream out;
  out << "kind,step,layer,dataset,expert,metric,value\n";
  for (const StepRecord& s : steps) {
    const auto row = [&](const char* name, double v) {
      out << "step," << s.step << ",,,," << name << ',' << fmt17(v) << '\n';
    };
    row("task", s.losses.task);
    row("importance", s.losses.importance);
    row("load", s.losses.load);
    row("load_balancing", s.losses.load_balancing);
    row("damex", s.losses.damex);
    row("total", s.losses.total);
    row("drop_rate", s.drop_rate);
  }
  for (const EvalRecord& e : evals) {
    for (const auto& [d, acc] : e.accuracy) {
      out << "eval," << e.step << ",," << d << ",,accuracy," << fmt17(acc) << '\n';
    }
    for (std::size_t l = 0; l < e.collapse.size(); ++l) {
      out << "eval," << e.step << ',' << l << ",,,collapse," << fmt17(e.collapse[l]) << '\n';
      out << "eval," << e.step << ',' << l << ",,,drop_rate," << fmt17(e.drop_rate[l]) << '\n';
    }
    for (std::size_t l = 0; l < e.purity.size(); ++l)
      for (const auto& [d, v] : e.purity[l]) {
        out << "eval," << e.step << ',' << l << ',' << d << ",,purity," << fmt17(v) << '\n';
      }
    for (std::size_t l = 0; l < e.utilization.size(); ++l) {
      const UtilizationMatrix& u = e.utilization[l];
      for (std::size_t i = 0; i < u.datasets.size(); ++i) {
        if (!u.present[i]) continue;
        for (std::size_t x = 0; x < u.weights.cols(); ++x) {
          out << "eval," << e.step << ',' << l << ',' << u.datasets[i] << ',' << x
              << ",utilization," << fmt17(u.weights(i, x)) << '\n';
        }
      }
    }
  }
  return out.str();
}

void check_batch(const TokenBatch& batch, const RunConfig& config) {
  batch.validate();
  if (batch.dim() != config.model.dim) {
    throw ConfigError("data has " + std::to_string(batch.dim()) + " features, model.dim is " +
                      std::to_string(config.model.dim));
  }
  const bool need_mapping = config.mapping.num_datasets() > 0;
  for (std::size_t t = 0; t < batch.size(); ++t) {
    if (need_mapping && !config.mapping.contains(batch.dataset_ids[t])) {
      throw ConfigError("dataset " + std::to_string(batch.dataset_ids[t]) +
                        " has no dataset.<id>.experts entry");
    }
    if (batch.labels[t] && static_cast<std::size_t>(*batch.labels[t]) >= config.model.classes) {
      throw ConfigError("label " + std::to_string(*batch.labels[t]) + " exceeds model.classes");
    }
  }
}

EvalRecord evaluate(const Model& model, const TokenBatch& batch, const MappingTable& mapping,
                    std::size_t step) {
  ForwardOptions options;
  options.force_router_argmax = true;
  const EvalForward fwd = predict(model, batch, options);
  const auto rows = batch.foreground_rows();

  EvalRecord rec;
  rec.step = step;
  std::map<int, std::pair<std::size_t, std::size_t>> hits;
  for (std::size_t t : rows) {
    const auto logits = fwd.logits.row(t);
    const auto best = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    auto& [ok, total] = hits[batch.dataset_ids[t]];
    ok += best == *batch.labels[t] ? 1 : 0;
    ++total;
  }
  for (const auto& [d, h] : hits) rec.accuracy[d] = static_cast<double>(h.first) / h.second;

  rec.collapse = collapse_score(fwd.plans, rows);
  for (const DispatchPlan& p : fwd.plans) rec.drop_rate.push_back(dispatch_stats(p).drop_rate);
  if (mapping.num_datasets() > 0) {
    rec.purity = routing_purity(fwd.plans, batch.dataset_ids, mapping, rows);
    for (const GateOutput& g : fwd.gates) {
      rec.utilization.push_back(utilization_matrix(g.probs, batch.dataset_ids, mapping, rows));
    }
  }
  return rec;
}

TrainResult train(const RunConfig& config, const Mixture& data, std::uint64_t seed) {
  config.validate();
  check_batch(data.train, config);
  check_batch(data.eval, config);

  TrainResult result{Model::init(config.model, derive_seed(seed, 0)), {}};
  Model& model = result.model;
  Optimizer optimizer(config.train);
  BatchSampler sampler(data.train, config.train.batch, derive_seed(seed, 1));
  std::mt19937_64 target_rng(derive_seed(seed, 2));
  const MappingTable* mapping = config.mapping.num_datasets() > 0 ? &config.mapping : nullptr;

  for (std::size_t step = 1; step <= config.train.steps; ++step) {
    const TokenBatch batch = sampler.next();
    Tape tape;
    const ModelVars vars = bind(tape, model, true);
    const Var input = tape.constant(batch.features);
    ForwardOptions options;
    options.mapping = mapping;
    options.dispatch_seed = derive_seed(seed, 1000 + step);

    if (batch.foreground_rows().empty()) continue;
    const StepLoss sl =
        compute_loss(model, vars, input, batch, config.loss, mapping, options, &target_rng);
    const LossBundle& b = sl.loss.bundle;
    if (!std::isfinite(b.total)) {
      throw NumericalError("non-finite loss at step " + std::to_string(step),
                           tokens_to_csv(batch));
    }
    tape.backward(sl.loss.total);
    std::vector<Matrix> grads;
    grads.reserve(vars.flat.size());
    for (const Var& v : vars.flat) {
      if (!all_finite(v.grad())) {
        throw NumericalError("non-finite gradient at step " + std::to_string(step),
                             tokens_to_csv(batch));
      }
      grads.push_back(v.grad());
    }
    optimizer.step(model.parameters(), grads);

    StepRecord rec{step, b, 0.0};
    for (const LayerRouting& l : sl.pass.layers) rec.drop_rate += dispatch_stats(l.plan).drop_rate;
    if (!sl.pass.layers.empty()) rec.drop_rate /= static_cast<double>(sl.pass.layers.size());
    result.metrics.steps.push_back(rec);

    const bool periodic = config.train.eval_every > 0 && step % config.train.eval_every == 0;
    if (periodic && step != config.train.steps) {
      result.metrics.evals.push_back(evaluate(model, data.eval, config.mapping, step));
    }
  }
  result.metrics.evals.push_back(evaluate(model, data.eval, config.mapping, config.train.steps));
  return result;
}

std::string checkpoint_text(const RunConfig& config, const Model& model) {
  std::ostringstream out;
  const std::string cfg = to_text(config);
  const auto lines = static_cast<std::size_t>(std::count(cfg.begin(), cfg.end(), '\n'));
  out << "DAMEX-CKPT v1\n";
  out << "config " << lines << '\n' << cfg;
  for (const NamedConstParam& p : model.parameters()) {
    out << "param " << p.name << '\n';
    out << "shape " << p.value->rows() << ' ' << p.value->cols() << '\n';
    bool first = true;
    for (double v : p.value->data()) {
      out << (first ? "" : " ") << fmt17(v);
      first = false;
    }
    out << '\n';
  }
  out << "end\n";
  return out.str();
}

Checkpoint parse_checkpoint(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  auto next_line = [&](const char* what) {
    if (!std::getline(in, line)) throw ConfigError(std::string("checkpoint truncated before ") + what, line_no);
    ++line_no;
    return std::string_view(line);
  };
  if (next_line("magic") != "DAMEX-CKPT v1") throw ConfigError("not a DAMEX-CKPT v1 file", line_no);
  std::size_t cfg_lines = 0;
  {
    std::istringstream hdr(std::string(next_line("config header")));
    std::string tag;
    if (!(hdr >> tag >> cfg_lines) || tag != "config") throw ConfigError("expected `config <lines>`", line_no);
  }
  std::string cfg_text;
  for (std::size_t i = 0; i < cfg_lines; ++i) {
    cfg_text += next_line("end of config");
    cfg_text += '\n';
  }
  Checkpoint ckpt{parse_run_config(cfg_text), {}};
  ckpt.model = Model(ckpt.config.model);
  for (const NamedParam& p : ckpt.model.parameters()) {
    if (next_line("parameter") != "param " + p.name) {
      throw ConfigError("expected parameter `" + p.name + "`", line_no);
    }
    std::istringstream shape(std::string(next_line("shape")));
    std::string tag;
    std::size_t rows = 0, cols = 0;
    if (!(shape >> tag >> rows >> cols) || tag != "shape" || rows != p.value->rows() ||
        cols != p.value->cols()) {
      throw ConfigError("shape of `" + p.name + "` does not match the config", line_no);
    }
    std::istringstream values(std::string(next_line("values")));
    std::string tok;
    for (double& v : p.value->data()) {
      if (!(values >> tok)) throw ConfigError("too few values for `" + p.name + "`", line_no);
      char* end = nullptr;
      v = std::strtod(tok.c_str(), &end);
      if (end != tok.c_str() + tok.size()) throw ConfigError("bad value `" + tok + "`", line_no);
    }
    if (values >> tok) throw ConfigError("too many values for `" + p.name + "`", line_no);
  }
  if (next_line("end marker") != "end") throw ConfigError("expected `end`", line_no);
  return ckpt;
}

void save_checkpoint(const std::string& path, const RunConfig& config, const Model& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write checkpoint `" + path + "`");
  out << checkpoint_text(config, model);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read checkpoint `" + path + "`");
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_checkpoint(buf.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace damex
