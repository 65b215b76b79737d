// SPDX-License-Identifier: Apache-2.0
#include "damex/gradcheck_suite.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "damex/error.hpp"
#include "damex/gradcheck.hpp"
#include "damex/losses.hpp"
#include "damex/model.hpp"
#include "damex/train.hpp"

namespace damex {

namespace {

struct Instance {
  std::vector<Matrix> params;
  LossBuilder loss;
};

Matrix random_matrix(std::size_t r, std::size_t c, double scale, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, scale);
  Matrix m(r, c);
  for (double& v : m.data()) v = dist(rng);
  return m;
}

struct RoutingSample {
  std::size_t tokens, experts;
  std::vector<std::size_t> rows;
  std::vector<int> datasets;
  MappingTable mapping;
  double gate_noise;
};

RoutingSample routing_sample(std::mt19937_64& rng) {
  RoutingSample s;
  s.tokens = std::uniform_int_distribution<std::size_t>(3, 8)(rng);
  s.experts = std::uniform_int_distribution<std::size_t>(2, 4)(rng);
  std::bernoulli_distribution fg(0.7);
  for (std::size_t t = 0; t < s.tokens; ++t)
    if (fg(rng)) s.rows.push_back(t);
  if (s.rows.empty()) s.rows.push_back(0);
  s.mapping = MappingTable(s.experts);
  // Dataset 0 owns expert 0, dataset 1 spreads over the first and last expert, dataset 2 shares with dataset 0.
  s.mapping.assign(0, {0});
  s.mapping.assign(1, {0, s.experts - 1});
  s.mapping.assign(2, {0});
  std::uniform_int_distribution<int> ds(0, 2);
  for (std::size_t t = 0; t < s.tokens; ++t) s.datasets.push_back(ds(rng));
  s.gate_noise = std::uniform_real_distribution<double>(0.5, 2.0)(rng);
  return s;
}

Instance make_instance(const std::string& name, std::mt19937_64& rng) {
  if (name == "task") {
    const std::size_t t = std::uniform_int_distribution<std::size_t>(2, 8)(rng);
    const std::size_t c = std::uniform_int_distribution<std::size_t>(2, 6)(rng);
    std::vector<std::optional<int>> labels(t);
    std::vector<std::size_t> rows;
    std::uniform_int_distribution<int> lab(0, static_cast<int>(c) - 1);
    for (std::size_t i = 0; i < t; ++i) {
      if (i == 0 || rng() % 4 != 0) {
        labels[i] = lab(rng);
        rows.push_back(i);
      }
    }
    return {{random_matrix(t, c, 1.5, rng)}, [labels, rows](Tape&, std::span<const Var> p) {
              return task_loss(p[0], labels, rows);
            }};
  }
  if (name == "full_model") {
    ModelConfig mc;
    mc.dim = 4;
    mc.hidden = 5;
    mc.blocks = 2;  // one dense block, one MoE block
    mc.classes = 3;
    mc.routing.num_experts = 2;
    mc.routing.capacity_factor = 1.25;
    mc.router_init = 1.0;
    mc.out_init = 0.5;
    const Model base = Model::init(mc, rng());
    TokenBatch batch;
    const std::size_t t = 4;
    batch.features = random_matrix(t, mc.dim, 1.0, rng);
    for (std::size_t i = 0; i < t; ++i) {
      batch.dataset_ids.push_back(static_cast<int>(i % 2));
      const bool fg = i < 2 || rng() % 3 != 0;
      batch.foreground.push_back(fg);
      batch.labels.push_back(fg ? std::optional<int>(static_cast<int>(rng() % mc.classes))
                                : std::nullopt);
    }
    MappingTable mapping(2);
    mapping.assign(0, {0});
    mapping.assign(1, {1});
    LossConfig lc;
    lc.aux_mode = AuxMode::both;
    lc.aux_weight = 0.1;
    lc.gate_noise = 1.0;
    std::vector<Matrix> params;
    for (const NamedConstParam& p : base.parameters()) params.push_back(*p.value);
    return {params, [base, batch, mapping, lc](Tape& tape, std::span<const Var> p) {
              ModelVars vars{std::vector<Var>(p.begin(), p.end())};
              ForwardOptions options;
              options.mapping = &mapping;
              const Var input = tape.constant(batch.features);
              return compute_loss(base, vars, input, batch, lc, &mapping, options).loss.total;
            }};
  }

  RoutingSample s = routing_sample(rng);
  Matrix logits = random_matrix(s.tokens, s.experts, 1.0, rng);
  auto probs_of = [](Var logits) { return ad::softmax_rows(logits); };
  if (name == "importance") {
    return {{logits}, [s, probs_of](Tape&, std::span<const Var> p) {
              return importance_loss(probs_of(p[0]), s.rows);
            }};
  }
  if (name == "load") {
    return {{logits}, [s, probs_of](Tape&, std::span<const Var> p) {
              return load_loss(probs_of(p[0]), s.gate_noise, s.rows);
            }};
  }
  if (name == "load_balancing") {
    return {{logits}, [s, probs_of](Tape&, std::span<const Var> p) {
              const Var probs = probs_of(p[0]);
              return load_balancing_loss(importance_loss(probs, s.rows),
                                         load_loss(probs, s.gate_noise, s.rows));
            }};
  }
  if (name == "damex") {
    return {{logits}, [s, probs_of](Tape&, std::span<const Var> p) {
              return damex_loss(probs_of(p[0]), s.datasets, s.mapping, s.rows);
            }};
  }
  throw ParameterError("unknown gradient check `" + name + "`");
}

}  // namespace

const std::vector<std::string>& gradcheck_names() {
  static const std::vector<std::string> names = {"importance", "load", "load_balancing",
                                                 "damex",      "task", "full_model"};
  return names;
}

std::vector<GradSuiteCheck> run_gradcheck_suite(const GradSuiteOptions& options) {
  if (!options.corrupt.empty()) {
    const auto& names = gradcheck_names();
    if (std::find(names.begin(), names.end(), options.corrupt) == names.end()) {
      throw ParameterError("unknown gradient check `" + options.corrupt + "`");
    }
  }
  std::vector<GradSuiteCheck> results;
  for (std::size_t c = 0; c < gradcheck_names().size(); ++c) {
    const std::string& name = gradcheck_names()[c];
    GradSuiteCheck check{name, 0.0, 0, true};
    GradientTamper tamper;
    if (name == options.corrupt) {
      tamper = [](std::vector<Matrix>& grads) {
        double& g = grads.front().data()[0];
        g += 1e-2 * (1.0 + std::abs(g));
      };
    }
    for (std::size_t i = 0; i < options.instances; ++i) {
      std::mt19937_64 rng(derive_seed(options.seed, c * 100003 + i));
      const Instance inst = make_instance(name, rng);
      const GradCheckResult r = finite_diff_check(inst.loss, inst.params, options.eps, tamper);
      if (check.instances == 0 || r.max_relative_error > check.max_relative_error) {
        check.max_relative_error = r.max_relative_error;
        check.worst_instance = i;
        check.worst_analytic = r.worst_analytic;
        check.worst_numeric = r.worst_numeric;
      }
      ++check.instances;
    }
    check.passed = check.max_relative_error <= options.tolerance;
    results.push_back(check);
  }
  return results;
}

}  // namespace damex
