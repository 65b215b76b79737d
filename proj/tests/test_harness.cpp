// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "damex/data.hpp"
#include "damex/error.hpp"
#include "damex/gradcheck.hpp"
#include "damex/metrics.hpp"
#include "damex/model.hpp"
#include "damex/report.hpp"
#include "damex/train.hpp"
#include "oracles.hpp"

using namespace damex;

namespace {

TokenBatch isotropic_batch(std::size_t tokens, std::size_t dim, int datasets, std::mt19937_64& rng) {
  TokenBatch b;
  b.features = oracle::random_matrix(tokens, dim, rng);
  for (std::size_t t = 0; t < tokens; ++t) {
    b.dataset_ids.push_back(static_cast<int>(t % static_cast<std::size_t>(datasets)));
    b.foreground.push_back(true);
    b.labels.push_back(static_cast<int>(rng() % 4));
  }
  return b;
}

MappingTable one_to_one(std::size_t experts) {
  MappingTable m(experts);
  for (std::size_t e = 0; e < experts; ++e) m.assign(static_cast<int>(e), {e});
  return m;
}

RunConfig small_run(std::size_t steps) {
  RunConfig cfg;
  cfg.model.dim = 8;
  cfg.model.hidden = 8;
  cfg.model.classes = 8;
  cfg.data.train_per_dataset = 200;
  cfg.data.eval_per_dataset = 100;
  cfg.train.steps = steps;
  cfg.train.batch = 32;
  cfg.mapping = one_to_one(2);
  return cfg;
}

DispatchPlan plan_with_usage(const std::vector<std::size_t>& counts) {
  DispatchPlan plan;
  plan.num_experts = counts.size();
  plan.capacity = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
  plan.occupancy.assign(counts.size(), 0);
  for (std::size_t e = 0; e < counts.size(); ++e) {
    for (std::size_t i = 0; i < counts[e]; ++i) plan.tokens.push_back({Assignment{e, 1.0, plan.occupancy[e]++}});
  }
  return plan;
}

// Minimal XML well-formedness check: balanced, properly nested elements and
// quoted attributes. Enough for the documents the report module writes.
bool well_formed(const std::string& xml, std::map<std::string, int>* counts = nullptr) {
  std::vector<std::string> stack;
  std::size_t i = 0;
  while ((i = xml.find('<', i)) != std::string::npos) {
    const std::size_t close = xml.find('>', i);
    if (close == std::string::npos) return false;
    std::string tag = xml.substr(i + 1, close - i - 1);
    i = close + 1;
    if (tag.starts_with("?") || tag.starts_with("!")) continue;
    if (std::count(tag.begin(), tag.end(), '"') % 2 != 0) return false;
    if (tag.starts_with("/")) {
      if (stack.empty() || stack.back() != tag.substr(1)) return false;
      stack.pop_back();
      continue;
    }
    const bool self_closing = tag.ends_with("/");
    const std::string name = tag.substr(0, tag.find_first_of(" /"));
    if (counts != nullptr) ++(*counts)[name];
    if (!self_closing) stack.push_back(name);
  }
  return stack.empty();
}

}  // namespace

TEST_CASE("mixtures are deterministic given the seed") {
  DataConfig d;
  d.seed = 5;
  const auto specs = preset_specs("domains", 16, d);
  const Mixture a = generate_mixture(specs, 9);
  const Mixture b = generate_mixture(specs, 9);
  CHECK(a.train.features == b.train.features);
  CHECK(a.eval.dataset_ids == b.eval.dataset_ids);
  CHECK(tokens_to_csv(a.train) == tokens_to_csv(b.train));
  CHECK_FALSE(generate_mixture(specs, 10).train.features == a.train.features);
}

TEST_CASE("limited preset has exactly n minority foreground tokens") {
  for (std::size_t shots : {50u, 100u, 1000u}) {
    DataConfig d;
    d.shots = shots;
    const Mixture m = generate_mixture(preset_specs("limited", 16, d), 1);
    std::size_t minority = 0;
    for (std::size_t t = 0; t < m.train.size(); ++t)
      minority += m.train.dataset_ids[t] == 1 && m.train.foreground[t];
    CHECK(minority == shots);
  }
}

TEST_CASE("divergent preset has disjoint label sets") {
  const Mixture m = generate_mixture(preset_specs("divergent", 16, DataConfig{}), 2);
  std::set<int> labels[2];
  for (std::size_t t = 0; t < m.train.size(); ++t)
    if (m.train.labels[t]) labels[m.train.dataset_ids[t]].insert(*m.train.labels[t]);
  CHECK(labels[0] == std::set<int>{0, 1, 2, 3});
  CHECK(labels[1] == std::set<int>{4, 5, 6, 7});
}

TEST_CASE("mixture validation") {
  CHECK_THROWS_AS(generate_mixture({}, 1), ConfigError);
  auto specs = preset_specs("domains", 8, DataConfig{});
  specs[0].num_train = 0;
  CHECK_THROWS_AS(generate_mixture(specs, 1), ConfigError);
  specs = preset_specs("domains", 8, DataConfig{});
  specs[1].classes[0].spread = 0.0;
  CHECK_THROWS_AS(generate_mixture(specs, 1), ConfigError);
  CHECK_THROWS_AS(preset_specs("imagenet", 8, DataConfig{}), ConfigError);
}

TEST_CASE("token CSV round-trips exactly and reports bad lines") {
  const Mixture m = generate_mixture(preset_specs("domains", 4, DataConfig{}), 3);
  const std::string text = tokens_to_csv(m.eval);
  CHECK(text.starts_with("dataset_id,foreground,label,f0,f1,f2,f3\n"));
  const TokenBatch back = tokens_from_csv(text);
  CHECK(back.features == m.eval.features);
  CHECK(back.labels == m.eval.labels);
  CHECK(back.foreground == m.eval.foreground);

  try {
    tokens_from_csv("dataset_id,foreground,label,f0\n0,1,2,0.5\n0,0,3,0.5\n");
    FAIL("background token with a label should be rejected");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
  CHECK_THROWS_AS(tokens_from_csv("dataset_id,foreground,label,f0\n0,1,2\n"), ConfigError);
  CHECK_THROWS_AS(tokens_from_csv("id,fg,label,f0\n"), ConfigError);
}

TEST_CASE("zero blocks make the model its head") {
  ModelConfig mc;
  mc.dim = 5;
  mc.blocks = 2;
  mc.classes = 3;
  Model model(mc);
  std::mt19937_64 rng(4);
  model.head_weights() = oracle::random_matrix(5, 3, rng);
  model.head_bias() = oracle::random_matrix(1, 3, rng);
  const TokenBatch b = isotropic_batch(7, 5, 2, rng);
  const Matrix logits = predict(model, b).logits;
  const Matrix want = oracle::triple_loop_matmul(b.features, model.head_weights());
  for (std::size_t t = 0; t < 7; ++t)
    for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(logits(t, c) - want(t, c) - model.head_bias()(0, c)) < 1e-12);
}

TEST_CASE("an MoE block with k = E and room for all equals the dense mixture block") {
  ModelConfig mc;
  mc.dim = 4;
  mc.hidden = 6;
  mc.blocks = 2;
  mc.classes = 3;
  mc.routing.num_experts = 3;
  mc.routing.k = 3;
  mc.routing.capacity_factor = 3.0;
  mc.router_init = 0.7;
  mc.out_init = 1.0;
  Model model = Model::init(mc, 8);
  std::mt19937_64 rng(8);
  const TokenBatch b = isotropic_batch(6, 4, 2, rng);
  // Block 0 is dense; compute its output, then the mixture, then the head.
  const Block& dense = model.blocks()[0];
  const Block& moe = model.blocks()[1];
  const Matrix logits = predict(model, b).logits;
  for (std::size_t t = 0; t < 6; ++t) {
    std::vector<double> h(b.features.row(t).begin(), b.features.row(t).end());
    const auto f0 = oracle::ffn(dense.dense.w_in, dense.dense.b_in, dense.dense.w_out, dense.dense.b_out, h, false);
    for (std::size_t d = 0; d < 4; ++d) h[d] += f0[d];
    std::vector<double> z(3, 0.0);
    for (std::size_t e = 0; e < 3; ++e)
      for (std::size_t d = 0; d < 4; ++d) z[e] += moe.router(e, d) * h[d];
    const auto p = oracle::softmax_long(z);
    std::vector<double> y = h;
    for (std::size_t e = 0; e < 3; ++e) {
      const FeedForward& ex = moe.experts[e];
      const auto out = oracle::ffn(ex.w_in, ex.b_in, ex.w_out, ex.b_out, h, false);
      for (std::size_t d = 0; d < 4; ++d) y[d] += static_cast<double>(p[e]) * out[d];
    }
    for (std::size_t c = 0; c < 3; ++c) {
      double want = model.head_bias()(0, c);
      for (std::size_t d = 0; d < 4; ++d) want += y[d] * model.head_weights()(d, c);
      CHECK(std::abs(logits(t, c) - want) < 1e-12);
    }
  }
}

TEST_CASE("with one expert the MoE model equals the dense model exactly") {
  ModelConfig mc;
  mc.dim = 6;
  mc.hidden = 5;
  mc.blocks = 4;
  mc.classes = 4;
  mc.routing.num_experts = 1;
  mc.routing.capacity_factor = 1.0;
  mc.out_init = 1.0;
  const Model moe = Model::init(mc, 3);
  std::mt19937_64 rng(3);
  const TokenBatch b = isotropic_batch(9, 6, 1, rng);
  const Matrix logits = predict(moe, b).logits;
  // The same parameters applied as plain residual feed-forward blocks.
  Matrix h = b.features;
  for (const Block& block : moe.blocks()) {
    const FeedForward& ff = block.moe ? block.experts[0] : block.dense;
    const Matrix f = apply(ff, h, Activation::gelu);
    for (std::size_t i = 0; i < h.size(); ++i) h.data()[i] += f.data()[i];
  }
  Matrix want = matmul(h, moe.head_weights());
  for (std::size_t t = 0; t < want.rows(); ++t)
    for (std::size_t c = 0; c < want.cols(); ++c) want(t, c) += moe.head_bias()(0, c);
  CHECK(logits == want);
}

TEST_CASE("forward rejects a dimension mismatch") {
  ModelConfig mc;
  const Model model = Model::init(mc, 1);
  std::mt19937_64 rng(1);
  CHECK_THROWS_AS(predict(model, isotropic_batch(3, 7, 1, rng)), ShapeError);
}

TEST_CASE("task loss gradients through the model match finite differences") {
  ModelConfig mc;
  mc.dim = 4;
  mc.hidden = 3;
  mc.blocks = 2;
  mc.classes = 4;
  mc.router_init = 1.0;
  mc.out_init = 1.0;
  const Model base = Model::init(mc, 21);
  std::mt19937_64 rng(21);
  const TokenBatch b = isotropic_batch(4, 4, 2, rng);
  const MappingTable mapping = one_to_one(2);
  LossConfig lc;
  lc.aux_weight = 0.0;
  std::vector<Matrix> params;
  for (const auto& p : base.parameters()) params.push_back(*p.value);
  const LossBuilder f = [&](Tape& tape, std::span<const Var> p) {
    const ModelVars vars{std::vector<Var>(p.begin(), p.end())};
    return compute_loss(base, vars, tape.constant(b.features), b, lc, &mapping, {}).loss.total;
  };
  CHECK(finite_diff_check(f, params, 1e-5).max_relative_error < 1e-4);
}

TEST_CASE("batch sampler quotas are proportional with a minimum of one") {
  TokenBatch pool;
  std::vector<double> feats;
  for (int d = 0; d < 3; ++d) {
    const int count = d == 0 ? 1000 : d == 1 ? 300 : 5;
    for (int i = 0; i < count; ++i) {
      pool.dataset_ids.push_back(d);
      pool.foreground.push_back(true);
      pool.labels.push_back(0);
      feats.push_back(static_cast<double>(i));
    }
  }
  pool.features = Matrix(pool.dataset_ids.size(), 1, feats);
  BatchSampler sampler(pool, 64, 7);
  CHECK(sampler.quotas().at(0) + sampler.quotas().at(1) + sampler.quotas().at(2) == 64);
  CHECK(sampler.quotas().at(2) == 1);
  CHECK(sampler.quotas().at(0) > sampler.quotas().at(1));
  // Every minority token is visited before any repeats.
  std::set<double> seen;
  for (int i = 0; i < 5; ++i) {
    const TokenBatch b = sampler.next();
    CHECK(b.size() == 64);
    for (std::size_t t = 0; t < b.size(); ++t)
      if (b.dataset_ids[t] == 2) seen.insert(b.features(t, 0));
  }
  CHECK(seen.size() == 5);
}

TEST_CASE("purity is 1 under forced dispatch") {
  std::mt19937_64 rng(12);
  const TokenBatch b = isotropic_batch(300, 4, 2, rng);
  const MappingTable m = one_to_one(2);
  GateOutput g;
  g.probs = softmax_rows(oracle::random_matrix(300, 2, rng));
  RoutingConfig cfg;
  cfg.capacity_factor = 10.0;
  cfg.dispatch_mode = DispatchMode::forced_mapping;
  const DispatchPlan plan = build_plan(g, cfg, &m, b.dataset_ids, 1);
  for (const auto& [d, v] : routing_purity(plan, b.dataset_ids, m, b.foreground_rows())) CHECK(v == 1.0);
}

TEST_CASE("an untrained router has chance-level purity") {
  // All datasets share one zero-mean isotropic distribution, so the router
  // cannot tell them apart and on average a token lands on its own expert
  // with probability 1/E.
  for (std::size_t e : {2u, 4u}) {
    ModelConfig mc;
    mc.dim = 8;
    mc.routing.num_experts = e;
    mc.routing.capacity_factor = static_cast<double>(e);
    mc.router_init = 1.0;
    const Model model = Model::init(mc, 30 + e);
    std::mt19937_64 rng(40 + e);
    const TokenBatch b = isotropic_batch(4000, 8, static_cast<int>(e), rng);
    const MappingTable m = one_to_one(e);
    const EvalRecord rec = evaluate(model, b, m);
    CHECK(rec.purity.size() == 2);
    CHECK(std::abs(rec.mean_purity() - 1.0 / static_cast<double>(e)) <= 0.05);
  }
}

TEST_CASE("utilization matrix") {
  const MappingTable m = one_to_one(3);
  const std::vector<int> ids = {0, 1, 0, 1};
  SUBCASE("a uniform router puts 1/E in every cell") {
    const UtilizationMatrix u = utilization_matrix(Matrix(4, 3, 1.0 / 3.0), ids, m, std::vector<std::size_t>{0, 1, 2, 3});
    CHECK(u.present == std::vector<bool>{true, true, false});
    for (std::size_t d = 0; d < 2; ++d)
      for (std::size_t e = 0; e < 3; ++e) CHECK(u.weights(d, e) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }
  SUBCASE("rows sum to one") {
    std::mt19937_64 rng(2);
    const Matrix probs = softmax_rows(oracle::random_matrix(4, 3, rng, 3.0));
    const UtilizationMatrix u = utilization_matrix(probs, ids, m, std::vector<std::size_t>{0, 1, 3});
    for (std::size_t d = 0; d < 2; ++d) {
      double total = 0.0;
      for (std::size_t e = 0; e < 3; ++e) total += u.weights(d, e);
      CHECK(std::abs(total - 1.0) <= 1e-9);
    }
    CHECK(u.weights(0, 1) == probs(0, 1));
  }
  SUBCASE("unmapped datasets are rejected") {
    CHECK_THROWS_AS(utilization_matrix(Matrix(1, 3, 1.0 / 3.0), std::vector<int>{9}, m, std::vector<std::size_t>{0}),
                    MappingError);
  }
}

TEST_CASE("collapse score") {
  auto all_rows = [](const DispatchPlan& p) {
    std::vector<std::size_t> r(p.num_tokens());
    std::iota(r.begin(), r.end(), std::size_t{0});
    return r;
  };
  const DispatchPlan uniform = plan_with_usage({5, 5, 5, 5});
  CHECK(collapse_score(uniform, all_rows(uniform)) == doctest::Approx(0.0).epsilon(1e-15));
  const DispatchPlan single = plan_with_usage({0, 0, 12, 0});
  CHECK(collapse_score(single, all_rows(single)) == 1.0);
  const DispatchPlan skewed = plan_with_usage({7, 1, 1, 1});
  const double h = -(0.7 * std::log(0.7) + 3 * 0.1 * std::log(0.1));
  CHECK(collapse_score(skewed, all_rows(skewed)) == doctest::Approx(1.0 - h / std::log(4.0)).epsilon(1e-14));
  CHECK(collapse_score(plan_with_usage({4}), std::vector<std::size_t>{0, 1, 2, 3}) == 0.0);
}

TEST_CASE("utilization reports") {
  UtilizationMatrix u;
  u.datasets = {0, 3};
  u.weights = Matrix::from_rows({{0.75, 0.25}, {0.5, 0.5}});
  u.present = {true, false};
  const std::vector<UtilizationMatrix> layers = {u, u};
  const std::string csv = utilization_csv(layers);
  CHECK(csv.starts_with("layer,dataset,expert0,expert1\n"));
  CHECK(csv.find("0,0,0.75,0.25\n") != std::string::npos);
  CHECK(csv.find("1,3,NA,NA\n") != std::string::npos);

  const std::string svg = utilization_svg(layers);
  std::map<std::string, int> counts;
  CHECK(well_formed(svg, &counts));
  CHECK(counts["g"] == 2);
  // One background rectangle plus |D| x E cells per layer.
  CHECK(counts["rect"] == 1 + 2 * 2 * 2);
  CHECK(svg.find(">d3<") != std::string::npos);
  CHECK(svg.find(">e1<") != std::string::npos);
}

TEST_CASE("dense training without auxiliary loss reduces the task loss") {
  RunConfig cfg = small_run(200);
  cfg.model.routing.num_experts = 1;
  cfg.mapping = MappingTable(1);
  cfg.mapping.assign(0, {0});
  cfg.mapping.assign(1, {0});
  cfg.loss.aux_weight = 0.0;
  const TrainResult r = train(cfg, load_mixture(cfg), 3);
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < 20; ++i) {
    first += r.metrics.steps[i].losses.task;
    last += r.metrics.steps[r.metrics.steps.size() - 1 - i].losses.task;
  }
  CHECK(last < 0.5 * first);
}

TEST_CASE("damex loss drops below 0.05 within 500 steps") {
  RunConfig cfg;
  cfg.data.seed = 7;
  cfg.train.steps = 500;
  cfg.train.optimizer = OptimizerKind::adam;
  cfg.mapping = one_to_one(2);
  const TrainResult r = train(cfg, load_mixture(cfg), 7);
  double best = 1e9;
  for (const StepRecord& s : r.metrics.steps) best = std::min(best, s.losses.damex);
  CHECK(best < 0.05);
}

TEST_CASE("training is deterministic, serial or parallel") {
  RunConfig cfg = small_run(30);
  cfg.train.eval_every = 10;
  const Mixture data = load_mixture(cfg);
  const TrainResult a = train(cfg, data, 5);
  const TrainResult b = train(cfg, data, 5);
  CHECK(a.metrics.to_csv() == b.metrics.to_csv());
  CHECK(checkpoint_text(cfg, a.model) == checkpoint_text(cfg, b.model));
  cfg.model.execution = ExecutionPolicy::parallel;
  const TrainResult c = train(cfg, data, 5);
  CHECK(c.metrics.to_csv() == a.metrics.to_csv());
  CHECK(c.model.blocks() == a.model.blocks());
  CHECK(c.model.head_weights() == a.model.head_weights());
  CHECK_FALSE(train(cfg, data, 6).model.blocks() == c.model.blocks());
}

TEST_CASE("checkpoints round-trip bitwise") {
  RunConfig cfg = small_run(20);
  const TrainResult r = train(cfg, load_mixture(cfg), 1);
  const Checkpoint back = parse_checkpoint(checkpoint_text(cfg, r.model));
  CHECK(back.config == cfg);
  CHECK(back.model == r.model);
  const TokenBatch batch = load_mixture(cfg).eval;
  CHECK(predict(back.model, batch).logits == predict(r.model, batch).logits);

  std::string text = checkpoint_text(cfg, r.model);
  CHECK_THROWS_AS(parse_checkpoint("DAMEX-CKPT v2\n"), ConfigError);
  CHECK_THROWS_AS(parse_checkpoint(text.substr(0, text.size() / 2)), ConfigError);
}

TEST_CASE("a diverging run raises a numerical error with the batch attached") {
  RunConfig cfg = small_run(200);
  cfg.train.lr = 1e12;
  try {
    train(cfg, load_mixture(cfg), 1);
    FAIL("expected divergence");
  } catch (const NumericalError& e) {
    CHECK(e.diagnostic().starts_with("dataset_id,foreground,label,f0"));
  }
}

TEST_CASE("batches are checked against the run config") {
  RunConfig cfg = small_run(1);
  std::mt19937_64 rng(1);
  TokenBatch b = isotropic_batch(4, 8, 2, rng);
  CHECK_NOTHROW(check_batch(b, cfg));
  b.dataset_ids[0] = 5;
  CHECK_THROWS_AS(check_batch(b, cfg), ConfigError);
  b = isotropic_batch(4, 8, 2, rng);
  b.labels[1] = 8;
  CHECK_THROWS_AS(check_batch(b, cfg), ConfigError);
  CHECK_THROWS_AS(check_batch(isotropic_batch(4, 3, 2, rng), cfg), ConfigError);
}
