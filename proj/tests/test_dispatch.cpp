// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <random>

#include "damex/autodiff.hpp"
#include "damex/dispatch.hpp"
#include "damex/error.hpp"
#include "damex/gating.hpp"
#include "damex/gradcheck.hpp"
#include "oracles.hpp"

using namespace damex;

namespace {

GateOutput gate_from_probs(const Matrix& probs, std::size_t k = 1) {
  GateOutput g;
  g.logits = probs;
  g.probs = probs;
  g.topk = select_top_k(probs, k);
  return g;
}

RoutingConfig routing(std::size_t experts, std::size_t k, double f) {
  RoutingConfig cfg;
  cfg.num_experts = experts;
  cfg.k = k;
  cfg.capacity_factor = f;
  return cfg;
}

ExpertSet identity_experts(std::size_t count, std::size_t dim) {
  ExpertSet set;
  set.activation = Activation::linear;
  for (std::size_t e = 0; e < count; ++e) {
    FeedForward ff = FeedForward::zeros(dim, dim);
    ff.w_in = Matrix::identity(dim);
    ff.w_out = Matrix::identity(dim);
    set.experts.push_back(ff);
  }
  return set;
}

// Token-major first-come-first-served simulation, written independently of
// build_plan: walk tokens in order and place each choice if room remains.
std::vector<std::size_t> simulate_occupancy(const Matrix& probs, std::size_t k, std::size_t cap,
                                            std::size_t& drops) {
  std::vector<std::size_t> occ(probs.cols(), 0);
  drops = 0;
  for (std::size_t t = 0; t < probs.rows(); ++t) {
    std::vector<bool> used(probs.cols(), false);
    for (std::size_t r = 0; r < k; ++r) {
      std::size_t best = probs.cols();
      for (std::size_t e = 0; e < probs.cols(); ++e) {
        if (used[e]) continue;
        if (best == probs.cols() || probs(t, e) > probs(t, best)) best = e;
      }
      used[best] = true;
      if (occ[best] < cap) {
        ++occ[best];
      } else {
        ++drops;
      }
    }
  }
  return occ;
}

}  // namespace

TEST_CASE("a zero router gives uniform probabilities") {
  RouterParams router{Matrix(4, 3), 1.0};
  std::mt19937_64 rng(1);
  const GateOutput g = gate(oracle::random_matrix(5, 3, rng), router);
  for (double p : g.probs.data()) CHECK(p == 0.25);
}

TEST_CASE("equal router rows give [0.5, 0.5]") {
  RouterParams router{Matrix::from_rows({{0.3, -1.2}, {0.3, -1.2}}), 1.0};
  std::mt19937_64 rng(2);
  const GateOutput g = gate(oracle::random_matrix(6, 2, rng), router);
  for (double p : g.probs.data()) CHECK(p == 0.5);
}

TEST_CASE("gate composes matmul and softmax") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix w = oracle::random_matrix(3, 5, rng);
    const Matrix x = oracle::random_matrix(7, 5, rng);
    const GateOutput g = gate(x, RouterParams{w, 1.0});
    const Matrix logits = oracle::triple_loop_matmul(x, transpose(w));
    for (std::size_t t = 0; t < 7; ++t) {
      const std::vector<double> row(logits.row(t).begin(), logits.row(t).end());
      const auto want = oracle::softmax_long(row);
      for (std::size_t e = 0; e < 3; ++e) {
        CHECK(std::abs(g.logits(t, e) - logits(t, e)) < 1e-12);
        CHECK(std::abs(g.probs(t, e) - static_cast<double>(want[e])) < 1e-14);
      }
    }
  }
}

TEST_CASE("gate rejects a dimension mismatch") {
  CHECK_THROWS_AS(gate(Matrix(2, 3), RouterParams{Matrix(2, 4), 1.0}), ShapeError);
}

TEST_CASE("the tape gate matches the value gate") {
  std::mt19937_64 rng(4);
  const Matrix w = oracle::random_matrix(3, 4, rng);
  const Matrix x = oracle::random_matrix(5, 4, rng);
  Tape tape;
  const GateVars gv = gate(tape.constant(x), tape.leaf(w));
  const GateOutput g = gate(x, RouterParams{w, 1.0});
  CHECK(gv.logits.value() == g.logits);
  CHECK(gv.probs.value() == g.probs);
}

TEST_CASE("top-1 picks the largest probability") {
  const TopK top = select_top_k(Matrix::from_rows({{0.1, 0.7, 0.2}}), 1);
  REQUIRE(top[0].size() == 1);
  CHECK(top[0][0].expert == 1);
  CHECK(top[0][0].probability == 0.7);
}

TEST_CASE("ties go to the lowest expert index") {
  const TopK top = select_top_k(Matrix::from_rows({{0.5, 0.5}}), 1);
  CHECK(top[0][0].expert == 0);
}

TEST_CASE("k = E lists every expert by descending probability") {
  const TopK top = select_top_k(Matrix::from_rows({{0.2, 0.5, 0.1, 0.2}}), 4);
  REQUIRE(top[0].size() == 4);
  CHECK(top[0][0].expert == 1);
  CHECK(top[0][1].expert == 0);
  CHECK(top[0][2].expert == 3);
  CHECK(top[0][3].expert == 2);
}

TEST_CASE("top-k validates k") {
  CHECK_THROWS_AS(select_top_k(Matrix(1, 2, 0.5), 0), ParameterError);
  CHECK_THROWS_AS(select_top_k(Matrix(1, 2, 0.5), 3), ParameterError);
}

TEST_CASE("capacity examples") {
  CHECK(capacity(8, routing(4, 1, 1.25)) == 3);
  CHECK(capacity(4, routing(4, 1, 1.0)) == 1);
  CHECK(capacity(100, routing(8, 1, 1.25)) == 16);
  CHECK(capacity(10, routing(2, 2, 1.0)) == 10);
  // Decimal factors are not exact in binary; 1.1 * 10 must still give 11.
  CHECK(capacity(10, routing(1, 1, 1.1)) == 11);
  CHECK(capacity(100, routing(3, 1, 0.3)) == 10);
  CHECK(capacity(7, routing(3, 1, 1.0)) == 3);
}

TEST_CASE("routing config validation") {
  CHECK_THROWS_AS(routing(0, 1, 1.0).validate(), ParameterError);
  CHECK_THROWS_AS(routing(2, 3, 1.0).validate(), ParameterError);
  CHECK_THROWS_AS(routing(2, 1, 0.0).validate(), ParameterError);
}

TEST_CASE("the second token to a full expert is dropped") {
  const GateOutput g = gate_from_probs(Matrix::from_rows({{0.9, 0.1}, {0.8, 0.2}}));
  RoutingConfig cfg = routing(2, 1, 1.0);  // C = ceil(1 * 2 / 2) = 1
  const DispatchPlan plan = build_plan(g, cfg, nullptr, {});
  REQUIRE(plan.capacity == 1);
  CHECK_FALSE(plan.dropped(0));
  CHECK(plan.tokens[0][0].slot == 0);
  CHECK(plan.dropped(1));
  CHECK(plan.occupancy == std::vector<std::size_t>{1, 0});
}

TEST_CASE("no drops when capacity covers the batch") {
  std::mt19937_64 rng(5);
  const Matrix probs = softmax_rows(oracle::random_matrix(20, 3, rng, 3.0));
  const DispatchPlan plan = build_plan(gate_from_probs(probs), routing(3, 1, 3.0), nullptr, {});
  CHECK(plan.capacity >= 20);
  CHECK(plan.dropped_assignments() == 0);
}

TEST_CASE("occupancy matches a sequential simulation") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t t = 1 + rng() % 30;
    const std::size_t e = 1 + rng() % 5;
    const std::size_t k = 1 + rng() % e;
    const double f = 0.25 + 0.25 * static_cast<double>(rng() % 8);
    const Matrix probs = softmax_rows(oracle::random_matrix(t, e, rng, 2.0));
    const DispatchPlan plan = build_plan(gate_from_probs(probs, k), routing(e, k, f), nullptr, {});
    std::size_t drops = 0;
    const auto occ = simulate_occupancy(probs, k, plan.capacity, drops);
    CHECK(plan.occupancy == occ);
    CHECK(plan.dropped_assignments() == drops);
  }
}

TEST_CASE("identity expert scales the token by its gate probability") {
  const Matrix x = Matrix::from_rows({{1.0, -2.0, 3.0}});
  const GateOutput g = gate_from_probs(Matrix::from_rows({{0.3, 0.7}}));
  const DispatchPlan plan = build_plan(g, routing(2, 1, 1.25), nullptr, {});
  const Matrix y = moe_forward(x, identity_experts(2, 3), plan);
  for (std::size_t d = 0; d < 3; ++d) CHECK(y(0, d) == doctest::Approx(0.7 * x(0, d)).epsilon(1e-15));
}

TEST_CASE("a dropped token gets a zero output") {
  const Matrix x = Matrix::from_rows({{1.0, 2.0}, {3.0, 4.0}});
  const GateOutput g = gate_from_probs(Matrix::from_rows({{0.9, 0.1}, {0.8, 0.2}}));
  const DispatchPlan plan = build_plan(g, routing(2, 1, 1.0), nullptr, {});
  const Matrix y = moe_forward(x, identity_experts(2, 2), plan);
  CHECK(y(1, 0) == 0.0);
  CHECK(y(1, 1) == 0.0);
  CHECK(y(0, 0) == doctest::Approx(0.9));
}

TEST_CASE("k = E with room for everything equals the dense mixture") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t t = 1 + rng() % 8, d = 2 + rng() % 4, h = 1 + rng() % 5, e = 1 + rng() % 4;
    ExpertSet set;
    for (std::size_t i = 0; i < e; ++i) set.experts.push_back(FeedForward::random(d, h, rng));
    const Matrix x = oracle::random_matrix(t, d, rng);
    const GateOutput g = gate(x, RouterParams{oracle::random_matrix(e, d, rng), 1.0}, e);
    const DispatchPlan plan = build_plan(g, routing(e, e, static_cast<double>(e)), nullptr, {});
    REQUIRE(plan.dropped_assignments() == 0);
    const Matrix y = moe_forward(x, set, plan);
    for (std::size_t tok = 0; tok < t; ++tok) {
      const std::vector<double> xt(x.row(tok).begin(), x.row(tok).end());
      std::vector<double> want(d, 0.0);
      for (std::size_t i = 0; i < e; ++i) {
        const FeedForward& f = set.experts[i];
        const auto out = oracle::ffn(f.w_in, f.b_in, f.w_out, f.b_out, xt, false);
        for (std::size_t j = 0; j < d; ++j) want[j] += g.probs(tok, i) * out[j];
      }
      for (std::size_t j = 0; j < d; ++j) CHECK(std::abs(y(tok, j) - want[j]) <= 1e-12);
    }
  }
}

TEST_CASE("parallel expert execution is bitwise identical to serial") {
  std::mt19937_64 rng(8);
  const std::size_t e = 4;
  ExpertSet set;
  for (std::size_t i = 0; i < e; ++i) set.experts.push_back(FeedForward::random(6, 9, rng));
  const Matrix x = oracle::random_matrix(40, 6, rng);
  const GateOutput g = gate(x, RouterParams{oracle::random_matrix(e, 6, rng), 1.0}, 2);
  const DispatchPlan plan = build_plan(g, routing(e, 2, 1.0), nullptr, {});
  CHECK(moe_forward(x, set, plan, ExecutionPolicy::serial) ==
        moe_forward(x, set, plan, ExecutionPolicy::parallel));

  // Gradients through the fused operation agree bitwise as well.
  auto grads = [&](ExecutionPolicy policy) {
    Tape tape;
    const Var xv = tape.leaf(x);
    const Var w = tape.leaf(oracle::random_matrix(e, 6, rng));
    std::vector<FeedForwardVars> vars;
    for (const FeedForward& f : set.experts) vars.push_back(bind(tape, f));
    const GateVars gv = gate(xv, w);
    const Var y = moe_forward(xv, gv.probs, vars, Activation::gelu, plan, policy);
    tape.backward(ad::sum(ad::mul(y, y)));
    std::vector<Matrix> out{xv.grad(), w.grad()};
    for (const auto& v : vars) out.push_back(v.w_in.grad());
    return out;
  };
  std::mt19937_64 saved = rng;
  const auto a = grads(ExecutionPolicy::serial);
  rng = saved;
  const auto b = grads(ExecutionPolicy::parallel);
  CHECK(a == b);
}

TEST_CASE("moe_forward gradients match finite differences with drops present") {
  std::mt19937_64 rng(9);
  const std::size_t t = 6, d = 3, h = 4, e = 3;
  const Matrix x = oracle::random_matrix(t, d, rng);
  const Matrix w = oracle::random_matrix(e, d, rng);
  std::vector<Matrix> params{x, w};
  for (std::size_t i = 0; i < e; ++i) {
    const FeedForward f = FeedForward::random(d, h, rng);
    params.insert(params.end(), {f.w_in, f.b_in, f.w_out, f.b_out});
  }
  const GateOutput g0 = gate(x, RouterParams{w, 1.0}, 2);
  const DispatchPlan plan = build_plan(g0, routing(e, 2, 0.75), nullptr, {});
  REQUIRE(plan.dropped_assignments() > 0);
  const Matrix weights = oracle::random_matrix(t, d, rng);
  const LossBuilder f = [&](Tape&, std::span<const Var> p) {
    const GateVars gv = gate(p[0], p[1]);
    std::vector<FeedForwardVars> vars;
    for (std::size_t i = 0; i < e; ++i) vars.push_back({p[2 + 4 * i], p[3 + 4 * i], p[4 + 4 * i], p[5 + 4 * i]});
    return ad::weighted_sum(moe_forward(p[0], gv.probs, vars, Activation::gelu, plan), weights);
  };
  CHECK(finite_diff_check(f, params, 1e-5).max_relative_error < 1e-6);
}

TEST_CASE("forced mapping routes each token inside its mapping") {
  MappingTable mapping(3);
  mapping.assign(0, {0});
  mapping.assign(1, {1, 2});
  std::mt19937_64 rng(10);
  const Matrix probs = softmax_rows(oracle::random_matrix(50, 3, rng));
  std::vector<int> ids;
  for (int i = 0; i < 50; ++i) ids.push_back(i % 2);
  RoutingConfig cfg = routing(3, 1, 10.0);
  cfg.dispatch_mode = DispatchMode::forced_mapping;
  const DispatchPlan plan = build_plan(gate_from_probs(probs), cfg, &mapping, ids, 42);
  bool saw1 = false, saw2 = false;
  for (std::size_t t = 0; t < 50; ++t) {
    const std::size_t ex = plan.selected_expert(t);
    CHECK(mapping.maps_to(ids[t], ex));
    CHECK(plan.tokens[t][0].weight == probs(t, ex));
    saw1 = saw1 || ex == 1;
    saw2 = saw2 || ex == 2;
  }
  CHECK((saw1 && saw2));
  CHECK(plan == build_plan(gate_from_probs(probs), cfg, &mapping, ids, 42));

  cfg.k = 2;
  CHECK_THROWS_AS(build_plan(gate_from_probs(probs, 2), cfg, &mapping, ids), ConfigError);
  cfg.k = 1;
  CHECK_THROWS_AS(build_plan(gate_from_probs(probs), cfg, nullptr, ids), ConfigError);
}

TEST_CASE("dispatch stats") {
  SUBCASE("balanced plan has zero CoV") {
    const Matrix probs = Matrix::from_rows({{0.9, 0.1}, {0.1, 0.9}, {0.8, 0.2}, {0.3, 0.7}});
    const DispatchStats s = dispatch_stats(build_plan(gate_from_probs(probs), routing(2, 1, 1.0), nullptr, {}));
    CHECK(s.occupancy_cov == 0.0);
    CHECK(s.dropped == 0);
  }
  SUBCASE("everything on one of four experts gives CoV sqrt(3)") {
    Matrix probs(12, 4, 0.1);
    for (std::size_t t = 0; t < 12; ++t) probs(t, 2) = 0.7;
    const DispatchStats s = dispatch_stats(build_plan(gate_from_probs(probs), routing(4, 1, 4.0), nullptr, {}));
    // counts (0, 0, 12, 0): mean 3, population variance (3*9 + 81)/4 = 27.
    CHECK(s.occupancy_cov == doctest::Approx(std::sqrt(3.0)).epsilon(1e-14));
  }
}

TEST_CASE("token conservation on random plans") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t t = rng() % 40, e = 1 + rng() % 6, k = 1 + rng() % e;
    const double f = 0.1 + static_cast<double>(rng() % 30) / 10.0;
    const Matrix probs = t == 0 ? Matrix(0, e) : softmax_rows(oracle::random_matrix(t, e, rng));
    const DispatchPlan plan = build_plan(gate_from_probs(probs, k), routing(e, k, f), nullptr, {});
    const DispatchStats s = dispatch_stats(plan);
    std::size_t total = s.dropped;
    for (std::size_t c : s.counts) {
      CHECK(c <= plan.capacity);
      total += c;
    }
    CHECK(total == t * k);
  }
}
