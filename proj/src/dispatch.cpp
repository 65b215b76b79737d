// SPDX-License-Identifier: Apache-2.0
#include "damex/dispatch.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <thread>

#include "damex/error.hpp"

namespace damex {

namespace {

template <typename Fn>
void for_each_expert(std::size_t n, ExecutionPolicy policy, Fn&& fn) {
  if (policy == ExecutionPolicy::serial || n < 2) {
    for (std::size_t e = 0; e < n; ++e) fn(e);
    return;
  }
  std::vector<std::thread> workers;
  workers.reserve(n);
  for (std::size_t e = 0; e < n; ++e) workers.emplace_back([&fn, e] { fn(e); });
  for (auto& w : workers) w.join();
}

struct ExpertCache {
  std::vector<std::size_t> rows;
  Matrix x, pre, hidden, out;
};

struct ExpertGrads {
  Matrix w_in, b_in, w_out, b_out, x;
  std::vector<double> dprob;
};

Matrix column_sums(const Matrix& m) {
  Matrix out(1, m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) out(0, c) += m(r, c);
  return out;
}

}  // namespace

void RoutingConfig::validate() const {
  if (num_experts < 1) throw ParameterError("num_experts must be >= 1");
  if (k < 1 || k > num_experts) throw ParameterError("k must satisfy 1 <= k <= num_experts");
  if (!(capacity_factor > 0.0)) throw ParameterError("capacity_factor must be > 0");
}

std::size_t capacity(std::size_t tokens, const RoutingConfig& cfg) {
  cfg.validate();
  const double c = cfg.capacity_factor * static_cast<double>(cfg.k) * static_cast<double>(tokens) /
                   static_cast<double>(cfg.num_experts);
  // Factors such as 1.1 are not exact in binary, so 1.1 * 10 lands just above
  // 11. Products within rounding distance of an integer snap to it.
  const double nearest = std::round(c);
  if (std::abs(c - nearest) <= 1e-9 * std::max(1.0, nearest)) return static_cast<std::size_t>(nearest);
  return static_cast<std::size_t>(std::ceil(c));
}

bool DispatchPlan::dropped(std::size_t token) const {
  for (const Assignment& a : tokens.at(token))
    if (!a.dropped()) return false;
  return true;
}

std::size_t DispatchPlan::dropped_assignments() const {
  std::size_t n = 0;
  for (const auto& row : tokens)
    for (const Assignment& a : row) n += a.dropped() ? 1 : 0;
  return n;
}

std::vector<std::vector<std::size_t>> DispatchPlan::expert_buffers() const {
  std::vector<std::vector<std::size_t>> buffers(num_experts);
  for (std::size_t e = 0; e < num_experts; ++e) buffers[e].resize(occupancy[e]);
  for (std::size_t t = 0; t < tokens.size(); ++t)
    for (const Assignment& a : tokens[t])
      if (!a.dropped()) buffers[a.expert][a.slot] = t;
  return buffers;
}

DispatchPlan build_plan(const GateOutput& gate, const RoutingConfig& cfg,
                        const MappingTable* mapping, std::span<const int> dataset_ids,
                        std::uint64_t seed) {
  cfg.validate();
  const std::size_t t_count = gate.probs.rows();
  if (gate.probs.cols() != cfg.num_experts) {
    throw ContractError("gate has " + std::to_string(gate.probs.cols()) + " experts, config has " +
                        std::to_string(cfg.num_experts));
  }
  const bool forced = cfg.dispatch_mode == DispatchMode::forced_mapping;
  if (forced && mapping == nullptr) throw ConfigError("forced_mapping dispatch needs a mapping");
  if (forced && cfg.k != 1) throw ConfigError("forced_mapping dispatch supports k = 1 only");
  if ((forced || !dataset_ids.empty()) && dataset_ids.size() != t_count) {
    throw ContractError("dataset id count does not match token count");
  }
  if (mapping != nullptr && mapping->num_experts() != cfg.num_experts) {
    throw ConfigError("mapping is defined over a different number of experts");
  }

  DispatchPlan plan;
  plan.num_experts = cfg.num_experts;
  plan.capacity = t_count == 0 ? 0 : capacity(t_count, cfg);
  plan.occupancy.assign(cfg.num_experts, 0);
  plan.tokens.resize(t_count);

  std::mt19937_64 rng(seed);
  const TopK topk = forced ? TopK{} : select_top_k(gate.probs, cfg.k);
  for (std::size_t t = 0; t < t_count; ++t) {
    std::vector<std::size_t> chosen;
    if (forced) {
      const auto& experts = mapping->experts_for(dataset_ids[t]);
      std::size_t pick = 0;
      if (experts.size() > 1) {
        std::uniform_int_distribution<std::size_t> dist(0, experts.size() - 1);
        pick = dist(rng);
      }
      chosen.push_back(experts[pick]);
    } else {
      for (const ExpertChoice& c : topk[t]) chosen.push_back(c.expert);
    }
    for (std::size_t e : chosen) {
      Assignment a{e, gate.probs(t, e), kDroppedSlot};
      if (plan.occupancy[e] < plan.capacity) a.slot = plan.occupancy[e]++;
      plan.tokens[t].push_back(a);
    }
  }
  return plan;
}

Var moe_forward(Var tokens, Var probs, std::span<const FeedForwardVars> experts, Activation act,
                const DispatchPlan& plan, ExecutionPolicy policy) {
  const std::size_t t_count = tokens.rows();
  const std::size_t e_count = experts.size();
  if (plan.num_tokens() != t_count || probs.rows() != t_count) {
    throw ContractError("dispatch plan was not built for this batch");
  }
  if (plan.num_experts != e_count || probs.cols() != e_count) {
    throw ContractError("dispatch plan, router and expert set disagree on the expert count");
  }
  Tape& tape = tokens.tape();
  const Matrix& x = tokens.value();
  const Matrix& p = probs.value();

  auto cache = std::make_shared<std::vector<ExpertCache>>(e_count);
  const auto buffers = plan.expert_buffers();
  std::vector<FeedForward> params(e_count);
  for (std::size_t e = 0; e < e_count; ++e) {
    params[e] = {experts[e].w_in.value(), experts[e].b_in.value(), experts[e].w_out.value(),
                 experts[e].b_out.value()};
  }

  for_each_expert(e_count, policy, [&](std::size_t e) {
    ExpertCache& c = (*cache)[e];
    c.rows = buffers[e];
    if (c.rows.empty()) return;
    c.x = Matrix(c.rows.size(), x.cols());
    for (std::size_t i = 0; i < c.rows.size(); ++i) {
      const auto src = x.row(c.rows[i]);
      std::copy(src.begin(), src.end(), c.x.row(i).begin());
    }
    c.out = apply(params[e], c.x, act, &c.pre, &c.hidden);
  });

  Matrix y(t_count, x.cols());
  for (std::size_t e = 0; e < e_count; ++e) {
    const ExpertCache& c = (*cache)[e];
    for (std::size_t i = 0; i < c.rows.size(); ++i) {
      const std::size_t t = c.rows[i];
      const double w = p(t, e);
      auto dst = y.row(t);
      const auto src = c.out.row(i);
      for (std::size_t d = 0; d < dst.size(); ++d) dst[d] += w * src[d];
    }
  }

  std::vector<std::size_t> parents{tokens.id(), probs.id()};
  for (const FeedForwardVars& ev : experts) {
    parents.insert(parents.end(), {ev.w_in.id(), ev.b_in.id(), ev.w_out.id(), ev.b_out.id()});
  }
  const std::size_t id_tokens = tokens.id();
  const std::size_t id_probs = probs.id();
  std::vector<FeedForwardVars> ev(experts.begin(), experts.end());

  return tape.record(std::move(y), parents, [=](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& pv = t.value(id_probs);
    std::vector<ExpertGrads> grads(e_count);

    for_each_expert(e_count, policy, [&](std::size_t e) {
      const ExpertCache& c = (*cache)[e];
      if (c.rows.empty()) return;
      ExpertGrads& out = grads[e];
      const std::size_t n = c.rows.size();
      Matrix d_out(n, g.cols());
      out.dprob.assign(n, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t tok = c.rows[i];
        const double w = pv(tok, e);
        double dot = 0.0;
        for (std::size_t d = 0; d < g.cols(); ++d) {
          d_out(i, d) = w * g(tok, d);
          dot += g(tok, d) * c.out(i, d);
        }
        out.dprob[i] = dot;
      }
      out.w_out = damex::matmul(damex::transpose(c.hidden), d_out);
      out.b_out = column_sums(d_out);
      Matrix d_pre = damex::matmul(d_out, damex::transpose(t.value(ev[e].w_out.id())));
      for (std::size_t i = 0; i < d_pre.size(); ++i)
        d_pre.data()[i] *= activate_derivative(act, c.pre.data()[i]);
      out.w_in = damex::matmul(damex::transpose(c.x), d_pre);
      out.b_in = column_sums(d_pre);
      out.x = damex::matmul(d_pre, damex::transpose(t.value(ev[e].w_in.id())));
    });

    for (std::size_t e = 0; e < e_count; ++e) {
      const ExpertCache& c = (*cache)[e];
      if (c.rows.empty()) continue;
      const ExpertGrads& eg = grads[e];
      t.accumulate(ev[e].w_in.id(), eg.w_in);
      t.accumulate(ev[e].b_in.id(), eg.b_in);
      t.accumulate(ev[e].w_out.id(), eg.w_out);
      t.accumulate(ev[e].b_out.id(), eg.b_out);
      if (t.requires_grad(id_probs)) {
        Matrix& dp = t.grad_mut(id_probs);
        for (std::size_t i = 0; i < c.rows.size(); ++i) dp(c.rows[i], e) += eg.dprob[i];
      }
      if (t.requires_grad(id_tokens)) {
        Matrix& dx = t.grad_mut(id_tokens);
        for (std::size_t i = 0; i < c.rows.size(); ++i) {
          auto dst = dx.row(c.rows[i]);
          const auto src = eg.x.row(i);
          for (std::size_t d = 0; d < dst.size(); ++d) dst[d] += src[d];
        }
      }
    }
  });
}

Matrix moe_forward(const Matrix& tokens, const ExpertSet& experts, const DispatchPlan& plan,
                   ExecutionPolicy policy) {
  if (plan.num_tokens() != tokens.rows()) {
    throw ContractError("dispatch plan was not built for this batch");
  }
  Matrix probs(tokens.rows(), experts.size());
  for (std::size_t t = 0; t < plan.num_tokens(); ++t)
    for (const Assignment& a : plan.tokens[t]) {
      if (a.expert >= experts.size()) throw ContractError("plan references a missing expert");
      probs(t, a.expert) = a.weight;
    }
  Tape tape;
  const Var x = tape.constant(tokens);
  const Var p = tape.constant(std::move(probs));
  std::vector<FeedForwardVars> vars;
  for (const FeedForward& ff : experts.experts) vars.push_back(bind(tape, ff, false));
  return moe_forward(x, p, vars, experts.activation, plan, policy).value();
}

DispatchStats dispatch_stats(const DispatchPlan& plan) {
  DispatchStats s;
  s.counts = plan.occupancy;
  s.dropped = plan.dropped_assignments();
  std::size_t assignments = 0;
  for (const auto& row : plan.tokens) assignments += row.size();
  s.drop_rate = assignments == 0 ? 0.0 : static_cast<double>(s.dropped) / assignments;
  if (!s.counts.empty()) {
    double mean = 0.0;
    for (std::size_t c : s.counts) mean += static_cast<double>(c);
    mean /= static_cast<double>(s.counts.size());
    double var = 0.0;
    for (std::size_t c : s.counts) var += (c - mean) * (c - mean);
    var /= static_cast<double>(s.counts.size());
    s.occupancy_cov = mean > 0.0 ? std::sqrt(var) / mean : 0.0;
  }
  return s;
}

}  // namespace damex
