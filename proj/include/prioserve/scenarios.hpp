/* Copyright 2025 The Prioserve Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <sstream>
#include <string>
#include <vector>

#include "prioserve/common.hpp"
#include "prioserve/simulator.hpp"
#include "prioserve/workload.hpp"

namespace prioserve::scenarios {

struct Check {
  std::string name;
  double measured = 0;
  double reference = 0;
  std::string relation;  // "<", ">", ">=", "<="
  bool pass = false;
};

struct Report {
  std::string name;
  std::vector<Check> checks;

  bool pass() const {
    for (const Check& c : checks) {
      if (!c.pass) return false;
    }
    return true;
  }

  std::string table() const {
    std::ostringstream out;
    out << "scenario: " << name << "\n";
    for (const Check& c : checks) {
      out << "  [" << (c.pass ? "PASS" : "FAIL") << "] " << c.name << ": measured "
          << fmt_double(c.measured) << " " << c.relation << " " << fmt_double(c.reference)
          << "\n";
    }
    return out.str();
  }
};

inline Check make_check(std::string name, double measured, const std::string& relation,
                        double reference) {
  Check c;
  c.name = std::move(name);
  c.measured = measured;
  c.reference = reference;
  c.relation = relation;
  if (relation == "<") c.pass = measured < reference;
  if (relation == "<=") c.pass = measured <= reference;
  if (relation == ">") c.pass = measured > reference;
  if (relation == ">=") c.pass = measured >= reference;
  return c;
}

// ---------------------------------------------------------------------------
// Over-balancing golden scenario: two prefill instances. Instance 0 carries a
// 600-token request, instance 1 a 250-token one. R1 (300 tokens, 120 ms TTFT)
// arrives at t=1 and R2 (900 tokens, 140 ms TTFT, high priority) at t=2.
// Least-load sends R1 to the emptier instance 1, which leaves no instance
// able to finish R2 in time. Gain-oriented routing parks R1 on the moderately
// loaded instance 0 and keeps instance 1 free for R2.
// ---------------------------------------------------------------------------

inline SimConfig overbalance_config(GlobalPolicy policy) {
  SimConfig cfg;
  cfg.topology.kind = Topology::Kind::kPdDisagg;
  cfg.topology.n_prefill = 2;
  cfg.topology.n_decode = 1;
  cfg.true_params = LatencyModelParams{0, 0, 0.1, 0.001, 1.0, 2.0};
  cfg.horizon = 2'000;
  cfg.seed = 1;
  cfg.local_policy = LocalPolicy::kSlideBatching;
  cfg.slide.eta = 20.0;
  cfg.slide.min_chunk = 64;
  cfg.slide.phi_variant = PhiVariant::kPrefillOnly;
  cfg.weights.w_first = 2.0;
  cfg.weights.w_decode = 1.0;
  cfg.weights.priority_weight = {{0, 1.0}, {1, 2.0}};
  cfg.global_policy = policy;
  cfg.route = RouteConfig{0.9, 0.2, 0.8, std::nullopt};
  return cfg;
}

inline std::vector<Request> overbalance_workload() {
  auto req = [](RequestId id, TimeMs arrival, std::int64_t input, SloSpec slo,
                PriorityLevel level) {
    Request r;
    r.id = id;
    r.arrival_time = arrival;
    r.input_len = input;
    r.expected_output_len = 2;
    r.priority_level = level;
    r.slo = slo;
    return r;
  };
  return {
      req(0, 0.0, 600, {400, 50}, 0),  // preload for instance 0
      req(1, 0.5, 250, {400, 50}, 0),  // preload for instance 1
      req(2, 1.0, 300, {120, 50}, 0),  // R1
      req(3, 2.0, 900, {140, 50}, 1),  // R2: long, tight SLO, high priority
  };
}

struct OverbalanceOutcome {
  SimResult go_routing;
  SimResult min_load;
  double ttft_r1_go = -1, ttft_r2_go = -1, ttft_r2_min = -1, ttft_r1_min = -1;
};

inline OverbalanceOutcome run_overbalance() {
  OverbalanceOutcome out;
  out.go_routing = run(overbalance_config(GlobalPolicy::kGoRouting), overbalance_workload());
  out.min_load = run(overbalance_config(GlobalPolicy::kMinLoad), overbalance_workload());
  auto ttft_of = [](const SimResult& res, RequestId id) {
    for (const TokenRecord& rec : res.token_records) {
      if (rec.request_id == id && !rec.emit_times.empty()) return observed_ttft(rec);
    }
    return std::numeric_limits<double>::infinity();
  };
  out.ttft_r1_go = ttft_of(out.go_routing, 2);
  out.ttft_r2_go = ttft_of(out.go_routing, 3);
  out.ttft_r1_min = ttft_of(out.min_load, 2);
  out.ttft_r2_min = ttft_of(out.min_load, 3);
  return out;
}

inline Report overbalance_fig8() {
  const auto out = run_overbalance();
  Report rep;
  rep.name = "overbalance_fig8";
  rep.checks.push_back(make_check("go_routing R1 TTFT within SLO", out.ttft_r1_go, "<", 120));
  rep.checks.push_back(make_check("go_routing R2 TTFT within SLO", out.ttft_r2_go, "<", 140));
  rep.checks.push_back(
      make_check("min_load R2 misses TTFT SLO", out.ttft_r2_min, ">=", 140));
  rep.checks.push_back(make_check("go_routing TDG exceeds min_load",
                                  out.go_routing.gain_report.total_gain, ">",
                                  out.min_load.gain_report.total_gain));
  return rep;
}

// ---------------------------------------------------------------------------
// EDF/SJF crossover: the same workload swept over rates under the two limit
// configurations of the sliding boundary (gamma -> 0 is deadline-first,
// gamma -> inf is density-first, i.e. shortest-job-like for equal weights).
// ---------------------------------------------------------------------------

inline SimConfig crossover_config(double gamma) {
  SimConfig cfg;
  cfg.topology.kind = Topology::Kind::kSingleColocated;
  cfg.true_params = LatencyModelParams{0, 0, 0.1, 0.001, 1.0, 2.0};
  cfg.horizon = 40'000;
  cfg.seed = 9;
  cfg.local_policy = LocalPolicy::kSlideBatching;
  cfg.slide.eta = 20.0;
  cfg.slide.min_chunk = 64;
  cfg.slide.gamma = gamma;
  cfg.weights.w_first = 2.0;
  cfg.weights.w_decode = 1.0;
  cfg.weights.priority_weight = {{0, 1.0}, {1, 2.0}};
  cfg.global_policy = GlobalPolicy::kMinLoad;
  return cfg;
}

inline std::vector<Request> crossover_workload() {
  WorkloadSpec spec;
  PoissonSource src;
  src.rate_per_s = 10.0;
  src.duration_ms = 40'000;
  src.input_len = LengthDistribution{LengthDistribution::Kind::kLognormal, 512, 0.8};
  src.output_len = LengthDistribution{LengthDistribution::Kind::kLognormal, 8, 0.5};
  spec.source = src;
  spec.priority_fractions = {{0, 0.5}, {1, 0.5}};
  spec.priority_weights = {{0, 1.0}, {1, 2.0}};
  // Deadlines scale with prompt length (2x the 0.1 ms/token prefill cost):
  // long requests have proportionally tight slack, which is exactly what a
  // shortest-job bias sacrifices at low load.
  spec.slo_policy.kind = SloPolicy::Kind::kPerLength;
  spec.slo_policy.ttft_per_input_token = 0.2;
  spec.slo_policy.ttft_floor = 150.0;
  spec.slo_policy.tpot = 80.0;
  spec.seed = 9;
  return generate(spec);
}

struct CrossoverRow {
  double rate;
  double edf_attainment;
  double sjf_attainment;
};

inline std::vector<CrossoverRow> run_crossover(const std::vector<double>& rates) {
  const auto workload = crossover_workload();
  std::vector<CrossoverRow> rows;
  for (double rate : rates) {
    auto scaled = scale_to_rate(workload, rate);
    const auto edf = run(crossover_config(1e-12), scaled);
    const auto sjf = run(crossover_config(1e12), scaled);
    rows.push_back({rate, edf.gain_report.slo_attainment, sjf.gain_report.slo_attainment});
  }
  return rows;
}

inline std::vector<double> crossover_rates() { return {1.5, 2, 3, 4, 6, 10, 16}; }

inline Report edf_sjf_crossover() {
  const auto rows = run_crossover(crossover_rates());
  Report rep;
  rep.name = "edf_sjf_crossover";
  rep.checks.push_back(make_check("EDF >= SJF at lowest rate", rows.front().edf_attainment,
                                  ">=", rows.front().sjf_attainment));
  rep.checks.push_back(make_check("EDF <= SJF at highest rate", rows.back().edf_attainment,
                                  "<=", rows.back().sjf_attainment));
  // A crossover: some rate strictly favors EDF and a later one strictly SJF.
  int first_edf_win = -1, later_sjf_win = -1;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].edf_attainment > rows[i].sjf_attainment && first_edf_win < 0) {
      first_edf_win = static_cast<int>(i);
    }
    if (first_edf_win >= 0 && rows[i].sjf_attainment > rows[i].edf_attainment) {
      later_sjf_win = static_cast<int>(i);
    }
  }
  rep.checks.push_back(make_check("crossover exists (EDF win index)",
                                  first_edf_win >= 0 ? 1 : 0, ">=", 1));
  rep.checks.push_back(make_check("crossover exists (later SJF win index)",
                                  later_sjf_win > first_edf_win ? 1 : 0, ">=", 1));
  return rep;
}

// ---------------------------------------------------------------------------
// Priority trade-off under saturation (strict-priority starvation) and the
// scheduler comparison used by the acceptance gate.
// ---------------------------------------------------------------------------

inline SimConfig tradeoff_config(LocalPolicy policy) {
  SimConfig cfg;
  cfg.topology.kind = Topology::Kind::kSingleColocated;
  cfg.true_params = LatencyModelParams{0, 0, 0.1, 0.001, 1.0, 2.0};
  cfg.horizon = 40'000;
  cfg.seed = 33;
  cfg.local_policy = policy;
  cfg.slide.eta = 20.0;
  cfg.slide.min_chunk = 64;
  cfg.baseline.max_batch_tokens = 2048;
  cfg.weights.w_first = 2.0;
  cfg.weights.w_decode = 1.0;
  cfg.weights.priority_weight = {{0, 1.0}, {1, 2.0}};
  cfg.global_policy = GlobalPolicy::kMinLoad;
  return cfg;
}

inline std::vector<Request> tradeoff_workload() {
  WorkloadSpec spec;
  PoissonSource src;
  src.rate_per_s = 30.0;  // saturating for the 0.1 ms/token model
  src.duration_ms = 40'000;
  src.input_len = LengthDistribution{LengthDistribution::Kind::kLognormal, 256, 0.9};
  src.output_len = LengthDistribution{LengthDistribution::Kind::kLognormal, 12, 0.5};
  spec.source = src;
  spec.priority_fractions = {{0, 0.5}, {1, 0.5}};
  spec.priority_weights = {{0, 1.0}, {1, 2.0}};
  spec.slo_policy.fixed = {600, 80};
  spec.seed = 33;
  return generate(spec);
}

struct TradeoffOutcome {
  std::map<LocalPolicy, GainReport> reports;
};

inline TradeoffOutcome run_tradeoff() {
  TradeoffOutcome out;
  const auto workload = tradeoff_workload();
  for (auto policy : {LocalPolicy::kSlideBatching, LocalPolicy::kVllmFcfs,
                      LocalPolicy::kSarathiFcfs, LocalPolicy::kSarathiPriority,
                      LocalPolicy::kFairBatching, LocalPolicy::kWeightedVtc}) {
    out.reports[policy] = run(tradeoff_config(policy), workload).gain_report;
  }
  return out;
}

inline Report strict_priority_starvation() {
  const auto out = run_tradeoff();
  Report rep;
  rep.name = "strict_priority_starvation";
  const auto& slide = out.reports.at(LocalPolicy::kSlideBatching);
  const auto& strict = out.reports.at(LocalPolicy::kSarathiPriority);
  rep.checks.push_back(make_check("slide high-priority attainment >= low",
                                  slide.per_priority.at(1).slo_attainment, ">=",
                                  slide.per_priority.at(0).slo_attainment));
  rep.checks.push_back(make_check("strict-priority starves low vs slide",
                                  strict.per_priority.at(0).slo_attainment, "<",
                                  slide.per_priority.at(0).slo_attainment));
  for (const auto& [policy, report] : out.reports) {
    if (policy == LocalPolicy::kSlideBatching) continue;
    rep.checks.push_back(make_check(std::string("slide TDG_Ratio >= ") + to_string(policy),
                                    slide.tdg_ratio, ">=", report.tdg_ratio));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Priority-weight scaling: sweep the high-priority weight at fixed load.
// ---------------------------------------------------------------------------

struct WeightSweepRow {
  double weight;
  double high_attainment;
  double low_attainment;
  double overall_attainment;
};

inline std::vector<WeightSweepRow> run_weight_sweep() {
  std::vector<WeightSweepRow> rows;
  for (double weight : {1.0, 2.0, 4.0, 8.0}) {
    auto cfg = tradeoff_config(LocalPolicy::kSlideBatching);
    cfg.weights.priority_weight = {{0, 1.0}, {1, weight}};
    // A notch below the trade-off scenario's saturation: the weight effect is
    // still pronounced while overall attainment stays in a narrow band.
    auto workload = scale_to_rate(tradeoff_workload(), 22.0);
    const auto report = run(cfg, workload).gain_report;
    rows.push_back({weight, report.per_priority.at(1).slo_attainment,
                    report.per_priority.at(0).slo_attainment, report.slo_attainment});
  }
  return rows;
}

inline Report priority_weight_sweep() {
  const auto rows = run_weight_sweep();
  Report rep;
  rep.name = "priority_weight_sweep";
  for (std::size_t i = 1; i < rows.size(); ++i) {
    rep.checks.push_back(make_check(
        "high-priority attainment nondecreasing (w=" + fmt_double(rows[i].weight) + ")",
        rows[i].high_attainment, ">=", rows[i - 1].high_attainment));
  }
  const double base = rows[1].overall_attainment;  // weight = 2
  for (const auto& row : rows) {
    rep.checks.push_back(make_check(
        "overall attainment within 10pp of w=2 (w=" + fmt_double(row.weight) + ")",
        std::abs(row.overall_attainment - base), "<=", 0.10));
  }
  return rep;
}

}  // namespace prioserve::scenarios
