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

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "prioserve/common.hpp"
#include "prioserve/simulator.hpp"
#include "prioserve/workload.hpp"

namespace prioserve {

struct SchedulerChoice {
  LocalPolicy local = LocalPolicy::kSlideBatching;
  GlobalPolicy global = GlobalPolicy::kMinLoad;

  std::string label() const {
    return std::string(to_string(local)) + "-" + to_string(global);
  }
};

// One experiment = one config file: a simulation setup, a workload, a
// scheduler matrix and a rate list.
struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 1;
  std::string output_dir = "out";
  std::vector<double> rates;
  std::vector<SchedulerChoice> schedulers;
  SimConfig sim;
  WorkloadSpec workload;
  // w_first left unset in the file: derive w_first/w_decode from the
  // workload's mean input/output length ratio.
  bool auto_first_weight = false;

  void validate() const {
    if (schedulers.empty()) throw ConfigError("schedulers: matrix must be nonempty");
    if (rates.empty()) throw ConfigError("rates: must list at least one rate");
    for (double r : rates) {
      if (r <= 0) throw ConfigError("rates: must be positive");
    }
    sim.validate();
    workload.validate();
  }
};

namespace cfgdetail {

inline const nlohmann::json& require(const nlohmann::json& j, const char* key,
                                     const std::string& path) {
  auto it = j.find(key);
  if (it == j.end()) throw ConfigError(path + "." + key + ": missing required field");
  return *it;
}

template <typename T>
T get(const nlohmann::json& j, const char* key, const std::string& path) {
  try {
    return require(j, key, path).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(path + "." + key + ": wrong type");
  }
}

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T def, const std::string& path) {
  auto it = j.find(key);
  if (it == j.end()) return def;
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(path + "." + key + ": wrong type");
  }
}

inline std::map<PriorityLevel, double> parse_level_map(const nlohmann::json& j,
                                                       const std::string& path) {
  std::map<PriorityLevel, double> out;
  if (!j.is_object() || j.empty()) throw ConfigError(path + ": expected nonempty object");
  for (const auto& [key, value] : j.items()) {
    try {
      out[std::stoi(key)] = value.get<double>();
    } catch (...) {
      throw ConfigError(path + "." + key + ": keys are integer levels, values numbers");
    }
  }
  return out;
}

inline nlohmann::ordered_json level_map_to_json(const std::map<PriorityLevel, double>& m) {
  nlohmann::ordered_json j;
  for (const auto& [level, v] : m) j[std::to_string(level)] = v;
  return j;
}

inline LengthDistribution parse_length_dist(const nlohmann::json& j, const std::string& path) {
  LengthDistribution d;
  const std::string kind = get<std::string>(j, "kind", path);
  if (kind == "lognormal") {
    d.kind = LengthDistribution::Kind::kLognormal;
    d.median = get<double>(j, "median", path);
    d.sigma = get<double>(j, "sigma", path);
  } else if (kind == "fixed") {
    d.kind = LengthDistribution::Kind::kFixed;
    d.fixed = get<std::int64_t>(j, "value", path);
  } else if (kind == "uniform") {
    d.kind = LengthDistribution::Kind::kUniform;
    d.lo = get<std::int64_t>(j, "lo", path);
    d.hi = get<std::int64_t>(j, "hi", path);
  } else {
    throw ConfigError(path + ".kind: unknown length distribution '" + kind + "'");
  }
  return d;
}

inline nlohmann::ordered_json length_dist_to_json(const LengthDistribution& d) {
  nlohmann::ordered_json j;
  switch (d.kind) {
    case LengthDistribution::Kind::kLognormal:
      j["kind"] = "lognormal";
      j["median"] = d.median;
      j["sigma"] = d.sigma;
      break;
    case LengthDistribution::Kind::kFixed:
      j["kind"] = "fixed";
      j["value"] = d.fixed;
      break;
    case LengthDistribution::Kind::kUniform:
      j["kind"] = "uniform";
      j["lo"] = d.lo;
      j["hi"] = d.hi;
      break;
  }
  return j;
}

inline LatencyModelParams parse_params(const nlohmann::json& j, const std::string& path) {
  try {
    return LatencyModelParams::from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace cfgdetail

inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
  using namespace cfgdetail;
  ExperimentConfig cfg;
  const std::string root = "config";
  cfg.name = get_or<std::string>(j, "name", "experiment", root);
  cfg.seed = get_or<std::uint64_t>(j, "seed", 1, root);
  cfg.output_dir = get_or<std::string>(j, "output_dir", "out", root);
  cfg.rates = get<std::vector<double>>(j, "rates", root);

  for (const auto& s : require(j, "schedulers", root)) {
    SchedulerChoice choice;
    choice.local = local_policy_from_string(get<std::string>(s, "local", root + ".schedulers"));
    choice.global =
        global_policy_from_string(get<std::string>(s, "global", root + ".schedulers"));
    cfg.schedulers.push_back(choice);
  }

  // --- sim section ---
  const nlohmann::json& sim = require(j, "sim", root);
  const std::string sp = root + ".sim";
  SimConfig& sc = cfg.sim;
  {
    const nlohmann::json& topo = require(sim, "topology", sp);
    const std::string kind = get<std::string>(topo, "kind", sp + ".topology");
    if (kind == "single_colocated") {
      sc.topology.kind = Topology::Kind::kSingleColocated;
    } else if (kind == "multi_colocated") {
      sc.topology.kind = Topology::Kind::kMultiColocated;
      sc.topology.n_colocated = get<int>(topo, "n_colocated", sp + ".topology");
    } else if (kind == "pd_disagg") {
      sc.topology.kind = Topology::Kind::kPdDisagg;
      sc.topology.n_prefill = get<int>(topo, "n_prefill", sp + ".topology");
      sc.topology.n_decode = get<int>(topo, "n_decode", sp + ".topology");
    } else {
      throw ConfigError(sp + ".topology.kind: unknown topology '" + kind + "'");
    }
  }
  sc.true_params = parse_params(require(sim, "true_params", sp), sp + ".true_params");
  if (sim.contains("sched_params")) {
    sc.sched_params = parse_params(sim["sched_params"], sp + ".sched_params");
  }
  if (sim.contains("drift")) {
    for (const auto& step : sim["drift"]) {
      if (!step.is_array() || step.size() != 2) {
        throw ConfigError(sp + ".drift: entries are [time_ms, multiplier] pairs");
      }
      sc.drift.steps.emplace_back(step[0].get<double>(), step[1].get<double>());
    }
  }
  sc.blocks_per_instance =
      get_or<std::int64_t>(sim, "blocks_per_instance", sc.blocks_per_instance, sp);
  sc.block_size = get_or<std::int64_t>(sim, "block_size", sc.block_size, sp);
  sc.horizon = get<double>(sim, "horizon_ms", sp);
  sc.seed = cfg.seed;
  if (sim.contains("slide")) {
    const nlohmann::json& sl = sim["slide"];
    const std::string slp = sp + ".slide";
    if (sl.contains("eta_ms")) sc.slide.eta = sl["eta_ms"].get<double>();
    sc.slide.gamma = get_or<double>(sl, "gamma", sc.slide.gamma, slp);
    const std::string phi = get_or<std::string>(sl, "phi_variant", "aggressive", slp);
    if (phi == "aggressive") {
      sc.slide.phi_variant = PhiVariant::kAggressive;
    } else if (phi == "conservative") {
      sc.slide.phi_variant = PhiVariant::kConservative;
    } else if (phi == "prefill_only") {
      sc.slide.phi_variant = PhiVariant::kPrefillOnly;
    } else {
      throw ConfigError(slp + ".phi_variant: unknown variant '" + phi + "'");
    }
    sc.slide.min_chunk = get_or<std::int64_t>(sl, "min_chunk", sc.slide.min_chunk, slp);
    sc.slide.max_batch_memory =
        get_or<std::int64_t>(sl, "max_batch_memory", sc.slide.max_batch_memory, slp);
    sc.slide.guarantee_first_entry =
        get_or<bool>(sl, "guarantee_first_entry", true, slp);
  }
  if (sim.contains("baseline")) {
    const nlohmann::json& b = sim["baseline"];
    const std::string bp = sp + ".baseline";
    sc.baseline.max_batch_tokens =
        get_or<std::int64_t>(b, "max_batch_tokens", sc.baseline.max_batch_tokens, bp);
    sc.baseline.max_batch_seqs =
        get_or<std::int64_t>(b, "max_batch_seqs", sc.baseline.max_batch_seqs, bp);
    sc.baseline.fair_urgent_factor =
        get_or<double>(b, "fair_urgent_factor", sc.baseline.fair_urgent_factor, bp);
  }
  if (sim.contains("route")) {
    const nlohmann::json& r = sim["route"];
    const std::string rp = sp + ".route";
    sc.route.alpha = get_or<double>(r, "alpha", sc.route.alpha, rp);
    sc.route.mu = get_or<double>(r, "mu", sc.route.mu, rp);
    sc.route.lambda = get_or<double>(r, "lambda", sc.route.lambda, rp);
    if (r.contains("b_d_avg_ms")) sc.route.b_d_avg = r["b_d_avg_ms"].get<double>();
  }
  {
    const nlohmann::json& w = require(sim, "weights", sp);
    const std::string wp = sp + ".weights";
    if (w.contains("w_first")) {
      sc.weights.w_first = get<double>(w, "w_first", wp);
      sc.weights.w_decode = get_or<double>(w, "w_decode", 1.0, wp);
    } else {
      cfg.auto_first_weight = true;
      sc.weights.w_first = 1.0;  // replaced from the workload before running
      sc.weights.w_decode = get_or<double>(w, "w_decode", 1.0, wp);
    }
    sc.weights.priority_weight =
        cfgdetail::parse_level_map(require(w, "priority_weights", wp), wp + ".priority_weights");
  }
  if (sim.contains("correction")) {
    const nlohmann::json& c = sim["correction"];
    const std::string cp = sp + ".correction";
    sc.correction.enabled = get_or<bool>(c, "enabled", false, cp);
    sc.correction.window = get_or<int>(c, "window", sc.correction.window, cp);
    sc.correction.theta = get_or<double>(c, "theta", sc.correction.theta, cp);
  }
  sc.signal_delay = get_or<double>(sim, "signal_delay_ms", 0.0, sp);
  sc.kv_transfer_delay = get_or<double>(sim, "kv_transfer_delay_ms", 0.0, sp);
  sc.audit = get_or<bool>(sim, "audit", false, sp);
  sc.first_token_unbuffered = get_or<bool>(sim, "first_token_unbuffered", false, sp);

  // --- workload section ---
  const nlohmann::json& wl = require(j, "workload", root);
  const std::string wlp = root + ".workload";
  {
    const nlohmann::json& src = require(wl, "source", wlp);
    const std::string kind = get<std::string>(src, "kind", wlp + ".source");
    if (kind == "poisson") {
      PoissonSource p;
      p.rate_per_s = get<double>(src, "rate_per_s", wlp + ".source");
      p.duration_ms = get<double>(src, "duration_ms", wlp + ".source");
      if (src.contains("input_len")) {
        p.input_len = cfgdetail::parse_length_dist(src["input_len"], wlp + ".source.input_len");
      }
      if (src.contains("output_len")) {
        p.output_len =
            cfgdetail::parse_length_dist(src["output_len"], wlp + ".source.output_len");
      }
      cfg.workload.source = p;
    } else if (kind == "trace") {
      TraceSource t;
      t.path = get<std::string>(src, "path", wlp + ".source");
      t.target_rate_per_s = get_or<double>(src, "target_rate_per_s", 0.0, wlp + ".source");
      cfg.workload.source = t;
    } else {
      throw ConfigError(wlp + ".source.kind: unknown source '" + kind + "'");
    }
  }
  cfg.workload.priority_fractions = cfgdetail::parse_level_map(
      require(wl, "priority_fractions", wlp), wlp + ".priority_fractions");
  cfg.workload.priority_weights = sc.weights.priority_weight;
  {
    const nlohmann::json& slo = require(wl, "slo", wlp);
    const std::string slop = wlp + ".slo";
    const std::string kind = get<std::string>(slo, "kind", slop);
    if (kind == "fixed") {
      cfg.workload.slo_policy.kind = SloPolicy::Kind::kFixed;
      cfg.workload.slo_policy.fixed.ttft_slo = get<double>(slo, "ttft_ms", slop);
      cfg.workload.slo_policy.fixed.tpot_slo = get<double>(slo, "tpot_ms", slop);
    } else if (kind == "per_length") {
      cfg.workload.slo_policy.kind = SloPolicy::Kind::kPerLength;
      cfg.workload.slo_policy.ttft_per_input_token =
          get<double>(slo, "ttft_per_input_token", slop);
      cfg.workload.slo_policy.ttft_floor = get<double>(slo, "ttft_floor_ms", slop);
      cfg.workload.slo_policy.tpot = get<double>(slo, "tpot_ms", slop);
    } else {
      throw ConfigError(slop + ".kind: unknown slo policy '" + kind + "'");
    }
  }
  cfg.workload.seed = get_or<std::uint64_t>(wl, "seed", cfg.seed, wlp);
  cfg.validate();
  return cfg;
}

inline ExperimentConfig parse_experiment_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  return parse_experiment_config(j);
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_experiment_config(text);
}

inline nlohmann::ordered_json serialize_experiment_config(const ExperimentConfig& cfg) {
  using namespace cfgdetail;
  nlohmann::ordered_json j;
  j["name"] = cfg.name;
  j["seed"] = cfg.seed;
  j["output_dir"] = cfg.output_dir;
  j["rates"] = cfg.rates;
  nlohmann::ordered_json scheds = nlohmann::ordered_json::array();
  for (const SchedulerChoice& s : cfg.schedulers) {
    scheds.push_back({{"local", to_string(s.local)}, {"global", to_string(s.global)}});
  }
  j["schedulers"] = scheds;

  nlohmann::ordered_json sim;
  {
    nlohmann::ordered_json topo;
    switch (cfg.sim.topology.kind) {
      case Topology::Kind::kSingleColocated:
        topo["kind"] = "single_colocated";
        break;
      case Topology::Kind::kMultiColocated:
        topo["kind"] = "multi_colocated";
        topo["n_colocated"] = cfg.sim.topology.n_colocated;
        break;
      case Topology::Kind::kPdDisagg:
        topo["kind"] = "pd_disagg";
        topo["n_prefill"] = cfg.sim.topology.n_prefill;
        topo["n_decode"] = cfg.sim.topology.n_decode;
        break;
    }
    sim["topology"] = topo;
  }
  sim["true_params"] = cfg.sim.true_params.to_json();
  if (cfg.sim.sched_params) sim["sched_params"] = cfg.sim.sched_params->to_json();
  if (!cfg.sim.drift.steps.empty()) {
    nlohmann::ordered_json drift = nlohmann::ordered_json::array();
    for (const auto& [t, m] : cfg.sim.drift.steps) drift.push_back({t, m});
    sim["drift"] = drift;
  }
  sim["blocks_per_instance"] = cfg.sim.blocks_per_instance;
  sim["block_size"] = cfg.sim.block_size;
  sim["horizon_ms"] = cfg.sim.horizon;
  {
    nlohmann::ordered_json slide;
    if (cfg.sim.slide.eta) slide["eta_ms"] = *cfg.sim.slide.eta;
    slide["gamma"] = cfg.sim.slide.gamma;
    switch (cfg.sim.slide.phi_variant) {
      case PhiVariant::kAggressive: slide["phi_variant"] = "aggressive"; break;
      case PhiVariant::kConservative: slide["phi_variant"] = "conservative"; break;
      case PhiVariant::kPrefillOnly: slide["phi_variant"] = "prefill_only"; break;
    }
    slide["min_chunk"] = cfg.sim.slide.min_chunk;
    slide["max_batch_memory"] = cfg.sim.slide.max_batch_memory;
    slide["guarantee_first_entry"] = cfg.sim.slide.guarantee_first_entry;
    sim["slide"] = slide;
  }
  {
    nlohmann::ordered_json b;
    b["max_batch_tokens"] = cfg.sim.baseline.max_batch_tokens;
    b["max_batch_seqs"] = cfg.sim.baseline.max_batch_seqs;
    b["fair_urgent_factor"] = cfg.sim.baseline.fair_urgent_factor;
    sim["baseline"] = b;
  }
  {
    nlohmann::ordered_json r;
    r["alpha"] = cfg.sim.route.alpha;
    r["mu"] = cfg.sim.route.mu;
    r["lambda"] = cfg.sim.route.lambda;
    if (cfg.sim.route.b_d_avg) r["b_d_avg_ms"] = *cfg.sim.route.b_d_avg;
    sim["route"] = r;
  }
  {
    nlohmann::ordered_json w;
    if (!cfg.auto_first_weight) w["w_first"] = cfg.sim.weights.w_first;
    w["w_decode"] = cfg.sim.weights.w_decode;
    w["priority_weights"] = level_map_to_json(cfg.sim.weights.priority_weight);
    sim["weights"] = w;
  }
  {
    nlohmann::ordered_json c;
    c["enabled"] = cfg.sim.correction.enabled;
    c["window"] = cfg.sim.correction.window;
    c["theta"] = cfg.sim.correction.theta;
    sim["correction"] = c;
  }
  sim["signal_delay_ms"] = cfg.sim.signal_delay;
  sim["kv_transfer_delay_ms"] = cfg.sim.kv_transfer_delay;
  sim["audit"] = cfg.sim.audit;
  sim["first_token_unbuffered"] = cfg.sim.first_token_unbuffered;
  j["sim"] = sim;

  nlohmann::ordered_json wl;
  if (const auto* p = std::get_if<PoissonSource>(&cfg.workload.source)) {
    nlohmann::ordered_json src;
    src["kind"] = "poisson";
    src["rate_per_s"] = p->rate_per_s;
    src["duration_ms"] = p->duration_ms;
    src["input_len"] = length_dist_to_json(p->input_len);
    src["output_len"] = length_dist_to_json(p->output_len);
    wl["source"] = src;
  } else {
    const auto& t = std::get<TraceSource>(cfg.workload.source);
    nlohmann::ordered_json src;
    src["kind"] = "trace";
    src["path"] = t.path;
    src["target_rate_per_s"] = t.target_rate_per_s;
    wl["source"] = src;
  }
  wl["priority_fractions"] = level_map_to_json(cfg.workload.priority_fractions);
  {
    nlohmann::ordered_json slo;
    if (cfg.workload.slo_policy.kind == SloPolicy::Kind::kFixed) {
      slo["kind"] = "fixed";
      slo["ttft_ms"] = cfg.workload.slo_policy.fixed.ttft_slo;
      slo["tpot_ms"] = cfg.workload.slo_policy.fixed.tpot_slo;
    } else {
      slo["kind"] = "per_length";
      slo["ttft_per_input_token"] = cfg.workload.slo_policy.ttft_per_input_token;
      slo["ttft_floor_ms"] = cfg.workload.slo_policy.ttft_floor;
      slo["tpot_ms"] = cfg.workload.slo_policy.tpot;
    }
    wl["slo"] = slo;
  }
  wl["seed"] = cfg.workload.seed;
  j["workload"] = wl;
  return j;
}

// The --seed flag replaces every random source in the experiment.
inline void apply_seed_override(ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.seed = seed;
  cfg.sim.seed = seed;
  cfg.workload.seed = seed;
}

}  // namespace prioserve
