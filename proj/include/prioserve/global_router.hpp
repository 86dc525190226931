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

#include <algorithm>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "prioserve/common.hpp"
#include "prioserve/gain.hpp"
#include "prioserve/latency_model.hpp"

namespace prioserve {

enum class InstanceKind { kPrefill, kDecode, kColocated };

// What the router remembers about one in-flight prefill: enough to predict
// completion time and the first-token gain at stake.
struct PrefillSummary {
  RequestId id = 0;
  DurationMs exec = 0;           // predicted remaining prefill execution time
  TimeMs ttft_deadline = 0;      // absolute first-token deadline
  double first_token_weight = 0;
};

// Router-side mirror of one instance. ts_p is stamped on every prefill-queue
// mutation and drives the lag compensation.
struct InstanceState {
  InstanceId instance_id = 0;
  InstanceKind kind = InstanceKind::kColocated;
  std::vector<PrefillSummary> prefill_queue;
  std::int64_t n_d = 0;  // co-located decode-phase request count
  std::int64_t free_blocks = 0;
  TimeMs ts_p = 0;
};

struct RouteConfig {
  double alpha = 0.9;   // candidate threshold on the gain delta
  double mu = 0.2;      // low-load fraction of the request's TTFT SLO
  double lambda = 0.8;  // high-load fraction of the request's TTFT SLO
  // Average decode step time for co-located exec estimates. Unset = derived
  // once from the model and the workload's expected mean KV length.
  std::optional<DurationMs> b_d_avg;

  void validate() const {
    if (!(alpha > 0 && alpha <= 1)) throw ConfigError("RouteConfig: alpha in (0,1]");
    if (!(mu > 0 && mu < lambda)) throw ConfigError("RouteConfig: need 0 < mu < lambda");
  }
};

struct RouteDecision {
  InstanceId prefill_instance = -1;
  InstanceId decode_instance = -1;
  double delta_gain = 0;
  bool fallback_used = false;
};

// Incoming request as the router sees it.
struct IncomingRequest {
  PrefillSummary summary;
  SloSpec slo;  // thresholds are fractions of this request's own TTFT SLO
};

// Predicted time for an instance to drain its mirrored prefill queue, with
// elapsed time since the last queue mutation subtracted (never negative).
// Co-located instances add n_d * b_d_avg for their decode load.
inline DurationMs estimate_exec(const InstanceState& inst, TimeMs now,
                                const LatencyModelParams& params, DurationMs b_d_avg,
                                const PrefillSummary* extra = nullptr) {
  if (inst.kind == InstanceKind::kDecode) {
    throw std::invalid_argument("estimate_exec: decode instances are ranked by free blocks");
  }
  const DurationMs t_c = params.beta * params.t_c;
  double total = 0.0;
  for (const PrefillSummary& s : inst.prefill_queue) total += s.exec;
  total += static_cast<double>(inst.prefill_queue.size()) * t_c;
  if (inst.kind == InstanceKind::kColocated) {
    total += static_cast<double>(inst.n_d) * b_d_avg;
  }
  if (extra != nullptr) total += extra->exec;
  const DurationMs lag = now - inst.ts_p;
  return std::max(0.0, total - lag);
}

// First-token gain a queue is predicted to capture. Admission is simulated in
// ascending time-to-deadline order; completion times follow the topology's
// load-judgment form: one-request-per-batch (prefill instances) or the
// aggressive budget-share inflation (co-located).
inline double estimate_gain(std::span<const PrefillSummary> queue, TimeMs now,
                            const LatencyModelParams& params, InstanceKind kind,
                            std::int64_t n_d, DurationMs b_d_avg,
                            DurationMs budget_tpot_slo) {
  const DurationMs t_c = params.beta * params.t_c;
  std::vector<const PrefillSummary*> order;
  order.reserve(queue.size());
  for (const PrefillSummary& s : queue) order.push_back(&s);
  std::sort(order.begin(), order.end(), [](const PrefillSummary* a, const PrefillSummary* b) {
    if (a->ttft_deadline != b->ttft_deadline) return a->ttft_deadline < b->ttft_deadline;
    return a->id < b->id;
  });

  double inflation = 1.0;
  double base = 0.0;
  bool feasible = true;
  if (kind == InstanceKind::kColocated) {
    DurationMs min_remain = std::numeric_limits<double>::infinity();
    for (const PrefillSummary* s : order) {
      min_remain = std::min(min_remain, s->ttft_deadline - now);
    }
    const DurationMs t_budget = std::min(min_remain, budget_tpot_slo);
    if (t_budget <= t_c) {
      feasible = false;  // no budget leaves room for work: nothing completes
    } else {
      inflation = t_budget / (t_budget - t_c);
    }
    base = static_cast<double>(n_d) * b_d_avg;
  }

  double gain = 0.0;
  double prefix_exec = 0.0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const PrefillSummary* s = order[k];
    prefix_exec += s->exec;
    if (!feasible) continue;
    DurationMs completion;
    if (kind == InstanceKind::kColocated) {
      completion = base + inflation * prefix_exec;
    } else {
      completion = prefix_exec + static_cast<double>(k + 1) * t_c;
    }
    if (now + completion < s->ttft_deadline) gain += s->first_token_weight;
  }
  return gain;
}

enum class GlobalPolicy { kGoRouting, kMinLoad, kRoundRobin };

// Router state-update events, delivered in order from the engine loops.
struct StateEvent {
  enum class Kind {
    kDispatched,
    kPrefillFinished,
    kDecodeStarted,
    kRequestFinished,
    kBlocksReport,
  };
  Kind kind = Kind::kDispatched;
  InstanceId instance = -1;
  RequestId request = 0;
  std::int64_t free_blocks = 0;      // kBlocksReport
  PrefillSummary summary;            // kDispatched
};

inline const char* to_string(StateEvent::Kind k) {
  switch (k) {
    case StateEvent::Kind::kDispatched: return "dispatched";
    case StateEvent::Kind::kPrefillFinished: return "prefill_finished";
    case StateEvent::Kind::kDecodeStarted: return "decode_started";
    case StateEvent::Kind::kRequestFinished: return "request_finished";
    case StateEvent::Kind::kBlocksReport: return "blocks_report";
  }
  return "unknown";
}

// Service-level dispatcher. Owns the instance mirror; state_update calls are
// serialized by the caller and routing reads a consistent snapshot.
class Router {
 public:
  Router() : rng_(0) {}
  Router(GlobalPolicy policy, RouteConfig cfg, std::uint64_t seed, bool audit = false)
      : policy_(policy), cfg_(cfg), rng_(seed), audit_enabled_(audit) {
    cfg_.validate();
  }

  void add_instance(InstanceId id, InstanceKind kind, std::int64_t free_blocks) {
    InstanceState st;
    st.instance_id = id;
    st.kind = kind;
    st.free_blocks = free_blocks;
    st.ts_p = 0;
    instances_[id] = st;
  }

  const std::map<InstanceId, InstanceState>& instances() const { return instances_; }
  const std::vector<std::string>& audit_log() const { return audit_; }
  GlobalPolicy policy() const { return policy_; }
  const RouteConfig& config() const { return cfg_; }
  void set_b_d_avg(DurationMs v) { cfg_.b_d_avg = v; }

  RouteDecision route(const IncomingRequest& req, TimeMs now,
                      const LatencyModelParams& params) {
    std::vector<const InstanceState*> prefill_pool;
    std::vector<const InstanceState*> decode_pool;
    for (const auto& [id, st] : instances_) {
      if (st.kind == InstanceKind::kDecode) {
        decode_pool.push_back(&st);
      } else {
        prefill_pool.push_back(&st);
      }
    }
    if (prefill_pool.empty()) throw RoutingError("route: empty prefill/colocated pool");
    const bool disagg = !decode_pool.empty();

    RouteDecision decision;
    switch (policy_) {
      case GlobalPolicy::kGoRouting:
        decision = go_route(req, prefill_pool, now, params);
        break;
      case GlobalPolicy::kMinLoad: {
        const InstanceState* best = prefill_pool.front();
        for (const InstanceState* p : prefill_pool) {
          if (exec_of(*p, now, params) < exec_of(*best, now, params)) best = p;
        }
        decision.prefill_instance = best->instance_id;
        break;
      }
      case GlobalPolicy::kRoundRobin:
        decision.prefill_instance =
            prefill_pool[round_robin_next_++ % prefill_pool.size()]->instance_id;
        break;
    }

    if (disagg) {
      const InstanceState* best = decode_pool.front();
      for (const InstanceState* d : decode_pool) {
        if (d->free_blocks > best->free_blocks) best = d;
      }
      decision.decode_instance = best->instance_id;
    } else {
      decision.decode_instance = decision.prefill_instance;
    }

    if (audit_enabled_) {
      nlohmann::ordered_json j;
      j["event"] = "route";
      j["time"] = now;
      j["request"] = req.summary.id;
      j["prefill"] = decision.prefill_instance;
      j["decode"] = decision.decode_instance;
      j["delta"] = decision.delta_gain;
      j["fallback"] = decision.fallback_used;
      if (!last_deltas_.empty()) {
        nlohmann::ordered_json deltas;
        for (const auto& [id, d] : last_deltas_) deltas[std::to_string(id)] = d;
        j["deltas"] = deltas;
      }
      audit_.push_back(j.dump());
    }
    return decision;
  }

  // Mirror maintenance. Every prefill-queue mutation stamps ts_p = now.
  void state_update(const StateEvent& ev, TimeMs now) {
    auto it = instances_.find(ev.instance);
    if (it == instances_.end()) {
      throw ConsistencyError("state_update: unknown instance " + std::to_string(ev.instance));
    }
    InstanceState& st = it->second;
    switch (ev.kind) {
      case StateEvent::Kind::kDispatched:
        st.prefill_queue.push_back(ev.summary);
        st.ts_p = now;
        break;
      case StateEvent::Kind::kPrefillFinished: {
        auto pos = std::find_if(st.prefill_queue.begin(), st.prefill_queue.end(),
                                [&](const PrefillSummary& s) { return s.id == ev.request; });
        if (pos == st.prefill_queue.end()) {
          throw ConsistencyError("state_update: prefill_finished for unknown request " +
                                 std::to_string(ev.request));
        }
        st.prefill_queue.erase(pos);
        st.ts_p = now;
        break;
      }
      case StateEvent::Kind::kDecodeStarted:
        st.n_d += 1;
        break;
      case StateEvent::Kind::kRequestFinished:
        st.n_d -= 1;
        if (st.n_d < 0) {
          throw ConsistencyError("state_update: n_d underflow on instance " +
                                 std::to_string(ev.instance));
        }
        break;
      case StateEvent::Kind::kBlocksReport:
        st.free_blocks = ev.free_blocks;
        break;
    }
    if (audit_enabled_) {
      nlohmann::ordered_json j;
      j["event"] = "state";
      j["kind"] = to_string(ev.kind);
      j["time"] = now;
      j["instance"] = ev.instance;
      j["request"] = ev.request;
      if (ev.kind == StateEvent::Kind::kBlocksReport) j["free_blocks"] = ev.free_blocks;
      audit_.push_back(j.dump());
    }
  }

  DurationMs exec_of(const InstanceState& inst, TimeMs now,
                     const LatencyModelParams& params,
                     const PrefillSummary* extra = nullptr) const {
    return estimate_exec(inst, now, params, cfg_.b_d_avg.value_or(params.b_d), extra);
  }

 private:
  double gain_of(const InstanceState& inst, std::span<const PrefillSummary> queue, TimeMs now,
                 const LatencyModelParams& params, DurationMs budget_tpot) const {
    return estimate_gain(queue, now, params, inst.kind, inst.n_d,
                         cfg_.b_d_avg.value_or(params.b_d), budget_tpot);
  }

  RouteDecision go_route(const IncomingRequest& req,
                         std::span<const InstanceState* const> pool, TimeMs now,
                         const LatencyModelParams& params) {
    struct Scored {
      const InstanceState* inst;
      double delta;
      DurationMs exec;       // without the incoming request
      DurationMs exec_with;  // with it
    };
    std::vector<Scored> scored;
    scored.reserve(pool.size());
    last_deltas_.clear();
    double delta_max = -std::numeric_limits<double>::infinity();
    for (const InstanceState* p : pool) {
      std::vector<PrefillSummary> with_req(p->prefill_queue);
      with_req.push_back(req.summary);
      const double pre = gain_of(*p, p->prefill_queue, now, params, req.slo.tpot_slo);
      const double post = gain_of(*p, with_req, now, params, req.slo.tpot_slo);
      Scored s;
      s.inst = p;
      s.delta = post - pre;
      s.exec = exec_of(*p, now, params);
      s.exec_with = exec_of(*p, now, params, &req.summary);
      delta_max = std::max(delta_max, s.delta);
      last_deltas_[p->instance_id] = s.delta;
      scored.push_back(s);
    }

    RouteDecision decision;
    decision.delta_gain = delta_max;
    if (delta_max > 0) {
      std::vector<const Scored*> candidates;
      for (const Scored& s : scored) {
        if (s.delta >= cfg_.alpha * delta_max) candidates.push_back(&s);
      }
      const DurationMs low = cfg_.mu * req.slo.ttft_slo;
      const DurationMs high = cfg_.lambda * req.slo.ttft_slo;
      std::vector<const Scored*> light;
      std::vector<const Scored*> not_heavy;
      for (const Scored* s : candidates) {
        if (s->exec < low) light.push_back(s);
        if (!(s->exec_with > high)) not_heavy.push_back(s);
      }
      const Scored* chosen = nullptr;
      if (!light.empty()) {
        chosen = light.front();
        for (const Scored* s : light) {
          if (s->exec < chosen->exec) chosen = s;
        }
      } else if (!not_heavy.empty()) {
        chosen = not_heavy.front();
        for (const Scored* s : not_heavy) {
          if (s->exec > chosen->exec) chosen = s;
        }
      } else {
        chosen = candidates.front();
        for (const Scored* s : candidates) {
          if (s->exec < chosen->exec) chosen = s;
        }
      }
      decision.prefill_instance = chosen->inst->instance_id;
      decision.delta_gain = chosen->delta;
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      decision.prefill_instance = pool[pick(rng_)]->instance_id;
      decision.fallback_used = true;
    }
    return decision;
  }

  GlobalPolicy policy_ = GlobalPolicy::kGoRouting;
  RouteConfig cfg_;
  std::map<InstanceId, InstanceState> instances_;
  std::map<InstanceId, double> last_deltas_;
  std::mt19937_64 rng_;
  std::size_t round_robin_next_ = 0;
  bool audit_enabled_ = false;
  std::vector<std::string> audit_;
};

inline const char* to_string(GlobalPolicy p) {
  switch (p) {
    case GlobalPolicy::kGoRouting: return "go_routing";
    case GlobalPolicy::kMinLoad: return "min_load";
    case GlobalPolicy::kRoundRobin: return "round_robin";
  }
  return "unknown";
}

inline GlobalPolicy global_policy_from_string(const std::string& s) {
  if (s == "go_routing") return GlobalPolicy::kGoRouting;
  if (s == "min_load") return GlobalPolicy::kMinLoad;
  if (s == "round_robin") return GlobalPolicy::kRoundRobin;
  throw ConfigError("unknown global policy: " + s);
}

}  // namespace prioserve
