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
#include <functional>
#include <map>
#include <optional>
#include <queue>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include <json.hpp>

#include "prioserve/common.hpp"
#include "prioserve/gain.hpp"
#include "prioserve/global_router.hpp"
#include "prioserve/latency_model.hpp"
#include "prioserve/local_scheduler.hpp"
#include "prioserve/workload.hpp"

namespace prioserve {

// Piecewise-constant multiplier applied to true batch execution times.
struct DriftSchedule {
  std::vector<std::pair<TimeMs, double>> steps;  // (start time, multiplier)

  double at(TimeMs t) const {
    double m = 1.0;
    for (const auto& [start, mult] : steps) {
      if (t >= start) m = mult;
    }
    return m;
  }

  void validate() const {
    TimeMs prev = -std::numeric_limits<double>::infinity();
    for (const auto& [start, mult] : steps) {
      if (start < prev) throw ConfigError("DriftSchedule: steps must be time-sorted");
      if (mult <= 0) throw ConfigError("DriftSchedule: multipliers must be > 0");
      prev = start;
    }
  }
};

struct Topology {
  enum class Kind { kSingleColocated, kMultiColocated, kPdDisagg };
  Kind kind = Kind::kSingleColocated;
  int n_colocated = 1;
  int n_prefill = 1;
  int n_decode = 1;

  void validate() const {
    if (kind == Kind::kMultiColocated && n_colocated < 1) {
      throw ConfigError("Topology: n_colocated must be >= 1");
    }
    if (kind == Kind::kPdDisagg && (n_prefill < 1 || n_decode < 1)) {
      throw ConfigError("Topology: disagg pools must be nonempty");
    }
  }
};

// Online latency-estimator correction loop (beta momentum updates).
struct CorrectionConfig {
  bool enabled = false;
  int window = 32;
  double theta = 0.8;

  void validate() const {
    if (window < 1) throw ConfigError("CorrectionConfig: window must be >= 1");
    if (theta < 0 || theta > 1) throw ConfigError("CorrectionConfig: theta in [0,1]");
  }
};

struct SimConfig {
  Topology topology;
  LatencyModelParams true_params{0, 0, 0.1, 0.001, 1.0, 2.0};
  std::optional<LatencyModelParams> sched_params;  // default: true_params
  DriftSchedule drift;
  std::int64_t blocks_per_instance = 1 << 16;
  std::int64_t block_size = 16;
  std::uint64_t seed = 1;
  TimeMs horizon = 60'000;
  LocalPolicy local_policy = LocalPolicy::kSlideBatching;
  SlideConfig slide;
  BaselineConfig baseline;
  GlobalPolicy global_policy = GlobalPolicy::kGoRouting;
  RouteConfig route;
  GainWeights weights{1.0, 1.0, {{0, 1.0}, {1, 2.0}}};
  CorrectionConfig correction;
  DurationMs signal_delay = 0;
  DurationMs kv_transfer_delay = 0;
  bool audit = false;
  bool first_token_unbuffered = false;

  void validate() const {
    topology.validate();
    true_params.validate_for_scheduling();
    if (sched_params) sched_params->validate_for_scheduling();
    drift.validate();
    if (blocks_per_instance < 1) throw ConfigError("SimConfig: blocks_per_instance >= 1");
    if (block_size < 1) throw ConfigError("SimConfig: block_size >= 1");
    if (horizon <= 0) throw ConfigError("SimConfig: horizon must be > 0");
    slide.validate();
    baseline.validate();
    route.validate();
    weights.validate();
    correction.validate();
    if (local_policy == LocalPolicy::kSlideBatching && slide.eta &&
        slide.phi_variant != PhiVariant::kPrefillOnly) {
      const LatencyModelParams& sp = sched_params ? *sched_params : true_params;
      if (*slide.eta <= sp.beta * sp.t_c) {
        throw ConfigError("SimConfig: slide.eta must exceed the batch overhead t_c");
      }
    }
    if (signal_delay < 0 || kv_transfer_delay < 0) {
      throw ConfigError("SimConfig: delays must be >= 0");
    }
  }
};

struct EstimatorWindow {
  int index = 0;
  TimeMs time = 0;
  double beta = 1.0;  // correction factor in effect during the window
  double mape = 0.0;  // corrected-estimate error over the window
};

struct UrgencyBucket {
  double urgent_avg = 0;
  double normal_avg = 0;
  int samples = 0;
};

struct SimResult {
  std::vector<TokenRecord> token_records;  // one per arrived request
  std::vector<SloSpec> slos;               // parallel to token_records
  GainReport gain_report;
  std::vector<double> tdg_per_second;
  std::vector<UrgencyBucket> urgency_per_second;
  std::map<InstanceId, double> utilization;  // busy fraction of the horizon
  std::vector<EstimatorWindow> estimator_windows;
  std::vector<std::string> router_audit;
  std::vector<std::string> batch_log;
  std::int64_t kv_exhaustion_retries = 0;
  std::int64_t total_tokens_emitted = 0;
  std::map<PriorityLevel, std::int64_t> tokens_by_priority;
  // Tokens actually processed (prefill chunk tokens + decode passes), the
  // quantity weighted-VTC fairness is measured on.
  std::map<PriorityLevel, std::int64_t> served_tokens_by_priority;

  nlohmann::ordered_json summary_json() const {
    nlohmann::ordered_json j;
    j["requests"] = token_records.size();
    j["tokens_emitted"] = total_tokens_emitted;
    j["gain"] = gain_report.to_json();
    auto util = nlohmann::ordered_json::object();
    for (const auto& [id, u] : utilization) util[std::to_string(id)] = u;
    j["utilization"] = util;
    j["kv_exhaustion_retries"] = kv_exhaustion_retries;
    auto tokens = nlohmann::ordered_json::object();
    for (const auto& [level, n] : tokens_by_priority) tokens[std::to_string(level)] = n;
    j["tokens_by_priority"] = tokens;
    auto served = nlohmann::ordered_json::object();
    for (const auto& [level, n] : served_tokens_by_priority) {
      served[std::to_string(level)] = n;
    }
    j["served_tokens_by_priority"] = served;
    nlohmann::ordered_json windows = nlohmann::ordered_json::array();
    for (const EstimatorWindow& w : estimator_windows) {
      nlohmann::ordered_json e;
      e["index"] = w.index;
      e["time"] = w.time;
      e["beta"] = w.beta;
      e["mape"] = w.mape;
      windows.push_back(e);
    }
    j["estimator_windows"] = windows;
    return j;
  }

  // id,priority,arrival,ttft,tpot,tokens,tdg — ttft/tpot are -1 when no token
  // was emitted.
  std::string per_request_csv(const GainWeights& weights) const {
    std::ostringstream out;
    out << "id,priority,arrival,ttft,tpot,tokens,tdg\n";
    for (std::size_t i = 0; i < token_records.size(); ++i) {
      const TokenRecord& r = token_records[i];
      const double ttft = r.emit_times.empty() ? -1.0 : observed_ttft(r);
      const double tpot = r.emit_times.empty() ? -1.0 : observed_tpot(r);
      out << r.request_id << ',' << r.priority_level << ',' << fmt_double(r.arrival_time)
          << ',' << fmt_double(ttft) << ',' << fmt_double(tpot) << ','
          << r.emit_times.size() << ',' << fmt_double(tdg_gain(r, slos[i], weights))
          << '\n';
    }
    return out.str();
  }

  std::string timeline_csv() const {
    std::ostringstream out;
    out << "second,tdg,urgent_avg,normal_avg\n";
    const std::size_t n = std::max(tdg_per_second.size(), urgency_per_second.size());
    for (std::size_t s = 0; s < n; ++s) {
      const double tdg = s < tdg_per_second.size() ? tdg_per_second[s] : 0.0;
      double ua = 0, na = 0;
      if (s < urgency_per_second.size()) {
        ua = urgency_per_second[s].urgent_avg;
        na = urgency_per_second[s].normal_avg;
      }
      out << s << ',' << fmt_double(tdg) << ',' << fmt_double(ua) << ',' << fmt_double(na)
          << '\n';
    }
    return out.str();
  }

  // Canonical byte representation used by the determinism contract.
  std::string canonical_bytes(const GainWeights& weights) const {
    std::string bytes = summary_json().dump(2);
    bytes += '\n';
    bytes += per_request_csv(weights);
    bytes += timeline_csv();
    for (const std::string& line : router_audit) {
      bytes += line;
      bytes += '\n';
    }
    for (const std::string& line : batch_log) {
      bytes += line;
      bytes += '\n';
    }
    return bytes;
  }
};

namespace detail {

struct SimRequest {
  Request base;
  std::int64_t prefill_done = 0;
  std::int64_t output_len = 0;
  std::int64_t kv_len = 0;
  std::int64_t blocks_held = 0;
  std::vector<TimeMs> emit_times;
  InstanceId prefill_instance = -1;
  InstanceId decode_instance = -1;
  InstanceId current_instance = -1;
  bool finished = false;

  bool in_prefill() const { return prefill_done < base.input_len; }

  SchedRequest sched_view() const {
    SchedRequest s;
    s.id = base.id;
    s.arrival_time = base.arrival_time;
    s.priority_level = base.priority_level;
    s.slo = base.slo;
    s.input_len = base.input_len;
    s.expected_output_len = base.expected_output_len;
    s.prefill_done = prefill_done;
    s.output_len = output_len;
    s.kv_len = kv_len;
    s.blocks_held = blocks_held;
    return s;
  }
};

struct PendingBatch {
  BatchPlan plan;
  TimeMs started = 0;
  double raw_sched_estimate = 0;
};

struct SimInstance {
  InstanceId id = -1;
  InstanceKind kind = InstanceKind::kColocated;
  std::vector<std::size_t> resident;  // indices into the request table
  std::int64_t free_blocks = 0;
  bool busy = false;
  bool retry_pending = false;
  std::optional<PendingBatch> pending;
  double busy_ms = 0;
  LocalScheduler scheduler;
};

struct SimEvent {
  TimeMs time = 0;
  std::uint64_t sequence = 0;
  enum class Kind { kArrival, kBatchDone, kStateSignal, kDecodeHandoff, kRetry } kind;
  std::size_t request_index = 0;  // kArrival / kDecodeHandoff
  InstanceId instance = -1;       // kBatchDone / kRetry / kDecodeHandoff target
  StateEvent signal;              // kStateSignal

  bool operator>(const SimEvent& other) const {
    if (time != other.time) return time > other.time;
    return sequence > other.sequence;
  }
};

}  // namespace detail

// Deterministic discrete-event simulation of one serving configuration over
// one workload. Single-threaded; identical inputs give identical results.
class Simulation {
 public:
  Simulation(SimConfig cfg, std::vector<Request> workload)
      : cfg_(std::move(cfg)), router_(cfg_.global_policy, cfg_.route, cfg_.seed ^ 0x9e3779b9, cfg_.audit) {
    cfg_.validate();
    sched_params_ = cfg_.sched_params.value_or(cfg_.true_params);
    std::sort(workload.begin(), workload.end(), [](const Request& a, const Request& b) {
      if (a.arrival_time != b.arrival_time) return a.arrival_time < b.arrival_time;
      return a.id < b.id;
    });
    for (const Request& r : workload) {
      r.validate();
      detail::SimRequest sr;
      sr.base = r;
      requests_.push_back(std::move(sr));
    }
    build_instances();
    if (!cfg_.route.b_d_avg) {
      // Static estimate of the average decode step: model intercept plus the
      // attention term at the workload's expected mean decode KV length.
      const double mean_kv = mean_input_len(workload) + mean_output_len(workload) / 2.0;
      router_.set_b_d_avg(sched_params_.b_d + sched_params_.a_d * mean_kv);
    }
  }

  SimResult run() {
    for (std::size_t i = 0; i < requests_.size(); ++i) {
      if (requests_[i].base.arrival_time <= cfg_.horizon) {
        push_event(requests_[i].base.arrival_time, detail::SimEvent::Kind::kArrival, i);
      }
    }
    while (!events_.empty()) {
      const detail::SimEvent ev = events_.top();
      events_.pop();
      if (ev.time > cfg_.horizon) break;
      if (ev.time < now_) {
        throw ConsistencyError("simulation: event clock went backwards");
      }
      now_ = ev.time;
      switch (ev.kind) {
        case detail::SimEvent::Kind::kArrival:
          on_arrival(ev.request_index);
          break;
        case detail::SimEvent::Kind::kBatchDone:
          on_batch_done(ev.instance);
          break;
        case detail::SimEvent::Kind::kStateSignal:
          router_.state_update(ev.signal, now_);
          break;
        case detail::SimEvent::Kind::kDecodeHandoff:
          on_handoff(ev.request_index, ev.instance);
          break;
        case detail::SimEvent::Kind::kRetry:
          instance(ev.instance).retry_pending = false;
          kick(ev.instance);
          break;
      }
    }
    return assemble();
  }

 private:
  detail::SimInstance& instance(InstanceId id) { return instances_.at(static_cast<std::size_t>(id)); }

  void build_instances() {
    auto add = [&](InstanceKind kind) {
      detail::SimInstance inst;
      inst.id = static_cast<InstanceId>(instances_.size());
      inst.kind = kind;
      inst.free_blocks = cfg_.blocks_per_instance;
      inst.scheduler = LocalScheduler(cfg_.local_policy, cfg_.slide, cfg_.baseline, cfg_.weights);
      router_.add_instance(inst.id, kind, inst.free_blocks);
      instances_.push_back(std::move(inst));
    };
    switch (cfg_.topology.kind) {
      case Topology::Kind::kSingleColocated:
        add(InstanceKind::kColocated);
        break;
      case Topology::Kind::kMultiColocated:
        for (int i = 0; i < cfg_.topology.n_colocated; ++i) add(InstanceKind::kColocated);
        break;
      case Topology::Kind::kPdDisagg:
        for (int i = 0; i < cfg_.topology.n_prefill; ++i) add(InstanceKind::kPrefill);
        for (int i = 0; i < cfg_.topology.n_decode; ++i) add(InstanceKind::kDecode);
        break;
    }
  }

  void push_event(TimeMs t, detail::SimEvent::Kind kind, std::size_t request_index = 0,
                  InstanceId inst = -1, StateEvent signal = {}) {
    detail::SimEvent ev;
    ev.time = t;
    ev.sequence = next_sequence_++;
    ev.kind = kind;
    ev.request_index = request_index;
    ev.instance = inst;
    ev.signal = signal;
    events_.push(ev);
  }

  void send_signal(TimeMs t, const StateEvent& ev) {
    if (cfg_.signal_delay == 0) {
      router_.state_update(ev, t);
    } else {
      push_event(t + cfg_.signal_delay, detail::SimEvent::Kind::kStateSignal, 0, -1, ev);
    }
  }

  PrefillSummary summary_of(const detail::SimRequest& r) const {
    PrefillSummary s;
    s.id = r.base.id;
    s.exec = estimate_item(sched_params_,
                           WorkItem{Phase::kPrefill, r.base.input_len, 0});
    s.ttft_deadline = r.base.arrival_time + r.base.slo.ttft_slo;
    s.first_token_weight = cfg_.weights.token_weight(r.base.priority_level, 1);
    return s;
  }

  void on_arrival(std::size_t idx) {
    detail::SimRequest& r = requests_[idx];
    IncomingRequest incoming{summary_of(r), r.base.slo};
    const RouteDecision decision = router_.route(incoming, now_, sched_params_);
    r.prefill_instance = decision.prefill_instance;
    r.decode_instance = decision.decode_instance;
    r.current_instance = decision.prefill_instance;
    // The router updates its own mirror synchronously on dispatch.
    StateEvent ev;
    ev.kind = StateEvent::Kind::kDispatched;
    ev.instance = decision.prefill_instance;
    ev.request = r.base.id;
    ev.summary = incoming.summary;
    router_.state_update(ev, now_);
    instance(decision.prefill_instance).resident.push_back(idx);
    kick(decision.prefill_instance);
  }

  void on_handoff(std::size_t idx, InstanceId target) {
    detail::SimRequest& r = requests_[idx];
    r.current_instance = target;
    r.blocks_held = 0;  // KV must be re-materialized on the decode instance
    instance(target).resident.push_back(idx);
    kick(target);
  }

  // Decode-pool instances batch every ready request each iteration.
  BatchPlan decode_all_plan(const std::vector<SchedRequest>& queue, MemoryBudget mem) {
    BatchPlan plan;
    plan.est_time = sched_params_.beta * sched_params_.t_c;
    std::vector<const SchedRequest*> order;
    for (const SchedRequest& r : queue) order.push_back(&r);
    std::sort(order.begin(), order.end(), [](const SchedRequest* a, const SchedRequest* b) {
      if (a->arrival_time != b->arrival_time) return a->arrival_time < b->arrival_time;
      return a->id < b->id;
    });
    std::int64_t blocks_used = 0;
    for (const SchedRequest* r : order) {
      const std::int64_t need =
          std::max<std::int64_t>(0, ceil_div(r->kv_len + 1, mem.block_size) - r->blocks_held);
      if (blocks_used + need > mem.free_blocks) break;
      const DurationMs cost = estimate_item(sched_params_, WorkItem{Phase::kDecode, 1, r->kv_len});
      plan.entries.push_back({r->id, 1, cost});
      plan.est_time += cost;
      blocks_used += need;
    }
    plan.budget = plan.est_time;
    return plan;
  }

  void kick(InstanceId id) {
    detail::SimInstance& inst = instance(id);
    if (inst.busy || inst.resident.empty()) return;

    std::vector<SchedRequest> queue;
    queue.reserve(inst.resident.size());
    for (std::size_t idx : inst.resident) queue.push_back(requests_[idx].sched_view());
    const MemoryBudget mem{inst.free_blocks, cfg_.block_size};
    BatchPlan plan;
    if (inst.kind == InstanceKind::kDecode) {
      plan = decode_all_plan(queue, mem);
    } else {
      try {
        plan = inst.scheduler.form_batch(std::move(queue), sched_params_, now_, mem);
      } catch (const BudgetError&) {
        // Budget degenerated below the batch overhead (e.g. beta drifted up);
        // treat like an inadmissible batch and retry after the idle interval.
        plan = BatchPlan{};
      }
    }

    if (plan.entries.empty()) {
      // KV exhaustion (or a degenerate budget): idle one eta interval, retry.
      ++kv_retries_;
      if (!inst.retry_pending) {
        inst.retry_pending = true;
        push_event(now_ + cfg_.slide.eta.value_or(5.0), detail::SimEvent::Kind::kRetry, 0, id);
      }
      return;
    }

    std::vector<WorkItem> items;
    items.reserve(plan.entries.size());
    for (const BatchEntry& e : plan.entries) {
      detail::SimRequest& r = requests_.at(index_of(e.id));
      const std::int64_t growth = r.in_prefill() ? e.chunk_len : 1;
      const std::int64_t need = std::max<std::int64_t>(
          0, ceil_div(r.kv_len + growth, cfg_.block_size) - r.blocks_held);
      inst.free_blocks -= need;
      r.blocks_held += need;
      if (inst.free_blocks < 0) {
        throw ConsistencyError("simulation: KV block over-allocation on instance " +
                               std::to_string(id));
      }
      items.push_back(r.in_prefill() ? WorkItem{Phase::kPrefill, e.chunk_len, r.prefill_done}
                                     : WorkItem{Phase::kDecode, 1, r.kv_len});
    }

    const double true_cost = cfg_.drift.at(now_) * estimate_batch(cfg_.true_params, items);
    if (!(true_cost > 0)) {
      throw ConfigError("simulation: true batch cost must be positive");
    }
    detail::PendingBatch pending;
    pending.plan = std::move(plan);
    pending.started = now_;
    pending.raw_sched_estimate = raw_estimate_batch(sched_params_, items);
    inst.pending = std::move(pending);
    inst.busy = true;

    if (inst.kind != InstanceKind::kDecode &&
        inst.scheduler.policy() == LocalPolicy::kSlideBatching) {
      record_urgency(inst.pending->plan);
    }
    if (cfg_.audit) {
      nlohmann::ordered_json j;
      j["event"] = "batch";
      j["time"] = now_;
      j["instance"] = id;
      j["budget"] = inst.pending->plan.budget;
      j["est_time"] = inst.pending->plan.est_time;
      nlohmann::ordered_json entries = nlohmann::ordered_json::array();
      for (const BatchEntry& e : inst.pending->plan.entries) {
        entries.push_back({{"id", e.id}, {"chunk", e.chunk_len}});
      }
      j["entries"] = entries;
      batch_log_.push_back(j.dump());
    }
    push_event(now_ + true_cost, detail::SimEvent::Kind::kBatchDone, 0, id);
  }

  void on_batch_done(InstanceId id) {
    detail::SimInstance& inst = instance(id);
    const detail::PendingBatch pending = std::move(*inst.pending);
    inst.pending.reset();
    inst.busy = false;
    inst.busy_ms += now_ - pending.started;

    record_estimator_sample(now_ - pending.started, pending.raw_sched_estimate);

    bool blocks_changed = false;
    for (const BatchEntry& e : pending.plan.entries) {
      const std::size_t idx = index_of(e.id);
      detail::SimRequest& r = requests_[idx];
      served_tokens_[r.base.priority_level] += r.in_prefill() ? e.chunk_len : 1;
      if (r.in_prefill()) {
        r.prefill_done += e.chunk_len;
        r.kv_len = r.prefill_done;
        if (!r.in_prefill()) {
          emit_token(r);
          finish_prefill_phase(r, idx, inst, blocks_changed);
        }
      } else {
        r.output_len += 1;
        r.kv_len += 1;
        emit_token(r);
        if (r.output_len >= r.base.expected_output_len) {
          finish_request(r, idx, inst);
          blocks_changed = true;
        }
      }
    }
    if (inst.kind == InstanceKind::kDecode && blocks_changed) {
      StateEvent ev;
      ev.kind = StateEvent::Kind::kBlocksReport;
      ev.instance = id;
      ev.free_blocks = inst.free_blocks;
      send_signal(now_, ev);
    }
    check_block_conservation(inst);
    kick(id);
  }

  void emit_token(detail::SimRequest& r) { r.emit_times.push_back(now_); }

  // Prefill finished this pass: first token is out; route the request into
  // its decode phase (same instance when co-located, handoff when disagg).
  void finish_prefill_phase(detail::SimRequest& r, std::size_t idx, detail::SimInstance& inst,
                            bool& blocks_changed) {
    r.output_len = 1;
    const bool done = r.base.expected_output_len <= 1;
    if (inst.kind == InstanceKind::kColocated) {
      StateEvent fin;
      fin.kind = StateEvent::Kind::kPrefillFinished;
      fin.instance = inst.id;
      fin.request = r.base.id;
      send_signal(now_, fin);
      StateEvent dec;
      dec.kind = StateEvent::Kind::kDecodeStarted;
      dec.instance = inst.id;
      dec.request = r.base.id;
      send_signal(now_, dec);
      if (done) finish_request(r, idx, inst);
    } else {  // prefill-pool instance
      StateEvent fin;
      fin.kind = StateEvent::Kind::kPrefillFinished;
      fin.instance = inst.id;
      fin.request = r.base.id;
      send_signal(now_, fin);
      // KV leaves the prefill instance either way.
      inst.free_blocks += r.blocks_held;
      r.blocks_held = 0;
      remove_resident(inst, idx);
      blocks_changed = true;
      if (done) {
        r.finished = true;
      } else {
        push_event(now_ + cfg_.kv_transfer_delay, detail::SimEvent::Kind::kDecodeHandoff, idx,
                   r.decode_instance);
      }
    }
  }

  void finish_request(detail::SimRequest& r, std::size_t idx, detail::SimInstance& inst) {
    r.finished = true;
    inst.free_blocks += r.blocks_held;
    r.blocks_held = 0;
    remove_resident(inst, idx);
    if (inst.kind == InstanceKind::kColocated) {
      StateEvent ev;
      ev.kind = StateEvent::Kind::kRequestFinished;
      ev.instance = inst.id;
      ev.request = r.base.id;
      send_signal(now_, ev);
    }
  }

  void remove_resident(detail::SimInstance& inst, std::size_t idx) {
    auto it = std::find(inst.resident.begin(), inst.resident.end(), idx);
    if (it != inst.resident.end()) inst.resident.erase(it);
  }

  void check_block_conservation(const detail::SimInstance& inst) {
    std::int64_t held = 0;
    for (std::size_t idx : inst.resident) held += requests_[idx].blocks_held;
    if (held + inst.free_blocks != cfg_.blocks_per_instance) {
      throw ConsistencyError("simulation: block conservation violated on instance " +
                             std::to_string(inst.id));
    }
  }

  void record_urgency(const BatchPlan& plan) {
    const std::size_t second = static_cast<std::size_t>(now_ / 1000.0);
    if (urgency_.size() <= second) urgency_.resize(second + 1);
    UrgencyBucket& b = urgency_[second];
    b.urgent_avg += plan.urgent_count;
    b.normal_avg += plan.normal_count;
    b.samples += 1;
  }

  void record_estimator_sample(double observed, double raw_estimate) {
    if (!cfg_.correction.enabled) return;
    window_.emplace_back(observed, raw_estimate);
    if (static_cast<int>(window_.size()) < cfg_.correction.window) return;
    EstimatorWindow w;
    w.index = static_cast<int>(estimator_windows_.size());
    w.time = now_;
    w.beta = sched_params_.beta;
    double err = 0;
    for (const auto& [obs, raw] : window_) {
      err += std::abs(obs - sched_params_.beta * raw) / obs;
    }
    w.mape = err / static_cast<double>(window_.size());
    estimator_windows_.push_back(w);
    sched_params_ = online_update(sched_params_, window_, cfg_.correction.theta);
    window_.clear();
  }

  std::size_t index_of(RequestId id) {
    if (id_index_.empty()) {
      for (std::size_t i = 0; i < requests_.size(); ++i) id_index_[requests_[i].base.id] = i;
    }
    return id_index_.at(id);
  }

  SimResult assemble() {
    SimResult result;
    for (detail::SimInstance& inst : instances_) {
      if (inst.busy && inst.pending) {
        inst.busy_ms += cfg_.horizon - inst.pending->started;
      }
      result.utilization[inst.id] = inst.busy_ms / cfg_.horizon;
    }
    for (const detail::SimRequest& r : requests_) {
      if (r.base.arrival_time > cfg_.horizon) continue;
      TokenRecord rec;
      rec.request_id = r.base.id;
      rec.arrival_time = r.base.arrival_time;
      rec.priority_level = r.base.priority_level;
      rec.emit_times = r.emit_times;
      rec.expected_output_len = r.base.expected_output_len;
      rec.validate();
      result.total_tokens_emitted += static_cast<std::int64_t>(r.emit_times.size());
      result.tokens_by_priority[r.base.priority_level] +=
          static_cast<std::int64_t>(r.emit_times.size());
      result.token_records.push_back(std::move(rec));
      result.slos.push_back(r.base.slo);
    }
    if (result.token_records.empty()) {
      // Defined-empty report: nothing arrived, nothing was lost.
      result.gain_report.tdg_ratio = 1.0;
      result.gain_report.miss_tdg_ratio = 0.0;
      result.gain_report.slo_attainment = 1.0;
    } else {
      result.gain_report = aggregate(result.token_records, result.slos, cfg_.weights,
                                     cfg_.first_token_unbuffered);
    }

    const std::size_t seconds = static_cast<std::size_t>(cfg_.horizon / 1000.0) + 1;
    result.tdg_per_second.assign(seconds, 0.0);
    for (std::size_t i = 0; i < result.token_records.size(); ++i) {
      const TokenRecord& rec = result.token_records[i];
      const SloSpec& slo = result.slos[i];
      for (std::size_t k = 0; k < rec.emit_times.size(); ++k) {
        const double latency = rec.emit_times[k] - rec.arrival_time;
        if (latency < token_deadline(slo, static_cast<std::int64_t>(k) + 1)) {
          const std::size_t second = static_cast<std::size_t>(rec.emit_times[k] / 1000.0);
          if (second < seconds) {
            result.tdg_per_second[second] +=
                cfg_.weights.token_weight(rec.priority_level, static_cast<std::int64_t>(k) + 1);
          }
        }
      }
    }
    urgency_.resize(seconds);
    for (UrgencyBucket& b : urgency_) {
      if (b.samples > 0) {
        b.urgent_avg /= b.samples;
        b.normal_avg /= b.samples;
      }
    }
    result.urgency_per_second = urgency_;
    result.estimator_windows = estimator_windows_;
    result.router_audit = router_.audit_log();
    result.batch_log = batch_log_;
    result.kv_exhaustion_retries = kv_retries_;
    result.served_tokens_by_priority = served_tokens_;
    return result;
  }

  SimConfig cfg_;
  Router router_;
  LatencyModelParams sched_params_;
  std::vector<detail::SimRequest> requests_;
  std::vector<detail::SimInstance> instances_;
  std::priority_queue<detail::SimEvent, std::vector<detail::SimEvent>, std::greater<>> events_;
  std::unordered_map<RequestId, std::size_t> id_index_;
  std::uint64_t next_sequence_ = 0;
  TimeMs now_ = 0;
  std::vector<std::pair<double, double>> window_;
  std::vector<EstimatorWindow> estimator_windows_;
  std::vector<UrgencyBucket> urgency_;
  std::vector<std::string> batch_log_;
  std::int64_t kv_retries_ = 0;
  std::map<PriorityLevel, std::int64_t> served_tokens_;
};

inline SimResult run(const SimConfig& cfg, std::vector<Request> workload) {
  Simulation sim(cfg, std::move(workload));
  return sim.run();
}

// Rescale the template per rate and run each; returns (rate, report) rows.
inline std::vector<std::pair<double, GainReport>> sweep(const SimConfig& cfg,
                                                        std::span<const double> rates,
                                                        const std::vector<Request>& workload) {
  std::vector<std::pair<double, GainReport>> out;
  for (double rate : rates) {
    if (rate <= 0) throw ConfigError("sweep: rates must be positive");
    std::vector<Request> scaled = scale_to_rate(workload, rate);
    out.emplace_back(rate, run(cfg, std::move(scaled)).gain_report);
  }
  return out;
}

}  // namespace prioserve
