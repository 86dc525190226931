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
#include <span>
#include <vector>

#include "prioserve/common.hpp"
#include "prioserve/gain.hpp"
#include "prioserve/latency_model.hpp"

namespace prioserve {

enum class RequestUrgency { kNormal, kUrgent };

// Scheduler view of one unfinished request: identity and SLO plus the
// per-iteration metrics filled in by annotate().
struct SchedRequest {
  RequestId id = 0;
  TimeMs arrival_time = 0;
  PriorityLevel priority_level = 0;
  SloSpec slo;
  std::int64_t input_len = 0;
  std::int64_t expected_output_len = 1;
  std::int64_t prefill_done = 0;
  std::int64_t output_len = 0;
  std::int64_t kv_len = 0;
  std::int64_t blocks_held = 0;

  // Filled by annotate().
  DurationMs exec = 0;
  DurationMs remain = 0;
  double density = 0;
  RequestUrgency state = RequestUrgency::kNormal;

  bool in_prefill() const { return prefill_done < input_len; }
  std::int64_t remaining_prompt() const { return input_len - prefill_done; }

  // The work this request would contribute to the next forward pass: the
  // whole remaining prompt for prefill, one token for decode.
  WorkItem next_pass_item() const {
    if (in_prefill()) {
      return WorkItem{Phase::kPrefill, remaining_prompt(), prefill_done};
    }
    return WorkItem{Phase::kDecode, 1, kv_len};
  }
};

struct BatchEntry {
  RequestId id = 0;
  std::int64_t chunk_len = 0;   // tokens admitted this pass; 1 for decode
  DurationMs chunk_time = 0;    // estimated cost of the chunk
};

struct BatchPlan {
  std::vector<BatchEntry> entries;
  DurationMs est_time = 0;  // includes the per-batch overhead
  DurationMs budget = 0;
  int urgent_count = 0;  // queue partition observed at formation (slide only)
  int normal_count = 0;
};

enum class PhiVariant { kAggressive, kConservative, kPrefillOnly };

struct SlideConfig {
  // Latency-budget floor. Unset = max(5 ms, smallest tpot_slo in the queue).
  std::optional<DurationMs> eta;
  double gamma = 1.0;
  PhiVariant phi_variant = PhiVariant::kAggressive;
  std::int64_t min_chunk = 64;
  std::int64_t max_batch_memory = std::numeric_limits<std::int64_t>::max();
  bool guarantee_first_entry = true;

  void validate() const {
    if (eta && *eta <= 0) throw ConfigError("SlideConfig: eta must be > 0");
    if (gamma <= 0) throw ConfigError("SlideConfig: gamma must be > 0");
    if (min_chunk < 1) throw ConfigError("SlideConfig: min_chunk must be >= 1");
    if (max_batch_memory < 1) throw ConfigError("SlideConfig: max_batch_memory must be >= 1");
  }
};

struct MemoryBudget {
  std::int64_t free_blocks = std::numeric_limits<std::int64_t>::max();
  std::int64_t block_size = 16;
};

namespace detail {

inline bool arrival_id_less(const SchedRequest& a, const SchedRequest& b) {
  if (a.arrival_time != b.arrival_time) return a.arrival_time < b.arrival_time;
  return a.id < b.id;
}

// KV blocks this request must newly acquire to grow its cache by `growth`
// tokens. blocks_held is trusted; the caller keeps it consistent.
inline std::int64_t blocks_needed(const SchedRequest& r, std::int64_t growth,
                                  std::int64_t block_size) {
  const std::int64_t after = ceil_div(r.kv_len + growth, block_size);
  return std::max<std::int64_t>(0, after - r.blocks_held);
}

}  // namespace detail

// Refresh exec/remain/density on every queued request and return the smallest
// remaining time to deadline (infinity for an empty queue).
inline DurationMs annotate(std::span<SchedRequest> queue, const LatencyModelParams& params,
                           const GainWeights& weights, TimeMs now) {
  DurationMs t_min = std::numeric_limits<double>::infinity();
  for (SchedRequest& r : queue) {
    r.exec = estimate_item(params, r.next_pass_item());
    r.remain = r.arrival_time + token_deadline(r.slo, r.output_len + 1) - now;
    r.density = weights.token_weight(r.priority_level, r.output_len + 1) / r.exec;
    t_min = std::min(t_min, r.remain);
  }
  return t_min;
}

// Request-agnostic load judgment: every request is assumed to sit at the end
// of the queue, so the whole queue's work is inflated by the per-batch
// overhead share.
inline DurationMs phi_aggressive(std::span<const SchedRequest> queue, DurationMs t_budget,
                                 DurationMs t_c) {
  if (t_budget <= t_c) {
    throw BudgetError("phi_aggressive: t_budget must exceed t_c");
  }
  double exec_sum = 0.0;
  for (const SchedRequest& r : queue) exec_sum += r.exec;
  return t_budget / (t_budget - t_c) * exec_sum;
}

// Request-specific judgment: queue sorted by remaining time, inclusive prefix
// sum up to the request's own position.
inline DurationMs phi_conservative(const SchedRequest& req,
                                   std::span<const SchedRequest> queue,
                                   DurationMs t_budget, DurationMs t_c) {
  if (t_budget <= t_c) {
    throw BudgetError("phi_conservative: t_budget must exceed t_c");
  }
  std::vector<const SchedRequest*> sorted;
  sorted.reserve(queue.size());
  for (const SchedRequest& r : queue) sorted.push_back(&r);
  std::sort(sorted.begin(), sorted.end(), [](const SchedRequest* a, const SchedRequest* b) {
    if (a->remain != b->remain) return a->remain < b->remain;
    return detail::arrival_id_less(*a, *b);
  });
  double prefix = 0.0;
  for (const SchedRequest* r : sorted) {
    prefix += r->exec;
    if (r->id == req.id) {
      return t_budget / (t_budget - t_c) * prefix;
    }
  }
  throw std::invalid_argument("phi_conservative: request not in queue");
}

// Prefill-only instances: worst case of one request per batch.
inline DurationMs phi_prefill_only(std::span<const SchedRequest> queue, DurationMs t_c) {
  double total = 0.0;
  for (const SchedRequest& r : queue) {
    if (!r.in_prefill()) {
      throw std::invalid_argument("phi_prefill_only: decode request in queue");
    }
    total += r.exec;
  }
  return total + static_cast<double>(queue.size()) * t_c;
}

// Largest admissible chunk for one request under the remaining time budget.
// Prefill chunks are multiples of min_chunk (the final remainder rounds to
// the full prompt); the first admitted entry of a batch may be granted a
// minimum chunk even if it overshoots, so a tiny budget cannot livelock the
// engine.
inline std::pair<std::int64_t, DurationMs> get_max_chunk(const SchedRequest& req,
                                                         DurationMs remaining_budget,
                                                         const LatencyModelParams& params,
                                                         std::int64_t min_chunk,
                                                         bool first_entry = false) {
  if (remaining_budget < 0) {
    throw std::invalid_argument("get_max_chunk: negative budget");
  }
  if (!req.in_prefill()) {
    const DurationMs cost = estimate_item(params, req.next_pass_item());
    if (cost <= remaining_budget || first_entry) return {1, cost};
    return {0, 0.0};
  }

  const std::int64_t prompt_left = req.remaining_prompt();
  const auto cost_of = [&](std::int64_t chunk) {
    return estimate_item(params, WorkItem{Phase::kPrefill, chunk, req.prefill_done});
  };
  const std::int64_t k_max = ceil_div(prompt_left, min_chunk);
  const auto chunk_of = [&](std::int64_t k) { return std::min(k * min_chunk, prompt_left); };

  if (cost_of(chunk_of(k_max)) <= remaining_budget) {
    return {prompt_left, cost_of(prompt_left)};
  }
  // Largest k with cost(chunk(k)) <= budget; cost is monotone in the chunk.
  std::int64_t lo = 0, hi = k_max;
  while (lo < hi) {
    const std::int64_t mid = (lo + hi + 1) / 2;
    if (cost_of(chunk_of(mid)) <= remaining_budget) {
      lo = mid;
    } else {
      hi = mid - 1;
    }
  }
  if (lo == 0) {
    if (first_entry) {
      const std::int64_t chunk = std::min(min_chunk, prompt_left);
      return {chunk, cost_of(chunk)};
    }
    return {0, 0.0};
  }
  return {chunk_of(lo), cost_of(chunk_of(lo))};
}

// SlideBatching: derive a latency budget from the nearest deadline, partition
// the queue into urgent (density-first) and normal (deadline-first) requests,
// then fill the budget with maximal chunks in that order.
inline BatchPlan slide_batch(std::vector<SchedRequest> queue, const LatencyModelParams& params,
                             const SlideConfig& cfg, const GainWeights& weights, TimeMs now,
                             MemoryBudget mem = {}) {
  cfg.validate();
  const DurationMs t_min = annotate(queue, params, weights, now);

  DurationMs eta = cfg.eta.value_or(0);
  if (!cfg.eta) {
    DurationMs min_tpot = std::numeric_limits<double>::infinity();
    for (const SchedRequest& r : queue) min_tpot = std::min(min_tpot, r.slo.tpot_slo);
    eta = std::max(5.0, std::isfinite(min_tpot) ? min_tpot : 5.0);
  }
  const DurationMs t_budget = std::max(t_min, eta);
  const DurationMs t_c = params.beta * params.t_c;

  BatchPlan plan;
  plan.budget = t_budget;
  plan.est_time = t_c;
  if (queue.empty()) return plan;

  // Urgency partition.
  std::vector<DurationMs> phi(queue.size(), 0.0);
  switch (cfg.phi_variant) {
    case PhiVariant::kAggressive: {
      const DurationMs phi_a = phi_aggressive(queue, t_budget, t_c);
      std::fill(phi.begin(), phi.end(), phi_a);
      break;
    }
    case PhiVariant::kConservative: {
      if (t_budget <= t_c) throw BudgetError("slide_batch: t_budget must exceed t_c");
      std::vector<std::size_t> order(queue.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (queue[a].remain != queue[b].remain) return queue[a].remain < queue[b].remain;
        return detail::arrival_id_less(queue[a], queue[b]);
      });
      double prefix = 0.0;
      for (std::size_t i : order) {
        prefix += queue[i].exec;
        phi[i] = t_budget / (t_budget - t_c) * prefix;
      }
      break;
    }
    case PhiVariant::kPrefillOnly: {
      const DurationMs phi_p = phi_prefill_only(queue, t_c);
      std::fill(phi.begin(), phi.end(), phi_p);
      break;
    }
  }
  for (std::size_t i = 0; i < queue.size(); ++i) {
    queue[i].state = queue[i].remain < cfg.gamma * phi[i] ? RequestUrgency::kUrgent
                                                          : RequestUrgency::kNormal;
    if (queue[i].state == RequestUrgency::kUrgent) {
      ++plan.urgent_count;
    } else {
      ++plan.normal_count;
    }
  }

  std::sort(queue.begin(), queue.end(), [](const SchedRequest& a, const SchedRequest& b) {
    if (a.state != b.state) return a.state == RequestUrgency::kUrgent;
    if (a.state == RequestUrgency::kUrgent) {
      if (a.density != b.density) return a.density > b.density;
    } else {
      if (a.remain != b.remain) return a.remain < b.remain;
    }
    return detail::arrival_id_less(a, b);
  });

  // Fill the budget. A request whose admissible chunk is zero is skipped and
  // simply stays queued; running out of memory ends the batch.
  const std::int64_t mem_cap = std::min(mem.free_blocks, cfg.max_batch_memory);
  std::int64_t blocks_used = 0;
  for (const SchedRequest& r : queue) {
    if (plan.est_time >= t_budget) break;
    const bool first_entry = plan.entries.empty() && cfg.guarantee_first_entry;
    const auto [chunk, chunk_time] =
        get_max_chunk(r, t_budget - plan.est_time, params, cfg.min_chunk, first_entry);
    if (chunk == 0) continue;
    const std::int64_t growth = r.in_prefill() ? chunk : 1;
    const std::int64_t need = detail::blocks_needed(r, growth, mem.block_size);
    if (blocks_used + need > mem_cap) break;
    plan.entries.push_back({r.id, chunk, chunk_time});
    plan.est_time += chunk_time;
    blocks_used += need;
  }
  return plan;
}

enum class LocalPolicy {
  kSlideBatching,
  kVllmFcfs,
  kSarathiFcfs,
  kSarathiPriority,
  kFairBatching,
  kWeightedVtc,
};

struct BaselineConfig {
  std::int64_t max_batch_tokens = 2048;
  std::int64_t max_batch_seqs = 256;
  // FairBatching: a decode request is "nearing its deadline" when
  // remain < fair_urgent_factor * tpot_slo.
  double fair_urgent_factor = 1.0;

  void validate() const {
    if (max_batch_tokens < 1) throw ConfigError("BaselineConfig: max_batch_tokens >= 1");
    if (max_batch_seqs < 1) throw ConfigError("BaselineConfig: max_batch_seqs >= 1");
    if (fair_urgent_factor <= 0) throw ConfigError("BaselineConfig: fair_urgent_factor > 0");
  }
};

// Weighted VTC per-client virtual counters, keyed by priority level.
using VtcState = std::map<PriorityLevel, double>;

namespace detail {

struct FillCaps {
  std::int64_t tokens;
  std::int64_t seqs;
};

// Shared capacity-limited fill over an already-ordered queue. chunked selects
// sarathi-style prefill chunking against the token budget; otherwise prefills
// are admitted whole. on_admit reports admitted token counts (VTC hook).
template <typename OnAdmit>
inline BatchPlan fill_by_order(std::span<const SchedRequest*> order,
                               const LatencyModelParams& params, FillCaps caps,
                               MemoryBudget mem, bool chunked, bool grant_first_whole,
                               OnAdmit&& on_admit) {
  BatchPlan plan;
  const DurationMs t_c = params.beta * params.t_c;
  plan.est_time = t_c;
  std::int64_t tokens_used = 0;
  std::int64_t blocks_used = 0;
  for (const SchedRequest* r : order) {
    if (tokens_used >= caps.tokens) break;
    if (static_cast<std::int64_t>(plan.entries.size()) >= caps.seqs) break;
    std::int64_t chunk = 0;
    if (!r->in_prefill()) {
      chunk = 1;
    } else if (chunked) {
      chunk = std::min(r->remaining_prompt(), caps.tokens - tokens_used);
    } else {
      const std::int64_t prompt = r->remaining_prompt();
      if (prompt <= caps.tokens - tokens_used) {
        chunk = prompt;
      } else if (plan.entries.empty() && grant_first_whole) {
        chunk = prompt;  // progress guarantee for prompts beyond the budget
      } else {
        break;  // FCFS head-of-line: do not admit later prompts around it
      }
    }
    if (chunk == 0) continue;
    const std::int64_t growth = r->in_prefill() ? chunk : 1;
    const std::int64_t need = blocks_needed(*r, growth, mem.block_size);
    if (blocks_used + need > mem.free_blocks) break;
    const WorkItem item = r->in_prefill()
                              ? WorkItem{Phase::kPrefill, chunk, r->prefill_done}
                              : WorkItem{Phase::kDecode, 1, r->kv_len};
    const DurationMs cost = estimate_item(params, item);
    plan.entries.push_back({r->id, chunk, cost});
    plan.est_time += cost;
    tokens_used += chunk;
    blocks_used += need;
    on_admit(*r, chunk);
  }
  plan.budget = plan.est_time;
  return plan;
}

}  // namespace detail

// Baseline batch formation. Queues are annotated first so deadline-based
// policies see fresh remain values. vtc is required for kWeightedVtc.
inline BatchPlan baseline_batch(LocalPolicy policy, std::vector<SchedRequest> queue,
                                const LatencyModelParams& params, const BaselineConfig& cfg,
                                const GainWeights& weights, TimeMs now, MemoryBudget mem = {},
                                VtcState* vtc = nullptr) {
  cfg.validate();
  annotate(queue, params, weights, now);
  std::vector<const SchedRequest*> order;
  order.reserve(queue.size());
  for (const SchedRequest& r : queue) order.push_back(&r);
  const detail::FillCaps caps{cfg.max_batch_tokens, cfg.max_batch_seqs};
  const auto noop = [](const SchedRequest&, std::int64_t) {};

  switch (policy) {
    case LocalPolicy::kVllmFcfs: {
      // Prefill-priority, FCFS, whole prompts, no prefill/decode mixing.
      std::vector<const SchedRequest*> prefills;
      std::vector<const SchedRequest*> decodes;
      for (const SchedRequest* r : order) {
        (r->in_prefill() ? prefills : decodes).push_back(r);
      }
      auto fcfs = [](const SchedRequest* a, const SchedRequest* b) {
        return detail::arrival_id_less(*a, *b);
      };
      std::sort(prefills.begin(), prefills.end(), fcfs);
      std::sort(decodes.begin(), decodes.end(), fcfs);
      if (!prefills.empty()) {
        return detail::fill_by_order(prefills, params, caps, mem, /*chunked=*/false,
                                     /*grant_first_whole=*/true, noop);
      }
      return detail::fill_by_order(decodes, params, caps, mem, false, false, noop);
    }
    case LocalPolicy::kSarathiFcfs: {
      std::sort(order.begin(), order.end(), [](const SchedRequest* a, const SchedRequest* b) {
        if (a->in_prefill() != b->in_prefill()) return !a->in_prefill();  // decode first
        return detail::arrival_id_less(*a, *b);
      });
      return detail::fill_by_order(order, params, caps, mem, /*chunked=*/true, false, noop);
    }
    case LocalPolicy::kSarathiPriority: {
      std::sort(order.begin(), order.end(),
                [&](const SchedRequest* a, const SchedRequest* b) {
                  if (a->in_prefill() != b->in_prefill()) return !a->in_prefill();
                  const double wa = weights.priority_weight_of(a->priority_level);
                  const double wb = weights.priority_weight_of(b->priority_level);
                  if (wa != wb) return wa > wb;
                  return detail::arrival_id_less(*a, *b);
                });
      return detail::fill_by_order(order, params, caps, mem, true, false, noop);
    }
    case LocalPolicy::kFairBatching: {
      // Urgent decodes, then prefills, then the remaining decodes; EDF within
      // each group.
      auto group = [&](const SchedRequest* r) {
        if (!r->in_prefill() && r->remain < cfg.fair_urgent_factor * r->slo.tpot_slo) {
          return 0;
        }
        return r->in_prefill() ? 1 : 2;
      };
      std::sort(order.begin(), order.end(),
                [&](const SchedRequest* a, const SchedRequest* b) {
                  const int ga = group(a), gb = group(b);
                  if (ga != gb) return ga < gb;
                  if (a->remain != b->remain) return a->remain < b->remain;
                  return detail::arrival_id_less(*a, *b);
                });
      return detail::fill_by_order(order, params, caps, mem, true, false, noop);
    }
    case LocalPolicy::kWeightedVtc: {
      if (vtc == nullptr) {
        throw ConfigError("baseline_batch: weighted_vtc requires counter state");
      }
      // Repeatedly serve the lowest-counter client's oldest request; counters
      // advance by served tokens over the client's weight.
      std::map<PriorityLevel, std::vector<const SchedRequest*>> by_client;
      for (const SchedRequest* r : order) by_client[r->priority_level].push_back(r);
      for (auto& [level, reqs] : by_client) {
        (*vtc)[level];  // make sure the client has a counter
        std::sort(reqs.begin(), reqs.end(), [](const SchedRequest* a, const SchedRequest* b) {
          return detail::arrival_id_less(*a, *b);
        });
        std::reverse(reqs.begin(), reqs.end());  // pop_back = earliest arrival
      }
      std::vector<const SchedRequest*> vtc_order;
      VtcState counters = *vtc;
      while (true) {
        PriorityLevel best = 0;
        bool found = false;
        for (const auto& [level, reqs] : by_client) {
          if (reqs.empty()) continue;
          if (!found || counters[level] < counters[best]) {
            best = level;
            found = true;
          }
        }
        if (!found) break;
        const SchedRequest* r = by_client[best].back();
        by_client[best].pop_back();
        vtc_order.push_back(r);
        const std::int64_t tok = r->in_prefill() ? r->remaining_prompt() : 1;
        counters[best] += static_cast<double>(tok) / weights.priority_weight_of(best);
      }
      return detail::fill_by_order(
          vtc_order, params, caps, mem, /*chunked=*/true, false,
          [&](const SchedRequest& r, std::int64_t chunk) {
            (*vtc)[r.priority_level] += static_cast<double>(chunk) /
                                        weights.priority_weight_of(r.priority_level);
          });
    }
    case LocalPolicy::kSlideBatching:
      throw ConfigError("baseline_batch: slide_batching is not a baseline policy");
  }
  throw ConfigError("baseline_batch: unknown policy");
}

// Stateful wrapper owned by one engine loop: holds the policy, its config and
// the VTC counters.
class LocalScheduler {
 public:
  LocalScheduler() = default;
  LocalScheduler(LocalPolicy policy, SlideConfig slide, BaselineConfig baseline,
                 GainWeights weights)
      : policy_(policy),
        slide_(std::move(slide)),
        baseline_(std::move(baseline)),
        weights_(std::move(weights)) {}

  BatchPlan form_batch(std::vector<SchedRequest> queue, const LatencyModelParams& params,
                       TimeMs now, MemoryBudget mem = {}) {
    if (policy_ == LocalPolicy::kSlideBatching) {
      return slide_batch(std::move(queue), params, slide_, weights_, now, mem);
    }
    return baseline_batch(policy_, std::move(queue), params, baseline_, weights_, now, mem,
                          &vtc_);
  }

  LocalPolicy policy() const { return policy_; }
  const SlideConfig& slide_config() const { return slide_; }
  const VtcState& vtc_state() const { return vtc_; }

 private:
  LocalPolicy policy_ = LocalPolicy::kSlideBatching;
  SlideConfig slide_;
  BaselineConfig baseline_;
  GainWeights weights_;
  VtcState vtc_;
};

inline const char* to_string(LocalPolicy p) {
  switch (p) {
    case LocalPolicy::kSlideBatching: return "slide_batching";
    case LocalPolicy::kVllmFcfs: return "vllm_fcfs";
    case LocalPolicy::kSarathiFcfs: return "sarathi_fcfs";
    case LocalPolicy::kSarathiPriority: return "sarathi_priority";
    case LocalPolicy::kFairBatching: return "fairbatching";
    case LocalPolicy::kWeightedVtc: return "weighted_vtc";
  }
  return "unknown";
}

inline LocalPolicy local_policy_from_string(const std::string& s) {
  if (s == "slide_batching") return LocalPolicy::kSlideBatching;
  if (s == "vllm_fcfs") return LocalPolicy::kVllmFcfs;
  if (s == "sarathi_fcfs") return LocalPolicy::kSarathiFcfs;
  if (s == "sarathi_priority") return LocalPolicy::kSarathiPriority;
  if (s == "fairbatching") return LocalPolicy::kFairBatching;
  if (s == "weighted_vtc") return LocalPolicy::kWeightedVtc;
  throw ConfigError("unknown local policy: " + s);
}

}  // namespace prioserve
