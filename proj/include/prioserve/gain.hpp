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
#include <map>
#include <span>
#include <sstream>
#include <vector>

#include <json.hpp>

#include "prioserve/common.hpp"

namespace prioserve {

// Per-request latency targets. ttft_slo bounds the first token, tpot_slo is
// the per-output-token allowance that spaces the remaining deadlines.
struct SloSpec {
  DurationMs ttft_slo = 0;
  DurationMs tpot_slo = 0;
};

// tpot_slo == 0 is only meaningful for single-token outputs; configuration
// validation rejects it otherwise (tests may still exercise the degenerate
// deadline math directly).
inline void validate_slo(const SloSpec& slo, std::int64_t expected_output_len) {
  if (slo.ttft_slo <= 0) throw ConfigError("SloSpec: ttft_slo must be > 0");
  if (slo.tpot_slo < 0) throw ConfigError("SloSpec: tpot_slo must be >= 0");
  if (slo.tpot_slo == 0 && expected_output_len > 1) {
    throw ConfigError("SloSpec: tpot_slo == 0 requires expected_output_len <= 1");
  }
}

// Gain weights: the first token is worth w_first, every later token w_decode,
// and the whole request is scaled by the weight of its priority level.
struct GainWeights {
  double w_first = 1.0;
  double w_decode = 1.0;
  std::map<PriorityLevel, double> priority_weight;

  double priority_weight_of(PriorityLevel level) const {
    auto it = priority_weight.find(level);
    if (it == priority_weight.end()) {
      throw ConfigError("GainWeights: unknown priority level " + std::to_string(level));
    }
    return it->second;
  }

  // Weight of delivering the token_index-th output token (1-based).
  double token_weight(PriorityLevel level, std::int64_t token_index) const {
    return (token_index == 1 ? w_first : w_decode) * priority_weight_of(level);
  }

  void validate() const {
    if (w_first <= 0 || w_decode <= 0) {
      throw ConfigError("GainWeights: w_first and w_decode must be > 0");
    }
    if (priority_weight.empty()) {
      throw ConfigError("GainWeights: priority_weight map must be nonempty");
    }
    for (const auto& [level, w] : priority_weight) {
      if (w <= 0) {
        throw ConfigError("GainWeights: weight for level " + std::to_string(level) +
                          " must be > 0");
      }
    }
  }
};

// Emission history of one request. emit_times[i] is the absolute time the
// (i+1)-th output token left the engine; tokens never emitted are absent.
struct TokenRecord {
  RequestId request_id = 0;
  TimeMs arrival_time = 0;
  PriorityLevel priority_level = 0;
  std::vector<TimeMs> emit_times;
  std::int64_t expected_output_len = 0;

  bool complete() const {
    return static_cast<std::int64_t>(emit_times.size()) >= expected_output_len;
  }

  void validate() const {
    if (static_cast<std::int64_t>(emit_times.size()) > expected_output_len) {
      throw DataError("TokenRecord: more emissions than expected_output_len");
    }
    for (std::size_t i = 0; i < emit_times.size(); ++i) {
      if (emit_times[i] < arrival_time) {
        throw DataError("TokenRecord: emission before arrival");
      }
      if (i > 0 && emit_times[i] <= emit_times[i - 1]) {
        throw DataError("TokenRecord: emit_times must be strictly increasing");
      }
    }
  }
};

// Deadline offset of the i-th output token (1-based), relative to arrival.
// Depends only on the SLO and the index, never on emission history.
inline DurationMs token_deadline(const SloSpec& slo, std::int64_t token_index) {
  if (token_index < 1) {
    throw std::invalid_argument("token_deadline: token index must be >= 1");
  }
  return slo.ttft_slo + static_cast<double>(token_index - 1) * slo.tpot_slo;
}

// Observed time-to-first-token; only defined when at least one token exists.
inline DurationMs observed_ttft(const TokenRecord& rec) {
  return rec.emit_times.front() - rec.arrival_time;
}

// Mean inter-token time over the emitted tokens; 0 when fewer than two exist.
inline DurationMs observed_tpot(const TokenRecord& rec) {
  const auto n = rec.emit_times.size();
  if (n < 2) return 0.0;
  return (rec.emit_times.back() - rec.emit_times.front()) / static_cast<double>(n - 1);
}

// Token-level deadline-aware gain: each emitted token scores its weight iff
// it beat its fixed deadline (strict comparison; ties score 0).
//
// With first_token_unbuffered, deadlines of tokens i >= 2 are re-anchored at
// min(observed TTFT, ttft_slo); the first token itself is still judged
// against ttft_slo.
inline double tdg_gain(const TokenRecord& rec, const SloSpec& slo, const GainWeights& w,
                       bool first_token_unbuffered = false) {
  const double wp = w.priority_weight_of(rec.priority_level);
  double base = slo.ttft_slo;
  if (first_token_unbuffered && !rec.emit_times.empty()) {
    base = std::min(observed_ttft(rec), slo.ttft_slo);
  }
  double gain = 0.0;
  for (std::size_t i = 0; i < rec.emit_times.size(); ++i) {
    const double latency = rec.emit_times[i] - rec.arrival_time;
    const double deadline =
        (i == 0) ? slo.ttft_slo : base + static_cast<double>(i) * slo.tpot_slo;
    if (latency < deadline) {
      gain += (i == 0 ? w.w_first : w.w_decode) * wp;
    }
  }
  return gain;
}

// Request-level weighted SLO attainment (strawman f_W): the priority weight
// if both TTFT and mean TPOT meet the targets, else 0. Incomplete requests
// score 0. Comparison is non-strict, following the request-level definition.
inline double weighted_slo_gain(const TokenRecord& rec, const SloSpec& slo,
                                const GainWeights& w) {
  const double wp = w.priority_weight_of(rec.priority_level);
  if (rec.emit_times.empty() || !rec.complete()) return 0.0;
  return (observed_ttft(rec) <= slo.ttft_slo && observed_tpot(rec) <= slo.tpot_slo)
             ? wp
             : 0.0;
}

// Token-accumulated SLO gain: first token judged on TTFT, later tokens on
// the gap to their predecessor (TBT), both strict.
inline double ta_slo_gain(const TokenRecord& rec, const SloSpec& slo,
                          const GainWeights& w) {
  const double wp = w.priority_weight_of(rec.priority_level);
  double gain = 0.0;
  for (std::size_t i = 0; i < rec.emit_times.size(); ++i) {
    if (i == 0) {
      if (observed_ttft(rec) < slo.ttft_slo) gain += w.w_first * wp;
    } else {
      const double tbt = rec.emit_times[i] - rec.emit_times[i - 1];
      if (tbt < slo.tpot_slo) gain += w.w_decode * wp;
    }
  }
  return gain;
}

struct PriorityBreakdown {
  double gain = 0.0;
  double ideal = 0.0;
  double slo_attainment = 0.0;
};

struct GainReport {
  double total_gain = 0.0;
  double ideal_gain = 0.0;
  double tdg_ratio = 0.0;
  double miss_tdg_ratio = 0.0;
  double slo_attainment = 0.0;
  std::map<PriorityLevel, PriorityBreakdown> per_priority;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["total_gain"] = total_gain;
    j["ideal_gain"] = ideal_gain;
    j["tdg_ratio"] = tdg_ratio;
    j["miss_tdg_ratio"] = miss_tdg_ratio;
    j["slo_attainment"] = slo_attainment;
    auto per = nlohmann::ordered_json::object();
    for (const auto& [level, b] : per_priority) {
      nlohmann::ordered_json e;
      e["gain"] = b.gain;
      e["ideal"] = b.ideal;
      e["slo_attainment"] = b.slo_attainment;
      per[std::to_string(level)] = e;
    }
    j["per_priority"] = per;
    return j;
  }

  // Flat row: total_gain, ideal_gain, tdg_ratio, miss_tdg_ratio,
  // slo_attainment, then (gain, ideal, slo_attainment) per priority level in
  // ascending level order.
  std::string to_csv_row() const {
    std::ostringstream out;
    out << fmt_double(total_gain) << ',' << fmt_double(ideal_gain) << ','
        << fmt_double(tdg_ratio) << ',' << fmt_double(miss_tdg_ratio) << ','
        << fmt_double(slo_attainment);
    for (const auto& [level, b] : per_priority) {
      out << ',' << fmt_double(b.gain) << ',' << fmt_double(b.ideal) << ','
          << fmt_double(b.slo_attainment);
    }
    return out.str();
  }

  std::string csv_header() const {
    std::ostringstream out;
    out << "total_gain,ideal_gain,tdg_ratio,miss_tdg_ratio,slo_attainment";
    for (const auto& [level, b] : per_priority) {
      (void)b;
      out << ",gain_p" << level << ",ideal_p" << level << ",slo_attainment_p" << level;
    }
    return out.str();
  }
};

// System-level aggregation over finished (or horizon-truncated) records.
// ideal_gain counts every expected token; a request attains its SLO only if
// it completed and both observed TTFT and TPOT are strictly below target.
inline GainReport aggregate(std::span<const TokenRecord> records,
                            std::span<const SloSpec> slos, const GainWeights& w,
                            bool first_token_unbuffered = false) {
  if (records.empty()) {
    throw DataError("aggregate: empty record set");
  }
  if (records.size() != slos.size()) {
    throw std::invalid_argument("aggregate: records/slos size mismatch");
  }
  GainReport report;
  std::map<PriorityLevel, std::pair<std::int64_t, std::int64_t>> counts;  // attained, total
  for (std::size_t k = 0; k < records.size(); ++k) {
    const TokenRecord& rec = records[k];
    const SloSpec& slo = slos[k];
    const double wp = w.priority_weight_of(rec.priority_level);
    const double gain = tdg_gain(rec, slo, w, first_token_unbuffered);
    double ideal = 0.0;
    for (std::int64_t i = 1; i <= rec.expected_output_len; ++i) {
      ideal += (i == 1 ? w.w_first : w.w_decode) * wp;
    }
    const bool attained = !rec.emit_times.empty() && rec.complete() &&
                          observed_ttft(rec) < slo.ttft_slo &&
                          observed_tpot(rec) < slo.tpot_slo;
    report.total_gain += gain;
    report.ideal_gain += ideal;
    auto& b = report.per_priority[rec.priority_level];
    b.gain += gain;
    b.ideal += ideal;
    auto& c = counts[rec.priority_level];
    c.first += attained ? 1 : 0;
    c.second += 1;
  }
  std::int64_t attained_total = 0;
  for (auto& [level, b] : report.per_priority) {
    const auto& c = counts[level];
    b.slo_attainment = static_cast<double>(c.first) / static_cast<double>(c.second);
    attained_total += c.first;
  }
  report.slo_attainment =
      static_cast<double>(attained_total) / static_cast<double>(records.size());
  report.tdg_ratio = report.ideal_gain > 0 ? report.total_gain / report.ideal_gain : 1.0;
  report.miss_tdg_ratio = 1.0 - report.tdg_ratio;
  return report;
}

}  // namespace prioserve
