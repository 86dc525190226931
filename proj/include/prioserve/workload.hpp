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
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "prioserve/common.hpp"
#include "prioserve/gain.hpp"

namespace prioserve {

struct Request {
  RequestId id = 0;
  TimeMs arrival_time = 0;
  std::int64_t input_len = 1;
  std::int64_t expected_output_len = 1;
  PriorityLevel priority_level = 0;
  SloSpec slo;

  void validate() const {
    if (input_len < 1) throw DataError("Request: input_len must be >= 1");
    if (expected_output_len < 1) throw DataError("Request: expected_output_len >= 1");
    if (arrival_time < 0) throw DataError("Request: arrival_time must be >= 0");
    validate_slo(slo, expected_output_len);
  }
};

struct LengthDistribution {
  enum class Kind { kLognormal, kFixed, kUniform };
  Kind kind = Kind::kLognormal;
  double median = 512;  // lognormal
  double sigma = 1.0;
  std::int64_t fixed = 128;  // fixed
  std::int64_t lo = 1, hi = 1024;  // uniform

  std::int64_t sample(std::mt19937_64& rng) const {
    switch (kind) {
      case Kind::kLognormal: {
        std::lognormal_distribution<double> dist(std::log(median), sigma);
        return std::max<std::int64_t>(1, static_cast<std::int64_t>(std::llround(dist(rng))));
      }
      case Kind::kFixed:
        return fixed;
      case Kind::kUniform: {
        std::uniform_int_distribution<std::int64_t> dist(lo, hi);
        return dist(rng);
      }
    }
    return 1;
  }
};

// How each request gets its SLO: one fixed spec, or a TTFT proportional to
// the prompt length (with a floor) and a fixed TPOT.
struct SloPolicy {
  enum class Kind { kFixed, kPerLength };
  Kind kind = Kind::kFixed;
  SloSpec fixed{5000, 50};
  double ttft_per_input_token = 10.0;
  DurationMs ttft_floor = 1000.0;
  DurationMs tpot = 50.0;

  SloSpec assign(std::int64_t input_len) const {
    if (kind == Kind::kFixed) return fixed;
    return SloSpec{std::max(ttft_floor, ttft_per_input_token * static_cast<double>(input_len)),
                   tpot};
  }
};

struct PoissonSource {
  double rate_per_s = 1.0;
  DurationMs duration_ms = 60'000;
  LengthDistribution input_len{LengthDistribution::Kind::kLognormal, 512, 1.0};
  LengthDistribution output_len{LengthDistribution::Kind::kLognormal, 128, 1.0};
};

struct TraceSource {
  std::string path;
  double target_rate_per_s = 0;  // 0 = replay timestamps as-is
};

struct WorkloadSpec {
  std::variant<PoissonSource, TraceSource> source = PoissonSource{};
  std::map<PriorityLevel, double> priority_fractions{{0, 0.5}, {1, 0.5}};
  std::map<PriorityLevel, double> priority_weights{{0, 1.0}, {1, 2.0}};
  SloPolicy slo_policy;
  std::uint64_t seed = 1;

  void validate() const {
    if (priority_fractions.empty()) throw ConfigError("WorkloadSpec: empty priority_fractions");
    double sum = 0;
    for (const auto& [level, f] : priority_fractions) {
      if (f < 0) throw ConfigError("WorkloadSpec: negative priority fraction");
      if (priority_weights.find(level) == priority_weights.end()) {
        throw ConfigError("WorkloadSpec: level " + std::to_string(level) + " has no weight");
      }
      sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
      throw ConfigError("WorkloadSpec: priority_fractions must sum to 1");
    }
    for (const auto& [level, w] : priority_weights) {
      if (w <= 0) throw ConfigError("WorkloadSpec: weights must be positive");
    }
    if (const auto* p = std::get_if<PoissonSource>(&source)) {
      if (p->rate_per_s <= 0) throw ConfigError("WorkloadSpec: rate must be > 0");
      if (p->duration_ms <= 0) throw ConfigError("WorkloadSpec: duration must be > 0");
    }
  }
};

namespace detail {

inline PriorityLevel sample_priority(const std::map<PriorityLevel, double>& fractions,
                                     std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double x = u(rng);
  PriorityLevel last = fractions.begin()->first;
  for (const auto& [level, f] : fractions) {
    last = level;
    if (x < f) return level;
    x -= f;
  }
  return last;  // floating-point remainder lands on the highest level
}

}  // namespace detail

// Affine rescale so the overall rate (count / arrival span) hits the target,
// with the origin shifted to zero. Order and gap ratios are preserved.
inline std::vector<Request> scale_to_rate(std::vector<Request> requests,
                                          double target_rate_per_s) {
  if (target_rate_per_s <= 0) throw ConfigError("scale_to_rate: rate must be > 0");
  if (requests.size() < 2) {
    throw DataError("scale_to_rate: need at least two requests to define a rate");
  }
  std::sort(requests.begin(), requests.end(), [](const Request& a, const Request& b) {
    if (a.arrival_time != b.arrival_time) return a.arrival_time < b.arrival_time;
    return a.id < b.id;
  });
  const TimeMs origin = requests.front().arrival_time;
  const TimeMs span = requests.back().arrival_time - origin;
  if (span <= 0) {
    throw DataError("scale_to_rate: arrival span is zero; rate undefined");
  }
  const double target_span_ms =
      static_cast<double>(requests.size()) / target_rate_per_s * 1000.0;
  const double scale = target_span_ms / span;
  for (Request& r : requests) {
    r.arrival_time = (r.arrival_time - origin) * scale;
  }
  return requests;
}

// Synthetic Poisson workload: exponential inter-arrivals, sampled lengths and
// priorities, SLOs per policy. A pure function of the spec (seed included).
inline std::vector<Request> generate(const WorkloadSpec& spec) {
  spec.validate();
  const auto& src = std::get<PoissonSource>(spec.source);
  std::mt19937_64 rng(spec.seed);
  std::exponential_distribution<double> gap(src.rate_per_s / 1000.0);  // per ms
  std::vector<Request> out;
  TimeMs t = gap(rng);
  RequestId next_id = 0;
  while (t < src.duration_ms) {
    Request r;
    r.id = next_id++;
    r.arrival_time = t;
    r.input_len = src.input_len.sample(rng);
    r.expected_output_len = src.output_len.sample(rng);
    r.priority_level = detail::sample_priority(spec.priority_fractions, rng);
    r.slo = spec.slo_policy.assign(r.input_len);
    r.validate();
    out.push_back(r);
    t += gap(rng);
  }
  return out;
}

// JSONL trace rows: {"timestamp_ms": t, "input_len": n, "output_len": m,
// "priority": p?, "client_id": c?}. Missing priorities are sampled from the
// spec's fractions.
inline std::vector<Request> parse_trace(std::istream& in, const WorkloadSpec& spec) {
  std::mt19937_64 rng(spec.seed);
  std::vector<Request> out;
  std::string line;
  std::size_t line_no = 0;
  TimeMs prev_ts = -std::numeric_limits<double>::infinity();
  RequestId next_id = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const nlohmann::json j = nlohmann::json::parse(line);
      Request r;
      r.id = next_id++;
      r.arrival_time = j.at("timestamp_ms").get<double>();
      r.input_len = j.at("input_len").get<std::int64_t>();
      r.expected_output_len = j.at("output_len").get<std::int64_t>();
      if (j.contains("priority")) {
        r.priority_level = j.at("priority").get<int>();
        if (spec.priority_weights.find(r.priority_level) == spec.priority_weights.end()) {
          throw DataError("priority level has no configured weight");
        }
      } else {
        r.priority_level = detail::sample_priority(spec.priority_fractions, rng);
      }
      r.slo = spec.slo_policy.assign(r.input_len);
      if (r.arrival_time < prev_ts) {
        throw DataError("timestamps must be nondecreasing");
      }
      prev_ts = r.arrival_time;
      r.validate();
      out.push_back(r);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("trace line " + std::to_string(line_no) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError("trace line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<Request> load_and_scale(const std::string& path,
                                           const WorkloadSpec& spec,
                                           double target_rate_per_s) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open trace file: " + path);
  std::vector<Request> requests = parse_trace(in, spec);
  if (target_rate_per_s > 0) {
    requests = scale_to_rate(std::move(requests), target_rate_per_s);
  }
  return requests;
}

// Materialize whichever source the spec names.
inline std::vector<Request> build_workload(const WorkloadSpec& spec) {
  spec.validate();
  if (const auto* trace = std::get_if<TraceSource>(&spec.source)) {
    return load_and_scale(trace->path, spec, trace->target_rate_per_s);
  }
  return generate(spec);
}

inline double mean_input_len(std::span<const Request> requests) {
  double sum = 0;
  for (const Request& r : requests) sum += static_cast<double>(r.input_len);
  return requests.empty() ? 0.0 : sum / static_cast<double>(requests.size());
}

inline double mean_output_len(std::span<const Request> requests) {
  double sum = 0;
  for (const Request& r : requests) sum += static_cast<double>(r.expected_output_len);
  return requests.empty() ? 0.0 : sum / static_cast<double>(requests.size());
}

}  // namespace prioserve
