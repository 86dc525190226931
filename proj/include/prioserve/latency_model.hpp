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

#include <array>
#include <fstream>
#include <istream>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "prioserve/common.hpp"

namespace prioserve {

enum class Phase { kPrefill, kDecode };

// One request's share of a forward pass: l_q tokens processed against an
// l_kv-token KV cache. Decode passes process exactly one token.
struct WorkItem {
  Phase phase = Phase::kPrefill;
  std::int64_t l_q = 1;
  std::int64_t l_kv = 0;

  void validate() const {
    if (l_q < 1) throw DataError("WorkItem: l_q must be >= 1");
    if (l_kv < 0) throw DataError("WorkItem: l_kv must be >= 0");
    if (phase == Phase::kDecode && l_q != 1) {
      throw DataError("WorkItem: decode passes process exactly one token");
    }
  }
};

// Two-phase analytical cost model:
//   prefill: a_p*l_q^2 + b_p*l_q*l_kv + c_p*l_q
//   decode:  a_d*l_kv + b_d
// plus a constant per-batch overhead t_c. beta is the online multiplicative
// correction applied to the whole corrected estimate (t_c included).
struct LatencyModelParams {
  double a_p = 0.0;
  double b_p = 0.0;
  double c_p = 0.0;
  double a_d = 0.0;
  double b_d = 0.0;
  double t_c = 0.0;
  double beta = 1.0;

  void validate() const {
    for (double v : {a_p, b_p, c_p, a_d, b_d, t_c, beta}) {
      if (!std::isfinite(v)) throw ConfigError("LatencyModelParams: non-finite coefficient");
    }
    if (t_c < 0) throw ConfigError("LatencyModelParams: t_c must be >= 0");
    if (beta <= 0) throw ConfigError("LatencyModelParams: beta must be > 0");
  }

  // Schedulers additionally need nonnegative coefficients (chunk-size search
  // relies on monotone estimates) and a strictly positive decode floor so
  // density is always defined.
  void validate_for_scheduling() const {
    validate();
    if (a_p < 0 || b_p < 0 || c_p < 0 || a_d < 0) {
      throw ConfigError("LatencyModelParams: scheduling requires coefficients >= 0");
    }
    if (b_d <= 0) throw ConfigError("LatencyModelParams: scheduling requires b_d > 0");
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["a_p"] = a_p;
    j["b_p"] = b_p;
    j["c_p"] = c_p;
    j["a_d"] = a_d;
    j["b_d"] = b_d;
    j["t_c"] = t_c;
    j["beta"] = beta;
    return j;
  }

  static LatencyModelParams from_json(const nlohmann::json& j) {
    LatencyModelParams p;
    p.a_p = j.at("a_p").get<double>();
    p.b_p = j.at("b_p").get<double>();
    p.c_p = j.at("c_p").get<double>();
    p.a_d = j.at("a_d").get<double>();
    p.b_d = j.at("b_d").get<double>();
    p.t_c = j.at("t_c").get<double>();
    p.beta = j.value("beta", 1.0);
    return p;
  }
};

// Core per-item estimate without the beta correction.
inline DurationMs raw_estimate_item(const LatencyModelParams& p, const WorkItem& w) {
  const double lq = static_cast<double>(w.l_q);
  const double lkv = static_cast<double>(w.l_kv);
  if (w.phase == Phase::kPrefill) {
    return p.a_p * lq * lq + p.b_p * lq * lkv + p.c_p * lq;
  }
  return p.a_d * lkv + p.b_d;
}

inline DurationMs estimate_item(const LatencyModelParams& p, const WorkItem& w) {
  return p.beta * raw_estimate_item(p, w);
}

// Batch estimate before correction: sum of item costs plus t_c. An empty
// batch still pays the overhead.
inline DurationMs raw_estimate_batch(const LatencyModelParams& p,
                                     std::span<const WorkItem> items) {
  double total = p.t_c;
  for (const WorkItem& w : items) total += raw_estimate_item(p, w);
  return total;
}

// beta scales the whole batch estimate, overhead included.
inline DurationMs estimate_batch(const LatencyModelParams& p,
                                 std::span<const WorkItem> items) {
  return p.beta * raw_estimate_batch(p, items);
}

// Training-data carrier for fit(): a batch composition and its measured time.
struct ProfileSample {
  std::vector<WorkItem> items;
  DurationMs observed_time = 0;

  void validate() const {
    if (items.empty()) throw DataError("ProfileSample: items must be nonempty");
    if (observed_time <= 0) throw DataError("ProfileSample: observed_time must be > 0");
    for (const WorkItem& w : items) w.validate();
  }
};

struct FitOptions {
  double ridge = 0.0;  // optional L2 regularization; 0 = plain least squares
};

namespace detail {

inline constexpr std::array<const char*, 6> kCoefficientNames = {
    "a_p", "b_p", "c_p", "a_d", "b_d", "t_c"};

// Per-sample feature vector: batch-summed (l_q^2, l_q*l_kv, l_q) over prefill
// items, (l_kv, 1) over decode items, and the constant overhead column.
inline Eigen::Matrix<double, 1, 6> sample_features(const ProfileSample& s) {
  Eigen::Matrix<double, 1, 6> f = Eigen::Matrix<double, 1, 6>::Zero();
  for (const WorkItem& w : s.items) {
    const double lq = static_cast<double>(w.l_q);
    const double lkv = static_cast<double>(w.l_kv);
    if (w.phase == Phase::kPrefill) {
      f(0) += lq * lq;
      f(1) += lq * lkv;
      f(2) += lq;
    } else {
      f(3) += lkv;
      f(4) += 1.0;
    }
  }
  f(5) = 1.0;
  return f;
}

}  // namespace detail

// Ordinary least squares over the six-coefficient feature map. Throws a
// FitError naming the coefficients whose columns fall outside the design
// matrix's column space when the data cannot identify them.
inline LatencyModelParams fit(std::span<const ProfileSample> samples,
                              const FitOptions& opts = {}) {
  if (samples.size() < 6) {
    throw FitError("fit: need at least 6 samples, got " + std::to_string(samples.size()));
  }
  const auto n = static_cast<Eigen::Index>(samples.size());
  Eigen::MatrixXd design(n, 6);
  Eigen::VectorXd observed(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    samples[i].validate();
    design.row(i) = detail::sample_features(samples[i]);
    observed(i) = samples[i].observed_time;
  }

  Eigen::VectorXd solution;
  if (opts.ridge > 0) {
    const Eigen::MatrixXd normal =
        design.transpose() * design + opts.ridge * Eigen::MatrixXd::Identity(6, 6);
    solution = normal.ldlt().solve(design.transpose() * observed);
  } else {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
    // Columns are near-collinear well before the default threshold trips;
    // scale against the dominant pivot.
    qr.setThreshold(1e-9);
    if (qr.rank() < 6) {
      const auto perm = qr.colsPermutation().indices();
      std::string names;
      for (Eigen::Index k = qr.rank(); k < 6; ++k) {
        if (!names.empty()) names += ", ";
        names += detail::kCoefficientNames[perm(k)];
      }
      throw FitError("fit: unidentifiable coefficient(s): " + names);
    }
    solution = qr.solve(observed);
  }

  LatencyModelParams p;
  p.a_p = solution(0);
  p.b_p = solution(1);
  p.c_p = solution(2);
  p.a_d = solution(3);
  p.b_d = solution(4);
  p.t_c = solution(5);
  p.beta = 1.0;
  p.validate();
  return p;
}

// Momentum update of the correction factor from a window of
// (observed, raw uncorrected estimate) pairs. Only beta changes.
inline LatencyModelParams online_update(const LatencyModelParams& p,
                                        std::span<const std::pair<double, double>> window,
                                        double theta) {
  if (window.empty()) throw DataError("online_update: empty window");
  if (theta < 0 || theta > 1) {
    throw std::invalid_argument("online_update: theta must be in [0, 1]");
  }
  double ratio_sum = 0.0;
  for (const auto& [observed, estimated] : window) {
    if (estimated <= 0) throw DataError("online_update: estimated time must be > 0");
    ratio_sum += observed / estimated;
  }
  LatencyModelParams updated = p;
  updated.beta = theta * p.beta + (1.0 - theta) * ratio_sum / static_cast<double>(window.size());
  return updated;
}

inline WorkItem work_item_from_json(const nlohmann::json& j) {
  WorkItem w;
  const std::string phase = j.at("phase").get<std::string>();
  if (phase == "prefill") {
    w.phase = Phase::kPrefill;
  } else if (phase == "decode") {
    w.phase = Phase::kDecode;
  } else {
    throw DataError("WorkItem: unknown phase '" + phase + "'");
  }
  w.l_q = j.at("l_q").get<std::int64_t>();
  w.l_kv = j.at("l_kv").get<std::int64_t>();
  w.validate();
  return w;
}

inline nlohmann::ordered_json work_item_to_json(const WorkItem& w) {
  nlohmann::ordered_json j;
  j["phase"] = w.phase == Phase::kPrefill ? "prefill" : "decode";
  j["l_q"] = w.l_q;
  j["l_kv"] = w.l_kv;
  return j;
}

// JSONL profile data: one sample per line, {"items": [...], "observed_time": t}.
inline std::vector<ProfileSample> load_profile_jsonl(std::istream& in) {
  std::vector<ProfileSample> samples;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      ProfileSample s;
      for (const auto& item : j.at("items")) s.items.push_back(work_item_from_json(item));
      s.observed_time = j.at("observed_time").get<double>();
      s.validate();
      samples.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("profile line " + std::to_string(line_no) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError("profile line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return samples;
}

inline std::vector<ProfileSample> load_profile_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open profile file: " + path);
  return load_profile_jsonl(in);
}

}  // namespace prioserve
