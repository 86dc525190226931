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

#include "prioserve/config.hpp"

#include <gtest/gtest.h>

namespace prioserve {
namespace {

const char* kMinimalConfig = R"json({
  "name": "tiny",
  "seed": 5,
  "output_dir": "out",
  "rates": [2.0, 4.0],
  "schedulers": [
    {"local": "slide_batching", "global": "min_load"},
    {"local": "sarathi_fcfs", "global": "min_load"}
  ],
  "sim": {
    "topology": {"kind": "single_colocated"},
    "true_params": {"a_p": 0, "b_p": 0, "c_p": 0.1, "a_d": 0.001, "b_d": 1.0, "t_c": 2.0},
    "horizon_ms": 10000,
    "slide": {"eta_ms": 20, "gamma": 1.0, "phi_variant": "aggressive", "min_chunk": 32},
    "weights": {"w_first": 2.0, "w_decode": 1.0, "priority_weights": {"0": 1.0, "1": 2.0}}
  },
  "workload": {
    "source": {"kind": "poisson", "rate_per_s": 2.0, "duration_ms": 10000,
               "input_len": {"kind": "fixed", "value": 128},
               "output_len": {"kind": "fixed", "value": 8}},
    "priority_fractions": {"0": 0.5, "1": 0.5},
    "slo": {"kind": "fixed", "ttft_ms": 1000, "tpot_ms": 50}
  }
})json";

TEST(Config, ParsesMinimalDocument) {
  const auto cfg = parse_experiment_config(std::string(kMinimalConfig));
  EXPECT_EQ(cfg.name, "tiny");
  EXPECT_EQ(cfg.seed, 5u);
  EXPECT_EQ(cfg.rates.size(), 2u);
  EXPECT_EQ(cfg.schedulers.size(), 2u);
  EXPECT_EQ(cfg.schedulers[0].local, LocalPolicy::kSlideBatching);
  EXPECT_EQ(cfg.schedulers[1].local, LocalPolicy::kSarathiFcfs);
  EXPECT_DOUBLE_EQ(cfg.sim.true_params.c_p, 0.1);
  EXPECT_DOUBLE_EQ(*cfg.sim.slide.eta, 20.0);
  EXPECT_FALSE(cfg.auto_first_weight);
  EXPECT_DOUBLE_EQ(cfg.workload.slo_policy.fixed.ttft_slo, 1000.0);
  EXPECT_EQ(cfg.sim.seed, 5u);
  EXPECT_EQ(cfg.workload.seed, 5u);
}

TEST(Config, RoundTripIsStable) {
  const auto cfg = parse_experiment_config(std::string(kMinimalConfig));
  const std::string once = serialize_experiment_config(cfg).dump(2);
  const auto reparsed = parse_experiment_config(once);
  const std::string twice = serialize_experiment_config(reparsed).dump(2);
  EXPECT_EQ(once, twice);
}

TEST(Config, MissingFieldNamesPath) {
  nlohmann::json j = nlohmann::json::parse(kMinimalConfig);
  j["sim"].erase("true_params");
  try {
    parse_experiment_config(j);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("sim.true_params"), std::string::npos) << e.what();
  }
}

TEST(Config, WrongTypeNamesPath) {
  nlohmann::json j = nlohmann::json::parse(kMinimalConfig);
  j["sim"]["horizon_ms"] = "soon";
  try {
    parse_experiment_config(j);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("sim.horizon_ms"), std::string::npos) << e.what();
  }
}

TEST(Config, UnknownPolicyRejected) {
  nlohmann::json j = nlohmann::json::parse(kMinimalConfig);
  j["schedulers"][0]["local"] = "magic";
  EXPECT_THROW(parse_experiment_config(j), ConfigError);
}

TEST(Config, AutoFirstWeightFlagged) {
  nlohmann::json j = nlohmann::json::parse(kMinimalConfig);
  j["sim"]["weights"].erase("w_first");
  const auto cfg = parse_experiment_config(j);
  EXPECT_TRUE(cfg.auto_first_weight);
  // Round trip keeps the field absent.
  const auto out = serialize_experiment_config(cfg);
  EXPECT_FALSE(out["sim"]["weights"].contains("w_first"));
}

TEST(Config, SeedOverrideFlowsEverywhere) {
  auto cfg = parse_experiment_config(std::string(kMinimalConfig));
  apply_seed_override(cfg, 777);
  EXPECT_EQ(cfg.seed, 777u);
  EXPECT_EQ(cfg.sim.seed, 777u);
  EXPECT_EQ(cfg.workload.seed, 777u);
}

TEST(Config, EmptySchedulerMatrixRejected) {
  nlohmann::json j = nlohmann::json::parse(kMinimalConfig);
  j["schedulers"] = nlohmann::json::array();
  EXPECT_THROW(parse_experiment_config(j), ConfigError);
}

TEST(Config, TraceSourceParses) {
  nlohmann::json j = nlohmann::json::parse(kMinimalConfig);
  j["workload"]["source"] = {{"kind", "trace"}, {"path", "trace.jsonl"},
                             {"target_rate_per_s", 3.0}};
  const auto cfg = parse_experiment_config(j);
  const auto* trace = std::get_if<TraceSource>(&cfg.workload.source);
  ASSERT_NE(trace, nullptr);
  EXPECT_EQ(trace->path, "trace.jsonl");
  EXPECT_DOUBLE_EQ(trace->target_rate_per_s, 3.0);
}

TEST(Config, TraceSourceBuildsWorkloadEndToEnd) {
  // Write a trace, point a config's workload at it, build through the spec.
  const std::string path = ::testing::TempDir() + "/cfg_trace.jsonl";
  {
    std::ofstream out(path);
    out << R"({"timestamp_ms": 0, "input_len": 64, "output_len": 4, "priority": 1})" << "\n";
    out << R"({"timestamp_ms": 100, "input_len": 32, "output_len": 2})" << "\n";
    out << R"({"timestamp_ms": 250, "input_len": 16, "output_len": 2, "priority": 0})" << "\n";
  }
  nlohmann::json j = nlohmann::json::parse(kMinimalConfig);
  j["workload"]["source"] = {{"kind", "trace"}, {"path", path},
                             {"target_rate_per_s", 30.0}};
  const auto cfg = parse_experiment_config(j);
  const auto workload = build_workload(cfg.workload);
  ASSERT_EQ(workload.size(), 3u);
  // Scaled to 30 req/s: span = 3 / 30 s = 100 ms, origin at zero.
  EXPECT_DOUBLE_EQ(workload.front().arrival_time, 0.0);
  EXPECT_NEAR(workload.back().arrival_time, 100.0, 1e-9);
  EXPECT_EQ(workload[0].priority_level, 1);
  EXPECT_DOUBLE_EQ(workload[0].slo.ttft_slo, 1000.0);  // from the config's slo policy
}

TEST(Config, PdDisaggTopologyParses) {
  nlohmann::json j = nlohmann::json::parse(kMinimalConfig);
  j["sim"]["topology"] = {{"kind", "pd_disagg"}, {"n_prefill", 2}, {"n_decode", 3}};
  const auto cfg = parse_experiment_config(j);
  EXPECT_EQ(cfg.sim.topology.kind, Topology::Kind::kPdDisagg);
  EXPECT_EQ(cfg.sim.topology.n_prefill, 2);
  EXPECT_EQ(cfg.sim.topology.n_decode, 3);
}

}  // namespace
}  // namespace prioserve
