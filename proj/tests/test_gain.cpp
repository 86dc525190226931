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

#include "prioserve/gain.hpp"

#include <gtest/gtest.h>

#include <random>

namespace prioserve {
namespace {

GainWeights make_weights(double w_first = 1.0, double w_decode = 1.0) {
  GainWeights w;
  w.w_first = w_first;
  w.w_decode = w_decode;
  w.priority_weight = {{0, 1.0}, {1, 2.0}, {2, 4.0}};
  return w;
}

TokenRecord make_record(double arrival, std::vector<double> emits, std::int64_t expected,
                        PriorityLevel level = 0) {
  TokenRecord r;
  r.request_id = 1;
  r.arrival_time = arrival;
  r.priority_level = level;
  r.emit_times = std::move(emits);
  r.expected_output_len = expected;
  return r;
}

// Independent per-token re-evaluation used as the oracle everywhere below.
double tdg_oracle(const TokenRecord& r, const SloSpec& slo, const GainWeights& w) {
  const double wp = w.priority_weight.at(r.priority_level);
  double sum = 0;
  for (std::size_t i = 0; i < r.emit_times.size(); ++i) {
    const double deadline =
        r.arrival_time + slo.ttft_slo + static_cast<double>(i) * slo.tpot_slo;
    if (r.emit_times[i] < deadline) sum += (i == 0 ? w.w_first : w.w_decode) * wp;
  }
  return sum;
}

TokenRecord random_record(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> arrival(0, 1000);
  std::uniform_int_distribution<int> expected(1, 20);
  std::uniform_real_distribution<double> gap(0.5, 120);
  TokenRecord r;
  r.request_id = rng();
  r.arrival_time = arrival(rng);
  r.priority_level = static_cast<int>(rng() % 3);
  r.expected_output_len = expected(rng);
  std::uniform_int_distribution<std::int64_t> emitted(0, r.expected_output_len);
  const std::int64_t n = emitted(rng);
  double t = r.arrival_time;
  for (std::int64_t i = 0; i < n; ++i) {
    t += gap(rng);
    r.emit_times.push_back(t);
  }
  return r;
}

SloSpec random_slo(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> ttft(10, 300);
  std::uniform_real_distribution<double> tpot(5, 80);
  return SloSpec{ttft(rng), tpot(rng)};
}

TEST(TokenDeadline, FirstTokenIsTtft) {
  EXPECT_DOUBLE_EQ(token_deadline(SloSpec{5000, 50}, 1), 5000.0);
}

TEST(TokenDeadline, DirectSubstitution) {
  EXPECT_DOUBLE_EQ(token_deadline(SloSpec{5000, 50}, 3), 5100.0);
}

TEST(TokenDeadline, ZeroTpotCollapses) {
  for (std::int64_t k : {1, 2, 5, 100}) {
    EXPECT_DOUBLE_EQ(token_deadline(SloSpec{1234, 0}, k), 1234.0);
  }
}

TEST(TokenDeadline, RejectsInvalidIndex) {
  EXPECT_THROW(token_deadline(SloSpec{100, 10}, 0), std::invalid_argument);
  EXPECT_THROW(token_deadline(SloSpec{100, 10}, -3), std::invalid_argument);
}

TEST(TokenDeadline, IndependentOfHistory) {
  // Same (slo, i) always maps to the same offset, whatever happened before.
  const SloSpec slo{250, 25};
  const double d3 = token_deadline(slo, 3);
  for (int trial = 0; trial < 10; ++trial) {
    EXPECT_DOUBLE_EQ(token_deadline(slo, 3), d3);
  }
}

TEST(TdgGain, FirstPlusFourDecodeAllOnTime) {
  const auto w = make_weights(2.0, 1.0);
  const auto rec = make_record(0, {1, 2, 3, 4, 5}, 5, /*level=*/0);
  EXPECT_DOUBLE_EQ(tdg_gain(rec, SloSpec{100, 100}, w), 6.0);
}

TEST(TdgGain, LinearInPriorityWeight) {
  const auto w = make_weights(2.0, 1.0);
  const auto rec = make_record(0, {1, 2, 3, 4, 5}, 5, /*level=*/1);  // weight 2
  EXPECT_DOUBLE_EQ(tdg_gain(rec, SloSpec{100, 100}, w), 12.0);
}

TEST(TdgGain, TieScoresZero) {
  const auto w = make_weights();
  const auto rec = make_record(0, {100.0}, 1);
  EXPECT_DOUBLE_EQ(tdg_gain(rec, SloSpec{100, 10}, w), 0.0);
  const auto early = make_record(0, {99.999}, 1);
  EXPECT_DOUBLE_EQ(tdg_gain(early, SloSpec{100, 10}, w), 1.0);
}

TEST(TdgGain, UnknownPriorityIsConfigError) {
  auto w = make_weights();
  auto rec = make_record(0, {1}, 1);
  rec.priority_level = 99;
  EXPECT_THROW(tdg_gain(rec, SloSpec{100, 10}, w), ConfigError);
}

TEST(TdgGain, MatchesBruteForceOracleOnRandomRecords) {
  std::mt19937_64 rng(20250810);
  const auto w = make_weights(1.7, 0.6);
  for (int i = 0; i < 1000; ++i) {
    const auto rec = random_record(rng);
    const auto slo = random_slo(rng);
    EXPECT_DOUBLE_EQ(tdg_gain(rec, slo, w), tdg_oracle(rec, slo, w)) << "case " << i;
  }
}

TEST(TdgGain, AntiPostponeMonotonicity) {
  std::mt19937_64 rng(7);
  const auto w = make_weights(2.0, 1.0);
  int perturbations = 0;
  for (int i = 0; i < 1200 && perturbations < 1000; ++i) {
    auto rec = random_record(rng);
    if (rec.emit_times.empty()) continue;
    const auto slo = random_slo(rng);
    const double before = tdg_gain(rec, slo, w);
    std::uniform_int_distribution<std::size_t> pick(0, rec.emit_times.size() - 1);
    const std::size_t k = pick(rng);
    double max_delta = 1e6;
    if (k + 1 < rec.emit_times.size()) {
      max_delta = rec.emit_times[k + 1] - rec.emit_times[k];
    }
    std::uniform_real_distribution<double> d(0.0, max_delta * 0.999);
    auto delayed = rec;
    delayed.emit_times[k] += d(rng);
    EXPECT_LE(tdg_gain(delayed, slo, w), before);
    ++perturbations;
  }
  EXPECT_GE(perturbations, 1000);
}

TEST(TdgGain, DiscardPenalty) {
  std::mt19937_64 rng(8);
  const auto w = make_weights(2.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    auto rec = random_record(rng);
    const auto slo = random_slo(rng);
    const double before = tdg_gain(rec, slo, w);
    auto truncated = rec;
    if (!truncated.emit_times.empty()) truncated.emit_times.pop_back();
    EXPECT_LE(tdg_gain(truncated, slo, w), before);
  }
}

TEST(TdgGain, PriorityWeightScalesLinearly) {
  std::mt19937_64 rng(9);
  for (int i = 0; i < 200; ++i) {
    const auto rec = random_record(rng);
    const auto slo = random_slo(rng);
    auto w1 = make_weights(2.0, 1.0);
    auto wk = w1;
    const double k = 3.5;
    for (auto& [level, weight] : wk.priority_weight) weight *= k;
    EXPECT_NEAR(tdg_gain(rec, slo, wk), k * tdg_gain(rec, slo, w1), 1e-9);
  }
}

TEST(WeightedSloGain, InstantTokensScoreFullWeight) {
  const auto w = make_weights();
  auto rec = make_record(10, {10.0 + 1e-9, 10.0 + 2e-9, 10.0 + 3e-9}, 3, /*level=*/1);
  EXPECT_DOUBLE_EQ(weighted_slo_gain(rec, SloSpec{100, 10}, w), 2.0);
}

TEST(WeightedSloGain, LateFirstTokenScoresZero) {
  const auto w = make_weights();
  // Decode is instantaneous but the first token blew the TTFT target.
  auto rec = make_record(0, {200, 200.5, 201}, 3);
  EXPECT_DOUBLE_EQ(weighted_slo_gain(rec, SloSpec{100, 10}, w), 0.0);
}

TEST(WeightedSloGain, IncompleteScoresZero) {
  const auto w = make_weights();
  auto rec = make_record(0, {1, 2}, 5);
  EXPECT_DOUBLE_EQ(weighted_slo_gain(rec, SloSpec{100, 10}, w), 0.0);
}

TEST(WeightedSloGain, MatchesRawTimestampOracle) {
  std::mt19937_64 rng(11);
  const auto w = make_weights();
  for (int i = 0; i < 500; ++i) {
    const auto rec = random_record(rng);
    const auto slo = random_slo(rng);
    double expected = 0.0;
    const auto n = rec.emit_times.size();
    if (n > 0 && static_cast<std::int64_t>(n) >= rec.expected_output_len) {
      const double ttft = rec.emit_times.front() - rec.arrival_time;
      const double tpot =
          n >= 2 ? (rec.emit_times.back() - rec.emit_times.front()) / double(n - 1) : 0.0;
      if (ttft <= slo.ttft_slo && tpot <= slo.tpot_slo) {
        expected = w.priority_weight.at(rec.priority_level);
      }
    }
    EXPECT_DOUBLE_EQ(weighted_slo_gain(rec, slo, w), expected);
  }
}

TEST(TaSloGain, SingleTokenOnTime) {
  const auto w = make_weights(2.0, 1.0);
  auto rec = make_record(0, {50}, 1, /*level=*/1);
  EXPECT_DOUBLE_EQ(ta_slo_gain(rec, SloSpec{100, 10}, w), 2.0 * 2.0);
}

// The postponed-decoding trick: token 2 already missed its TBT target, and
// delaying it shrinks token 3's TBT below the target, raising the TA-SLO
// gain. TDG is immune: the same delay never raises it.
TEST(TaSloGain, PostponeTrickWitnessExistsAndTdgRejectsIt) {
  const auto w = make_weights(2.0, 1.0);
  const SloSpec slo{100, 50};
  auto rec = make_record(0, {10, 70, 125}, 3);
  auto delayed = rec;
  delayed.emit_times[1] = 80;

  const double ta_before = ta_slo_gain(rec, slo, w);
  const double ta_after = ta_slo_gain(delayed, slo, w);
  EXPECT_GT(ta_after, ta_before);

  EXPECT_LE(tdg_gain(delayed, slo, w), tdg_gain(rec, slo, w));

  // Exhaustive single-emission delay grid: TDG never increases.
  const double before = tdg_gain(rec, slo, w);
  for (std::size_t k = 0; k < rec.emit_times.size(); ++k) {
    const double limit =
        k + 1 < rec.emit_times.size() ? rec.emit_times[k + 1] - rec.emit_times[k] : 200.0;
    for (double frac = 0.1; frac < 1.0; frac += 0.1) {
      auto perturbed = rec;
      perturbed.emit_times[k] += frac * limit * 0.999;
      EXPECT_LE(tdg_gain(perturbed, slo, w), before);
    }
  }
}

TEST(TaSloGain, RandomSearchFindsPostponeWitnesses) {
  std::mt19937_64 rng(13);
  const auto w = make_weights(2.0, 1.0);
  int witnesses = 0;
  for (int i = 0; i < 3000 && witnesses == 0; ++i) {
    auto rec = random_record(rng);
    if (rec.emit_times.size() < 3) continue;
    const auto slo = random_slo(rng);
    const double base = ta_slo_gain(rec, slo, w);
    for (std::size_t k = 1; k + 1 < rec.emit_times.size(); ++k) {
      const double room = rec.emit_times[k + 1] - rec.emit_times[k];
      auto delayed = rec;
      delayed.emit_times[k] += room * 0.9;
      if (ta_slo_gain(delayed, slo, w) > base) {
        ++witnesses;
        break;
      }
    }
  }
  EXPECT_GT(witnesses, 0);
}

TEST(Aggregate, AllOnTime) {
  const auto w = make_weights(2.0, 1.0);
  std::vector<TokenRecord> recs = {make_record(0, {1, 2, 3}, 3),
                                   make_record(0, {1.5, 2.5}, 2, /*level=*/1)};
  std::vector<SloSpec> slos = {{100, 50}, {100, 50}};
  const auto rep = aggregate(recs, slos, w);
  EXPECT_DOUBLE_EQ(rep.tdg_ratio, 1.0);
  EXPECT_DOUBLE_EQ(rep.miss_tdg_ratio, 0.0);
  EXPECT_DOUBLE_EQ(rep.slo_attainment, 1.0);
  EXPECT_DOUBLE_EQ(rep.total_gain, rep.ideal_gain);
}

TEST(Aggregate, NoTokensEmitted) {
  const auto w = make_weights(2.0, 1.0);
  std::vector<TokenRecord> recs = {make_record(0, {}, 5)};
  std::vector<SloSpec> slos = {{100, 50}};
  const auto rep = aggregate(recs, slos, w);
  EXPECT_DOUBLE_EQ(rep.tdg_ratio, 0.0);
  EXPECT_DOUBLE_EQ(rep.miss_tdg_ratio, 1.0);
  EXPECT_DOUBLE_EQ(rep.total_gain, 0.0);
  EXPECT_DOUBLE_EQ(rep.ideal_gain, 6.0);  // 2 + 4*1
}

TEST(Aggregate, EmptyInputIsError) {
  const auto w = make_weights();
  std::vector<TokenRecord> recs;
  std::vector<SloSpec> slos;
  EXPECT_THROW(aggregate(recs, slos, w), DataError);
}

TEST(Aggregate, MatchesIndependentAccumulation) {
  std::mt19937_64 rng(17);
  const auto w = make_weights(1.5, 0.5);
  std::vector<TokenRecord> recs;
  std::vector<SloSpec> slos;
  for (int i = 0; i < 400; ++i) {
    recs.push_back(random_record(rng));
    slos.push_back(random_slo(rng));
  }
  const auto rep = aggregate(recs, slos, w);

  double total = 0, ideal = 0;
  std::int64_t attained = 0;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    total += tdg_oracle(recs[i], slos[i], w);
    const double wp = w.priority_weight.at(recs[i].priority_level);
    ideal += w.w_first * wp +
             static_cast<double>(recs[i].expected_output_len - 1) * w.w_decode * wp;
    const auto n = recs[i].emit_times.size();
    if (n > 0 && static_cast<std::int64_t>(n) >= recs[i].expected_output_len) {
      const double ttft = recs[i].emit_times.front() - recs[i].arrival_time;
      const double tpot =
          n >= 2 ? (recs[i].emit_times.back() - recs[i].emit_times.front()) / double(n - 1)
                 : 0.0;
      if (ttft < slos[i].ttft_slo && tpot < slos[i].tpot_slo) ++attained;
    }
  }
  EXPECT_NEAR(rep.total_gain, total, 1e-9);
  EXPECT_NEAR(rep.ideal_gain, ideal, 1e-9);
  EXPECT_NEAR(rep.tdg_ratio, total / ideal, 1e-12);
  EXPECT_NEAR(rep.tdg_ratio + rep.miss_tdg_ratio, 1.0, 1e-9);
  EXPECT_NEAR(rep.slo_attainment, double(attained) / double(recs.size()), 1e-12);
  EXPECT_LE(rep.total_gain, rep.ideal_gain);
}

TEST(Aggregate, RatioAndMissAlwaysSumToOne) {
  std::mt19937_64 rng(19);
  const auto w = make_weights();
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<TokenRecord> recs;
    std::vector<SloSpec> slos;
    for (int i = 0; i < 20; ++i) {
      recs.push_back(random_record(rng));
      slos.push_back(random_slo(rng));
    }
    const auto rep = aggregate(recs, slos, w);
    EXPECT_NEAR(rep.tdg_ratio + rep.miss_tdg_ratio, 1.0, 1e-9);
  }
}

TEST(GainReport, CsvColumnOrder) {
  const auto w = make_weights(2.0, 1.0);
  std::vector<TokenRecord> recs = {make_record(0, {1}, 1, 0), make_record(0, {1}, 1, 1)};
  std::vector<SloSpec> slos = {{100, 50}, {100, 50}};
  const auto rep = aggregate(recs, slos, w);
  EXPECT_EQ(rep.csv_header(),
            "total_gain,ideal_gain,tdg_ratio,miss_tdg_ratio,slo_attainment,"
            "gain_p0,ideal_p0,slo_attainment_p0,gain_p1,ideal_p1,slo_attainment_p1");
  const std::string row = rep.to_csv_row();
  EXPECT_EQ(row.substr(0, 2), "6,");  // total gain 2*1 + 2*2
  const auto j = rep.to_json();
  EXPECT_DOUBLE_EQ(j["total_gain"].get<double>(), 6.0);
  EXPECT_DOUBLE_EQ(j["per_priority"]["1"]["gain"].get<double>(), 4.0);
}

TEST(Validation, GainWeightsAndSlo) {
  GainWeights w;
  w.priority_weight.clear();
  EXPECT_THROW(w.validate(), ConfigError);
  w.priority_weight = {{0, 1.0}};
  w.w_first = 0;
  EXPECT_THROW(w.validate(), ConfigError);
  EXPECT_THROW(validate_slo(SloSpec{0, 10}, 5), ConfigError);
  EXPECT_THROW(validate_slo(SloSpec{100, 0}, 5), ConfigError);
  EXPECT_NO_THROW(validate_slo(SloSpec{100, 0}, 1));
}

TEST(TokenRecordValidation, CatchesBadRecords) {
  auto rec = make_record(10, {5}, 1);  // emission before arrival
  EXPECT_THROW(rec.validate(), DataError);
  rec = make_record(0, {5, 5}, 2);  // not strictly increasing
  EXPECT_THROW(rec.validate(), DataError);
  rec = make_record(0, {1, 2, 3}, 2);  // more than expected
  EXPECT_THROW(rec.validate(), DataError);
}

// The unbuffered variant re-anchors decode deadlines at an early first token;
// the first token itself keeps the standard target.
TEST(TdgGain, FirstTokenUnbufferedShiftsDecodeDeadlines) {
  const auto w = make_weights(1.0, 1.0);
  const SloSpec slo{100, 50};
  // First token very early; second token at 130: buffered deadline is
  // 100+50=150 (hit), unbuffered re-anchors at 10+50=60 (miss).
  auto rec = make_record(0, {10, 130}, 2);
  EXPECT_DOUBLE_EQ(tdg_gain(rec, slo, w, false), 2.0);
  EXPECT_DOUBLE_EQ(tdg_gain(rec, slo, w, true), 1.0);
}

}  // namespace
}  // namespace prioserve
