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

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <random>

#include "prioserve/prioserve.hpp"
#include "prioserve/scenarios.hpp"

namespace fs = std::filesystem;

namespace {

constexpr const char* kVersion = "1.0.0";

struct GlobalFlags {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  int jobs = 1;
};

void write_file(const fs::path& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw prioserve::DataError("cannot write " + path.string());
  out << contents;
}

struct Cell {
  prioserve::SchedulerChoice scheduler;
  double rate = 0;
  prioserve::SimResult result;
};

std::string rate_tag(double rate) { return prioserve::fmt_double(rate); }

int cmd_run(const std::string& config_path, const GlobalFlags& flags) {
  auto cfg = prioserve::load_experiment_config(config_path);
  if (flags.seed) prioserve::apply_seed_override(cfg, *flags.seed);
  if (flags.out_dir) cfg.output_dir = *flags.out_dir;

  auto workload = prioserve::build_workload(cfg.workload);
  if (workload.size() < 2) {
    throw prioserve::ConfigError("workload produced fewer than two requests");
  }
  if (cfg.auto_first_weight) {
    const double mean_out = prioserve::mean_output_len(workload);
    cfg.sim.weights.w_first =
        mean_out > 0 ? prioserve::mean_input_len(workload) / mean_out : 1.0;
  }

  std::vector<Cell> cells;
  for (const auto& sched : cfg.schedulers) {
    for (double rate : cfg.rates) {
      Cell cell;
      cell.scheduler = sched;
      cell.rate = rate;
      cells.push_back(std::move(cell));
    }
  }

  auto run_cell = [&](Cell& cell) {
    prioserve::SimConfig sim = cfg.sim;
    sim.local_policy = cell.scheduler.local;
    sim.global_policy = cell.scheduler.global;
    auto scaled = prioserve::scale_to_rate(workload, cell.rate);
    cell.result = prioserve::run(sim, std::move(scaled));
  };

  const int jobs = std::max(1, flags.jobs);
  for (std::size_t start = 0; start < cells.size(); start += jobs) {
    std::vector<std::future<void>> batch;
    const std::size_t end = std::min(cells.size(), start + jobs);
    for (std::size_t i = start; i < end; ++i) {
      batch.push_back(std::async(std::launch::async, run_cell, std::ref(cells[i])));
    }
    for (auto& f : batch) f.get();
  }

  fs::create_directories(cfg.output_dir);
  const fs::path out(cfg.output_dir);
  std::vector<std::string> written;

  std::sort(cells.begin(), cells.end(), [](const Cell& a, const Cell& b) {
    const std::string la = a.scheduler.label(), lb = b.scheduler.label();
    if (la != lb) return la < lb;
    return a.rate < b.rate;
  });

  std::ostringstream comparison;
  comparison << "scheduler,rate,tdg_ratio,slo_attainment";
  for (const auto& [level, w] : cfg.sim.weights.priority_weight) {
    (void)w;
    comparison << ",slo_attainment_p" << level;
  }
  comparison << "\n";

  for (const Cell& cell : cells) {
    const std::string stem =
        cfg.name + "__" + cell.scheduler.label() + "__rate" + rate_tag(cell.rate);
    nlohmann::ordered_json summary;
    summary["name"] = cfg.name;
    summary["scheduler"] = cell.scheduler.label();
    summary["rate"] = cell.rate;
    summary["seed"] = cfg.seed;
    summary["result"] = cell.result.summary_json();
    write_file(out / (stem + ".summary.json"), summary.dump(2) + "\n");
    write_file(out / (stem + ".requests.csv"), cell.result.per_request_csv(cfg.sim.weights));
    write_file(out / (stem + ".timeline.csv"), cell.result.timeline_csv());
    written.push_back(stem);
    if (cfg.sim.audit) {
      std::string audit;
      for (const auto& line : cell.result.router_audit) audit += line + "\n";
      for (const auto& line : cell.result.batch_log) audit += line + "\n";
      write_file(out / (stem + ".audit.jsonl"), audit);
    }

    const auto& rep = cell.result.gain_report;
    comparison << cell.scheduler.label() << ',' << rate_tag(cell.rate) << ','
               << prioserve::fmt_double(rep.tdg_ratio) << ','
               << prioserve::fmt_double(rep.slo_attainment);
    for (const auto& [level, w] : cfg.sim.weights.priority_weight) {
      (void)w;
      const auto it = rep.per_priority.find(level);
      comparison << ','
                 << prioserve::fmt_double(
                        it == rep.per_priority.end() ? 0.0 : it->second.slo_attainment);
    }
    comparison << "\n";
  }
  write_file(out / (cfg.name + "__comparison.csv"), comparison.str());

  std::cout << "ran " << cells.size() << " cells; outputs in " << cfg.output_dir << "\n";
  for (const auto& stem : written) std::cout << "  " << stem << ".{summary.json,requests.csv,timeline.csv}\n";
  std::cout << "  " << cfg.name << "__comparison.csv\n";
  return 0;
}

int cmd_fit(const std::string& profile_path, const GlobalFlags& flags) {
  auto samples = prioserve::load_profile_jsonl(profile_path);
  if (samples.size() < 8) {
    throw prioserve::FitError("need at least 8 profile samples for a train/eval split");
  }
  std::mt19937_64 rng(flags.seed.value_or(1));
  std::shuffle(samples.begin(), samples.end(), rng);
  const std::size_t eval_count = std::max<std::size_t>(1, samples.size() / 5);
  std::vector<prioserve::ProfileSample> eval(samples.end() - eval_count, samples.end());
  samples.resize(samples.size() - eval_count);

  const auto params = prioserve::fit(samples);
  double err = 0;
  for (const auto& s : eval) {
    const double est = prioserve::estimate_batch(params, s.items);
    err += std::abs(est - s.observed_time) / s.observed_time;
  }
  const double mape = err / static_cast<double>(eval.size());

  const fs::path out(flags.out_dir.value_or("out"));
  fs::create_directories(out);
  write_file(out / "fitted_params.json", params.to_json().dump(2) + "\n");
  nlohmann::ordered_json report;
  report["train_samples"] = samples.size();
  report["eval_samples"] = eval.size();
  report["held_out_mape"] = mape;
  write_file(out / "fit_report.json", report.dump(2) + "\n");

  std::cout << "fitted on " << samples.size() << " samples, held-out MAPE "
            << prioserve::fmt_double(mape * 100.0) << "%\n";
  std::cout << params.to_json().dump(2) << "\n";
  return 0;
}

int cmd_scenario(const std::string& name) {
  prioserve::scenarios::Report report;
  if (name == "overbalance_fig8") {
    report = prioserve::scenarios::overbalance_fig8();
  } else if (name == "edf_sjf_crossover") {
    for (const auto& row : prioserve::scenarios::run_crossover(
             prioserve::scenarios::crossover_rates())) {
      std::cout << "rate " << prioserve::fmt_double(row.rate) << ": EDF-style "
                << prioserve::fmt_double(row.edf_attainment) << ", SJF-style "
                << prioserve::fmt_double(row.sjf_attainment) << "\n";
    }
    report = prioserve::scenarios::edf_sjf_crossover();
  } else if (name == "strict_priority_starvation") {
    report = prioserve::scenarios::strict_priority_starvation();
  } else if (name == "priority_weight_sweep") {
    for (const auto& row : prioserve::scenarios::run_weight_sweep()) {
      std::cout << "weight " << prioserve::fmt_double(row.weight) << ": high "
                << prioserve::fmt_double(row.high_attainment) << ", low "
                << prioserve::fmt_double(row.low_attainment) << ", overall "
                << prioserve::fmt_double(row.overall_attainment) << "\n";
    }
    report = prioserve::scenarios::priority_weight_sweep();
  } else {
    std::cerr << "unknown scenario: " << name
              << " (expected overbalance_fig8 | edf_sjf_crossover | "
                 "strict_priority_starvation | priority_weight_sweep)\n";
    return 2;
  }
  std::cout << report.table();
  return report.pass() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"prioserve: deterministic simulator for multi-priority LLM serving schedulers"};
  app.require_subcommand(1);

  GlobalFlags flags;
  std::uint64_t seed_value = 0;
  auto* seed_opt = app.add_option("--seed", seed_value, "override every random seed");
  std::string out_value;
  auto* out_opt = app.add_option("--out", out_value, "output directory")
                      ->envname("PRIOSERVE_OUT");
  app.add_option("--jobs", flags.jobs, "parallel simulation workers")->default_val(1);

  std::string config_path, profile_path, scenario_name;
  auto* run_cmd = app.add_subcommand("run", "run an experiment config");
  run_cmd->fallthrough();
  run_cmd->add_option("config", config_path, "experiment JSON config")->required();
  auto* fit_cmd = app.add_subcommand("fit", "fit latency model from a JSONL profile");
  fit_cmd->fallthrough();
  fit_cmd->add_option("profile", profile_path, "profile JSONL file")->required();
  auto* scenario_cmd = app.add_subcommand("scenario", "run a golden scenario");
  scenario_cmd->fallthrough();
  scenario_cmd->add_option("name", scenario_name, "scenario name")->required();
  auto* version_cmd = app.add_subcommand("version", "print version");

  CLI11_PARSE(app, argc, argv);
  if (*seed_opt) flags.seed = seed_value;
  if (*out_opt) flags.out_dir = out_value;

  try {
    if (*run_cmd) return cmd_run(config_path, flags);
    if (*fit_cmd) return cmd_fit(profile_path, flags);
    if (*scenario_cmd) return cmd_scenario(scenario_name);
    if (*version_cmd) {
      std::cout << "prioserve " << kVersion << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
