#pragma once

// The experiment recipes behind the command-line subcommands. Each command
// writes into cfg.output.dir:
//
//   config.resolved.json   the config with every default materialized
//
// condense:  set_<i>/checkpoint.dcset, set_<i>/synthetic.pgm,
//            set_<i>/trace.jsonl (with output.trace), metrics.json
// eval:      results.csv (one appended row per invocation), eval_report.json
// ablate:    ablation.csv (one row per sweep point, set and evaluation run),
//            ablation.json (per-point summary), point_<p>/set_<i>/...
// xarch:     xarch.csv (one row per source/target cell), xarch_matrix.csv
//            (mean accuracy, sources down, targets across), xarch.json
//
// Synthetic set i is condensed with seed cfg.seed + i. Runtime failures are
// recorded in metrics.json before the error propagates.

#include <cstdint>
#include <exception>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradmatch/condenser.hpp"
#include "gradmatch/experiment.hpp"

namespace gradmatch::commands {

// Command-line overrides applied on top of the config file.
struct Overrides {
  std::optional<std::filesystem::path> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> jobs;
  bool trace = false;
};

void apply(experiment::ExperimentConfig& cfg, const Overrides& o);

// Seed of evaluation run r of synthetic set i: repeat_eval starts from
// eval_base_seed(seed, i) and counts up by one per run.
std::uint64_t eval_base_seed(std::uint64_t seed, std::size_t set_index, std::size_t runs);

nlohmann::json trace_record_json(const condense::TraceRecord& r);

// results.csv columns, in order.
const std::vector<std::string>& results_csv_header();
// ablation.csv columns, in order.
const std::vector<std::string>& ablation_csv_header();
// xarch.csv columns, in order.
const std::vector<std::string>& xarch_csv_header();

struct SetOutcome {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  std::optional<data::SyntheticSet> set;  // empty on failure
  std::size_t records = 0;
  double final_loss = 0.0;
  std::size_t theta_updates = 0;  // performed
  double wall_time_s = 0.0;
  std::string error;
  std::exception_ptr failure;
};

struct CondenseSummary {
  std::vector<SetOutcome> sets;
  bool ok() const;
};

// When a set fails, the remaining sets still run; metrics.json records every
// failure and the first one (lowest set index) is rethrown.
CondenseSummary cmd_condense(const experiment::ExperimentConfig& cfg);

// What cmd_eval trains on: checkpoints when given, else the coreset method
// (cfg.coreset.method unless overridden: random, herding or whole).
struct EvalSource {
  std::vector<std::filesystem::path> checkpoints;
  std::optional<std::string> coreset;
};

eval::EvalReport cmd_eval(const experiment::ExperimentConfig& cfg, const EvalSource& source);

struct AblationRow {
  std::string axis;
  std::string value;
  std::size_t set = 0;
  std::uint64_t seed = 0;
  std::size_t run = 0;
  std::uint64_t eval_seed = 0;
  double accuracy = 0.0;
  std::size_t theta_updates_planned = 0;
  std::size_t theta_updates_performed = 0;
  double final_loss = 0.0;
  double wall_time_s = 0.0;  // condensation plus evaluation of this set
};

// Throws ConfigError for a missing axis or an empty value list.
std::vector<AblationRow> cmd_ablate(const experiment::ExperimentConfig& cfg);

// Throws ConfigError when sources or targets are empty.
std::vector<eval::XArchCell> cmd_xarch(const experiment::ExperimentConfig& cfg);

}  // namespace gradmatch::commands
