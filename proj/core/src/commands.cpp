#include "gradmatch/commands.hpp"

#include <charconv>
#include <chrono>
#include <fstream>
#include <map>

#include "gradmatch/coreset.hpp"
#include "gradmatch/errors.hpp"
#include "gradmatch/persist.hpp"
#include "gradmatch/random.hpp"

namespace gradmatch::commands {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

// Shortest text that parses back to the same double.
std::string num(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string wall(double seconds) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", seconds);
  return buf;
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
}

void prepare_output(const experiment::ExperimentConfig& cfg) {
  make_dir(cfg.output.dir);
  persist::write_json(cfg.output.dir / "config.resolved.json", experiment::to_json(cfg));
}

std::string dataset_name(const experiment::ExperimentConfig& cfg) {
  if (cfg.dataset.kind == "blobs") return "blobs";
  const fs::path root = cfg.dataset.root.lexically_normal();
  const std::string name = (root.has_filename() ? root.filename() : root.parent_path().filename()).string();
  return name.empty() ? "idx" : name;
}

std::string error_kind(const std::exception_ptr& e) {
  try {
    std::rethrow_exception(e);
  } catch (const ConfigError&) {
    return "config";
  } catch (const DivergenceError&) {
    return "divergence";
  } catch (const IoError&) {
    return "io";
  } catch (const FormatError&) {
    return "format";
  } catch (...) {
    return "error";
  }
}

std::string describe(const std::exception_ptr& e) {
  try {
    std::rethrow_exception(e);
  } catch (const std::exception& ex) {
    return ex.what();
  } catch (...) {
    return "unknown error";
  }
}

// One condensation job: writes checkpoint, image grid and (optionally) the
// trace into `dir`. Failures are captured in the outcome.
SetOutcome condense_one(const experiment::ExperimentConfig& cfg, condense::CondenseConfig ccfg,
                        const experiment::LoadedData& data, const models::ModelSpec& spec, std::size_t index,
                        const fs::path& dir) {
  SetOutcome out;
  out.index = index;
  out.seed = ccfg.seed;
  const auto start = Clock::now();
  try {
    ad::PrecisionGuard precision(cfg.precision);
    make_dir(dir);
    std::ofstream trace;
    condense::TraceSink sink;
    if (cfg.output.trace) {
      trace.open(dir / "trace.jsonl", std::ios::trunc);
      if (!trace) throw IoError("cannot open '" + (dir / "trace.jsonl").string() + "' for writing");
      sink = [&trace](const condense::TraceRecord& r) { trace << trace_record_json(r).dump() << '\n'; };
    }
    condense::CondenseResult result;
    try {
      result = condense::condense(data.train, ccfg, spec, sink);
    } catch (const condense::CondenseDivergence& e) {
      out.records = e.trace().records.size();
      throw;
    }
    out.records = result.trace.records.size();
    if (!result.trace.records.empty()) out.final_loss = result.trace.records.back().loss;
    for (const auto& r : result.trace.records) out.theta_updates += r.theta_steps;
    persist::save_checkpoint(dir / "checkpoint.dcset", result.set, cfg.precision);
    persist::write_pgm_grid(dir / "synthetic.pgm", result.set, data.train.stats);
    out.set = std::move(result.set);
  } catch (...) {
    out.failure = std::current_exception();
    out.error = describe(out.failure);
  }
  out.wall_time_s = seconds_since(start);
  return out;
}

json outcome_json(const SetOutcome& o, const fs::path& dir) {
  json j = {{"set", o.index},
            {"seed", o.seed},
            {"dir", dir.string()},
            {"trace_records", o.records},
            {"wall_time_s", o.wall_time_s}};
  if (o.failure) {
    j["status"] = "failed";
    j["error_kind"] = error_kind(o.failure);
    j["error"] = o.error;
  } else {
    j["status"] = "ok";
    j["final_loss"] = o.final_loss;
    j["theta_updates"] = o.theta_updates;
    j["checkpoint"] = (dir / "checkpoint.dcset").string();
  }
  return j;
}

std::string set_dir_name(std::size_t i) { return "set_" + std::to_string(i); }

// Rethrows the failure with the lowest index, if any.
void rethrow_first(const std::vector<const SetOutcome*>& outcomes) {
  for (const SetOutcome* o : outcomes) {
    if (o->failure) std::rethrow_exception(o->failure);
  }
}

condense::CondenseConfig with_axis_value(condense::CondenseConfig c, const std::string& axis, const std::string& value) {
  if (axis == "mode") c.mode = condense::parse_mode(value);
  else if (axis == "distance") c.distance = matching::DistanceSpec::parse(value);
  else if (axis == "theta_policy") c.theta_policy = condense::ThetaPolicy::parse(value);
  else throw ConfigError("ablate.axis: expected mode, distance or theta_policy");
  c.validate();
  return c;
}

json report_json(const eval::EvalReport& r) {
  return {{"source_arch", r.source_arch}, {"target_arch", r.target_arch}, {"runs", r.accuracies.size()},
          {"mean", r.mean},               {"std", r.stddev},              {"accuracies", r.accuracies},
          {"seeds", r.seeds}};
}

}  // namespace

void apply(experiment::ExperimentConfig& cfg, const Overrides& o) {
  if (o.out) cfg.output.dir = *o.out;
  if (o.seed) cfg.seed = *o.seed;
  if (o.jobs) {
    if (*o.jobs < 1) throw ConfigError("--jobs must be >= 1");
    cfg.jobs = *o.jobs;
  }
  if (o.trace) cfg.output.trace = true;
  cfg.condense.seed = cfg.seed;
}

std::uint64_t eval_base_seed(std::uint64_t seed, std::size_t set_index, std::size_t runs) {
  return derive_seed(seed, 200) + static_cast<std::uint64_t>(set_index) * runs;
}

json trace_record_json(const condense::TraceRecord& r) {
  json j = {{"outer", r.outer},
            {"inner", r.inner},
            {"mode", condense::to_string(r.mode_used)},
            {"loss", r.loss},
            {"intra", r.intra},
            {"inter", r.inter},
            {"theta_steps", r.theta_steps}};
  if (!r.validation_losses.empty()) j["validation_losses"] = r.validation_losses;
  return j;
}

const std::vector<std::string>& results_csv_header() {
  static const std::vector<std::string> h{"dataset", "arch", "ipc",  "method", "mode", "distance",
                                          "seed",    "sets", "runs", "mean",   "std",  "wall_time_s"};
  return h;
}

const std::vector<std::string>& ablation_csv_header() {
  static const std::vector<std::string> h{"axis",     "value",
                                          "set",      "seed",
                                          "run",      "eval_seed",
                                          "accuracy", "theta_updates_planned",
                                          "theta_updates_performed", "final_loss",
                                          "wall_time_s"};
  return h;
}

const std::vector<std::string>& xarch_csv_header() {
  static const std::vector<std::string> h{"source", "target", "runs", "mean", "std"};
  return h;
}

bool CondenseSummary::ok() const {
  for (const auto& s : sets) {
    if (s.failure) return false;
  }
  return true;
}

CondenseSummary cmd_condense(const experiment::ExperimentConfig& cfg) {
  prepare_output(cfg);
  const auto data = experiment::load_data(cfg);
  const auto spec = experiment::model_for(cfg, data.train);
  const std::size_t n = cfg.eval.synthetic_sets;
  CondenseSummary summary;
  summary.sets.resize(n);
  eval::parallel_for(n, cfg.jobs, [&](std::size_t i) {
    condense::CondenseConfig c = cfg.condense;
    c.seed = cfg.seed + i;
    summary.sets[i] = condense_one(cfg, c, data, spec, i, cfg.output.dir / set_dir_name(i));
  });

  json sets = json::array();
  std::vector<const SetOutcome*> order;
  for (const auto& s : summary.sets) {
    sets.push_back(outcome_json(s, cfg.output.dir / set_dir_name(s.index)));
    order.push_back(&s);
  }
  persist::write_json(cfg.output.dir / "metrics.json", {{"command", "condense"},
                                                        {"status", summary.ok() ? "ok" : "failed"},
                                                        {"dataset", dataset_name(cfg)},
                                                        {"arch", models::to_string(spec.arch)},
                                                        {"ipc", cfg.condense.ipc},
                                                        {"sets", sets}});
  rethrow_first(order);
  return summary;
}

eval::EvalReport cmd_eval(const experiment::ExperimentConfig& cfg, const EvalSource& source) {
  prepare_output(cfg);
  const auto start = Clock::now();
  ad::PrecisionGuard precision(cfg.precision);
  const auto data = experiment::load_data(cfg);
  const auto spec = experiment::model_for(cfg, data.train, cfg.eval.arch);
  const data::Batch test = data.test.all();

  std::string method, ipc, mode = "-", distance = "-";
  std::vector<data::Batch> trainsets;
  json coresets = json::array();
  if (!source.checkpoints.empty()) {
    method = "condensed";
    mode = std::string(condense::to_string(cfg.condense.mode));
    distance = cfg.condense.distance.to_string();
    for (const auto& path : source.checkpoints) {
      const auto ckpt = persist::load_checkpoint(path);
      const auto& s = ckpt.set;
      if (s.sample_shape() != spec.input_shape() || s.num_classes != spec.num_classes) {
        throw ConfigError("checkpoint '" + path.string() + "' holds " + std::to_string(s.num_classes) +
                          " classes of shape " + to_string(s.sample_shape()) + " but model '" +
                          std::string(models::to_string(spec.arch)) + "' expects " + std::to_string(spec.num_classes) +
                          " classes of shape " + to_string(spec.input_shape()));
      }
      if (!ipc.empty() && ipc != std::to_string(s.ipc)) ipc = "mixed";
      else ipc = std::to_string(s.ipc);
      trainsets.push_back(s.as_batch());
    }
  } else {
    method = source.coreset.value_or(cfg.coreset.method);
    if (method == "whole") {
      ipc = "all";
      trainsets.push_back(data.train.all());
    } else if (method == "random" || method == "herding") {
      ipc = std::to_string(cfg.condense.ipc);
      const std::size_t sets = method == "random" ? cfg.eval.synthetic_sets : 1;
      for (std::size_t i = 0; i < sets; ++i) {
        coreset::CoresetResult cs;
        if (method == "random") {
          cs = coreset::random_coreset(data.train, cfg.condense.ipc, cfg.seed + i);
        } else {
          coreset::HerdingOptions opt;
          if (cfg.coreset.features == "model_embedding") {
            opt.features = coreset::HerdingFeatures::model_embedding;
            opt.spec = spec;
          }
          cs = coreset::herding_coreset(data.train, cfg.condense.ipc, opt, cfg.seed + i);
        }
        coresets.push_back(cs.to_json());
        trainsets.push_back(coreset::to_synthetic(data.train, cs).as_batch());
      }
      if (method == "herding" && cfg.coreset.features == "model_embedding") method = "herding_embedding";
    } else {
      throw ConfigError("coreset method '" + method + "': expected random, herding or whole");
    }
  }

  std::vector<eval::EvalReport> parts;
  for (std::size_t i = 0; i < trainsets.size(); ++i) {
    parts.push_back(eval::repeat_eval(spec, trainsets[i], test, cfg.eval.runs,
                                      eval_base_seed(cfg.seed, i, cfg.eval.runs), cfg.eval.train, cfg.jobs));
  }
  eval::EvalReport report = eval::EvalReport::merge(parts);
  report.source_arch = method;
  const double seconds = seconds_since(start);

  const std::vector<std::string> row{dataset_name(cfg),
                                     std::string(models::to_string(spec.arch)),
                                     ipc,
                                     method,
                                     mode,
                                     distance,
                                     std::to_string(cfg.seed),
                                     std::to_string(trainsets.size()),
                                     std::to_string(report.accuracies.size()),
                                     num(report.mean),
                                     num(report.stddev),
                                     wall(seconds)};
  persist::append_csv_row(cfg.output.dir / "results.csv", results_csv_header(), row);

  json j = report_json(report);
  j["method"] = method;
  j["ipc"] = ipc;
  j["per_set"] = json::array();
  for (const auto& p : parts) j["per_set"].push_back(report_json(p));
  if (!source.checkpoints.empty()) {
    j["checkpoints"] = json::array();
    for (const auto& p : source.checkpoints) j["checkpoints"].push_back(p.string());
  }
  if (!coresets.empty()) j["coresets"] = coresets;
  j["wall_time_s"] = seconds;
  persist::write_json(cfg.output.dir / "eval_report.json", j);
  return report;
}

std::vector<AblationRow> cmd_ablate(const experiment::ExperimentConfig& cfg) {
  const auto& ab = cfg.ablate;
  if (ab.axis.empty()) throw ConfigError("ablate.axis: required (mode, distance or theta_policy)");
  if (ab.values.empty()) throw ConfigError("ablate.values: empty sweep");
  std::vector<condense::CondenseConfig> points;
  for (const auto& v : ab.values) points.push_back(with_axis_value(cfg.condense, ab.axis, v));

  prepare_output(cfg);
  const auto data = experiment::load_data(cfg);
  const auto spec = experiment::model_for(cfg, data.train);
  const auto eval_spec = experiment::model_for(cfg, data.train, cfg.eval.arch);
  const data::Batch test = data.test.all();
  const std::size_t sets = cfg.eval.synthetic_sets, runs = cfg.eval.runs;
  const std::size_t jobs = points.size() * sets;

  std::vector<SetOutcome> outcomes(jobs);
  std::vector<eval::EvalReport> reports(jobs);
  auto job_dir = [&](std::size_t p, std::size_t i) {
    return cfg.output.dir / ("point_" + std::to_string(p)) / set_dir_name(i);
  };
  eval::parallel_for(jobs, cfg.jobs, [&](std::size_t job) {
    const std::size_t p = job / sets, i = job % sets;
    condense::CondenseConfig c = points[p];
    c.seed = cfg.seed + i;
    SetOutcome& o = outcomes[job];
    o = condense_one(cfg, c, data, spec, i, job_dir(p, i));
    if (o.failure) return;
    const auto start = Clock::now();
    try {
      ad::PrecisionGuard precision(cfg.precision);
      reports[job] = eval::repeat_eval(eval_spec, o.set->as_batch(), test, runs, eval_base_seed(cfg.seed, i, runs),
                                       cfg.eval.train, 1);
    } catch (...) {
      o.failure = std::current_exception();
      o.error = describe(o.failure);
    }
    o.wall_time_s += seconds_since(start);
  });

  // Merge, single-threaded.
  std::vector<AblationRow> rows;
  json summary = json::array(), failures = json::array();
  std::vector<const SetOutcome*> order;
  for (std::size_t p = 0; p < points.size(); ++p) {
    const std::size_t planned =
        points[p].outer_iterations * condense::count_theta_updates(points[p].inner_iterations, points[p].theta_policy);
    std::vector<double> accs;
    for (std::size_t i = 0; i < sets; ++i) {
      const SetOutcome& o = outcomes[p * sets + i];
      order.push_back(&o);
      if (o.failure) {
        json f = outcome_json(o, job_dir(p, i));
        f["value"] = ab.values[p];
        failures.push_back(f);
        continue;
      }
      const auto& rep = reports[p * sets + i];
      for (std::size_t r = 0; r < rep.accuracies.size(); ++r) {
        rows.push_back({ab.axis, ab.values[p], i, o.seed, r, rep.seeds[r], rep.accuracies[r], planned,
                        o.theta_updates, o.final_loss, o.wall_time_s});
        accs.push_back(rep.accuracies[r]);
      }
    }
    summary.push_back({{"value", ab.values[p]},
                       {"runs", accs.size()},
                       {"mean", eval::mean_of(accs)},
                       {"std", eval::sample_stddev(accs)},
                       {"theta_updates_planned", planned}});
  }
  for (const auto& r : rows) {
    const std::vector<std::string> fields{r.axis,
                                          r.value,
                                          std::to_string(r.set),
                                          std::to_string(r.seed),
                                          std::to_string(r.run),
                                          std::to_string(r.eval_seed),
                                          num(r.accuracy),
                                          std::to_string(r.theta_updates_planned),
                                          std::to_string(r.theta_updates_performed),
                                          num(r.final_loss),
                                          wall(r.wall_time_s)};
    persist::append_csv_row(cfg.output.dir / "ablation.csv", ablation_csv_header(), fields);
  }
  persist::write_json(cfg.output.dir / "ablation.json",
                      {{"axis", ab.axis}, {"points", summary}, {"failures", failures}});
  persist::write_json(cfg.output.dir / "metrics.json", {{"command", "ablate"},
                                                        {"status", failures.empty() ? "ok" : "failed"},
                                                        {"dataset", dataset_name(cfg)},
                                                        {"failures", failures}});
  rethrow_first(order);
  return rows;
}

std::vector<eval::XArchCell> cmd_xarch(const experiment::ExperimentConfig& cfg) {
  const auto& xa = cfg.xarch;
  if (xa.sources.empty()) throw ConfigError("xarch.sources: empty");
  if (xa.targets.empty()) throw ConfigError("xarch.targets: empty");

  prepare_output(cfg);
  const auto data = experiment::load_data(cfg);
  std::vector<models::ModelSpec> sources, targets;
  for (const auto& s : xa.sources) sources.push_back(experiment::model_for(cfg, data.train, models::parse_arch(s)));
  for (const auto& t : xa.targets) targets.push_back(experiment::model_for(cfg, data.train, models::parse_arch(t)));
  const std::size_t sets = cfg.eval.synthetic_sets;
  const std::size_t jobs = sources.size() * sets;

  std::vector<SetOutcome> outcomes(jobs);
  auto job_dir = [&](std::size_t s, std::size_t i) {
    return cfg.output.dir / ("source_" + xa.sources[s]) / set_dir_name(i);
  };
  eval::parallel_for(jobs, cfg.jobs, [&](std::size_t job) {
    const std::size_t s = job / sets, i = job % sets;
    condense::CondenseConfig c = cfg.condense;
    c.seed = cfg.seed + i;
    outcomes[job] = condense_one(cfg, c, data, sources[s], i, job_dir(s, i));
  });

  std::map<std::string, std::vector<data::SyntheticSet>> by_source;
  json failures = json::array();
  std::vector<const SetOutcome*> order;
  for (std::size_t job = 0; job < jobs; ++job) {
    const SetOutcome& o = outcomes[job];
    order.push_back(&o);
    if (o.failure) {
      json f = outcome_json(o, job_dir(job / sets, job % sets));
      f["source"] = xa.sources[job / sets];
      failures.push_back(f);
    } else {
      by_source[xa.sources[job / sets]].push_back(*o.set);
    }
  }
  persist::write_json(cfg.output.dir / "metrics.json", {{"command", "xarch"},
                                                        {"status", failures.empty() ? "ok" : "failed"},
                                                        {"dataset", dataset_name(cfg)},
                                                        {"failures", failures}});
  rethrow_first(order);

  ad::PrecisionGuard precision(cfg.precision);
  const auto cells = eval::cross_arch_matrix(by_source, targets, data.test.all(), cfg.eval.runs,
                                             eval_base_seed(cfg.seed, 0, cfg.eval.runs), cfg.eval.train, cfg.jobs);
  json matrix = json::array();
  for (const auto& c : cells) {
    persist::append_csv_row(cfg.output.dir / "xarch.csv", xarch_csv_header(),
                            std::vector<std::string>{c.source, c.target, std::to_string(c.report.accuracies.size()),
                                                     num(c.report.mean), num(c.report.stddev)});
    matrix.push_back(report_json(c.report));
  }

  // Mean-accuracy grid; rewritten, since a grid does not append.
  std::vector<std::string> header{"source"};
  header.insert(header.end(), xa.targets.begin(), xa.targets.end());
  std::string grid;
  for (std::size_t i = 0; i < header.size(); ++i) grid += (i ? "," : "") + persist::csv_escape(header[i]);
  grid += '\n';
  for (const auto& [source, _] : by_source) {
    grid += persist::csv_escape(source);
    for (const auto& t : targets) {
      for (const auto& c : cells) {
        if (c.source == source && c.target == models::to_string(t.arch)) grid += "," + num(c.report.mean);
      }
    }
    grid += '\n';
  }
  persist::write_file(cfg.output.dir / "xarch_matrix.csv",
                      std::span(reinterpret_cast<const std::uint8_t*>(grid.data()), grid.size()));
  persist::write_json(cfg.output.dir / "xarch.json", {{"cells", matrix}, {"sources", xa.sources}, {"targets", xa.targets}});
  return cells;
}

}  // namespace gradmatch::commands
