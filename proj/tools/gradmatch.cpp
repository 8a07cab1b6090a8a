// gradmatch: command-line front end.
//
//   gradmatch condense --config run.json [--out DIR] [--seed N] [--jobs N] [--trace]
//   gradmatch eval     --config run.json [--checkpoint FILE]... [--coreset random|herding|whole]
//   gradmatch ablate   --config run.json
//   gradmatch xarch    --config run.json
//   gradmatch selftest [--data DIR] [--jobs N] [--only ID]...
//
// Exit codes: 0 success, 1 other failure, 2 config error, 3 divergence,
// 4 I/O or file-format error.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <set>

#include "criteria.hpp"
#include "gradmatch/commands.hpp"
#include "gradmatch/errors.hpp"
#include "gradmatch/experiment.hpp"

namespace {

using namespace gradmatch;

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kDivergence = 3, kIo = 4 };

struct Common {
  std::string config;
  std::string out;
  std::int64_t seed = -1;
  std::size_t jobs = 0;
  bool trace = false;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "Experiment config (JSON); defaults apply when omitted");
  sub->add_option("--out", c.out, "Output directory (overrides output.dir)");
  sub->add_option("--seed", c.seed, "Base seed (overrides seed)")->check(CLI::NonNegativeNumber);
  sub->add_option("--jobs", c.jobs, "Worker threads (overrides jobs)")->check(CLI::PositiveNumber);
  sub->add_flag("--trace", c.trace, "Write per-iteration JSON-lines traces");
}

experiment::ExperimentConfig resolve(const Common& c) {
  auto cfg = c.config.empty() ? experiment::parse_config(nlohmann::json::object())
                              : experiment::load_config(c.config);
  commands::Overrides o;
  if (!c.out.empty()) o.out = c.out;
  if (c.seed >= 0) o.seed = static_cast<std::uint64_t>(c.seed);
  if (c.jobs > 0) o.jobs = c.jobs;
  o.trace = c.trace;
  commands::apply(cfg, o);
  return cfg;
}

void print_report(const eval::EvalReport& r) {
  std::printf("accuracy %.4f +- %.4f over %zu runs\n", r.mean, r.stddev, r.accuracies.size());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dataset condensation by gradient matching"};
  app.require_subcommand(1);

  Common common;
  auto* condense = app.add_subcommand("condense", "Condense the training set into synthetic sets");
  auto* eval = app.add_subcommand("eval", "Train fresh models on a synthetic set or coreset and test them");
  auto* ablate = app.add_subcommand("ablate", "Condense and evaluate across one swept setting");
  auto* xarch = app.add_subcommand("xarch", "Condense with source models, evaluate on target models");
  for (auto* sub : {condense, eval, ablate, xarch}) add_common(sub, common);

  std::vector<std::string> checkpoints;
  std::string coreset;
  eval->add_option("--checkpoint", checkpoints, "DCSET1 checkpoint(s) to evaluate");
  eval->add_option("--coreset", coreset, "Coreset method when no checkpoint is given")
      ->check(CLI::IsMember({"random", "herding", "whole"}));

  auto* selftest = app.add_subcommand("selftest", "Run the acceptance checks and print PASS/FAIL per check");
  std::string data_dir;
  std::size_t selftest_jobs = 1;
  std::vector<int> only;
  selftest->add_option("--data", data_dir, "Directory with the MNIST IDX files");
  selftest->add_option("--jobs", selftest_jobs, "Evaluation threads")->check(CLI::PositiveNumber);
  selftest->add_option("--only", only, "Run only these check ids");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (selftest->parsed()) {
      acceptance::Options o;
      o.mnist_root = data_dir.empty() ? experiment::default_data_root() : std::filesystem::path(data_dir);
      o.jobs = selftest_jobs;
      const int failed = acceptance::run(o, std::set<int>(only.begin(), only.end()), std::cout);
      return failed == 0 ? kOk : kFailure;
    }
    const auto cfg = resolve(common);
    if (condense->parsed()) {
      const auto summary = commands::cmd_condense(cfg);
      for (const auto& s : summary.sets) {
        std::printf("set %zu (seed %llu): final loss %.6g, %.1f s\n", s.index, static_cast<unsigned long long>(s.seed),
                    s.final_loss, s.wall_time_s);
      }
      std::printf("wrote %s\n", (cfg.output.dir / "metrics.json").string().c_str());
    } else if (eval->parsed()) {
      commands::EvalSource source;
      for (const auto& c : checkpoints) source.checkpoints.emplace_back(c);
      if (!coreset.empty()) source.coreset = coreset;
      print_report(commands::cmd_eval(cfg, source));
    } else if (ablate->parsed()) {
      const auto rows = commands::cmd_ablate(cfg);
      std::printf("wrote %zu rows to %s\n", rows.size(), (cfg.output.dir / "ablation.csv").string().c_str());
    } else if (xarch->parsed()) {
      for (const auto& c : commands::cmd_xarch(cfg)) {
        std::printf("%s -> %s: ", c.source.c_str(), c.target.c_str());
        print_report(c.report);
      }
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << '\n';
    return kDivergence;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kOk;
}
