#pragma once

// Evaluation protocol: train a target network from scratch on a small set,
// measure top-1 accuracy on the real test split, repeat over seeds.

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "gradmatch/data.hpp"
#include "gradmatch/models.hpp"

namespace gradmatch::eval {

struct TrainConfig {
  std::size_t epochs = 300;
  std::size_t batch_size = 256;  // capped at the training-set size
  double lr = 0.01;
  std::vector<std::size_t> lr_decay_epochs{150};
  double lr_decay = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  std::uint64_t seed = 0;

  void validate() const;
};

// Mini-batch SGD on cross-entropy. Deterministic given cfg.seed (which seeds
// both the initialization and the shuffling).
models::ParamSet train_from_scratch(const models::ModelSpec& spec, const data::Batch& trainset, const TrainConfig& cfg);

// Continues training from given parameters.
models::ParamSet train(const models::ModelSpec& spec, models::ParamSet params, const data::Batch& trainset,
                       const TrainConfig& cfg);

// Fraction of samples whose argmax logit (lowest index on ties) equals the label.
double accuracy(const models::ModelSpec& spec, const models::ParamSet& params, const data::Batch& testset);

// Index of the largest value in each row, lowest index on ties.
std::vector<int> argmax_rows(const Tensor& logits);

struct EvalReport {
  std::vector<double> accuracies;
  std::vector<std::uint64_t> seeds;
  double mean = 0.0;
  double stddev = 0.0;  // sample (n - 1) standard deviation, 0 for a single run
  std::string source_arch;
  std::string target_arch;

  std::size_t runs() const noexcept { return accuracies.size(); }
  // Recomputes mean/stddev from the per-run accuracies.
  void aggregate();
  // Concatenates the runs of several reports (e.g. one per synthetic set).
  static EvalReport merge(std::span<const EvalReport> parts);
};

double mean_of(std::span<const double> xs);
double sample_stddev(std::span<const double> xs);

// `runs` independent trainings with seeds base_seed .. base_seed + runs - 1.
// Runs are spread over `jobs` worker threads; results are identical for any
// job count.
EvalReport repeat_eval(const models::ModelSpec& spec, const data::Batch& trainset, const data::Batch& testset,
                       std::size_t runs, std::uint64_t base_seed, const TrainConfig& cfg, std::size_t jobs = 1);

struct XArchCell {
  std::string source;
  std::string target;
  EvalReport report;
};

// For every (source, target) pair, repeat_eval of the target architecture on
// every synthetic set condensed with the source architecture.
std::vector<XArchCell> cross_arch_matrix(const std::map<std::string, std::vector<data::SyntheticSet>>& sets_by_source,
                                         std::span<const models::ModelSpec> targets, const data::Batch& testset,
                                         std::size_t runs, std::uint64_t base_seed, const TrainConfig& cfg,
                                         std::size_t jobs = 1);

// Runs fn(0..count-1) on up to `jobs` threads.
void parallel_for(std::size_t count, std::size_t jobs, const std::function<void(std::size_t)>& fn);

}  // namespace gradmatch::eval
