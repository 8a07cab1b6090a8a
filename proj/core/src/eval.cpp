#include "gradmatch/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>

#include "gradmatch/errors.hpp"
#include "gradmatch/random.hpp"

namespace gradmatch::eval {

using ad::Var;

namespace {

constexpr std::size_t kEvalChunk = 512;

data::Batch slice(const data::Batch& b, std::span<const std::size_t> rows) {
  const std::size_t per = b.images.numel() / b.images.dim(0);
  data::Batch out;
  Shape shape = b.images.shape();
  shape[0] = rows.size();
  out.images = Tensor(shape);
  out.labels.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(b.images.raw() + rows[i] * per, per, out.images.raw() + i * per);
    out.labels.push_back(b.labels[rows[i]]);
  }
  return out;
}

double lr_at(const TrainConfig& cfg, std::size_t epoch) {
  double lr = cfg.lr;
  for (std::size_t e : cfg.lr_decay_epochs) {
    if (epoch >= e) lr *= cfg.lr_decay;
  }
  return lr;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(lr >= 0.0)) throw ConfigError("train: lr must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train: momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be >= 0");
}

models::ParamSet train(const models::ModelSpec& spec, models::ParamSet params, const data::Batch& trainset,
                       const TrainConfig& cfg) {
  cfg.validate();
  if (trainset.size() == 0) throw ContractError("train: empty training set");
  for (int y : trainset.labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= spec.num_classes) {
      throw ContractError("train: label " + std::to_string(y) + " outside the model's classes");
    }
  }
  const std::size_t n = trainset.size();
  const std::size_t batch = std::min(cfg.batch_size, n);
  Rng rng(derive_seed(cfg.seed, 2));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<Tensor> velocity;
  for (const auto& e : params.entries()) velocity.emplace_back(e.value.shape(), 0.0);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const double lr = lr_at(cfg, epoch);
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t len = std::min(batch, n - start);
      const data::Batch mb = batch == n ? trainset : slice(trainset, std::span(order).subspan(start, len));
      std::vector<Var> grads;
      try {
        const Var loss = ad::softmax_cross_entropy(models::forward(spec, params, Var(mb.images)), mb.labels);
        const auto vars = params.vars();
        grads = ad::grad(loss, vars);
      } catch (const NumericError& e) {
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
      }
      std::vector<Tensor> next = params.values();
      for (std::size_t p = 0; p < next.size(); ++p) {
        const Tensor& g = grads[p].value();
        Tensor& v = velocity[p];
        Tensor& w = next[p];
        for (std::size_t i = 0; i < w.numel(); ++i) {
          v[i] = cfg.momentum * v[i] + g[i] + cfg.weight_decay * w[i];
          w[i] -= lr * v[i];
        }
        if (!w.all_finite()) throw DivergenceError("training diverged at epoch " + std::to_string(epoch));
      }
      params = params.with_values(std::move(next));
    }
  }
  return params;
}

models::ParamSet train_from_scratch(const models::ModelSpec& spec, const data::Batch& trainset, const TrainConfig& cfg) {
  return train(spec, models::init_params(spec, derive_seed(cfg.seed, 1)), trainset, cfg);
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.raw() + i * c;
    out[i] = static_cast<int>(std::max_element(row, row + c) - row);  // first maximum
  }
  return out;
}

double accuracy(const models::ModelSpec& spec, const models::ParamSet& params, const data::Batch& testset) {
  if (testset.size() == 0) throw ContractError("accuracy: empty test set");
  ad::NoGradGuard no_grad;
  std::size_t correct = 0;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < testset.size(); start += kEvalChunk) {
    const std::size_t len = std::min(kEvalChunk, testset.size() - start);
    rows.resize(len);
    std::iota(rows.begin(), rows.end(), start);
    const data::Batch chunk = len == testset.size() ? testset : slice(testset, rows);
    const auto pred = argmax_rows(models::forward(spec, params, Var(chunk.images)).value());
    for (std::size_t i = 0; i < len; ++i) correct += pred[i] == chunk.labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(testset.size());
}

// ---- reports ---------------------------------------------------------------------

double mean_of(std::span<const double> xs) {
  if (xs.empty()) return 0.0;
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

double sample_stddev(std::span<const double> xs) {
  if (xs.size() < 2) return 0.0;
  const double mu = mean_of(xs);
  double sq = 0.0;
  for (double x : xs) sq += (x - mu) * (x - mu);
  return std::sqrt(sq / static_cast<double>(xs.size() - 1));
}

void EvalReport::aggregate() {
  mean = mean_of(accuracies);
  stddev = sample_stddev(accuracies);
}

EvalReport EvalReport::merge(std::span<const EvalReport> parts) {
  EvalReport out;
  for (const auto& p : parts) {
    out.accuracies.insert(out.accuracies.end(), p.accuracies.begin(), p.accuracies.end());
    out.seeds.insert(out.seeds.end(), p.seeds.begin(), p.seeds.end());
    if (out.source_arch.empty()) out.source_arch = p.source_arch;
    if (out.target_arch.empty()) out.target_arch = p.target_arch;
  }
  out.aggregate();
  return out;
}

void parallel_for(std::size_t count, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, count));
  if (jobs == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::size_t failed_at = count;
  std::exception_ptr failure;
  const ad::Precision precision = ad::precision();  // thread-local; carried into the workers
  auto worker = [&] {
    ad::PrecisionGuard guard(precision);
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (i < failed_at) {
          failed_at = i;
          failure = std::current_exception();
        }
      }
    }
  };
  std::vector<std::jthread> threads;
  for (std::size_t j = 0; j < jobs; ++j) threads.emplace_back(worker);
  threads.clear();
  if (failure) std::rethrow_exception(failure);
}

EvalReport repeat_eval(const models::ModelSpec& spec, const data::Batch& trainset, const data::Batch& testset,
                       std::size_t runs, std::uint64_t base_seed, const TrainConfig& cfg, std::size_t jobs) {
  if (runs < 1) throw ContractError("repeat_eval: runs must be >= 1");
  EvalReport report;
  report.accuracies.assign(runs, 0.0);
  report.seeds.resize(runs);
  report.target_arch = std::string(models::to_string(spec.arch));
  parallel_for(runs, jobs, [&](std::size_t r) {
    TrainConfig run_cfg = cfg;
    run_cfg.seed = base_seed + r;
    report.seeds[r] = run_cfg.seed;
    try {
      const auto params = train_from_scratch(spec, trainset, run_cfg);
      report.accuracies[r] = accuracy(spec, params, testset);
    } catch (const DivergenceError& e) {
      throw DivergenceError("evaluation run " + std::to_string(r) + ": " + e.what());
    }
  });
  report.aggregate();
  return report;
}

std::vector<XArchCell> cross_arch_matrix(const std::map<std::string, std::vector<data::SyntheticSet>>& sets_by_source,
                                         std::span<const models::ModelSpec> targets, const data::Batch& testset,
                                         std::size_t runs, std::uint64_t base_seed, const TrainConfig& cfg,
                                         std::size_t jobs) {
  std::vector<XArchCell> cells;
  for (const auto& [source, sets] : sets_by_source) {
    for (const models::ModelSpec& target : targets) {
      const std::string tname(models::to_string(target.arch));
      std::vector<EvalReport> parts;
      for (const data::SyntheticSet& s : sets) {
        if (s.sample_shape() != target.input_shape() || s.num_classes != target.num_classes) {
          throw ContractError("cross_arch_matrix: set from '" + source + "' (" + to_string(s.sample_shape()) + ", " +
                              std::to_string(s.num_classes) + " classes) does not fit target '" + tname + "'");
        }
        parts.push_back(repeat_eval(target, s.as_batch(), testset, runs, base_seed, cfg, jobs));
      }
      EvalReport merged = EvalReport::merge(parts);
      merged.source_arch = source;
      merged.target_arch = tname;
      cells.push_back({source, tname, std::move(merged)});
    }
  }
  return cells;
}

}  // namespace gradmatch::eval
