#include <gtest/gtest.h>

#include <atomic>
#include <map>
#include <random>
#include <set>
#include <vector>

#include "gradmatch/errors.hpp"
#include "gradmatch/eval.hpp"

using namespace gradmatch;
using namespace gradmatch::eval;

namespace {

models::ModelSpec logistic(std::size_t dim, std::size_t classes = 2) {
  models::ModelSpec s;
  s.arch = models::Arch::logistic;
  s.channels = 1;
  s.height = 1;
  s.width = dim;
  s.num_classes = classes;
  return s;
}

TrainConfig quick(std::size_t epochs = 20) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 16;
  c.lr_decay_epochs = {};
  return c;
}

}  // namespace

TEST(Stats, MeanAndSampleStddev) {
  const std::vector<double> xs{1, 2, 3};
  EXPECT_DOUBLE_EQ(mean_of(xs), 2.0);
  EXPECT_DOUBLE_EQ(sample_stddev(xs), 1.0);
  EXPECT_EQ(sample_stddev(std::vector<double>{0.7}), 0.0);
}

TEST(Stats, MergeConcatenatesAndAggregates) {
  EvalReport a, b;
  a.accuracies = {1.0};
  a.seeds = {1};
  b.accuracies = {2.0, 3.0};
  b.seeds = {2, 3};
  const EvalReport parts[] = {a, b};
  const auto m = EvalReport::merge(parts);
  EXPECT_EQ(m.accuracies, (std::vector<double>{1, 2, 3}));
  EXPECT_EQ(m.seeds, (std::vector<std::uint64_t>{1, 2, 3}));
  EXPECT_DOUBLE_EQ(m.mean, 2.0);
  EXPECT_DOUBLE_EQ(m.stddev, 1.0);
}

TEST(Argmax, LowestIndexOnTies) {
  EXPECT_EQ(argmax_rows(Tensor::from({3, 3}, {1, 1, 0, 0, 2, 2, 5, 1, 5})), (std::vector<int>{0, 1, 0}));
}

TEST(Accuracy, HandCountedSet) {
  // Logits = x * W^T; W = I picks the larger coordinate.
  const auto spec = logistic(2);
  auto p = models::init_params(spec, 0);
  p = p.with_values({Tensor::from({2, 2}, {1, 0, 0, 1}), Tensor({2}, 0.0)});
  data::Batch b{Tensor::from({4, 1, 1, 2}, {2, 1, 0, 3, 5, 4, 1, 1}), {0, 1, 1, 0}, {}};
  // predictions 0, 1, 0, 0 (tie) -> 3 of 4 right
  EXPECT_DOUBLE_EQ(accuracy(spec, p, b), 0.75);
}

TEST(Train, ZeroLearningRateLeavesParametersUnchanged) {
  const auto spec = logistic(2);
  const auto ds = data::gaussian_blobs(2, 20, 2, 3.0, 1);
  auto cfg = quick(3);
  cfg.lr = 0.0;
  const auto p0 = models::init_params(spec, 5);
  EXPECT_TRUE(train(spec, p0, ds.all(), cfg).bit_identical(p0));
}

TEST(Train, SameSeedBitIdentical) {
  const auto spec = logistic(2);
  const auto ds = data::gaussian_blobs(2, 20, 2, 3.0, 1);
  auto cfg = quick(5);
  cfg.seed = 4;
  EXPECT_TRUE(train_from_scratch(spec, ds.all(), cfg).bit_identical(train_from_scratch(spec, ds.all(), cfg)));
}

TEST(Train, SeparableBlobsReachFullTrainingAccuracy) {
  const auto spec = logistic(2);
  const auto ds = data::gaussian_blobs(2, 50, 2, 12.0, 2);
  const auto p = train_from_scratch(spec, ds.all(), quick(50));
  EXPECT_EQ(accuracy(spec, p, ds.all()), 1.0);
}

TEST(Train, DivergenceIsReported) {
  const auto spec = logistic(2);
  const auto ds = data::gaussian_blobs(2, 20, 2, 3.0, 1);
  auto cfg = quick(5);
  cfg.lr = 1e300;
  EXPECT_THROW(train_from_scratch(spec, ds.all(), cfg), DivergenceError);
}

TEST(Train, InvalidConfigRejected) {
  auto cfg = quick();
  cfg.epochs = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(RepeatEval, SeedsAreConsecutiveAndJobCountDoesNotMatter) {
  const auto spec = logistic(2);
  const auto train_set = data::gaussian_blobs(2, 10, 2, 3.0, 1).all();
  const auto test_set = data::gaussian_blobs(2, 50, 2, 3.0, 2).all();
  const auto a = repeat_eval(spec, train_set, test_set, 4, 100, quick(), 1);
  const auto b = repeat_eval(spec, train_set, test_set, 4, 100, quick(), 3);
  EXPECT_EQ(a.seeds, (std::vector<std::uint64_t>{100, 101, 102, 103}));
  EXPECT_EQ(a.accuracies, b.accuracies);
  EXPECT_DOUBLE_EQ(a.mean, mean_of(a.accuracies));
}

TEST(ParallelFor, VisitsEveryIndexOnce) {
  std::vector<std::atomic<int>> hits(37);
  parallel_for(hits.size(), 4, [&](std::size_t i) { ++hits[i]; });
  for (const auto& h : hits) EXPECT_EQ(h.load(), 1);
}

TEST(ParallelFor, PropagatesExceptions) {
  EXPECT_THROW(parallel_for(5, 2, [](std::size_t i) { if (i == 3) throw ContractError("boom"); }), ContractError);
}

TEST(CrossArch, TwoSourcesThreeTargetsGiveSixCells) {
  std::map<std::string, std::vector<data::SyntheticSet>> sets;
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;
  for (const char* src : {"convnet_lite", "mlp"}) {
    Tensor imgs({4, 1, 8, 8});
    for (double& v : imgs.data()) v = g(rng);
    sets[src].push_back(data::make_synthetic(std::move(imgs), 2, 2));
  }
  std::vector<models::ModelSpec> targets;
  for (auto arch : {models::Arch::logistic, models::Arch::mlp, models::Arch::convnet_lite}) {
    models::ModelSpec s;
    s.arch = arch;
    s.channels = 1;
    s.height = 8;
    s.width = 8;
    s.num_classes = 2;
    s.hidden = 4;
    s.conv_width = 3;
    s.conv_depth = 1;
    targets.push_back(s);
  }
  Tensor test_imgs({6, 1, 8, 8});
  for (double& v : test_imgs.data()) v = g(rng);
  const data::Batch test{test_imgs, {0, 1, 0, 1, 0, 1}, {}};
  const auto cells = cross_arch_matrix(sets, targets, test, 2, 0, quick(2), 2);
  ASSERT_EQ(cells.size(), 6u);
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& c : cells) {
    seen.insert({c.source, c.target});
    EXPECT_EQ(c.report.runs(), 2u);
  }
  EXPECT_EQ(seen.size(), 6u);
}
