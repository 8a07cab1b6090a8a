#include <gtest/gtest.h>

#include <random>

#include "gradmatch/condenser.hpp"
#include "gradmatch/errors.hpp"
#include "gradmatch/eval.hpp"
#include "gradmatch/random.hpp"

using namespace gradmatch;
using namespace gradmatch::condense;
using ad::Var;

namespace {

models::ModelSpec logistic(std::size_t dim = 2, std::size_t classes = 2) {
  models::ModelSpec s;
  s.arch = models::Arch::logistic;
  s.channels = 1;
  s.height = 1;
  s.width = dim;
  s.num_classes = classes;
  return s;
}

CondenseConfig small_config() {
  CondenseConfig c;
  c.outer_iterations = 2;
  c.inner_iterations = 3;
  c.theta_policy = ThetaPolicy::fixed(2);
  c.real_batch_per_class = 8;
  c.ipc = 2;
  return c;
}

}  // namespace

TEST(Schedule, TableValues) {
  EXPECT_EQ(zeta_schedule(0), 50u);
  EXPECT_EQ(zeta_schedule(3), 20u);
  EXPECT_EQ(zeta_schedule(4), 10u);
  EXPECT_EQ(zeta_schedule(9), 10u);
  EXPECT_EQ(zeta_schedule(10), 5u);
  EXPECT_EQ(zeta_schedule(1000), 5u);
}

TEST(Schedule, NonIncreasingAndPositive) {
  for (std::size_t t = 1; t < 100; ++t) {
    EXPECT_LE(zeta_schedule(t), zeta_schedule(t - 1));
    EXPECT_GE(zeta_schedule(t), 1u);
  }
}

TEST(UpdateCount, FixedAndScheduleAtTenInnerIterations) {
  EXPECT_EQ(count_theta_updates(10, ThetaPolicy::fixed(50)), 450u);
  EXPECT_EQ(count_theta_updates(10, ThetaPolicy::schedule()), 190u);
}

TEST(UpdateCount, SingleInnerIterationNeverUpdates) {
  for (const auto& p : {ThetaPolicy::fixed(50), ThetaPolicy::schedule(), ThetaPolicy::overfit(20)}) {
    EXPECT_EQ(count_theta_updates(1, p), 0u);
  }
}

TEST(Policy, ParseAndPrint) {
  EXPECT_EQ(ThetaPolicy::parse("fixed:50"), ThetaPolicy::fixed(50));
  EXPECT_EQ(ThetaPolicy::parse("schedule"), ThetaPolicy::schedule());
  EXPECT_EQ(ThetaPolicy::parse("overfit"), ThetaPolicy::overfit(50));
  EXPECT_EQ(ThetaPolicy::parse("overfit:7"), ThetaPolicy::overfit(7));
  EXPECT_EQ(ThetaPolicy::parse(ThetaPolicy::overfit(7).to_string()), ThetaPolicy::overfit(7));
  for (const char* bad : {"fixed", "fixed:0", "fixed:x", "overfit:0", "schedule:3", "adaptive"}) {
    EXPECT_THROW(ThetaPolicy::parse(bad), ConfigError) << bad;
  }
}

TEST(Mode, ParseAndPrint) {
  for (auto m : {MatchMode::intra, MatchMode::inter, MatchMode::interleaved, MatchMode::multi_level}) {
    EXPECT_EQ(parse_mode(to_string(m)), m);
  }
  EXPECT_THROW(parse_mode("both"), ConfigError);
}

TEST(Config, ValidateRejectsBadValues) {
  CondenseConfig c;
  c.outer_iterations = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.momentum_synthetic = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.lambda = -1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, LambdaDefaultsToClassCount) {
  CondenseConfig c;
  EXPECT_EQ(c.lambda_for(10), 10.0);
  c.lambda = 0.5;
  EXPECT_EQ(c.lambda_for(10), 0.5);
}

TEST(SyntheticStep, ZeroLearningRateLeavesSetUnchanged) {
  const auto real = data::gaussian_blobs(2, 30, 2, 3.0, 1);
  const auto spec = logistic();
  CondenseConfig cfg = small_config();
  cfg.lr_synthetic = 0.0;
  SyntheticState st{data::init_synthetic(real, 2, data::InitMode::noise, 3), {}};
  const Tensor before = st.set.images;
  Rng rng(1);
  synthetic_step(st, real, spec, models::init_params(spec, 2), cfg, 0, rng);
  EXPECT_EQ(st.set.images, before);
}

TEST(SyntheticStep, IntraEqualsMultiLevelWithZeroLambda) {
  const auto real = data::gaussian_blobs(3, 30, 4, 3.0, 1);
  const auto spec = logistic(4, 3);
  const auto theta = models::init_params(spec, 2);
  const auto init = data::init_synthetic(real, 2, data::InitMode::noise, 3);
  CondenseConfig a = small_config(), b = small_config();
  a.mode = MatchMode::intra;
  a.lambda = 7.0;  // ignored by intra
  b.mode = MatchMode::multi_level;
  b.lambda = 0.0;
  SyntheticState sa{init, {}}, sb{init, {}};
  Rng ra(9), rb(9);
  synthetic_step(sa, real, spec, theta, a, 0, ra);
  synthetic_step(sb, real, spec, theta, b, 0, rb);
  EXPECT_EQ(sa.set.images, sb.set.images);
}

TEST(SyntheticStep, InterleavedAlternatesByCounter) {
  const auto real = data::gaussian_blobs(2, 30, 2, 3.0, 1);
  const auto spec = logistic();
  CondenseConfig cfg = small_config();
  cfg.mode = MatchMode::interleaved;
  SyntheticState st{data::init_synthetic(real, 1, data::InitMode::noise, 3), {}};
  Rng rng(1);
  const auto theta = models::init_params(spec, 2);
  EXPECT_EQ(synthetic_step(st, real, spec, theta, cfg, 0, rng).mode_used, MatchMode::intra);
  EXPECT_EQ(synthetic_step(st, real, spec, theta, cfg, 1, rng).mode_used, MatchMode::inter);
  EXPECT_EQ(synthetic_step(st, real, spec, theta, cfg, 4, rng).mode_used, MatchMode::intra);
}

TEST(SyntheticStep, LabelsNeverChange) {
  const auto real = data::gaussian_blobs(3, 20, 2, 3.0, 1);
  const auto spec = logistic(2, 3);
  SyntheticState st{data::init_synthetic(real, 2, data::InitMode::noise, 3), {}};
  const auto labels = st.set.labels;
  Rng rng(1);
  CondenseConfig cfg = small_config();
  cfg.synthetic_steps = 3;
  synthetic_step(st, real, spec, models::init_params(spec, 2), cfg, 0, rng);
  EXPECT_EQ(st.set.labels, labels);
}

TEST(MatchingLoss, SyntheticGradientMatchesFiniteDifferences) {
  // Logistic model, 4 synthetic points.
  const auto spec = logistic(3, 2);
  const auto theta = models::init_params(spec, 5);
  const auto real = data::gaussian_blobs(2, 10, 3, 2.0, 4);
  const std::vector<data::Batch> rb{real.gather(real.class_index[0]), real.gather(real.class_index[1])};
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  std::vector<Tensor> s0(2, Tensor({2, 1, 1, 3}));
  for (auto& t : s0)
    for (double& v : t.data()) v = g(rng);
  const auto dist = matching::DistanceSpec::parse("d1+d2");
  std::vector<Var> leaves{Var(s0[0], true), Var(s0[1], true)};
  const auto grads = ad::grad(matching_loss(leaves, rb, spec, theta, dist, 2.0).total, leaves);
  for (std::size_t c = 0; c < 2; ++c) {
    const auto loss_at = [&](const Tensor& x) {
      std::vector<Var> v{Var(c == 0 ? x : s0[0], true), Var(c == 1 ? x : s0[1], true)};
      return matching_loss(v, rb, spec, theta, dist, 2.0).total.item();
    };
    Tensor fd(s0[c].shape());
    for (std::size_t i = 0; i < fd.numel(); ++i) {
      Tensor up = s0[c], down = s0[c];
      up.data()[i] += 1e-5;
      down.data()[i] -= 1e-5;
      fd.data()[i] = (loss_at(up) - loss_at(down)) / 2e-5;
    }
    double num = 0, den = 0;
    for (std::size_t i = 0; i < fd.numel(); ++i) {
      num += (fd[i] - grads[c].value()[i]) * (fd[i] - grads[c].value()[i]);
      den += fd[i] * fd[i];
    }
    EXPECT_LE(std::sqrt(num / den), 1e-4);
  }
}

namespace {

ThetaPhaseResult scripted(std::vector<double> losses, std::size_t cap) {
  const auto spec = logistic();
  const auto s = data::make_synthetic(Tensor::from({2, 1, 1, 2}, {1, 0, 0, 1}), 1, 2);
  CondenseConfig cfg;
  cfg.inner_iterations = 5;
  cfg.theta_policy = ThetaPolicy::overfit(cap);
  std::size_t i = 0;
  std::vector<Tensor> velocity;
  return theta_phase(s, spec, models::init_params(spec, 1), velocity, cfg, 0,
                     [&](const models::ParamSet&) { return losses.at(i++); });
}

}  // namespace

TEST(ThetaPhase, StopsAfterFirstIncrease) {
  const auto r = scripted({5.0, 4.0, 4.5}, 50);
  EXPECT_EQ(r.steps, 2u);
  EXPECT_EQ(r.validation_losses, (std::vector<double>{5.0, 4.0, 4.5}));
}

TEST(ThetaPhase, RespectsTheCap) { EXPECT_EQ(scripted({9, 8, 7, 6, 5, 4, 3, 2, 1}, 7).steps, 7u); }

TEST(ThetaPhase, ImmediateIncreaseTakesOneStep) { EXPECT_EQ(scripted({1.0, 2.0}, 50).steps, 1u); }

TEST(ThetaPhase, KeepsTheIncreasingStep) {
  const auto spec = logistic();
  const auto s = data::make_synthetic(Tensor::from({2, 1, 1, 2}, {1, 0, 0, 1}), 1, 2);
  CondenseConfig cfg;
  cfg.inner_iterations = 2;
  cfg.theta_policy = ThetaPolicy::overfit(50);
  const auto theta0 = models::init_params(spec, 1);
  std::vector<Tensor> v1, v2;
  std::size_t i = 0;
  const std::vector<double> losses{1.0, 2.0};
  const auto stopped = theta_phase(s, spec, theta0, v1, cfg, 0, [&](const auto&) { return losses.at(i++); });
  CondenseConfig one = cfg;
  one.theta_policy = ThetaPolicy::fixed(1);
  const auto single = theta_phase(s, spec, theta0, v2, one, 0, {});
  EXPECT_TRUE(stopped.theta.bit_identical(single.theta));
}

TEST(ThetaPhase, FixedPolicyTakesExactlyZetaSteps) {
  const auto spec = logistic();
  const auto s = data::make_synthetic(Tensor::from({2, 1, 1, 2}, {1, 0, 0, 1}), 1, 2);
  CondenseConfig cfg;
  cfg.inner_iterations = 12;
  cfg.theta_policy = ThetaPolicy::schedule();
  std::vector<Tensor> v;
  EXPECT_EQ(theta_phase(s, spec, models::init_params(spec, 1), v, cfg, 2, {}).steps, 30u);
  EXPECT_EQ(theta_phase(s, spec, models::init_params(spec, 1), v, cfg, 10, {}).steps, 5u);
}

TEST(ThetaPhase, SkippedAtLastInnerIteration) {
  const auto spec = logistic();
  const auto s = data::make_synthetic(Tensor::from({2, 1, 1, 2}, {1, 0, 0, 1}), 1, 2);
  CondenseConfig cfg;
  cfg.inner_iterations = 3;
  cfg.theta_policy = ThetaPolicy::fixed(5);
  std::vector<Tensor> v;
  const auto theta = models::init_params(spec, 1);
  const auto r = theta_phase(s, spec, theta, v, cfg, 2, {});
  EXPECT_EQ(r.steps, 0u);
  EXPECT_TRUE(r.theta.bit_identical(theta));
}

TEST(Condense, MinimalLoopIsOneStepNoUpdates) {
  const auto real = data::gaussian_blobs(2, 20, 2, 3.0, 1);
  CondenseConfig cfg;
  cfg.outer_iterations = 1;
  cfg.inner_iterations = 1;
  cfg.theta_policy = ThetaPolicy::fixed(50);
  const auto r = condense::condense(real, cfg, logistic());
  ASSERT_EQ(r.trace.records.size(), 1u);
  EXPECT_EQ(r.trace.records[0].theta_steps, 0u);
}

TEST(Condense, TraceHasKTimesTRecords) {
  const auto real = data::gaussian_blobs(2, 20, 2, 3.0, 1);
  std::size_t streamed = 0;
  const auto r = condense::condense(real, small_config(), logistic(), [&](const TraceRecord&) { ++streamed; });
  EXPECT_EQ(r.trace.records.size(), 6u);
  EXPECT_EQ(streamed, 6u);
  std::size_t updates = 0;
  for (const auto& rec : r.trace.records) updates += rec.theta_steps;
  EXPECT_EQ(updates, 2 * count_theta_updates(3, ThetaPolicy::fixed(2)));
}

TEST(Condense, DeterministicGivenSeed) {
  const auto real = data::gaussian_blobs(3, 20, 4, 3.0, 1);
  const auto spec = logistic(4, 3);
  const auto a = condense::condense(real, small_config(), spec), b = condense::condense(real, small_config(), spec);
  EXPECT_EQ(a.set.images, b.set.images);
  CondenseConfig other = small_config();
  other.seed = 1;
  EXPECT_NE(condense::condense(real, other, spec).set.images, a.set.images);
}

TEST(Condense, ClassMismatchIsAContractError) {
  const auto real = data::gaussian_blobs(3, 20, 2, 3.0, 1);
  EXPECT_THROW(condense::condense(real, small_config(), logistic(2, 2)), ContractError);
}

TEST(Condense, DivergenceCarriesTheTrace) {
  const auto real = data::gaussian_blobs(2, 20, 2, 3.0, 1);
  CondenseConfig cfg = small_config();
  cfg.lr_synthetic = 1e300;
  try {
    condense::condense(real, cfg, logistic());
    FAIL() << "expected divergence";
  } catch (const CondenseDivergence& e) {
    EXPECT_NE(std::string(e.what()).find("outer iteration 0"), std::string::npos);
    EXPECT_LE(e.trace().records.size(), 6u);
  }
}

TEST(Condense, OverfitCriterionRecordsValidationLosses) {
  const auto real = data::gaussian_blobs(2, 40, 2, 3.0, 1);
  CondenseConfig cfg = small_config();
  cfg.theta_policy = ThetaPolicy::overfit(4);
  cfg.validation_batch = 16;
  const auto r = condense::condense(real, cfg, logistic());
  for (const auto& rec : r.trace.records) {
    if (rec.inner + 1 < cfg.inner_iterations) {
      EXPECT_EQ(rec.validation_losses.size(), rec.theta_steps + 1);
      EXPECT_LE(rec.theta_steps, 4u);
    } else {
      EXPECT_EQ(rec.theta_steps, 0u);
    }
  }
}

TEST(Condense, BeatsUnoptimizedNoiseOnBlobs) {
  // Paired over 10 seeds: condensed set vs the noise set it started from.
  double gain = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto real = data::gaussian_blobs(2, 500, 2, 4.0, derive_seed(s, 77));
    const auto test = data::gaussian_blobs(2, 2000, 2, 4.0, derive_seed(s, 78)).all();
    CondenseConfig cfg;
    cfg.outer_iterations = 20;
    cfg.seed = s;
    const auto spec = logistic();
    const auto condensed = condense::condense(real, cfg, spec).set;
    const auto noise = data::init_synthetic(real, 1, data::InitMode::noise, derive_seed(s, 0));
    eval::TrainConfig tc;
    tc.seed = s;
    gain += eval::accuracy(spec, eval::train_from_scratch(spec, condensed.as_batch(), tc), test) -
            eval::accuracy(spec, eval::train_from_scratch(spec, noise.as_batch(), tc), test);
  }
  EXPECT_GE(gain / 10.0, 0.20);
}
