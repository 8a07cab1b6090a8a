#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradmatch/errors.hpp"
#include "gradmatch/gradcheck.hpp"
#include "gradmatch/models.hpp"

using namespace gradmatch;
using namespace gradmatch::models;
using ad::Var;

namespace {

ModelSpec small(Arch arch, std::size_t c = 3, std::size_t h = 8, std::size_t w = 8) {
  ModelSpec s;
  s.arch = arch;
  s.channels = c;
  s.height = h;
  s.width = w;
  s.num_classes = 4;
  s.hidden = 7;
  s.conv_width = 5;
  s.conv_depth = 2;
  return s;
}

Tensor random_batch(const ModelSpec& s, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  Tensor t({n, s.channels, s.height, s.width});
  for (double& v : t.data()) v = g(rng);
  return t;
}

}  // namespace

TEST(Models, ArchNamesRoundTrip) {
  for (Arch a : {Arch::logistic, Arch::mlp, Arch::convnet_lite, Arch::lenet_lite}) {
    EXPECT_EQ(parse_arch(to_string(a)), a);
  }
  EXPECT_THROW(parse_arch("resnet"), ContractError);
}

TEST(Models, LayoutIsFixedPerSpec) {
  const auto a = layout(small(Arch::convnet_lite));
  const auto b = layout(small(Arch::convnet_lite));
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].layer_id, b[i].layer_id);
    EXPECT_EQ(a[i].shape, b[i].shape);
  }
}

TEST(Models, ConvKernelsAreOutInKhKw) {
  const auto l = layout(small(Arch::convnet_lite));
  ASSERT_EQ(l[0].role, ParamRole::weight);
  EXPECT_EQ(l[0].shape, (Shape{5, 3, 3, 3}));
  EXPECT_EQ(l[0].fan_in, 27u);
  EXPECT_EQ(l[1].shape, (Shape{5}));
}

TEST(Models, MlpLayout) {
  const auto l = layout(small(Arch::mlp));
  ASSERT_EQ(l.size(), 4u);
  EXPECT_EQ(l[0].shape, (Shape{7, 192}));
  EXPECT_EQ(l[2].shape, (Shape{4, 7}));
}

TEST(Models, TooFewClassesRejected) {
  ModelSpec s = small(Arch::logistic);
  s.num_classes = 1;
  EXPECT_THROW(s.validate(), ContractError);
}

TEST(Models, ConvnetTooDeepForInputRejected) {
  ModelSpec s = small(Arch::convnet_lite, 1, 4, 4);
  s.conv_depth = 3;
  EXPECT_THROW(s.validate(), ContractError);
}

TEST(Init, KaimingStddevForFanIn100) {
  ModelSpec s;
  s.arch = Arch::logistic;
  s.channels = 1;
  s.height = 10;
  s.width = 10;
  s.num_classes = 100;  // 10^4 weights
  const auto p = init_params(s, 3);
  const Tensor& w = p[0].value.value();
  ASSERT_EQ(w.numel(), 10000u);
  double sum = 0, sq = 0;
  for (double v : w.data()) sum += v;
  const double mean = sum / 1e4;
  for (double v : w.data()) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / (1e4 - 1));
  EXPECT_NEAR(sd, std::sqrt(0.02), 0.05 * std::sqrt(0.02));
}

TEST(Init, BiasesAreZero) {
  const auto p = init_params(small(Arch::lenet_lite, 1, 28, 28), 1);
  for (const auto& e : p.entries()) {
    if (e.role != ParamRole::bias) continue;
    for (double v : e.value.value().data()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Init, SameSeedSameParameters) {
  const auto s = small(Arch::convnet_lite);
  EXPECT_TRUE(init_params(s, 9).bit_identical(init_params(s, 9)));
  EXPECT_FALSE(init_params(s, 9).bit_identical(init_params(s, 10)));
}

TEST(Forward, ZeroLogisticGivesLogC) {
  const ModelSpec s = small(Arch::logistic);
  auto p = init_params(s, 0);
  std::vector<Tensor> zeros;
  for (const auto& e : p.entries()) zeros.emplace_back(e.value.shape(), 0.0);
  p = p.with_values(zeros);
  const std::vector<int> labels{0, 1, 2, 3, 1};
  const Var loss = ad::softmax_cross_entropy(forward(s, p, Var(random_batch(s, 5, 1))), labels);
  EXPECT_NEAR(loss.item(), std::log(4.0), 1e-12);
}

TEST(Forward, ConvnetOnMnistShapedInput) {
  ModelSpec s;  // convnet_lite, 1x28x28, 10 classes
  const auto out = forward(s, init_params(s, 0), Var(Tensor({1, 1, 28, 28}, 0.5)));
  EXPECT_EQ(out.shape(), (Shape{1, 10}));
}

TEST(Forward, LenetOnMnistShapedInput) {
  ModelSpec s;
  s.arch = Arch::lenet_lite;
  const auto out = forward(s, init_params(s, 0), Var(Tensor({2, 1, 28, 28}, 0.5)));
  EXPECT_EQ(out.shape(), (Shape{2, 10}));
}

TEST(Forward, FeaturesAreThePenultimateActivation) {
  const ModelSpec s = small(Arch::mlp);
  const auto f = features(s, init_params(s, 0), Var(random_batch(s, 3, 2)));
  EXPECT_EQ(f.shape(), (Shape{3, 7}));
}

TEST(Forward, WrongInputShapeThrows) {
  const ModelSpec s = small(Arch::mlp);
  EXPECT_THROW(forward(s, init_params(s, 0), Var(Tensor({2, 3, 8, 7}))), DimensionError);
}

class BatchGradient : public ::testing::TestWithParam<Arch> {};

TEST_P(BatchGradient, InputGradientMatchesFiniteDifferences) {
  const ModelSpec s = GetParam() == Arch::lenet_lite ? small(Arch::lenet_lite, 1, 12, 12) : small(GetParam());
  const auto params = init_params(s, 4);
  const std::vector<int> labels{1, 3};
  const Tensor x = random_batch(s, 2, 5);
  const Tensor inputs[] = {x};
  const double err = ad::check_gradient(
      [&](std::span<const Var> v) { return ad::softmax_cross_entropy(forward(s, params, v[0]), labels); }, inputs);
  EXPECT_LE(err, 1e-5);
}

TEST_P(BatchGradient, ParameterGradientMatchesFiniteDifferences) {
  const ModelSpec s = GetParam() == Arch::lenet_lite ? small(Arch::lenet_lite, 1, 12, 12) : small(GetParam());
  const auto params = init_params(s, 4);
  const std::vector<int> labels{0, 2};
  const Tensor x = random_batch(s, 2, 6);
  const auto values = params.values();
  const double err = ad::check_gradient(
      [&](std::span<const Var> v) {
        std::vector<ParamEntry> entries;
        for (std::size_t i = 0; i < v.size(); ++i) entries.push_back({params[i].layer_id, params[i].role, v[i]});
        return ad::softmax_cross_entropy(forward(s, ParamSet(entries), Var(x)), labels);
      },
      values, 1e-6);  // a 1e-5 step straddles a ReLU kink in the conv instance
  EXPECT_LE(err, 1e-5);
}

INSTANTIATE_TEST_SUITE_P(AllArchs, BatchGradient,
                         ::testing::Values(Arch::logistic, Arch::mlp, Arch::convnet_lite, Arch::lenet_lite),
                         [](const auto& info) { return std::string(to_string(info.param)); });
