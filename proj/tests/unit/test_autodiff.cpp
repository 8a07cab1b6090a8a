#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradmatch/autodiff.hpp"
#include "gradmatch/errors.hpp"
#include "gradmatch/gradcheck.hpp"

using namespace gradmatch;
using namespace gradmatch::ad;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = u(rng);
  return t;
}

// Values pushed at least `gap` away from zero so relu stays off its kink.
Tensor away_from_zero(Tensor t, double gap = 1e-3) {
  for (double& v : t.data()) {
    if (std::abs(v) < gap) v = v < 0 ? -gap - 0.1 : gap + 0.1;
  }
  return t;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Var eye(Tensor::from({2, 2}, {1, 0, 0, 1}));
  Var m(Tensor::from({2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(matmul(eye, m).value(), m.value());
}

TEST(Matmul, RowTimesColumnIsDotProduct) {
  Var a(Tensor::from({1, 2}, {1, 2}));
  Var b(Tensor::from({2, 1}, {3, 4}));
  EXPECT_DOUBLE_EQ(matmul(a, b).item(), 11.0);
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  const Tensor inputs[] = {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)};
  const double err = check_gradient([](std::span<const Var> v) { return sum(matmul(v[0], v[1])); }, inputs);
  EXPECT_LE(err, 1e-6);
}

TEST(Matmul, SumGradientIsRowSumsOfB) {
  Var a(Tensor::from({2, 2}, {1, 2, 3, 4}), true);
  Var b(Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}));
  const Var inputs[] = {a};
  const Tensor g = grad(sum(matmul(a, b)), inputs)[0].value();
  EXPECT_EQ(g, Tensor::from({2, 2}, {6, 15, 6, 15}));
}

TEST(Matmul, ShapeMismatchReportsBothShapes) {
  Var a(Tensor({2, 3}));
  Var b(Tensor({2, 3}));
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2, 3] x [2, 3]"), std::string::npos);
  }
}

TEST(Conv2d, OnesKernelOverOnesImage) {
  Var x(Tensor({1, 1, 3, 3}, 1.0));
  Var k(Tensor({1, 1, 2, 2}, 1.0));
  const Var y = conv2d(x, k);
  EXPECT_EQ(y.value(), Tensor({1, 1, 2, 2}, 4.0));
}

TEST(Conv2d, UnitOneByOneKernelIsIdentity) {
  std::mt19937_64 rng(3);
  Var x(random_tensor({2, 1, 4, 5}, rng));
  Var k(Tensor({1, 1, 1, 1}, 1.0));
  EXPECT_EQ(conv2d(x, k).value(), x.value());
}

TEST(Conv2d, OutputSizeFollowsStrideAndPadding) {
  Var x(Tensor({1, 2, 7, 6}));
  Var k(Tensor({3, 2, 3, 3}));
  EXPECT_EQ(conv2d(x, k, {.stride = 2, .padding = 1}).shape(), (Shape{1, 3, 4, 3}));
}

TEST(Conv2d, KernelGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  for (Conv2dGeometry geo : {Conv2dGeometry{1, 0}, Conv2dGeometry{1, 1}, Conv2dGeometry{2, 1}}) {
    const Tensor inputs[] = {random_tensor({2, 2, 5, 5}, rng), random_tensor({3, 2, 3, 3}, rng)};
    const double err = check_gradient(
        [geo](std::span<const Var> v) {
          const Var y = conv2d(v[0], v[1], geo);
          return sum(mul(y, y));
        },
        inputs);
    EXPECT_LE(err, 1e-6) << "stride " << geo.stride << " padding " << geo.padding;
  }
}

TEST(Conv2d, KernelLargerThanPaddedInputThrows) {
  Var x(Tensor({1, 1, 2, 2}));
  Var k(Tensor({1, 1, 3, 3}));
  EXPECT_THROW(conv2d(x, k), DimensionError);
  EXPECT_NO_THROW(conv2d(x, k, {.stride = 1, .padding = 1}));
}

TEST(Conv2d, DoubleBackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  const Tensor kernel = random_tensor({2, 1, 3, 3}, rng);
  const Tensor x = random_tensor({1, 1, 5, 5}, rng);
  const Tensor v = random_tensor({1, 1, 5, 5}, rng);
  // f(x) = sum(relu-free quadratic in x) so the Hessian is nonzero.
  const double err = check_second_order(
      [&](std::span<const Var> a) {
        const Var y = conv2d(a[0], Var(kernel), {.stride = 1, .padding = 1});
        return sum(mul(mul(y, y), y));
      },
      x, v);
  EXPECT_LE(err, 1e-4);
}

TEST(Pointwise, ReluZeroesNonPositive) {
  Var x(Tensor::from({3}, {-1, 0, 2}));
  EXPECT_EQ(relu(x).value(), Tensor::from({3}, {0, 0, 2}));
}

TEST(Pointwise, ReluSubgradientAtZeroIsZero) {
  Var x(Tensor::from({2}, {0.0, 1.0}), true);
  const Var inputs[] = {x};
  EXPECT_EQ(grad(sum(relu(x)), inputs)[0].value(), Tensor::from({2}, {0.0, 1.0}));
}

TEST(Pointwise, RowNormOfThreeFour) {
  Var x(Tensor::from({1, 2}, {3, 4}));
  EXPECT_DOUBLE_EQ(l2_norm_rows(x).item(), 5.0);
}

TEST(Pointwise, AvgPoolTakesWindowMean) {
  Var x(Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4}));
  EXPECT_DOUBLE_EQ(avg_pool2d(x, 2).item(), 2.5);
}

TEST(Pointwise, AvgPoolFloorsRaggedEdges) {
  Var x(Tensor({1, 1, 7, 7}, 1.0), true);
  const Var y = avg_pool2d(x, 2);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  const Var inputs[] = {x};
  const Tensor g = grad(sum(y), inputs)[0].value();
  EXPECT_DOUBLE_EQ(g[6 * 7 + 6], 0.0);  // last row/col unused
  EXPECT_DOUBLE_EQ(g[0], 0.25);
}

TEST(Pointwise, SqrtAtZeroHasZeroDerivative) {
  Var x(Tensor::from({2}, {0.0, 4.0}), true);
  const Var inputs[] = {x};
  EXPECT_EQ(grad(sum(ad::sqrt(x)), inputs)[0].value(), Tensor::from({2}, {0.0, 0.25}));
}

TEST(Pointwise, EmptyReductionThrows) {
  Var x(Tensor(Shape{0}));
  EXPECT_THROW(sum(x), ContractError);
  EXPECT_THROW(mean(x), ContractError);
}

TEST(Pointwise, NonFiniteOutputRaises) {
  Var a(Tensor::from({1}, {1.0}));
  Var b(Tensor::from({1}, {0.0}));
  EXPECT_THROW(ad::div(a, b), NumericError);
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  Var logits(Tensor({1, 10}, 0.0));
  const int labels[] = {3};
  EXPECT_NEAR(softmax_cross_entropy(logits, labels).item(), std::log(10.0), 1e-12);
}

TEST(CrossEntropy, SaturatedCorrectLogitGivesZeroLoss) {
  Tensor t({1, 5}, 0.0);
  t[2] = 1000.0;
  const int labels[] = {2};
  EXPECT_LE(softmax_cross_entropy(Var(t), labels).item(), 1e-9);
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOnehotOverN) {
  std::mt19937_64 rng(1);
  const int labels[] = {0, 2, 1, 2};
  const Tensor inputs[] = {random_tensor({4, 3}, rng, -2, 2)};
  EXPECT_LE(check_gradient([&](std::span<const Var> v) { return softmax_cross_entropy(v[0], labels); }, inputs), 1e-6);

  Var x(inputs[0], true);
  const Var xs[] = {x};
  const Tensor g = grad(softmax_cross_entropy(x, labels), xs)[0].value();
  const Tensor p = softmax_rows(Var(inputs[0])).value();
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      const double onehot = labels[i] == static_cast<int>(j) ? 1.0 : 0.0;
      EXPECT_NEAR(g[i * 3 + j], (p[i * 3 + j] - onehot) / 4.0, 1e-15);
    }
}

TEST(CrossEntropy, OutOfRangeLabelThrows) {
  Var logits(Tensor({2, 3}));
  const int labels[] = {0, 3};
  EXPECT_THROW(softmax_cross_entropy(logits, labels), ContractError);
}

TEST(Grad, CubeAndItsSecondDerivative) {
  Var x(Tensor::scalar(2.0), true);
  const Var xs[] = {x};
  const Var y = mul(mul(x, x), x);
  const Var dy = grad(y, xs, /*create_graph=*/true)[0];
  EXPECT_DOUBLE_EQ(dy.item(), 12.0);
  EXPECT_DOUBLE_EQ(grad(dy, xs)[0].item(), 12.0);
}

TEST(Grad, SumOfSquares) {
  Var x(Tensor::from({2}, {1, 2}), true);
  const Var xs[] = {x};
  EXPECT_EQ(grad(sum(mul(x, x)), xs)[0].value(), Tensor::from({2}, {2, 4}));
}

TEST(Grad, UnreachableInputIsGraphError) {
  Var x(Tensor::scalar(1.0), true);
  Var y(Tensor::scalar(2.0), true);
  const Var ys[] = {y};
  EXPECT_THROW(grad(mul(x, x), ys), GraphError);
}

TEST(Grad, NonScalarOutputIsContractError) {
  Var x(Tensor::from({2}, {1, 2}), true);
  const Var xs[] = {x};
  EXPECT_THROW(grad(mul(x, x), xs), ContractError);
}

TEST(Grad, WithoutCreateGraphResultIsConstant) {
  Var x(Tensor::scalar(3.0), true);
  const Var xs[] = {x};
  EXPECT_FALSE(grad(mul(x, x), xs)[0].requires_grad());
  EXPECT_TRUE(grad(mul(x, x), xs, true)[0].requires_grad());
}

TEST(Grad, NoGradGuardStopsRecording) {
  Var x(Tensor::scalar(3.0), true);
  NoGradGuard guard;
  EXPECT_FALSE(mul(x, x).requires_grad());
}

TEST(Grad, GraphOfGradOutputsIsAcyclic) {
  Var x(Tensor::from({3}, {0.5, -1.0, 2.0}), true);
  const Var xs[] = {x};
  Var g = grad(sum(mul(mul(x, x), x)), xs, true)[0];
  Var gg = grad(sum(mul(g, g)), xs, true)[0];
  // Walk every node reachable from gg; a cycle would revisit a node on the
  // current path.
  std::vector<std::pair<Var, std::size_t>> path{{gg, 0}};
  std::vector<const void*> on_path{gg.id()};
  std::size_t visited = 0;
  while (!path.empty()) {
    auto& [node, next] = path.back();
    const auto parents = node.parents();
    if (next < parents.size()) {
      const Var p = parents[next++];
      ASSERT_EQ(std::find(on_path.begin(), on_path.end(), p.id()), on_path.end());
      on_path.push_back(p.id());
      path.emplace_back(p, 0);
      ++visited;
    } else {
      on_path.pop_back();
      path.pop_back();
    }
  }
  EXPECT_GT(visited, 0u);
}

TEST(Grad, MetaGradientOfLinearModelMatchesFiniteDifferences) {
  // d(grad_W L(S, W), g_T) differentiated w.r.t. the synthetic inputs S.
  std::mt19937_64 rng(42);
  const Tensor w = random_tensor({3, 4}, rng);
  const Tensor target = random_tensor({3, 4}, rng, -0.2, 0.2);
  const int labels[] = {0, 1, 2, 1};
  auto matching_loss = [&](std::span<const Var> s) {
    const Var wv(w, true);
    const Var ws[] = {wv};
    const Var logits = matmul(s[0], transpose(wv));
    const Var g = grad(softmax_cross_entropy(logits, labels), ws, /*create_graph=*/true)[0];
    const Var diff = sub(g, Var(target));
    const Var cosine = div(row_dot(g, Var(target)), mul(l2_norm_rows(g), l2_norm_rows(Var(target))));
    return add(sum(l2_norm_rows(diff)), sum(neg(cosine)));
  };
  const Tensor s[] = {random_tensor({4, 4}, rng)};
  EXPECT_LE(check_gradient(matching_loss, s), 1e-4);
}

TEST(FiniteDiff, SumGivesOnes) {
  std::mt19937_64 rng(9);
  const Tensor x = random_tensor({2, 3}, rng);
  auto f = [](const Tensor& t) {
    double s = 0;
    for (double v : t.data()) s += v;
    return s;
  };
  const Tensor g = finite_diff_gradient(f, x);
  for (double v : g.data()) EXPECT_NEAR(v, 1.0, 1e-9);
}

TEST(FiniteDiff, SquareAtThree) {
  const Tensor g = finite_diff_gradient([](const Tensor& t) { return t[0] * t[0]; }, Tensor::from({1}, {3.0}), 1e-5);
  EXPECT_NEAR(g[0], 6.0, 1e-9);
}

TEST(FiniteDiff, NonFiniteValueNamesTheEntry) {
  auto f = [](const Tensor& t) { return t[1] > 1.0 ? std::nan("") : 0.0; };
  try {
    finite_diff_gradient(f, Tensor::from({2}, {0.0, 1.0}));
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("entry 1"), std::string::npos);
  }
}

TEST(FiniteDiff, AgreesWithAutodiffOnTwoLayerMlp) {
  std::mt19937_64 rng(21);
  const int labels[] = {1, 0, 2};
  const Tensor inputs[] = {random_tensor({3, 5}, rng), away_from_zero(random_tensor({6, 5}, rng)),
                           random_tensor({3, 6}, rng)};
  auto loss = [&](std::span<const Var> v) {
    const Var h = relu(matmul(v[0], transpose(v[1])));
    return softmax_cross_entropy(matmul(h, transpose(v[2])), labels);
  };
  EXPECT_LE(check_gradient(loss, inputs), 1e-6);
}

TEST(Precision, Float32ModeRoundsOutputs) {
  Var a(Tensor::scalar(1.0 / 3.0));
  PrecisionGuard guard(Precision::f32);
  const double v = scale(a, 1.0).item();
  EXPECT_EQ(v, static_cast<double>(static_cast<float>(1.0 / 3.0)));
}

TEST(Determinism, RepeatedEvaluationIsBitIdentical) {
  std::mt19937_64 rng(4);
  const Tensor x = random_tensor({2, 3, 6, 6}, rng);
  const Tensor k = random_tensor({4, 3, 3, 3}, rng);
  const Tensor a = conv2d(Var(x), Var(k), {1, 1}).value();
  const Tensor b = conv2d(Var(x), Var(k), {1, 1}).value();
  EXPECT_EQ(a, b);
}
