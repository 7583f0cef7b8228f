#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "levasa/diffcore.hpp"
#include "grad_cases.hpp"
#include "oracles.hpp"

using namespace levasa;

using grad_cases::Builder;
using grad_cases::fd_error;
using grad_cases::rand_t;

TEST(Forward, AffineWithIdentityWeightsIsIdentity) {
  Graph g;
  Var x = g.constant(Tensor::matrix(2, 3, {1, -2, 3, 0.5, 0, -1}));
  Var w = g.constant(Tensor::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
  Var b = g.constant(Tensor::vector({0, 0, 0}));
  const Var in[] = {x};
  const Var params[] = {w, b};
  EXPECT_EQ(g.value(g.forward(OpKind::affine, in, params)), g.value(x));
}

TEST(Forward, PointwiseAtZero) {
  Graph g;
  Var z = g.constant(Tensor::vector({0.0}));
  EXPECT_EQ(g.value(g.tanh(z)).item(), 0.0);
  EXPECT_EQ(g.value(g.sigmoid(z)).item(), 0.5);
  EXPECT_EQ(g.value(g.relu(z)).item(), 0.0);
}

TEST(Forward, SoftmaxOfUniformVector) {
  Graph g;
  Var x = g.constant(Tensor::vector({3, 3, 3, 3}));
  const Var in[] = {x};
  for (double p : g.value(g.forward(OpKind::softmax, in)).data()) EXPECT_DOUBLE_EQ(p, 0.25);
}

TEST(Forward, AffineShapeMismatchNamesBothShapes) {
  Graph g;
  Var x = g.constant(Tensor({2, 3}));
  Var w = g.constant(Tensor({4, 5}));
  Var b = g.constant(Tensor({4}));
  try {
    g.affine(x, w, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4x5]"), std::string::npos) << msg;
  }
}

TEST(Backward, SumGivesOnes) {
  Graph g;
  Var x = g.parameter(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  g.backward(g.sum(x));
  const Tensor gr = g.grad(x);
  for (double d : gr.data()) EXPECT_EQ(d, 1.0);
}

TEST(Backward, LinearAffineWeightGradientIsInput) {
  Graph g;
  Var x = g.constant(Tensor::matrix(1, 3, {0.5, -1.5, 2.0}));
  Var w = g.parameter(Tensor::matrix(1, 3, {0.1, 0.2, 0.3}));
  Var b = g.parameter(Tensor::vector({0.0}));
  g.backward(g.sum(g.affine(x, w, b)));
  EXPECT_EQ(g.grad(w), Tensor::matrix(1, 3, {0.5, -1.5, 2.0}));
  EXPECT_EQ(g.grad(b).item(), 1.0);
}

TEST(Backward, NonScalarLossIsRejected) {
  Graph g;
  Var x = g.parameter(Tensor::vector({1, 2}));
  EXPECT_THROW(g.backward(g.tanh(x)), ShapeError);
}

TEST(Backward, RepeatedCallsAccumulateUntilZeroed) {
  Graph g;
  Var x = g.parameter(Tensor::vector({1, 2}));
  Var loss = g.sum(g.scale(x, 3.0));
  g.backward(loss);
  g.backward(loss);
  EXPECT_EQ(g.grad(x), Tensor::vector({6, 6}));
  g.zero_grad();
  g.backward(loss);
  EXPECT_EQ(g.grad(x), Tensor::vector({3, 3}));
}

TEST(Backward, FanOutSumsBranchGradients) {
  SeededRng rng(11);
  const Tensor x0 = rand_t({2, 3}, rng);
  auto branch = [&](int k, Graph& g, Var y) -> Var {
    switch (k) {
      case 0: return g.sum(g.tanh(y));
      case 1: return g.sum(g.scale(g.sigmoid(y), -2.0));
      default: return g.mse(y, Tensor({2, 3}, 0.3));
    }
  };
  Tensor expected({2, 3});
  for (int k = 0; k < 3; ++k) {
    Graph g;
    Var x = g.parameter(x0);
    g.backward(branch(k, g, g.scale(x, 1.5)));
    const Tensor gr = g.grad(x);
    for (std::size_t i = 0; i < gr.size(); ++i) expected[i] += gr[i];
  }
  Graph g;
  Var x = g.parameter(x0);
  Var y = g.scale(x, 1.5);
  g.backward(g.add(g.add(branch(0, g, y), branch(1, g, y)), branch(2, g, y)));
  const Tensor got = g.grad(x);
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], expected[i], 1e-14);
}

TEST(Backward, RandomTwoLayerNetMatchesFiniteDifferences) {
  SeededRng rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor target = rand_t({4, 2}, rng);
    const double err = fd_error(
        [&](Graph& g, const std::vector<Var>& v) {
          Var h = g.tanh(g.affine(v[0], v[1], v[2]));
          return g.mse(g.affine(h, v[3], v[4]), target);
        },
        {rand_t({4, 3}, rng), rand_t({5, 3}, rng), rand_t({5}, rng), rand_t({2, 5}, rng), rand_t({2}, rng)});
    EXPECT_LT(err, 1e-4);
  }
}

TEST(Backward, EveryOpMatchesFiniteDifferencesAtTwentyPoints) {
  SeededRng rng(99);
  for (const auto& c : grad_cases::op_cases(rng)) {
    double worst = 0;
    for (int p = 0; p < 20; ++p) {
      auto [build, leaves] = c.make();
      worst = std::max(worst, fd_error(build, leaves));
    }
    EXPECT_LT(worst, 1e-4) << c.name;
  }
}

TEST(Reparameterize, TinyVarianceReturnsMean) {
  Graph g;
  SeededRng rng(1);
  Var mu = g.constant(Tensor::vector({0.3, -1.2}));
  Var lv = g.constant(Tensor::vector({-60, -60}));
  const Tensor z = g.value(g.reparameterize(mu, lv, rng));
  EXPECT_NEAR(z[0], 0.3, 1e-12);
  EXPECT_NEAR(z[1], -1.2, 1e-12);
}

TEST(Reparameterize, ZeroNoiseReturnsMeanAndGradientSkipsNoise) {
  Graph g;
  Var mu = g.parameter(Tensor::vector({0.5, 2.0}));
  Var lv = g.parameter(Tensor::vector({0.1, -0.3}));
  Var z = g.reparameterize(mu, lv, Tensor::vector({0, 0}));
  EXPECT_EQ(g.value(z), Tensor::vector({0.5, 2.0}));
  g.backward(g.sum(z));
  EXPECT_EQ(g.grad(mu), Tensor::vector({1, 1}));
  EXPECT_EQ(g.grad(lv), Tensor::vector({0, 0}));
}

TEST(Reparameterize, StandardNormalMoments) {
  Graph g;
  SeededRng rng(2024);
  const std::size_t n = 1000000;
  const Tensor z = g.value(g.reparameterize(g.constant(Tensor({n})), g.constant(Tensor({n})), rng));
  double m = 0, v = 0;
  for (double x : z.data()) m += x;
  m /= n;
  for (double x : z.data()) v += (x - m) * (x - m);
  v /= n;
  EXPECT_NEAR(m, 0.0, 0.005);
  EXPECT_NEAR(v, 1.0, 0.01);
}

TEST(Reparameterize, ShapeMismatchThrows) {
  Graph g;
  SeededRng rng(0);
  EXPECT_THROW(g.reparameterize(g.constant(Tensor({2})), g.constant(Tensor({3})), rng), ShapeError);
}

TEST(KlDiagGaussian, ClosedFormExamples) {
  Graph g;
  EXPECT_EQ(g.value(g.kl_diag_gaussian(g.constant(Tensor({1, 4})), g.constant(Tensor({1, 4})))).item(), 0.0);
  EXPECT_DOUBLE_EQ(g.value(g.kl_diag_gaussian(g.constant(Tensor::vector({1})), g.constant(Tensor::vector({0})))).item(),
                   0.5);
}

TEST(KlDiagGaussian, NonNegativeAndMatchesMonteCarlo) {
  SeededRng rng(8);
  for (int t = 0; t < 3; ++t) {
    std::vector<double> mu(3), lv(3);
    for (auto& x : mu) x = rng.uniform(-1, 1);
    for (auto& x : lv) x = rng.uniform(-1, 1);
    Graph g;
    const double kl = g.value(g.kl_diag_gaussian(g.constant(Tensor::vector(mu)), g.constant(Tensor::vector(lv)))).item();
    EXPECT_GE(kl, 0.0);
    EXPECT_NEAR(kl, oracle::monte_carlo_kl(mu, lv, 200000, 17 + t), 0.03);
  }
}

TEST(PointwiseLoss, ClosedFormExamples) {
  Graph g;
  const Tensor x = Tensor::vector({0.2, -0.7});
  EXPECT_EQ(g.value(g.loss(LossKind::mse, g.constant(x), x)).item(), 0.0);
  EXPECT_NEAR(g.value(g.loss(LossKind::bce, g.constant(Tensor::vector({0.5})), Tensor::vector({1}))).item(),
              std::numbers::ln2, 1e-15);
  EXPECT_NEAR(g.value(g.loss(LossKind::softmax_ce, g.constant(Tensor::matrix(1, 2, {0, 0})), Tensor::vector({0}))).item(),
              std::numbers::ln2, 1e-15);
}

TEST(PointwiseLoss, BceRejectsPredictionsOutsideOpenInterval) {
  Graph g;
  EXPECT_THROW(g.bce(g.constant(Tensor::vector({1.0})), Tensor::vector({1})), Error);
  EXPECT_THROW(g.bce(g.constant(Tensor::vector({0.0})), Tensor::vector({0})), Error);
  EXPECT_THROW(g.bce(g.constant(Tensor::vector({0.5})), Tensor::vector({1.5})), Error);
}

TEST(PointwiseLoss, BceWithLogitsAgreesWithSigmoidThenBce) {
  SeededRng rng(4);
  const Tensor logits = rand_t({3, 3}, rng, -4, 4), target = rand_t({3, 3}, rng, 0, 1);
  Graph g;
  const double fused = g.value(g.bce_with_logits(g.constant(logits), target)).item();
  const double split = g.value(g.bce(g.sigmoid(g.constant(logits)), target)).item();
  EXPECT_NEAR(fused, split, 1e-13);
}

TEST(PointwiseLoss, SoftmaxCeRejectsBadClassIndex) {
  Graph g;
  EXPECT_THROW(g.softmax_ce(g.constant(Tensor::matrix(1, 3, {0, 0, 0})), Tensor::vector({3})), Error);
  EXPECT_THROW(g.softmax_ce(g.constant(Tensor::matrix(2, 3, {0, 0, 0, 0, 0, 0})), Tensor::vector({1})), ShapeError);
}
