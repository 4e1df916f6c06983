#include <gtest/gtest.h>

#include "skimba/diffusion.hpp"
#include "support.hpp"

using namespace skimba;
using skimba::testing::check_gradients;
using skimba::testing::leaves_of;
using skimba::testing::perturb_params;
using skimba::testing::random_tensor;

TEST(Schedule, DefaultChainEndsNearPureNoise) {
  const NoiseSchedule s = NoiseSchedule::linear();
  ASSERT_EQ(s.steps, 100u);
  EXPECT_LT(s.alpha_bar(100), 0.05);
  EXPECT_EQ(s.alpha_bar(0), 1.0);
  EXPECT_NEAR(s.beta(1), 1e-3, 1e-15);
  EXPECT_NEAR(s.beta(100), 0.2, 1e-15);
}

TEST(Schedule, Invariants) {
  for (std::size_t steps : {1, 10, 100, 1000}) {
    const NoiseSchedule s = NoiseSchedule::linear(steps);
    double prev_ab = 1.0, prev_beta = 0.0;
    for (std::size_t t = 1; t <= steps; ++t) {
      EXPECT_GT(s.beta(t), 0.0);
      EXPECT_LT(s.beta(t), 1.0);
      EXPECT_GE(s.beta(t), prev_beta);
      EXPECT_DOUBLE_EQ(s.alpha(t), 1.0 - s.beta(t));
      EXPECT_NEAR(s.alpha_bar(t), prev_ab * s.alpha(t), 1e-15);
      EXPECT_LT(s.alpha_bar(t), prev_ab);
      prev_ab = s.alpha_bar(t);
      prev_beta = s.beta(t);
    }
  }
  const NoiseSchedule s = NoiseSchedule::linear(10);
  EXPECT_THROW(s.beta(0), std::out_of_range);
  EXPECT_THROW(s.alpha_bar(11), std::out_of_range);
  EXPECT_THROW(NoiseSchedule::linear(0), std::invalid_argument);
}

TEST(ForwardDiffuse, IsLinearInSignalAndNoise) {
  const NoiseSchedule s = NoiseSchedule::linear();
  Rng rng(1);
  const Tensor<double> x0 = random_tensor({2, 3, 3, 2}, rng), eps = random_tensor({2, 3, 3, 2}, rng);
  for (std::size_t t : {1, 37, 100}) {
    const Tensor<double> xt = forward_diffuse(s, x0, t, eps);
    const double a = std::sqrt(s.alpha_bar(t)), b = std::sqrt(1.0 - s.alpha_bar(t));
    for (std::size_t i = 0; i < xt.size(); ++i) EXPECT_NEAR(xt[i], a * x0[i] + b * eps[i], 1e-14);
  }
  EXPECT_THROW(forward_diffuse(s, x0, 1, Tensor<double>::zeros({2})), ShapeError);
}

TEST(DenoiseLoss, OracleScoresZero) {
  const NoiseSchedule s = NoiseSchedule::linear();
  Rng rng(2);
  const Tensor<double> x0 = random_tensor({3, 4, 4, 2}, rng);
  const auto oracle = memorized_oracle(s, x0);
  for (int rep = 0; rep < 50; ++rep) EXPECT_LT(denoise_loss<double>(oracle, s, x0, {}, rng).item(), 1e-20);
}

TEST(DenoiseLoss, ZeroPredictorScoresAboutOne) {
  const NoiseSchedule s = NoiseSchedule::linear();
  Rng rng(3);
  const Tensor<double> x0 = random_tensor({4, 4, 4, 2}, rng);
  EpsilonModel<double> zero = [](const Tensor<double>& x, std::size_t, const Tensor<double>&) {
    return Tensor<double>::zeros(x.shape());
  };
  double total = 0;
  const int n = 400;
  for (int rep = 0; rep < n; ++rep) total += denoise_loss(zero, s, x0, {}, rng).item();
  EXPECT_NEAR(total / n, 1.0, 0.05);
}

TEST(Sampling, ShapeEvaluationCountAndDeterminism) {
  const NoiseSchedule s = NoiseSchedule::linear();
  EpsilonModel<float> zero = [](const Tensor<float>& x, std::size_t, const Tensor<float>&) {
    return Tensor<float>::zeros(x.shape());
  };
  SampleStats stats;
  Rng a(4), b(4);
  const Tensor<float> x = sample(zero, s, {2, 3, 3, 1}, {}, a, &stats);
  const Tensor<float> y = sample(zero, s, {2, 3, 3, 1}, {}, b);
  EXPECT_EQ(x.shape(), (Shape{2, 3, 3, 1}));
  EXPECT_EQ(stats.evaluations, 100u);
  EXPECT_TRUE(std::equal(x.data().begin(), x.data().end(), y.data().begin()));
}

TEST(Sampling, OracleRecoversTheMemorisedSample) {
  const NoiseSchedule s = NoiseSchedule::linear();
  Rng rng(5);
  const Tensor<double> x0 = random_tensor({4, 8, 8, 2}, rng, 1.5);
  const Tensor<double> out = sample(memorized_oracle(s, x0), s, x0.shape(), {}, rng);
  double se = 0;
  for (std::size_t i = 0; i < out.size(); ++i) se += (out[i] - x0[i]) * (out[i] - x0[i]);
  EXPECT_LT(std::sqrt(se / double(out.size())), 0.1);
}

TEST(Sampling, DoesNotRecordGradients) {
  const NoiseSchedule s = NoiseSchedule::linear(5);
  Tensor<double> w = Tensor<double>::full({1}, 0.5, true);
  EpsilonModel<double> model = [&w](const Tensor<double>& x, std::size_t, const Tensor<double>&) {
    return mul(x, w);
  };
  Rng rng(6);
  const Tensor<double> out = sample(model, s, {1, 2, 2, 1}, {}, rng);
  EXPECT_FALSE(out.requires_grad());
}

TEST(TimestepEmbedding, SinCosPairs) {
  const auto e = timestep_embedding<double>(7, 8);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(e[i] * e[i] + e[4 + i] * e[4 + i], 1.0, 1e-12);
  EXPECT_DOUBLE_EQ(e[0], std::sin(7.0));
  EXPECT_NE(timestep_embedding<double>(3, 8), timestep_embedding<double>(4, 8));
}

TEST(MscbFuse, OutputDependsOnTimestep) {
  ParamStore<float> store;
  Rng rng(7);
  MscbFuse<float> fuse(Scope<float>(store, rng), 4, 3, 8, true);
  const Tensor<float> x = random_tensor<float>({4, 4, 4, 2}, rng), c = random_tensor<float>({3, 4, 4, 2}, rng);
  const Tensor<float> a = fuse(x, c, 10), b = fuse(x, c, 11);
  EXPECT_EQ(a.shape(), (Shape{8, 4, 4, 2}));
  double diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += std::abs(a[i] - b[i]);
  EXPECT_GT(diff, 1e-4);
}

TEST(MscbFuse, RejectsMismatchedCondition) {
  ParamStore<float> store;
  Rng rng(8);
  MscbFuse<float> fuse(Scope<float>(store, rng), 4, 3, 8, false);
  EXPECT_THROW(fuse(Tensor<float>::zeros({4, 4, 4, 2}), Tensor<float>::zeros({3, 2, 2, 1}), 1), ShapeError);
  EXPECT_THROW(fuse(Tensor<float>::zeros({4, 4, 4, 2}), Tensor<float>::zeros({2, 4, 4, 2}), 1), ShapeError);
}

TEST(MscbFuse, GradientMatchesFiniteDifferences) {
  for (bool use_mscb : {true, false}) {
    ParamStore<double> store;
    Rng rng(9);
    MscbFuse<double> fuse(Scope<double>(store, rng), 2, 2, 3, use_mscb, 8);
    perturb_params(store, rng);
    Tensor<double> x = random_tensor({2, 3, 3, 2}, rng, 1.0, true), c = random_tensor({2, 3, 3, 2}, rng, 1.0, true);
    auto leaves = leaves_of(store);
    leaves.push_back({"x", x});
    leaves.push_back({"condition", c});
    auto report = check_gradients(leaves, [&] { return fuse(x, c, 17); });
    EXPECT_LT(report.max_err, 1e-4) << report.worst;
  }
}
