#include <gtest/gtest.h>

#include "skimba/scan.hpp"
#include "support.hpp"

using namespace skimba;
using skimba::testing::check_gradients;
using skimba::testing::leaves_of;
using skimba::testing::perturb_params;
using skimba::testing::random_tensor;

namespace {

constexpr double kGradTol = 1e-4;

struct ScanInputs {
  Tensor<double> u, delta, a, b, c, d;
};

ScanInputs random_inputs(Rng& rng, std::size_t S, std::size_t E, std::size_t N, bool grad = false) {
  ScanInputs in;
  in.u = random_tensor({S, E}, rng, 1.0, grad);
  in.delta = add_scalar(random_tensor({S, E}, rng, 0.2), 0.3);
  in.delta.set_requires_grad(grad);
  in.a = add_scalar(random_tensor({E, N}, rng, 0.9), -1.0);
  in.a.set_requires_grad(grad);
  in.b = random_tensor({S, N}, rng, 1.0, grad);
  in.c = random_tensor({S, N}, rng, 1.0, grad);
  in.d = random_tensor({E}, rng, 1.0, grad);
  return in;
}

// Textbook recurrence, one subsequence at a time.
std::vector<double> reference_scan(const ScanInputs& in, std::size_t stride) {
  const std::size_t S = in.u.extent(0), E = in.u.extent(1), N = in.a.extent(1);
  std::vector<double> y(S * E, 0.0);
  for (std::size_t start = 0; start < std::min(stride, S); ++start) {
    for (std::size_t e = 0; e < E; ++e) {
      std::vector<double> h(N, 0.0);
      for (std::size_t t = start; t < S; t += stride) {
        const double dt = in.delta[t * E + e], u = in.u[t * E + e];
        double acc = in.d[e] * u;
        for (std::size_t n = 0; n < N; ++n) {
          const auto disc = discretize(in.a[e * N + n], in.b[t * N + n], dt);
          h[n] = disc.a_bar * h[n] + disc.b_bar * u;
          acc += in.c[t * N + n] * h[n];
        }
        y[t * E + e] = acc;
      }
    }
  }
  return y;
}

Tensor<double> run(const ScanInputs& in, std::size_t stride) {
  return selective_scan(in.u, in.delta, in.a, in.b, in.c, in.d, stride);
}

}  // namespace

TEST(Discretize, ZeroOrderHoldOnA) {
  const auto d = discretize(-2.0, 0.5, 0.1);
  EXPECT_DOUBLE_EQ(d.a_bar, std::exp(-0.2));
  EXPECT_DOUBLE_EQ(d.b_bar, 0.05);
  EXPECT_THROW(discretize(-1.0, 1.0, 0.0), std::domain_error);
  EXPECT_THROW(discretize(-1.0, 1.0, -0.1), std::domain_error);
}

TEST(SelectiveScan, HandComputedTwoSteps) {
  // One channel, one state: a = -1, delta = 1, b = 1, c = 1, d = 0.
  Tensor<double> u({2, 1}, {1.0, 2.0}), delta({2, 1}, {1.0, 1.0}), a({1, 1}, {-1.0});
  Tensor<double> b({2, 1}, {1.0, 1.0}), c({2, 1}, {1.0, 1.0}), d({1}, {0.0});
  Tensor<double> y = selective_scan(u, delta, a, b, c, d, 1);
  EXPECT_DOUBLE_EQ(y[0], 1.0);
  EXPECT_DOUBLE_EQ(y[1], std::exp(-1.0) + 2.0);
}

TEST(SelectiveScan, MatchesReferenceAcrossStrides) {
  Rng rng(1);
  for (std::size_t stride : {1, 2, 4}) {
    for (int rep = 0; rep < 5; ++rep) {
      const ScanInputs in = random_inputs(rng, 3 + uniform_index(rng, 0, 40), 1 + uniform_index(rng, 0, 5),
                                          1 + uniform_index(rng, 0, 5));
      const Tensor<double> y = run(in, stride);
      const auto want = reference_scan(in, stride);
      for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(y[i], want[i], 1e-12);
    }
  }
}

TEST(SelectiveScan, StrideSplitsIntoIndependentSubsequences) {
  // Running the even and odd tokens as separate stride-1 scans matches stride 2.
  Rng rng(2);
  const ScanInputs in = random_inputs(rng, 10, 3, 4);
  const Tensor<double> joint = run(in, 2);
  for (std::size_t phase = 0; phase < 2; ++phase) {
    std::vector<std::size_t> rows;
    for (std::size_t t = phase; t < 10; t += 2) rows.push_back(t);
    auto take = [&rows](const Tensor<double>& x) {
      std::vector<double> v;
      for (std::size_t r : rows)
        for (std::size_t j = 0; j < x.extent(1); ++j) v.push_back(x[r * x.extent(1) + j]);
      return Tensor<double>({rows.size(), x.extent(1)}, v);
    };
    ScanInputs sub{take(in.u), take(in.delta), in.a, take(in.b), take(in.c), in.d};
    const Tensor<double> part = run(sub, 1);
    for (std::size_t k = 0; k < rows.size(); ++k)
      for (std::size_t e = 0; e < 3; ++e) EXPECT_NEAR(part[k * 3 + e], joint[rows[k] * 3 + e], 1e-12);
  }
}

TEST(SelectiveScan, StateStaysBoundedOnLongSequences) {
  Rng rng(3);
  const ScanInputs in = random_inputs(rng, 4096, 2, 4);
  const Tensor<double> y = run(in, 1);
  // |h| <= max|b u| / (1 - max a_bar) with delta >= 0.1 and a <= -0.1.
  for (double v : y.data()) {
    ASSERT_TRUE(std::isfinite(v));
    EXPECT_LT(std::abs(v), 1e3);
  }
}

TEST(SelectiveScan, RejectsBadInputs) {
  Rng rng(4);
  ScanInputs in = random_inputs(rng, 4, 2, 3);
  EXPECT_THROW(run(in, 0), std::invalid_argument);
  in.delta.mutable_data()[0] = 0.0;
  EXPECT_THROW(run(in, 1), std::domain_error);
  in = random_inputs(rng, 4, 2, 3);
  in.b = Tensor<double>::zeros({4, 2});
  EXPECT_THROW(run(in, 1), ShapeError);
}

TEST(SelectiveScan, GradientMatchesFiniteDifferences) {
  Rng rng(5);
  for (std::size_t stride : {1, 2, 4}) {
    ScanInputs in = random_inputs(rng, 9, 3, 4, true);
    auto report = check_gradients(
        {{"u", in.u}, {"delta", in.delta}, {"a", in.a}, {"b", in.b}, {"c", in.c}, {"d", in.d}},
        [&] { return run(in, stride); }, 10);
    EXPECT_LT(report.max_err, kGradTol) << "stride " << stride << ": " << report.worst;
  }
}

TEST(Directions, OrdersArePermutationsWithExpectedEnds) {
  const Triple origin{3, 4, 2};
  for (Direction dir : kDirections) {
    auto order = direction_order(origin, dir);
    ASSERT_EQ(order.size(), 24u);
    std::vector<std::size_t> sorted = order;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < 24; ++i) EXPECT_EQ(sorted[i], i) << direction_name(dir);
  }
  const auto rev = direction_order(origin, Direction::reverse);
  EXPECT_EQ(rev.front(), 23u);
  EXPECT_EQ(rev.back(), 0u);
  // Spatial order walks one height layer at a time.
  const auto sp = direction_order(origin, Direction::spatial);
  for (std::size_t k = 0; k < 12; ++k) EXPECT_EQ(sp[k] % 2, 0u);
  EXPECT_EQ(sp[1], 2u);  // (l=0, w=1, h=0)
  EXPECT_EQ(sp[4], 8u);  // (l=1, w=0, h=0)
}

TEST(Directions, FlattenThenUnflattenIsIdentity) {
  Rng rng(6);
  Tensor<double> vol = random_tensor({2, 3, 4, 5}, rng);
  for (Direction dir : kDirections) {
    const auto seq = flatten_direction(vol, dir);
    EXPECT_EQ(seq.tokens.shape(), (Shape{60, 2}));
    const Tensor<double> back = unflatten_direction(seq);
    EXPECT_EQ(std::vector<double>(back.data().begin(), back.data().end()),
              std::vector<double>(vol.data().begin(), vol.data().end()));
  }
}

TEST(Directions, ReverseTokenOrderEqualsScanOnFlippedSequence) {
  Rng rng(7);
  Tensor<double> vol = random_tensor({2, 2, 3, 2}, rng);
  const auto fwd = flatten_direction(vol, Direction::forward);
  const auto rev = flatten_direction(vol, Direction::reverse);
  for (std::size_t k = 0; k < 12; ++k)
    for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(rev.tokens[k * 2 + c], fwd.tokens[(11 - k) * 2 + c]);
}

TEST(DilatedScan, RejectsUnsupportedDilation) {
  ParamStore<double> store;
  Rng rng(8);
  auto p = ScanParams<double>::create(Scope<double>(store, rng), 4, 4, 3);
  Tensor<double> x = Tensor<double>::zeros({6, 4});
  for (std::size_t d : {0, 1, 3}) EXPECT_NO_THROW(dilated_scan(p, x, d));
  for (std::size_t d : {2, 4}) EXPECT_THROW(dilated_scan(p, x, d), std::invalid_argument);
}

TEST(DilatedScan, MatchesReferenceWithProjections) {
  ParamStore<double> store;
  Rng rng(9);
  auto p = ScanParams<double>::create(Scope<double>(store, rng), 3, 3, 4);
  perturb_params(store, rng);
  Tensor<double> x = random_tensor({17, 3}, rng);
  for (std::size_t d : kSkimbaDilations) {
    const Tensor<double> y = dilated_scan(p, x, d);
    ScanInputs in{x, softplus(linear(x, p.delta_w, p.delta_b)), p.realized_a(), matmul(x, p.b_w),
                  matmul(x, p.c_w), p.d_skip};
    const auto want = reference_scan(in, d + 1);
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(y[i], want[i], 1e-12);
  }
}

TEST(StmLayer, EqualsSumOfDirectionalBranches) {
  ParamStore<double> store;
  Rng rng(10);
  auto layer = StmLayer<double>::create(Scope<double>(store, rng), 1, 3, 4, 2);
  Tensor<double> vol = random_tensor({3, 2, 3, 2}, rng);
  const Triple origin{2, 3, 2};
  const Tensor<double> tokens = volume_to_tokens(vol);
  Tensor<double> want = Tensor<double>::zeros({12, 3});
  for (std::size_t k = 0; k < 3; ++k)
    want = add(want, directional_branch(layer.branches[k], tokens, origin, kDirections[k], 1));
  const Tensor<double> got = layer.tokens(tokens, origin);
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  EXPECT_EQ(layer(vol).shape(), vol.shape());
}

TEST(StmLayer, BranchesOwnIndependentParameters) {
  ParamStore<double> store;
  Rng rng(11);
  StmLayer<double>::create(Scope<double>(store, rng).sub("stm"), 0, 4, 4, 2);
  std::size_t n = 0;
  for (const char* dir : {"forward", "reverse", "spatial"}) {
    for (const auto& p : store.params()) n += p.name.rfind(std::string("stm/") + dir + "/", 0) == 0;
  }
  EXPECT_EQ(n, store.params().size());
  EXPECT_EQ(n % 3, 0u);
}

TEST(SkimbaBlock, UsesDilationsZeroOneThree) {
  ParamStore<float> store;
  Rng rng(12);
  SkimbaBlock<float> block(Scope<float>(store, rng), {8, 4});
  EXPECT_EQ(block.dilations(), (std::vector<std::size_t>{0, 1, 3}));
  EXPECT_EQ(block.layers().size(), 3u);
}

TEST(SkimbaBlock, ZeroResidualInitIsIdentity) {
  ParamStore<double> store;
  Rng rng(13);
  SkimbaConfig cfg{4, 3};
  cfg.zero_residual_init = true;
  SkimbaBlock<double> block(Scope<double>(store, rng), cfg);
  Tensor<double> f = random_tensor({4, 3, 2, 2}, rng);
  const Tensor<double> y = block(f);
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_DOUBLE_EQ(y[i], f[i]);
}

TEST(SkimbaBlock, RejectsWrongChannelCount) {
  ParamStore<float> store;
  Rng rng(14);
  SkimbaBlock<float> block(Scope<float>(store, rng), {8, 4});
  EXPECT_THROW(block(Tensor<float>::zeros({4, 2, 2, 2})), ShapeError);
}

TEST(SkimbaBlock, GradientMatchesFiniteDifferences) {
  ParamStore<double> store;
  Rng rng(15);
  SkimbaBlock<double> block(Scope<double>(store, rng), {3, 2});
  perturb_params(store, rng);
  Tensor<double> f = random_tensor({3, 2, 3, 2}, rng, 1.0, true);
  auto leaves = leaves_of(store);
  leaves.push_back({"input", f});
  auto report = check_gradients(leaves, [&] { return block(f); }, 3);
  EXPECT_LT(report.max_err, kGradTol) << report.worst;
}
