#include <gtest/gtest.h>

#include "skimba/conv.hpp"
#include "skimba/params.hpp"
#include "support.hpp"

using namespace skimba;
using skimba::testing::check_gradients;
using skimba::testing::random_tensor;

namespace {

constexpr double kGradTol = 1e-4;

std::vector<double> values(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

double inner(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST(Elementwise, AddsAndBroadcastsTrailingAxes) {
  Tensor<double> a({2}, {1, 2}), b({2}, {3, 4});
  EXPECT_EQ(values(add(a, b)), (std::vector<double>{4, 6}));
  Tensor<double> m({2, 3}, {1, 2, 3, 4, 5, 6}), row({3}, {10, 20, 30});
  EXPECT_EQ(values(add(m, row)), (std::vector<double>{11, 22, 33, 14, 25, 36}));
}

TEST(Elementwise, ShapeMismatchNamesBothShapes) {
  Tensor<double> a = Tensor<double>::zeros({2, 3}), b = Tensor<double>::zeros({4});
  try {
    (void)add(a, b);
    FAIL() << "expected a shape error";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4]"), std::string::npos) << msg;
  }
}

TEST(Elementwise, MultiplyByZeroAnnihilatesValueAndGradient) {
  Rng rng(1);
  Tensor<double> x = random_tensor({3, 4}, rng, 1.0, true);
  Tensor<double> y = mul(x, Tensor<double>::zeros({3, 4}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
  sum(y).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Elementwise, ExpThenLogIsIdentity) {
  Rng rng(2);
  Tensor<double> x = random_tensor({50}, rng, 1.0);
  Tensor<double> pos = add_scalar(mul_scalar(x, 2.0), 2.5);
  Tensor<double> back = log(exp(pos));
  for (std::size_t i = 0; i < pos.size(); ++i) EXPECT_NEAR(back[i], pos[i], 1e-6);
}

TEST(Elementwise, GradientsMatchFiniteDifferences) {
  Rng rng(3);
  Tensor<double> a = random_tensor({3, 4}, rng, 1.0, true);
  Tensor<double> b = random_tensor({4}, rng, 1.0, true);
  Tensor<double> c = add_scalar(random_tensor({3, 4}, rng, 0.5), 2.0);
  c.set_requires_grad(true);
  auto report = check_gradients({{"a", a}, {"b", b}, {"c", c}}, [&] {
    Tensor<double> y = div(mul(add(a, b), sub(a, b)), c);
    return add(add(y, exp(neg(a))), add(log(c), sqrt(c)));
  });
  EXPECT_LT(report.max_err, kGradTol) << report.worst;
}

TEST(Matmul, IdentityAndHandCase) {
  Tensor<double> eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor<double> m({3, 2}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(values(matmul(eye, m)), values(m));
  Tensor<double> a({2, 3}, {1, 2, 3, 4, 5, 6}), b({3, 2}, {7, 8, 9, 10, 11, 12});
  // [1 2 3; 4 5 6] x [7 8; 9 10; 11 12] = [58 64; 139 154]
  EXPECT_EQ(values(matmul(a, b)), (std::vector<double>{58, 64, 139, 154}));
  EXPECT_THROW((void)matmul(a, a), ShapeError);
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  Rng rng(4);
  Tensor<double> a = random_tensor({4, 5}, rng, 1.0, true), b = random_tensor({5, 3}, rng, 1.0, true);
  Tensor<double> bias = random_tensor({3}, rng, 1.0, true);
  auto report = check_gradients({{"a", a}, {"b", b}, {"bias", bias}},
                                [&] { return linear(a, b, bias); });
  EXPECT_LT(report.max_err, kGradTol) << report.worst;
}

TEST(Conv3d, UnitPointwiseKernelIsIdentity) {
  Rng rng(5);
  Tensor<double> x = random_tensor({1, 3, 4, 2}, rng);
  Tensor<double> w({1, 1, 1, 1, 1}, {1.0}), b({1}, {0.0});
  EXPECT_EQ(values(conv3d(x, w, b)), values(x));
}

TEST(Conv3d, ImpulseResponseIsMirroredKernel) {
  Rng rng(6);
  Tensor<double> w = random_tensor({1, 1, 3, 3, 3}, rng), b({1}, {0.0});
  std::vector<double> impulse(5 * 5 * 5, 0.0);
  impulse[(2 * 5 + 2) * 5 + 2] = 1.0;
  Tensor<double> x({1, 5, 5, 5}, impulse);
  Tensor<double> y = conv3d(x, w, b, ConvGeometry::same({3, 3, 3}));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 3; ++k) {
        const double got = y[((1 + i) * 5 + (1 + j)) * 5 + (1 + k)];
        const double want = w[((2 - i) * 3 + (2 - j)) * 3 + (2 - k)];
        EXPECT_DOUBLE_EQ(got, want);
      }
}

TEST(Conv3d, OutputExtentFormula) {
  for (std::size_t in : {4, 5, 8, 9})
    for (std::size_t k : {1, 3})
      for (std::size_t s : {1, 2})
        for (std::size_t p : {0, 1})
          for (std::size_t d : {1, 2}) {
            const long long span = static_cast<long long>(in + 2 * p) - static_cast<long long>(d * (k - 1)) - 1;
            if (span < 0) {
              EXPECT_THROW(conv_out_extent(in, k, s, p, d), ShapeError);
            } else {
              EXPECT_EQ(conv_out_extent(in, k, s, p, d), static_cast<std::size_t>(span) / s + 1);
            }
          }
  Tensor<double> x = Tensor<double>::zeros({1, 2, 2, 2});
  Tensor<double> w = Tensor<double>::zeros({1, 1, 3, 3, 3}), b = Tensor<double>::zeros({1});
  EXPECT_THROW((void)conv3d(x, w, b), ShapeError);
}

TEST(Conv3d, GradientMatchesFiniteDifferences) {
  Rng rng(7);
  for (const auto& [stride, dil] : {std::pair<Triple, Triple>{{1, 1, 1}, {1, 1, 1}},
                                    {{2, 2, 1}, {1, 1, 1}},
                                    {{1, 1, 1}, {2, 1, 2}}}) {
    Tensor<double> x = random_tensor({2, 6, 5, 4}, rng, 1.0, true);
    Tensor<double> w = random_tensor({3, 2, 3, 3, 3}, rng, 0.5, true), b = random_tensor({3}, rng, 0.5, true);
    ConvGeometry g = ConvGeometry::same({3, 3, 3}, dil);
    g.stride = stride;
    auto report = check_gradients({{"x", x}, {"w", w}, {"b", b}}, [&] { return conv3d(x, w, b, g); }, 10);
    EXPECT_LT(report.max_err, kGradTol) << report.worst;
  }
}

TEST(ConvTranspose3d, IsTheAdjointOfConv3d) {
  Rng rng(8);
  for (const Triple& stride : {Triple{1, 1, 1}, Triple{2, 2, 2}, Triple{2, 1, 2}}) {
    ConvGeometry g = ConvGeometry::same({3, 3, 3});
    g.stride = stride;
    Tensor<double> w = random_tensor({3, 2, 3, 3, 3}, rng);  // conv: 2 -> 3 channels
    Tensor<double> x = random_tensor({2, 8, 6, 4}, rng);
    Tensor<double> y = conv3d(x, w, Tensor<double>::zeros({3}), g);
    Tensor<double> r = random_tensor(y.shape(), rng);
    // The transposed weight layout is in x out, which is the conv weight viewed from its output side.
    const Triple pad{stride[0] - 1, stride[1] - 1, stride[2] - 1};
    Tensor<double> back = conv_transpose3d(r, w, Tensor<double>::zeros({2}), g, pad);
    ASSERT_EQ(back.shape(), x.shape());
    const double lhs = inner(y, r), rhs = inner(x, back);
    EXPECT_LT(std::abs(lhs - rhs), 1e-5 * std::max(std::abs(lhs), 1.0));
  }
}

TEST(ConvTranspose3d, StrideTwoDoublesExtent) {
  ConvGeometry g = ConvGeometry::same({3, 3, 3});
  g.stride = {2, 2, 2};
  Tensor<double> x = Tensor<double>::ones({1, 4, 4, 4});
  Tensor<double> y = conv_transpose3d(x, Tensor<double>::ones({1, 1, 3, 3, 3}), Tensor<double>::zeros({1}), g, {1, 1, 1});
  EXPECT_EQ(y.shape(), (Shape{1, 8, 8, 8}));
}

TEST(ConvTranspose3d, GradientMatchesFiniteDifferences) {
  Rng rng(9);
  ConvGeometry g = ConvGeometry::same({3, 3, 3});
  g.stride = {2, 2, 1};
  Tensor<double> x = random_tensor({3, 3, 2, 3}, rng, 1.0, true);
  Tensor<double> w = random_tensor({3, 2, 3, 3, 3}, rng, 0.5, true), b = random_tensor({2}, rng, 0.5, true);
  auto report = check_gradients({{"x", x}, {"w", w}, {"b", b}},
                                [&] { return conv_transpose3d(x, w, b, g, {1, 1, 0}); }, 10);
  EXPECT_LT(report.max_err, kGradTol) << report.worst;
}

TEST(LayerNorm, ConstantInputNormalisesToZero) {
  Tensor<double> x = Tensor<double>::full({3, 4}, 2.5);
  Tensor<double> y = layer_norm(x, 4, Tensor<double>::ones({4}), Tensor<double>::zeros({4}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, SlicesHaveZeroMeanUnitVariance) {
  Rng rng(10);
  Tensor<double> x = add_scalar(random_tensor({5, 64}, rng, 3.0), 1.0);
  Tensor<double> y = layer_norm(x, 64, Tensor<double>::ones({64}), Tensor<double>::zeros({64}));
  for (std::size_t r = 0; r < 5; ++r) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < 64; ++i) m += y[r * 64 + i] / 64;
    for (std::size_t i = 0; i < 64; ++i) v += (y[r * 64 + i] - m) * (y[r * 64 + i] - m) / 64;
    EXPECT_NEAR(m, 0.0, 1e-5);
    EXPECT_NEAR(v, 1.0, 1e-5);
  }
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  Tensor<double> x = random_tensor({3, 6}, rng, 1.0, true);
  Tensor<double> g = random_tensor({6}, rng, 1.0, true), b = random_tensor({6}, rng, 1.0, true);
  auto report = check_gradients({{"x", x}, {"gain", g}, {"bias", b}}, [&] { return layer_norm(x, 6, g, b); });
  EXPECT_LT(report.max_err, kGradTol) << report.worst;
}

TEST(InstanceNorm, ConstantChannelNormalisesToZero) {
  Tensor<double> x = Tensor<double>::full({2, 3, 3, 2}, -1.5);
  const Tensor<double> y = instance_norm(x);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(InstanceNorm, ChannelsHaveZeroMeanUnitVariance) {
  Rng rng(12);
  Tensor<double> x = random_tensor({3, 4, 4, 4}, rng, 2.0);
  Tensor<double> y = instance_norm(x);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < 64; ++i) m += y[c * 64 + i] / 64;
    for (std::size_t i = 0; i < 64; ++i) v += (y[c * 64 + i] - m) * (y[c * 64 + i] - m) / 64;
    EXPECT_NEAR(m, 0.0, 1e-5);
    EXPECT_NEAR(v, 1.0, 1e-4);  // epsilon 1e-5 in the denominator
  }
}

TEST(InstanceNorm, GradientMatchesFiniteDifferences) {
  Rng rng(13);
  Tensor<double> x = random_tensor({2, 3, 2, 2}, rng, 1.0, true);
  auto report = check_gradients({{"x", x}}, [&] { return instance_norm(x); }, 24);
  EXPECT_LT(report.max_err, kGradTol) << report.worst;
}

TEST(Activations, Definitions) {
  Tensor<double> x({1}, {-1.0});
  EXPECT_DOUBLE_EQ(leaky_relu(x, 0.01)[0], -0.01);
  Tensor<double> p = softmax(Tensor<double>::zeros({4, 1}), 0);
  for (double v : p.data()) EXPECT_DOUBLE_EQ(v, 0.25);
  EXPECT_NEAR(silu(Tensor<double>({1}, {1.0}))[0], 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
}

TEST(Activations, SoftmaxSumsToOne) {
  Rng rng(14);
  Tensor<float> x = random_tensor<float>({6, 40}, rng, 8.0);
  Tensor<float> p = softmax(x, 0);
  for (std::size_t v = 0; v < 40; ++v) {
    double s = 0;
    for (std::size_t c = 0; c < 6; ++c) s += p[c * 40 + v];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Activations, GradientsMatchFiniteDifferences) {
  Rng rng(15);
  Tensor<double> x = random_tensor({4, 5}, rng, 2.0, true);
  auto report = check_gradients({{"x", x}}, [&] {
    return add(add(leaky_relu(x, 0.1), silu(x)), add(sigmoid(x), add(softplus(x), softmax(x, 0))));
  }, 20);
  EXPECT_LT(report.max_err, kGradTol) << report.worst;
  Tensor<double> y = random_tensor({3, 4}, rng, 2.0, true);
  report = check_gradients({{"y", y}}, [&] { return softmax(y, 1); }, 12);
  EXPECT_LT(report.max_err, kGradTol) << report.worst;
}

TEST(ShapeOps, GradientsMatchFiniteDifferences) {
  Rng rng(16);
  Tensor<double> a = random_tensor({2, 3, 4}, rng, 1.0, true), b = random_tensor({2, 2, 4}, rng, 1.0, true);
  auto report = check_gradients({{"a", a}, {"b", b}}, [&] {
    Tensor<double> c = concat<double>({a, b}, 1);
    Tensor<double> p = permute(c, {2, 0, 1});
    return add(reshape(slice(p, 2, 1, 3), Shape{4, 6}), transpose(reshape(a, Shape{6, 4})));
  }, 24);
  EXPECT_LT(report.max_err, kGradTol) << report.worst;
}

TEST(Backward, SumGivesOnes) {
  Tensor<double> x = Tensor<double>::full({2, 3}, 0.3, true);
  sum(x).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, RepeatedCallsAccumulate) {
  Rng rng(17);
  Tensor<double> x = random_tensor({5}, rng, 1.0, true);
  Tensor<double> loss = sum(square(x));
  loss.backward();
  const std::vector<double> once(x.grad().begin(), x.grad().end());
  loss.backward();
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2 * once[i]);
}

TEST(Backward, NonScalarLossIsRejected) {
  Tensor<double> x = Tensor<double>::ones({3});
  x.set_requires_grad(true);
  EXPECT_THROW(mul_scalar(x, 2.0).backward(), ShapeError);
}

TEST(Backward, SinglePrecisionMlpMatchesFiniteDifferences) {
  Rng rng(18);
  Tensor<float> x = random_tensor<float>({4, 6}, rng);
  Tensor<float> w1 = random_tensor<float>({6, 8}, rng, 0.5, true), b1 = random_tensor<float>({8}, rng, 0.5, true);
  Tensor<float> w2 = random_tensor<float>({8, 1}, rng, 0.5, true), b2 = random_tensor<float>({1}, rng, 0.5, true);
  auto loss = [&] { return mean(square(linear(silu(linear(x, w1, b1)), w2, b2))); };
  loss().backward();
  const float h = 1e-2f;
  for (Tensor<float> p : {w1, b1, w2, b2}) {
    const std::vector<float> g(p.grad().begin(), p.grad().end());
    for (std::size_t i = 0; i < std::min<std::size_t>(p.size(), 5); ++i) {
      auto d = p.mutable_data();
      const float orig = d[i];
      NoGradGuard guard;
      d[i] = orig + h;
      const double up = loss().item();
      d[i] = orig - h;
      const double down = loss().item();
      d[i] = orig;
      const double numeric = (up - down) / (2 * h);
      EXPECT_LT(std::abs(numeric - g[i]), 1e-3 * std::max({std::abs(numeric), std::abs(double(g[i])), 1e-2}));
    }
  }
}

TEST(Resample, GradientMatchesFiniteDifferences) {
  Rng rng(19);
  Tensor<double> x = random_tensor({2, 5}, rng, 1.0, true);
  auto entries = std::make_shared<const std::vector<ResampleEntry<double>>>(
      std::vector<ResampleEntry<double>>{{0, 1, 0.25}, {0, 2, 0.75}, {2, 4, 1.0}, {1, 0, -0.5}});
  auto report = check_gradients({{"x", x}}, [&] { return resample(x, entries, Shape{2, 3}); }, 10);
  EXPECT_LT(report.max_err, kGradTol) << report.worst;
}

TEST(Determinism, IdenticalInputsGiveIdenticalOutputs) {
  auto run = [] {
    Rng rng(20);
    Tensor<float> x = random_tensor<float>({2, 6, 6, 4}, rng);
    Tensor<float> w = random_tensor<float>({3, 2, 3, 3, 3}, rng);
    return conv3d(instance_norm(x), w, Tensor<float>::zeros({3}), ConvGeometry::same({3, 3, 3}));
  };
  const Tensor<float> a = run(), b = run();
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST(Checkpoint, ByteLayoutIsExact) {
  const std::vector<CheckpointEntry> entries{{"a/w", {2}, {1.0f, -2.0f}}};
  const std::string bytes = encode_checkpoint(entries);
  std::string want = "SKBA";
  auto put = [&want](const void* p, std::size_t n) { want.append(static_cast<const char*>(p), n); };
  const std::uint32_t version = 1, name_len = 3, rank = 1;
  const std::uint64_t count = 1, extent = 2;
  const float v0 = 1.0f, v1 = -2.0f;
  put(&version, 4);
  put(&count, 8);
  put(&name_len, 4);
  want += "a/w";
  put(&rank, 4);
  put(&extent, 8);
  put(&v0, 4);
  put(&v1, 4);
  EXPECT_EQ(bytes, want);
}

TEST(Checkpoint, RoundTripPreservesNamesShapesAndValues) {
  ParamStore<float> store;
  Rng rng(21);
  Scope<float> scope(store, rng);
  scope.sub("block").weight("weight", {3, 2, 1, 1, 1}, 2);
  scope.sub("block").constant("bias", {3}, 0.5f);
  const std::string bytes = encode_checkpoint(to_entries(store));
  const auto decoded = decode_checkpoint(bytes);
  ASSERT_EQ(decoded.size(), 2u);
  EXPECT_EQ(decoded[0].name, "block/weight");
  EXPECT_EQ(decoded[0].shape, (Shape{3, 2, 1, 1, 1}));

  ParamStore<float> other;
  Rng rng2(99);
  Scope<float> s2(other, rng2);
  s2.sub("block").weight("weight", {3, 2, 1, 1, 1}, 2);
  s2.sub("block").constant("bias", {3}, 0.0f);
  assign_entries(other, decoded);
  EXPECT_EQ(encode_checkpoint(to_entries(other)), bytes);
}

TEST(Checkpoint, CorruptInputIsRejected) {
  std::string bytes = encode_checkpoint({{"x", {1}, {1.0f}}});
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 1)), FormatError);
  EXPECT_THROW(decode_checkpoint(bytes + "x"), FormatError);
  bytes[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bytes), FormatError);
}

TEST(Params, NamesAreUnique) {
  ParamStore<float> store;
  Rng rng(22);
  Scope<float> scope(store, rng);
  scope.constant("w", {1}, 0.0f);
  EXPECT_THROW(scope.constant("w", {1}, 0.0f), std::invalid_argument);
}
