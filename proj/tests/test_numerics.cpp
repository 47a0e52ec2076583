#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "support.hpp"

using namespace drq;
using drq::test::fd_gradient;
using drq::test::mlp;
using drq::test::random_labels;
using drq::test::random_tensor;

namespace {

// Largest |analytic - numeric| / max(|analytic|, |numeric|, floor) over every
// weight-group parameter of `net`.
double max_gradient_error(Network<double>& net, const Tensor<double>& x, const std::vector<int>& y, Mode mode,
                          double floor = 1e-6) {
  auto r = net.forward(x, nullptr, mode, false);
  const auto g = net.backward(r.cache, y);
  double worst = 0.0;
  for (std::size_t i = 0; i < g.layout.size(); ++i) {
    const auto& info = g.layout[i];
    if (info.group != ParamGroup::weights) continue;
    auto p = net.param(info);
    const auto numeric = fd_gradient(p, [&] {
      return softmax_cross_entropy(net.forward(x, nullptr, mode, false).logits, y).loss;
    });
    for (std::size_t k = 0; k < numeric.size(); ++k) {
      worst = std::max(worst, drq::test::rel_error(g.values[i][k], numeric[k], floor));
    }
  }
  return worst;
}

// Independent scalar-loop forward of dense -> relu -> dense.
std::vector<double> reference_two_layer(const Layer<double>& l1, const Layer<double>& l2, std::span<const double> x) {
  const std::size_t in = l1.spec.fan_in, hid = l1.spec.fan_out, out = l2.spec.fan_out;
  std::vector<double> h(hid), y(out);
  for (std::size_t o = 0; o < hid; ++o) {
    double acc = l1.bias[o];
    for (std::size_t i = 0; i < in; ++i) acc += l1.weight[o * in + i] * x[i];
    h[o] = acc > 0 ? acc : 0;
  }
  for (std::size_t o = 0; o < out; ++o) {
    double acc = l2.bias[o];
    for (std::size_t i = 0; i < hid; ++i) acc += l2.weight[o * hid + i] * h[i];
    y[o] = acc;
  }
  return y;
}

}  // namespace

TEST(Tensor, ShapeMatchesData) {
  Tensor<float> t({2, 3}, 1.5f);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(shape_size(t.shape()), t.size());
  EXPECT_THROW(Tensor<float>({2, 3}, std::vector<float>(5)), DimensionError);
  EXPECT_THROW(Tensor<float>({2, 0}), DimensionError);
  EXPECT_THROW(t.reshaped({4, 2}), DimensionError);
}

TEST(Forward, IdentityLinearLayer) {
  auto net = Network<double>::build({3}, {LayerSpec::dense(3, 3, false, false)}, 1);
  auto& l = net.mutable_layer(0);
  l.weight.fill(0.0);
  for (std::size_t i = 0; i < 3; ++i) l.weight[i * 3 + i] = 1.0;
  const auto x = random_tensor({4, 3}, 7);
  EXPECT_EQ(net.forward(x, nullptr, Mode::eval).logits, x);
}

TEST(Forward, NoContextEqualsFloatForward) {
  auto t = drq::test::trained_mlp(3, {16, 16}, 1.0, 2);
  auto plain = t.net;
  drq::test::quantize(t.net, t.data.train);
  const auto x = batch_features<float>(t.data.eval, drq::test::iota_rows(32));
  EXPECT_EQ(t.net.forward(x, nullptr, Mode::eval).logits, plain.forward(x, nullptr, Mode::eval).logits);
}

TEST(Forward, TwoLayerMlpMatchesScalarReference) {
  auto net = Network<double>::build({5}, mlp(5, {7}, 3, false), 42);
  Tensor<double> x({2, 5}, 1.0);
  const auto logits = net.forward(x, nullptr, Mode::eval).logits;
  const auto ref = reference_two_layer(net.layers()[0], net.layers()[2], std::span<const double>(x.data(), 5));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t o = 0; o < 3; ++o) EXPECT_NEAR(logits[b * 3 + o], ref[o], 1e-12);
}

TEST(Forward, ShapeMismatchIsDimensionError) {
  auto net = Network<float>::build({4}, mlp(4, {8}, 2), 1);
  EXPECT_THROW(net.forward(Tensor<float>({3, 5}), nullptr, Mode::train), DimensionError);
}

TEST(Forward, EvalIsDeterministic) {
  auto t = drq::test::trained_mlp(5, {16, 16}, 1.0, 2);
  drq::test::quantize(t.net, t.data.train);
  const auto x = batch_features<float>(t.data.eval, drq::test::iota_rows(64));
  const auto ctx = QuantContext::uniform(4, t.net.quantized_layers().size());
  EXPECT_EQ(t.net.forward(x, &ctx, Mode::eval).logits, t.net.forward(x, &ctx, Mode::eval).logits);
}

TEST(Backward, ZeroWeightNetworkMatchesFiniteDifferences) {
  auto net = Network<double>::build({4}, mlp(4, {5}, 3, false), 9);
  for (const auto& info : net.param_layout()) {
    for (auto& v : net.param(info)) v = 0.0;
  }
  const auto x = random_tensor({6, 4}, 10);
  const std::vector<int> y{0, 1, 2, 0, 1, 2};
  EXPECT_LT(max_gradient_error(net, x, y, Mode::eval, 1e-8), 1e-4);
}

TEST(Backward, StationaryPointOfQuadraticHasZeroGradient) {
  // loss(w) = (w * x - 3)^2 with x = 1 is minimised at w = 3.
  Tensor<double> x({1, 1}, 1.0), w({1, 1}, 3.0);
  const auto y = kernels::dense_forward<double>(x, w, nullptr);
  Tensor<double> dy({1, 1}, 2.0 * (y[0] - 3.0));
  EXPECT_NEAR(kernels::dense_backward(x, w, dy, false).dw[0], 0.0, 1e-6);
}

TEST(Backward, TwentyParameterMlpMatchesFiniteDifferences) {
  // (3x3 + 3) + (3x2 + 2) = 20 parameters.
  auto net = Network<double>::build({3}, mlp(3, {3}, 2, false), 11);
  std::size_t params = 0;
  for (const auto& info : net.param_layout()) params += info.size;
  ASSERT_EQ(params, 20u);
  const auto x = random_tensor({8, 3}, 12);
  EXPECT_LT(max_gradient_error(net, x, random_labels(8, 2, 13), Mode::eval), 1e-4);
}

TEST(Backward, GradientPropertyOverRandomNetworks) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto net = Network<double>::build({6}, mlp(6, {5, 4}, 3, true), 100 + seed);
    const auto x = random_tensor({10, 6}, 200 + seed);
    const auto y = random_labels(10, 3, 300 + seed);
    EXPECT_LT(max_gradient_error(net, x, y, Mode::train), 1e-3) << "seed " << seed;
    EXPECT_LT(max_gradient_error(net, x, y, Mode::eval), 1e-3) << "seed " << seed;
  }
}

TEST(Backward, ConvNetMatchesFiniteDifferences) {
  ModelSpec m;
  m.conv_channels = {2, 3};
  m.hidden = {4};
  auto net = Network<double>::build({1, 5, 5}, make_model_specs(m, {1, 5, 5}, 3), 21);
  const auto x = random_tensor({4, 1, 5, 5}, 22);
  EXPECT_LT(max_gradient_error(net, x, random_labels(4, 3, 23), Mode::train), 1e-3);
}

TEST(Backward, StaleCacheIsContractViolation) {
  auto net = Network<double>::build({3}, mlp(3, {4}, 2, false), 1);
  const auto x = random_tensor({2, 3}, 2);
  auto r = net.forward(x, nullptr, Mode::train);
  net.mutable_layer(0).weight[0] += 1.0;
  EXPECT_THROW(net.backward(r.cache, std::vector<int>{0, 1}), ContractError);
}

TEST(Loss, CrossEntropyIsLnClassesForUniformLogits) {
  Tensor<double> logits({3, 5}, 0.25);
  const auto r = softmax_cross_entropy(logits, std::vector<int>{0, 3, 4});
  EXPECT_NEAR(r.loss, std::log(5.0), 1e-6);
  const auto rand = softmax_cross_entropy(random_tensor({20, 4}, 3, -5, 5), random_labels(20, 4, 4));
  EXPECT_GE(rand.loss, 0.0);
}

TEST(Adam, ZeroGradientOnlyDecays) {
  Adam opt(AdamConfig{0.9, 0.999, 1e-8, 0.01});
  std::vector<double> p{1.0, -2.0};
  const std::vector<double> g{0.0, 0.0};
  for (int i = 0; i < 10; ++i) opt.step<double>("p", p, g, 0.1);
  EXPECT_NEAR(p[0], std::pow(1.0 - 0.1 * 0.01, 10), 1e-12);
  EXPECT_NEAR(p[1], -2.0 * std::pow(1.0 - 0.1 * 0.01, 10), 1e-12);

  Adam plain;
  std::vector<double> q{0.5};
  plain.step<double>("q", q, std::vector<double>{0.0}, 0.1);
  EXPECT_EQ(q[0], 0.5);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  for (double g : {3.0, -0.02}) {
    Adam opt;
    std::vector<double> p{1.0};
    opt.step<double>("p", p, std::vector<double>{g}, 1e-3);
    EXPECT_NEAR(p[0] - 1.0, -std::copysign(1e-3, g), 1e-8);
  }
}

TEST(Adam, MinimisesQuadraticLikeScalarReference) {
  Adam opt;
  std::vector<double> x{1.0};
  double rx = 1.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 100; ++t) {
    opt.step<double>("x", x, std::vector<double>{2.0 * x[0]}, 0.1);
    const double g = 2.0 * rx;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    rx -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
  }
  EXPECT_NEAR(x[0], rx, 1e-12);
  EXPECT_LT(std::abs(x[0]), 0.05);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  Adam opt;
  std::vector<float> p{1.0f};
  try {
    opt.step<float>("layer3.weight", p, std::vector<float>{std::nanf("")}, 0.1);
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("layer3.weight"), std::string::npos);
  }
}

TEST(CosineLr, KnownPoints) {
  EXPECT_DOUBLE_EQ(cosine_lr(0.1, 0, 10), 0.1);
  EXPECT_NEAR(cosine_lr(0.1, 5, 10), 0.05, 1e-15);
  EXPECT_DOUBLE_EQ(cosine_lr(5e-4, 89, 90), 5e-4 * 0.5 * (1 + std::cos(89 * std::numbers::pi / 90)));
  EXPECT_THROW(cosine_lr(0.1, 10, 10), ContractError);
  EXPECT_THROW(cosine_lr(0.1, -1, 10), ContractError);
}

TEST(Norm, EvalWithMatchingMeanGivesZero) {
  Tensor<double> x({4, 2}, 3.5);
  NormStats<double> s{{3.5, 3.5}, {1.0, 1.0}, 0.1};
  std::vector<double> gamma{1, 1}, beta{0, 0};
  const auto f = kernels::batchnorm_forward<double>(x, 2, 1, gamma, beta, &s, 1e-5);
  for (double v : f.output) EXPECT_EQ(v, 0.0);
}

TEST(Norm, TrainingOutputIsStandardised) {
  Rng rng(5);
  Tensor<double> x({10000, 1});
  for (auto& v : x) v = rng.normal();
  std::vector<double> gamma{1}, beta{0};
  const auto f = kernels::batchnorm_forward<double>(x, 1, 1, gamma, beta, nullptr, 1e-5);
  double mean = 0, sq = 0;
  for (double v : f.output) mean += v;
  mean /= 10000;
  for (double v : f.output) sq += (v - mean) * (v - mean);
  EXPECT_NEAR(mean, 0.0, 0.05);
  EXPECT_NEAR(sq / 10000, 1.0, 0.05);
}

TEST(Norm, MomentumOneReplacesRunningStats) {
  NormStats<double> s{{7, 7}, {9, 9}, 1.0};
  kernels::update_running_stats<double>(s, std::vector<double>{1, 2}, std::vector<double>{3, 4});
  EXPECT_EQ(s.mean, (std::vector<double>{1, 2}));
  EXPECT_EQ(s.variance, (std::vector<double>{3, 4}));
}

TEST(Norm, ConstantFeatureStaysFinite) {
  Tensor<double> x({8, 1}, 2.0);
  std::vector<double> gamma{1}, beta{0};
  const auto f = kernels::batchnorm_forward<double>(x, 1, 1, gamma, beta, nullptr, 1e-5);
  EXPECT_TRUE(f.output.all_finite());
  EXPECT_GE(f.batch_variance[0], 0.0);
}

TEST(Network, RejectsQuantizedFirstOrLastLayer) {
  auto specs = mlp(4, {8}, 2);
  specs.front().quantized = true;
  EXPECT_THROW(Network<float>::build({4}, specs, 1), ConfigError);
  specs = mlp(4, {8}, 2);
  specs.back().quantized = true;
  EXPECT_THROW(Network<float>::build({4}, specs, 1), ConfigError);
}
