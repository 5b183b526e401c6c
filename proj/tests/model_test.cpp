// Copyright 2026 The GradShield Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradshield/checkpoint.hpp"
#include "gradshield/model.hpp"
#include "oracles.hpp"

namespace gradshield {
namespace {

Vector param_fd_gradient(const NetworkSpec& spec, const ParamSet& params, const std::vector<Example>& batch) {
  const auto shapes = spec.param_shapes();
  auto f = [&](const Vector& theta) {
    const auto p = unflatten<ParamSet>(theta, shapes);
    double s = 0.0;
    for (const auto& ex : batch) s += oracle::scalar_loss(oracle::scalar_forward(spec, p, ex.x), ex.y);
    return s / static_cast<double>(batch.size());
  };
  return oracle::finite_difference(f, flatten(params));
}

std::vector<Example> random_batch(const NetworkSpec& spec, std::size_t n, std::mt19937_64& rng) {
  std::vector<Example> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back({oracle::random_unit_box(spec.input.size(), rng), i % spec.classes});
  return out;
}

NetworkSpec small_conv(Activation a) {
  return NetworkSpec{{2, 5, 4}, {Conv2d{2, 3, 2, a}, Conv2d{3, 2, 2, a}, Dense{2 * 3 * 2, 4, a}, Dense{4, 3}}, 3};
}

TEST(Forward, MatchesScalarOracle) {
  std::mt19937_64 rng(1);
  for (auto act : {Activation::relu, Activation::tanh, Activation::sigmoid}) {
    const auto spec = small_conv(act);
    const auto params = init_params(spec, 4);
    const Vector x = oracle::random_unit_box(spec.input.size(), rng);
    const Vector fast = forward(spec, params, x), slow = oracle::scalar_forward(spec, params, x);
    ASSERT_EQ(fast.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(fast[i], slow[i], 1e-12);
  }
}

TEST(Forward, WrongInputSizeThrows) {
  const auto spec = NetworkSpec::mlp({1, 2, 2}, {3}, 2, Activation::tanh);
  EXPECT_THROW(forward(spec, init_params(spec, 0), Vector(5, 0.0)), ContractViolation);
}

TEST(NetworkSpec, RejectsMismatchedLayers) {
  NetworkSpec bad{{1, 4, 4}, {Dense{15, 2}}, 2};
  EXPECT_THROW(bad.resolve(), ContractViolation);
  NetworkSpec conv_after_dense{{1, 4, 4}, {Dense{16, 4}, Conv2d{1, 1, 1}}, 4};
  EXPECT_THROW(conv_after_dense.resolve(), ContractViolation);
  NetworkSpec wrong_classes{{1, 2, 2}, {Dense{4, 3}}, 2};
  EXPECT_THROW(wrong_classes.resolve(), ContractViolation);
}

TEST(Loss, StableForLargeLogits) {
  EXPECT_NEAR(loss(Vector{1000, 0}, 0), 0.0, 1e-12);
  EXPECT_NEAR(loss(Vector{0, 1000}, 0), 1000.0, 1e-9);
  EXPECT_NEAR(loss(Vector{0, 0, 0}, 2), std::log(3.0), 1e-15);
}

TEST(ParamGradient, MatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  for (auto act : {Activation::tanh, Activation::sigmoid}) {
    const auto spec = small_conv(act);
    const auto params = init_params(spec, 8);
    const auto batch = random_batch(spec, 3, rng);
    const Vector analytic = flatten(param_gradient(spec, params, batch));
    const Vector numeric = param_fd_gradient(spec, params, batch);
    EXPECT_LT(oracle::relative_error(analytic, numeric), 1e-6) << to_string(act);
  }
}

TEST(ParamGradient, SoftmaxRegressionClosedForm) {
  // Single dense layer, no activation: ∂L/∂W = (p − onehot(y)) xᵀ, ∂L/∂b = p − onehot(y).
  std::mt19937_64 rng(3);
  const NetworkSpec spec{{1, 1, 4}, {Dense{4, 3}}, 3};
  const auto params = init_params(spec, 1);
  const Vector x = oracle::random_unit_box(4, rng);
  const std::vector<Example> batch{{x, 1}};
  double l = 0.0;
  const auto g = param_gradient(spec, params, batch, &l);
  Vector z(3);
  for (std::size_t o = 0; o < 3; ++o) {
    z[o] = params.layers[0].bias[o];
    for (std::size_t i = 0; i < 4; ++i) z[o] += params.layers[0].weight(o, i) * x[i];
  }
  double s = 0;
  for (double v : z) s += std::exp(v);
  EXPECT_NEAR(l, std::log(s) - z[1], 1e-12);
  for (std::size_t o = 0; o < 3; ++o) {
    const double r = std::exp(z[o]) / s - (o == 1 ? 1.0 : 0.0);
    EXPECT_NEAR(g.layers[0].bias[o], r, 1e-12);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(g.layers[0].weight(o, i), r * x[i], 1e-12);
  }
}

TEST(ParamGradient, DenseBatchOneGradientIsRankOne) {
  std::mt19937_64 rng(4);
  const auto spec = NetworkSpec::mlp({1, 4, 4}, {8}, 5, Activation::tanh);
  const auto g = param_gradient(spec, init_params(spec, 3), random_batch(spec, 1, rng));
  const auto dec = svd(g.layers[0].weight);
  EXPECT_LT(dec.s[1], 1e-12 * dec.s[0]);
}

TEST(ReconLoss, IdenticalGradientGivesZero) {
  std::mt19937_64 rng(5);
  const auto spec = small_conv(Activation::tanh);
  const auto params = init_params(spec, 2);
  const Vector x = oracle::random_unit_box(spec.input.size(), rng);
  const std::vector<Example> batch{{x, 2}};
  const Vector g = flatten(param_gradient(spec, params, batch));
  EXPECT_NEAR(recon_loss(spec, params, x, 2, g), 0.0, 1e-12);
  Vector neg = g;
  for (double& v : neg) v = -v;
  EXPECT_NEAR(recon_loss(spec, params, x, 2, neg), 2.0, 1e-12);
}

class InputGradient : public ::testing::TestWithParam<Activation> {};

TEST_P(InputGradient, MatchesFiniteDifferencesOnConvNet) {
  std::mt19937_64 rng(6);
  const auto spec = small_conv(GetParam());
  const auto params = init_params(spec, 5);
  const Vector truth = oracle::random_unit_box(spec.input.size(), rng);
  const Vector target = flatten(param_gradient(spec, params, std::vector<Example>{{truth, 1}}));
  const Vector x = oracle::random_unit_box(spec.input.size(), rng);
  const Vector analytic = recon_loss_input_gradient(spec, params, x, 1, target);
  auto f = [&](const Vector& probe) { return recon_loss(spec, params, probe, 1, target); };
  const Vector numeric = oracle::finite_difference(f, x);
  EXPECT_LT(oracle::relative_error(analytic, numeric), 1e-5);
}

TEST_P(InputGradient, MatchesFiniteDifferencesOnMlpBatch) {
  std::mt19937_64 rng(7);
  const auto spec = NetworkSpec::mlp({1, 3, 3}, {6, 5}, 4, GetParam());
  const auto params = init_params(spec, 9);
  const std::vector<Example> truth{{oracle::random_unit_box(9, rng), 0}, {oracle::random_unit_box(9, rng), 3}};
  const Vector target = flatten(param_gradient(spec, params, truth));
  const std::vector<Vector> xs{oracle::random_unit_box(9, rng), oracle::random_unit_box(9, rng)};
  const std::vector<std::size_t> ys{0, 3};
  const auto ev = evaluate_recon(spec, params, xs, ys, target, true);
  for (std::size_t b = 0; b < 2; ++b) {
    auto f = [&](const Vector& probe) {
      std::vector<Vector> moved = xs;
      moved[b] = probe;
      return evaluate_recon(spec, params, moved, ys, target, false).loss;
    };
    EXPECT_LT(oracle::relative_error(ev.input_gradients[b], oracle::finite_difference(f, xs[b])), 1e-5);
  }
}

INSTANTIATE_TEST_SUITE_P(Activations, InputGradient,
                         ::testing::Values(Activation::tanh, Activation::sigmoid, Activation::relu),
                         [](const auto& info) { return to_string(info.param); });

TEST(InputGradient, ProjectionMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  const auto spec = NetworkSpec::mlp({1, 3, 3}, {5}, 3, Activation::tanh);
  const auto params = init_params(spec, 1);
  const auto shapes = spec.param_shapes();
  const Vector target = flatten(param_gradient(spec, params, std::vector<Example>{{oracle::random_unit_box(9, rng), 2}}));
  GradientProjection proj;
  proj.left_bases.resize(shapes.size());
  proj.masks.resize(shapes.size());
  proj.left_bases[0] = orthonormalize(oracle::random_matrix(5, 2, rng)).q;
  proj.masks[3] = {1, 0, 1};
  const std::vector<Vector> xs{oracle::random_unit_box(9, rng)};
  const std::vector<std::size_t> ys{2};
  const auto ev = evaluate_recon(spec, params, xs, ys, target, true, &proj);
  auto f = [&](const Vector& probe) {
    const std::vector<Vector> one{probe};
    return evaluate_recon(spec, params, one, ys, target, false, &proj).loss;
  };
  EXPECT_LT(oracle::relative_error(ev.input_gradients[0], oracle::finite_difference(f, xs[0])), 1e-5);
}

TEST(Flatten, RoundTripAndDimensionCheck) {
  const auto spec = small_conv(Activation::relu);
  const auto params = init_params(spec, 11);
  const Vector flat = flatten(params);
  EXPECT_EQ(flat.size(), params.dim());
  EXPECT_EQ(unflatten<ParamSet>(flat, spec.param_shapes()), params);
  EXPECT_THROW(unflatten<ParamSet>(Vector(flat.size() - 1), spec.param_shapes()), ContractViolation);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto spec = small_conv(Activation::tanh);
  const auto params = init_params(spec, 12);
  const auto bytes = encode_checkpoint(params);
  EXPECT_EQ(decode_checkpoint(bytes), params);
}

TEST(Checkpoint, TruncatedAndBadMagicFail) {
  const auto params = init_params(NetworkSpec::mlp({1, 2, 2}, {}, 2, Activation::none), 1);
  auto bytes = encode_checkpoint(params);
  auto truncated = bytes;
  truncated.pop_back();
  EXPECT_THROW(decode_checkpoint(truncated), ParseError);
  auto bad = bytes;
  bad[0] = 'X';
  try {
    decode_checkpoint(bad);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  bytes.push_back(0);
  EXPECT_THROW(decode_checkpoint(bytes), ParseError);
}

}  // namespace
}  // namespace gradshield
