// Copyright 2026 The GradShield Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradshield/attacks.hpp"
#include "gradshield/metrics.hpp"
#include "oracles.hpp"

namespace gradshield {
namespace {

struct Victim {
  NetworkSpec spec;
  ParamSet params;
  Vector x;
  std::size_t y = 0;
  Vector gradient;
};

Victim tanh_mlp_victim(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Victim v{NetworkSpec::mlp({1, 4, 4}, {12}, 4, Activation::tanh), {}, oracle::random_unit_box(16, rng), seed % 4, {}};
  v.params = init_params(v.spec, seed);
  v.gradient = flatten(param_gradient(v.spec, v.params, std::vector<Example>{{v.x, v.y}}));
  return v;
}

TEST(GradInversion, UncompressedGradientIsInvertedToNearZeroLoss) {
  const auto v = tanh_mlp_victim(1);
  GradInvConfig cfg;
  cfg.seed = 5;
  const auto r = grad_inversion(v.spec, v.params, v.gradient, {v.y}, cfg);
  EXPECT_LE(r.final_loss, 1e-3);
  EXPECT_GT(ssim(Image::from(v.spec.input, r.inputs[0]), Image::from(v.spec.input, v.x)), 0.9);
}

TEST(GradInversion, RestartDominanceAndBox) {
  const auto v = tanh_mlp_victim(2);
  GradInvConfig cfg;
  cfg.iterations = 60;
  cfg.restarts = 3;
  const auto r = grad_inversion(v.spec, v.params, v.gradient, {v.y}, cfg);
  ASSERT_EQ(r.restart_losses.size(), 3u);
  for (double l : r.restart_losses) EXPECT_LE(r.final_loss, l);
  EXPECT_EQ(r.final_loss, r.restart_losses[r.restart]);
  for (double p : r.inputs[0]) {
    EXPECT_GE(p, 0.0);
    EXPECT_LE(p, 1.0);
  }
  for (const auto& t : r.traces) EXPECT_EQ(t.size(), 61u);
  EXPECT_EQ(r.final_loss, recon_loss(v.spec, v.params, r.inputs[0], v.y, v.gradient));
}

TEST(GradInversion, ZeroIterationsReturnsInitWithItsLoss) {
  const auto spec = NetworkSpec::mlp({1, 4, 4}, {6}, 3, Activation::tanh);
  const auto params = init_params(spec, 3);
  const Vector grey(16, 0.5);
  const Vector g = flatten(param_gradient(spec, params, std::vector<Example>{{grey, 2}}));
  GradInvConfig cfg;
  cfg.iterations = 0;
  cfg.restarts = 2;
  cfg.init = std::vector<Vector>{grey};
  const auto r = grad_inversion(spec, params, g, {2}, cfg);
  EXPECT_EQ(r.inputs[0], grey);
  EXPECT_EQ(r.final_loss, recon_loss(spec, params, grey, 2, g));
  EXPECT_LE(r.final_loss, 1e-12);
}

TEST(GradInversion, DeterministicForFixedSeed) {
  const auto v = tanh_mlp_victim(4);
  GradInvConfig cfg;
  cfg.iterations = 50;
  cfg.restarts = 2;
  cfg.seed = 9;
  const auto a = grad_inversion(v.spec, v.params, v.gradient, {v.y}, cfg);
  const auto b = grad_inversion(v.spec, v.params, v.gradient, {v.y}, cfg);
  EXPECT_EQ(a.inputs, b.inputs);
  EXPECT_EQ(a.trace_csv(), b.trace_csv());
}

TEST(GradInversion, LowRankConvGradientRaisesTheFloor) {
  // A conv layer's weight gradient is a sum over spatial positions, so rank 1 discards mass.
  std::mt19937_64 rng(6);
  const auto spec = NetworkSpec::conv({1, 6, 6}, 4, 3, 3, Activation::tanh);
  const auto params = init_params(spec, 6);
  const Vector x = oracle::random_unit_box(36, rng);
  const auto g = param_gradient(spec, params, std::vector<Example>{{x, 1}});
  auto state = make_state(PowerSgd{1, 1}, g.shapes(), 2);
  const auto c = compress(PowerSgd{1, 1}, state, g);
  const Vector observed = decompress_flat(c);
  const double ceiling = cosine_similarity(flatten(g), observed);
  ASSERT_LT(ceiling, 1.0 - 1e-6);
  EXPECT_NEAR(recon_loss(spec, params, x, 1, observed), 1.0 - ceiling, 1e-12);

  GradInvConfig cfg;
  cfg.iterations = 300;
  cfg.restarts = 2;
  const auto plain = grad_inversion(spec, params, flatten(g), {1}, cfg);
  const auto squeezed = grad_inversion(spec, params, observed, {1}, cfg);
  EXPECT_LT(plain.final_loss, squeezed.final_loss);
  const auto shape = spec.input;
  EXPECT_GT(ssim(Image::from(shape, plain.inputs[0]), Image::from(shape, x)),
            ssim(Image::from(shape, squeezed.inputs[0]), Image::from(shape, x)));

  // Comparing through the payload's projection makes the true input optimal again.
  cfg.compression_aware = true;
  const auto aware = grad_inversion(spec, params, observed, {1}, cfg, &c);
  const GradientProjection proj = projection_from_payload(c);
  const std::vector<Vector> xs{x};
  const std::vector<std::size_t> ys{1};
  EXPECT_LE(evaluate_recon(spec, params, xs, ys, observed, false, &proj).loss, 1e-10);
  EXPECT_LE(aware.final_loss, squeezed.final_loss);
}

TEST(GradInversion, LabelInferenceFromLastBias) {
  for (std::uint64_t s = 0; s < 8; ++s) {
    const auto v = tanh_mlp_victim(s);
    EXPECT_EQ(infer_label(v.spec, v.gradient), v.y);
  }
  const auto v = tanh_mlp_victim(3);
  GradInvConfig cfg;
  cfg.iterations = 5;
  cfg.restarts = 1;
  cfg.label_known = false;
  EXPECT_EQ(grad_inversion(v.spec, v.params, v.gradient, {}, cfg).labels, (std::vector<std::size_t>{v.y}));
}

TEST(GradInversion, TotalVariationGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  const InputShape s{2, 3, 4};
  const Vector x = oracle::random_unit_box(s.size(), rng);
  Vector grad(s.size(), 0.0);
  const double tv = detail::total_variation(s, x, grad, 0.7);
  auto f = [&](const Vector& p) {
    Vector scratch(p.size(), 0.0);
    return detail::total_variation(s, p, scratch, 0.7);
  };
  EXPECT_NEAR(tv, f(x), 0.0);
  EXPECT_LT(oracle::relative_error(grad, oracle::finite_difference(f, x, 1e-7)), 1e-6);
}

TEST(GradInversion, RejectsBadInputs) {
  const auto v = tanh_mlp_victim(5);
  GradInvConfig cfg;
  EXPECT_THROW(grad_inversion(v.spec, v.params, Vector(v.gradient.size(), 0.0), {0}, cfg), ContractViolation);
  cfg.restarts = 0;
  EXPECT_THROW(grad_inversion(v.spec, v.params, v.gradient, {0}, cfg), ContractViolation);
  GradInvConfig aware;
  aware.compression_aware = true;
  EXPECT_THROW(grad_inversion(v.spec, v.params, v.gradient, {0}, aware), ContractViolation);
}

TEST(LinearOracle, RecoversInputExactly) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto v = tanh_mlp_victim(s);
    const auto g = unflatten(v.gradient, v.spec.param_shapes());
    const Vector x = linear_inversion_oracle(g.layers[0].weight, g.layers[0].bias);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(x[i], v.x[i], 1e-8);
  }
}

TEST(LinearOracle, ZeroBiasGradientIsInapplicable) {
  EXPECT_THROW(linear_inversion_oracle(Matrix(3, 4), Vector(3, 0.0)), OracleInapplicable);
}

TEST(LinearOracle, SparsifiedGradientBreaksRecovery) {
  const auto v = tanh_mlp_victim(6);
  const auto g = unflatten(v.gradient, v.spec.param_shapes());
  auto state = make_state(TopK{0.05}, g.shapes(), 0);
  const auto sent = decompress(compress(TopK{0.05}, state, g));
  double err = std::numeric_limits<double>::infinity();
  try {
    const Vector x = linear_inversion_oracle(sent.layers[0].weight, sent.layers[0].bias);
    err = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) err = std::max(err, std::abs(x[i] - v.x[i]));
  } catch (const OracleInapplicable&) {
  }
  EXPECT_GT(err, 0.0);
}

TEST(MiaScores, SaturatedAndUniformPredictions) {
  const NetworkSpec spec{{1, 1, 1}, {Dense{1, 3}}, 3};
  ParamSet p = init_params(spec, 0);
  p.layers[0].weight = Matrix(3, 1);
  p.layers[0].bias = Vector{0, 0, 0};
  const std::vector<Example> ex{{Vector{0.0}, 1}};
  auto s = mia_scores(spec, p, ex);
  EXPECT_NEAR(s.prediction[0], 1.0 / 3.0, 1e-15);
  p.layers[0].bias = Vector{0, 60, 0};
  s = mia_scores(spec, p, ex);
  EXPECT_NEAR(s.prediction[0], 1.0, 1e-15);
  EXPECT_LE(s.loss[0], 0.0);
  EXPECT_GT(s.loss[0], -1e-20);
  EXPECT_NEAR(s.cross_entropy[0], s.loss[0], 1e-20);
}

TEST(MiaAttack, SeparableAndIndistinguishable) {
  auto r = mia_attack(Vector{1, 1, 1}, Vector{0, 0});
  EXPECT_EQ(r.balanced_accuracy, 1.0);
  EXPECT_EQ(r.auc, 1.0);
  EXPECT_EQ(r.threshold, 0.5);
  r = mia_attack(Vector{0.3, 0.6, 0.9}, Vector{0.9, 0.6, 0.3});
  EXPECT_EQ(r.auc, 0.5);
  EXPECT_GE(r.balanced_accuracy, 0.5);
  EXPECT_LE(r.balanced_accuracy, 2.0 / 3.0);
  r = mia_attack(Vector{0.5, 0.5}, Vector{0.5});
  EXPECT_EQ(r.auc, 0.5);
  EXPECT_EQ(r.balanced_accuracy, 0.5);
}

TEST(MiaAttack, HandExampleAuc) {
  const Vector m{0.9, 0.8, 0.4}, n{0.7, 0.3, 0.2};
  // Concordant pairs: 0.9 and 0.8 beat all three, 0.4 beats 0.3 and 0.2 → 8 of 9.
  EXPECT_NEAR(roc_auc(m, n), 8.0 / 9.0, 1e-15);
  EXPECT_NEAR(roc_auc(m, n), oracle::brute_force_auc(m, n), 1e-15);
  const auto r = mia_attack(m, n);
  EXPECT_NEAR(r.balanced_accuracy, 5.0 / 6.0, 1e-15);
  // 0.35 and 0.75 both reach 5/6; the lower one wins.
  EXPECT_NEAR(r.threshold, 0.35, 1e-15);
}

TEST(MiaAttack, AucMatchesBruteForceWithTies) {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> level(0, 6), count(1, 50);
  for (int trial = 0; trial < 200; ++trial) {
    Vector m(count(rng)), n(count(rng));
    for (double& v : m) v = level(rng) / 6.0;
    for (double& v : n) v = level(rng) / 6.0 - 0.1;
    EXPECT_NEAR(roc_auc(m, n), oracle::brute_force_auc(m, n), 1e-12);
  }
}

TEST(MiaAttack, InvariantUnderStrictlyIncreasingMaps) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const Vector m = oracle::random_vector(20, rng), n = oracle::random_vector(17, rng, 1.5);
    Vector fm = m, fn = n;
    for (double& v : fm) v = std::exp(3.0 * v) + 2.0;
    for (double& v : fn) v = std::exp(3.0 * v) + 2.0;
    const auto a = mia_attack(m, n), b = mia_attack(fm, fn);
    EXPECT_EQ(a.balanced_accuracy, b.balanced_accuracy);
    EXPECT_NEAR(a.auc, b.auc, 1e-15);
    EXPECT_GE(a.balanced_accuracy, 0.5);
    EXPECT_LE(a.balanced_accuracy, 1.0);
  }
}

TEST(MiaScores, RandomModelCannotSeparateRandomData) {
  // Members and non-members drawn from the same distribution, model never trained.
  double auc_sum = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    const auto spec = NetworkSpec::mlp({1, 4, 4}, {8}, 3, Activation::relu);
    const auto params = init_params(spec, seed);
    std::vector<Example> members, others;
    for (int i = 0; i < 200; ++i) members.push_back({oracle::random_unit_box(16, rng), static_cast<std::size_t>(i % 3)});
    for (int i = 0; i < 200; ++i) others.push_back({oracle::random_unit_box(16, rng), static_cast<std::size_t>(i % 3)});
    const auto sm = mia_scores(spec, params, members), so = mia_scores(spec, params, others);
    auc_sum += mia_attack(sm.loss, so.loss).auc;
  }
  // Mann–Whitney AUC std for 200 vs 200 is ≈ 0.029; the 5-seed mean has std ≈ 0.013.
  EXPECT_NEAR(auc_sum / 5.0, 0.5, 0.05);
}

}  // namespace
}  // namespace gradshield
