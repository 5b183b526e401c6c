// Copyright 2026 The GradShield Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <memory>

#include "gradshield/checkpoint.hpp"
#include "gradshield/distsim.hpp"
#include "gradshield/harness/dataset.hpp"
#include "oracles.hpp"

namespace gradshield {
namespace {

std::shared_ptr<const Dataset> blobs(std::size_t size, double separation, std::uint64_t seed) {
  return std::make_shared<const Dataset>(
      harness::generate_synthetic({4, {1, 4, 4}, separation, 0.1, seed, size}));
}

SimConfig base_config(CompressorKind kind = Identity{}, std::size_t workers = 1) {
  SimConfig cfg;
  cfg.workers = workers;
  cfg.batch_size = 4;
  cfg.learning_rate = 0.5;
  cfg.steps = 20;
  cfg.seed = 3;
  cfg.compressor = kind;
  cfg.network = NetworkSpec::mlp({1, 4, 4}, {8}, 4, Activation::tanh);
  cfg.dataset = blobs(40, 5.0, 1);
  return cfg;
}

TEST(Partition, SingleShardIsWholeDataset) {
  const auto shards = partition(7, 1, 0);
  ASSERT_EQ(shards.size(), 1u);
  auto s = shards[0];
  std::sort(s.begin(), s.end());
  EXPECT_EQ(s, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6}));
}

TEST(Partition, PigeonholeSizesAndCoverage) {
  const auto shards = partition(10, 3, 42);
  EXPECT_EQ(shards[0].size(), 4u);
  EXPECT_EQ(shards[1].size(), 3u);
  EXPECT_EQ(shards[2].size(), 3u);
  std::vector<std::size_t> all;
  for (const auto& s : shards) all.insert(all.end(), s.begin(), s.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(all[i], i);
  EXPECT_THROW(partition(2, 3, 0), ContractViolation);
}

TEST(Step, IdentitySingleWorkerIsPlainSgd) {
  auto cfg = base_config();
  Simulator sim(cfg);
  // Standalone loop: same draw order, no compressor.
  WorkerState shadow = sim.workers()[0];
  ParamSet theta = sim.params();
  for (int s = 0; s < 10; ++s) {
    std::vector<Example> batch;
    for (auto i : shadow.draw(cfg.batch_size)) batch.push_back(cfg.dataset->examples[i]);
    const Vector g = flatten(param_gradient(cfg.network, theta, batch));
    Vector flat = flatten(theta);
    for (std::size_t i = 0; i < flat.size(); ++i) flat[i] -= cfg.learning_rate * g[i];
    theta = unflatten<ParamSet>(flat, cfg.network.param_shapes());
    sim.step();
    const Vector a = flatten(sim.params()), b = flatten(theta);
    for (std::size_t i = 0; i < a.size(); ++i) ASSERT_NEAR(a[i], b[i], 1e-12) << "step " << s;
  }
}

TEST(Step, TwoWorkersMatchConcatenatedBatch) {
  auto cfg = base_config(Identity{}, 2);
  Simulator sim(cfg);
  auto w0 = sim.workers()[0], w1 = sim.workers()[1];
  std::vector<Example> joint;
  for (auto i : w0.draw(cfg.batch_size)) joint.push_back(cfg.dataset->examples[i]);
  for (auto i : w1.draw(cfg.batch_size)) joint.push_back(cfg.dataset->examples[i]);
  const Vector g = flatten(param_gradient(cfg.network, sim.params(), joint));
  Vector expect = flatten(sim.params());
  for (std::size_t i = 0; i < expect.size(); ++i) expect[i] -= cfg.learning_rate * g[i];
  sim.step();
  const Vector got = flatten(sim.params());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], expect[i], 1e-12);
}

TEST(Step, IdenticalWorkerDataMatchesSingleWorker) {
  // Every example identical, so every worker's batch is the same.
  auto data = std::make_shared<Dataset>(*blobs(12, 5.0, 2));
  for (auto& ex : data->examples) ex = data->examples[0];
  auto one = base_config();
  one.dataset = data;
  auto three = base_config(Identity{}, 3);
  three.dataset = data;
  Simulator a(one), b(three);
  a.step();
  b.step();
  const Vector pa = flatten(a.params()), pb = flatten(b.params());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_NEAR(pa[i], pb[i], 1e-14);
}

TEST(Step, NonFiniteGradientNamesWorkerAndLayer) {
  auto cfg = base_config();
  ParamSet p = init_params(cfg.network, 0);
  p.layers[1].weight(0, 0) = std::numeric_limits<double>::quiet_NaN();
  cfg.initial_params = p;
  Simulator sim(cfg);
  try {
    sim.step();
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("worker 0"), std::string::npos);
    EXPECT_NE(what.find("layer"), std::string::npos);
  }
}

TEST(Train, ZeroStepsLeavesParamsUnchanged) {
  auto cfg = base_config();
  cfg.steps = 0;
  EXPECT_EQ(train(cfg).final_params, init_params(cfg.network, cfg.seed));
}

TEST(Train, SameSeedGivesBitIdenticalCheckpoint) {
  for (const CompressorKind kind : {CompressorKind{Identity{}}, CompressorKind{PowerSgd{1, 1}}, CompressorKind{TopK{0.1}}}) {
    auto cfg = base_config(kind, 2);
    EXPECT_EQ(encode_checkpoint(train(cfg).final_params), encode_checkpoint(train(cfg).final_params));
    EXPECT_EQ(train(cfg).to_csv(), train(cfg).to_csv());
  }
}

TEST(Train, SeparableTaskConverges) {
  auto cfg = base_config();
  cfg.steps = 500;
  cfg.dataset = blobs(40, 8.0, 4);
  const auto log = train(cfg);
  ASSERT_EQ(log.rows.size(), 500u);
  double mean = 0.0;
  for (std::size_t i = 490; i < 500; ++i) mean += log.rows[i].mean_loss / 10.0;
  EXPECT_LT(mean, 0.1);
}

double full_loss(const SimConfig& cfg, const ParamSet& p) {
  double s = 0.0;
  for (const auto& ex : cfg.dataset->examples) s += loss(forward(cfg.network, p, ex.x), ex.y);
  return s / static_cast<double>(cfg.dataset->size());
}

TEST(Train, ErrorFeedbackDoesNoLongRunHarm) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto base = base_config();
    base.steps = 500;
    base.seed = seed;
    base.dataset = blobs(40, 8.0, 10 + seed);
    auto topk = base;
    topk.compressor = TopK{0.1};
    const double ref = full_loss(base, train(base).final_params);
    const double compressed = full_loss(topk, train(topk).final_params);
    EXPECT_LE(compressed, 2.0 * ref + 1e-3) << "seed " << seed;
  }
}

TEST(Train, CsvHasOneRowPerStep) {
  auto cfg = base_config(TopK{0.25});
  cfg.steps = 3;
  const auto csv = train(cfg).to_csv();
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  EXPECT_EQ(csv.rfind("step,mean_loss,ratio,grad_norm_true,grad_norm_observed\n", 0), 0u);
}

TEST(Capture, IdentityTapIsExact) {
  const auto tap = capture(base_config(), 5, 0);
  EXPECT_EQ(tap.step, 5u);
  EXPECT_EQ(tap.true_gradient, tap.observed);
  EXPECT_EQ(tap.batch.size(), 4u);
}

TEST(Capture, LowRankTapLosesAlignmentAndIsReproducible) {
  auto cfg = base_config(PowerSgd{1, 1}, 2);
  const auto tap = capture(cfg, 3, 1);
  EXPECT_LT(cosine_similarity(tap.true_gradient, tap.observed), 1.0);
  const auto again = capture(cfg, 3, 1);
  EXPECT_EQ(again.observed, tap.observed);
  EXPECT_EQ(again.true_gradient, tap.true_gradient);
  EXPECT_EQ(again.payload, tap.payload);
  EXPECT_THROW(capture(cfg, 20, 0), ContractViolation);
  EXPECT_THROW(capture(cfg, 0, 2), ContractViolation);
}

TEST(Capture, TapsDoNotPerturbTraining) {
  auto cfg = base_config(TopK{0.2}, 2);
  const auto plain = train(cfg);
  std::size_t seen = 0;
  TapSink sink{[](std::size_t, std::size_t) { return true; }, [&](GradientTap&&) { ++seen; }};
  const auto tapped = train(cfg, &sink);
  EXPECT_EQ(seen, cfg.steps * 3);
  EXPECT_EQ(plain.final_params, tapped.final_params);
}

TEST(FactorAllReduce, SingleWorkerMatchesLocalCompression) {
  auto local = base_config(PowerSgd{2, 1});
  auto factor = local;
  factor.aggregation = Aggregation::factor_allreduce;
  const Vector a = flatten(train(local).final_params), b = flatten(train(factor).final_params);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(FactorAllReduce, ConservesMeanGradientMass) {
  // Σ_w (A_w − e_w') = N · aggregate for every step.
  auto cfg = base_config(PowerSgd{1, 1}, 3);
  cfg.aggregation = Aggregation::factor_allreduce;
  const auto shapes = cfg.network.param_shapes();
  std::vector<CompressorState> states;
  for (int w = 0; w < 3; ++w) states.push_back(make_state(cfg.compressor, shapes, 5));
  std::vector<CompressorState*> ptrs{&states[0], &states[1], &states[2]};
  std::mt19937_64 rng(1);
  for (int step = 0; step < 10; ++step) {
    std::vector<GradientBuffer> grads;
    Vector acc(flatten(states[0].memory).size(), 0.0);
    for (int w = 0; w < 3; ++w) {
      GradientBuffer g = zeros_like_shapes<GradientBuffer>(shapes);
      for (auto& l : g.layers) {
        for (double& v : l.weight.values()) v = std::normal_distribution<double>(0, 1)(rng);
        for (double& v : l.bias) v = std::normal_distribution<double>(0, 1)(rng);
      }
      const Vector e = flatten(states[w].memory), gf = flatten(g);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += gf[i] + e[i];
      grads.push_back(std::move(g));
    }
    const auto out = powersgd_allreduce(std::get<PowerSgd>(cfg.compressor), ptrs, grads);
    const Vector agg = flatten(out.aggregate);
    for (int w = 0; w < 3; ++w) {
      const Vector e = flatten(states[w].memory);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] -= e[i];
    }
    for (std::size_t i = 0; i < acc.size(); ++i) ASSERT_NEAR(acc[i], 3.0 * agg[i], 1e-10);
  }
}

TEST(Config, ValidationRejectsBadValues) {
  auto cfg = base_config();
  cfg.learning_rate = 0.0;
  EXPECT_THROW(Simulator{cfg}, ContractViolation);
  cfg = base_config(Identity{}, 41);
  EXPECT_THROW(Simulator{cfg}, ContractViolation);
  cfg = base_config();
  cfg.aggregation = Aggregation::factor_allreduce;
  EXPECT_THROW(Simulator{cfg}, ContractViolation);
}

}  // namespace
}  // namespace gradshield
