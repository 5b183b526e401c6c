// Copyright 2026 The GradShield Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "gradshield/compressors.hpp"
#include "oracles.hpp"

namespace gradshield {
namespace {

// A one-layer "gradient" holding matrix m and a zero bias.
GradientBuffer as_gradient(const Matrix& m) {
  GradientBuffer g;
  g.layers.push_back({m, Vector(m.rows(), 0.0)});
  return g;
}

GradientBuffer random_gradient(std::span<const TensorShape> shapes, std::mt19937_64& rng) {
  GradientBuffer g = zeros_like_shapes<GradientBuffer>(shapes);
  for (auto& l : g.layers) {
    for (double& v : l.weight.values()) v = std::normal_distribution<double>(0, 1)(rng);
    for (double& v : l.bias) v = std::normal_distribution<double>(0, 1)(rng);
  }
  return g;
}

// Matrix with prescribed singular values built from random orthonormal factors.
Matrix with_spectrum(std::size_t n, std::size_t m, const Vector& s, std::mt19937_64& rng) {
  const Matrix u = orthonormalize(oracle::random_matrix(n, s.size(), rng)).q;
  const Matrix v = orthonormalize(oracle::random_matrix(m, s.size(), rng)).q;
  Matrix us = u;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < s.size(); ++j) us(i, j) *= s[j];
  return matmul_a_bt(us, v);
}

double lowrank_error(const Matrix& m, std::size_t rank, std::size_t iters, std::uint64_t seed) {
  const CompressorKind kind = PowerSgd{rank, iters};
  const auto g = as_gradient(m);
  auto state = make_state(kind, g.shapes(), seed);
  const auto approx = decompress(compress(kind, state, g));
  return frobenius_norm(m - approx.layers[0].weight);
}

TEST(PowerSgd, FullRankReconstructs) {
  std::mt19937_64 rng(1);
  const Matrix m = oracle::random_matrix(6, 4, rng);
  EXPECT_LE(lowrank_error(m, 4, 2, 3) / frobenius_norm(m), 1e-6);
}

TEST(PowerSgd, ExactRankOneInputLeavesNoMemory) {
  std::mt19937_64 rng(2);
  const Vector u = oracle::random_vector(7, rng), v = oracle::random_vector(5, rng);
  Matrix m(7, 5);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 5; ++j) m(i, j) = 3.5 * u[i] * v[j];
  const CompressorKind kind = PowerSgd{1, 1};
  const auto g = as_gradient(m);
  auto state = make_state(kind, g.shapes(), 9);
  compress(kind, state, g);
  EXPECT_LE(norm(flatten(state.memory)), 1e-8);
}

TEST(PowerSgd, WarmStartConvergesToTruncationBound) {
  std::mt19937_64 rng(3);
  const Matrix m = oracle::random_matrix(20, 30, rng);
  const CompressorKind kind = PowerSgd{2, 2};
  const auto g = as_gradient(m);
  auto state = make_state(kind, g.shapes(), 4);
  double err = 0.0;
  for (int rep = 0; rep < 10; ++rep) {
    state.memory = zeros_like_shapes<GradientBuffer>(g.shapes());
    err = frobenius_norm(m - decompress(compress(kind, state, g)).layers[0].weight);
  }
  const double bound = truncation_error(svd(m).s, 2);
  EXPECT_GE(err, bound - 1e-12);
  EXPECT_LE(err, 1.05 * bound);
}

TEST(PowerSgd, NeverBeatsEckartYoung) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const Matrix m = oracle::random_matrix(20, 30, rng);
    const auto s = svd(m).s;
    for (std::size_t r : {1, 2, 4}) EXPECT_GE(lowrank_error(m, r, 1, trial), truncation_error(s, r) - 1e-10);
  }
}

TEST(PowerSgd, ErrorNonincreasingInRankWithDistinctSpectrum) {
  std::mt19937_64 rng(5);
  const Matrix m = with_spectrum(8, 6, Vector{32, 16, 8, 4, 2, 1}, rng);
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t r = 1; r <= 6; ++r) {
    const double err = lowrank_error(m, r, 20, 7);
    EXPECT_LE(err, prev + 1e-9) << "rank " << r;
    prev = err;
  }
  EXPECT_LE(prev, 1e-8);
}

TEST(PowerSgd, RankIsClampedWithWarning) {
  const CompressorKind kind = PowerSgd{50, 1};
  std::mt19937_64 rng(6);
  const auto g = as_gradient(oracle::random_matrix(4, 3, rng));
  auto state = make_state(kind, g.shapes(), 1);
  const auto c = compress(kind, state, g);
  EXPECT_EQ(c.effective_ranks(), (std::vector<std::size_t>{3, 0}));
  ASSERT_EQ(c.warnings.size(), 1u);
  EXPECT_NE(c.warnings[0].find("clamped to 3"), std::string::npos);
}

TEST(PowerSgd, BiasAndVectorTensorsTravelDense) {
  const CompressorKind kind = PowerSgd{1, 1};
  std::mt19937_64 rng(7);
  GradientBuffer g;
  g.layers.push_back({oracle::random_matrix(1, 6, rng), oracle::random_vector(1, rng)});
  g.layers.push_back({oracle::random_matrix(3, 1, rng), oracle::random_vector(3, rng)});
  auto state = make_state(kind, g.shapes(), 1);
  const auto c = compress(kind, state, g);
  for (const auto& t : c.tensors) EXPECT_TRUE(std::holds_alternative<DensePayload>(t));
  EXPECT_EQ(decompress(c), g);
}

TEST(Identity, RoundTripIsExactAndMemoryStaysZero) {
  std::mt19937_64 rng(8);
  const std::vector<TensorShape> shapes{{5, 4}, {5, 1}, {2, 5}, {2, 1}};
  auto state = make_state(Identity{}, shapes, 0);
  for (int step = 0; step < 3; ++step) {
    const auto g = random_gradient(shapes, rng);
    EXPECT_EQ(decompress(compress(Identity{}, state, g)), g);
    for (double v : flatten(state.memory)) EXPECT_EQ(v, 0.0);
  }
}

TEST(TopK, SparseScatterPlacesValues) {
  const CompressedGradient c{2, {{2, 2}, {2, 1}},
                             {SparsePayload{{4, {1, 2}, {5.0, -1.0}}}, SparsePayload{{2, {}, {}}}}, {}};
  EXPECT_EQ(decompress_flat(c), (Vector{0, 5, -1, 0, 0, 0}));
}

TEST(TopK, GlobalScopeKeepsLargestEntriesAcrossLayers) {
  GradientBuffer g;
  g.layers.push_back({Matrix{{0.1, -9}, {0.2, 0.3}}, Vector{0.0, 4}});
  g.layers.push_back({Matrix{{-7, 0.5}}, Vector{0.05}});
  const CompressorKind kind = TopK{0.3, TopKScope::global};  // round(0.3·9) = 3
  auto state = make_state(kind, g.shapes(), 0);
  const Vector sent = decompress_flat(compress(kind, state, g));
  EXPECT_EQ(sent, (Vector{0, -9, 0, 0, 0, 4, -7, 0, 0}));
}

TEST(TopK, PerLayerScopeKeepsAtLeastOnePerTensor) {
  GradientBuffer g;
  g.layers.push_back({Matrix{{1, 2}, {3, 4}}, Vector{0.5, -0.25}});
  const CompressorKind kind = TopK{0.01, TopKScope::per_layer};
  auto state = make_state(kind, g.shapes(), 0);
  EXPECT_EQ(decompress_flat(compress(kind, state, g)), (Vector{0, 0, 0, 4, 0.5, 0}));
}

TEST(ErrorFeedback, ConservationHoldsForEveryKind) {
  std::mt19937_64 rng(9);
  const std::vector<TensorShape> shapes{{6, 5}, {6, 1}, {3, 6}, {3, 1}};
  for (const CompressorKind kind : {CompressorKind{Identity{}}, CompressorKind{PowerSgd{1, 1}},
                                    CompressorKind{PowerSgd{3, 2}}, CompressorKind{TopK{0.1}},
                                    CompressorKind{TopK{0.2, TopKScope::per_layer}}}) {
    auto state = make_state(kind, shapes, 17);
    for (int step = 0; step < 50; ++step) {
      const auto g = random_gradient(shapes, rng);
      const Vector before = flatten(state.memory);
      const auto c = compress(kind, state, g);
      const Vector lhs = decompress_flat(c), after = flatten(state.memory), raw = flatten(g);
      for (std::size_t i = 0; i < lhs.size(); ++i)
        ASSERT_NEAR(lhs[i] + after[i], raw[i] + before[i], 1e-10) << describe(kind) << " step " << step;
    }
  }
}

TEST(Cosine, CeilingBelowOneWhenMassIsDiscarded) {
  std::mt19937_64 rng(10);
  const std::vector<TensorShape> shapes{{8, 8}, {8, 1}};
  for (const CompressorKind kind : {CompressorKind{PowerSgd{1, 1}}, CompressorKind{TopK{0.25}}}) {
    auto state = make_state(kind, shapes, 3);
    const auto g = random_gradient(shapes, rng);
    const Vector sent = decompress_flat(compress(kind, state, g));
    EXPECT_LT(cosine_similarity(flatten(g), sent), 1.0);
  }
  auto state = make_state(Identity{}, shapes, 3);
  const auto g = random_gradient(shapes, rng);
  EXPECT_EQ(cosine_similarity(flatten(g), decompress_flat(compress(Identity{}, state, g))), 1.0);
}

TEST(CompressedGradient, ElementCountNeverExceedsDimension) {
  std::mt19937_64 rng(11);
  const std::vector<TensorShape> shapes{{3, 40}, {3, 1}, {2, 3}, {2, 1}};
  for (const CompressorKind kind : {CompressorKind{PowerSgd{1, 1}}, CompressorKind{TopK{0.3}}, CompressorKind{Identity{}}}) {
    auto state = make_state(kind, shapes, 1);
    const auto c = compress(kind, state, random_gradient(shapes, rng));
    EXPECT_LE(c.transmitted_elements(), c.dim());
    EXPECT_NEAR(static_cast<double>(c.transmitted_elements()) / static_cast<double>(c.dim()),
                compression_ratio(kind, shapes), 1e-15);
  }
}

TEST(Ratio, HandCountedValues) {
  const std::vector<TensorShape> square{{10, 10}};
  EXPECT_EQ(compression_ratio(Identity{}, square), 1.0);
  EXPECT_DOUBLE_EQ(compression_ratio(PowerSgd{1, 1}, square), 0.2);
  EXPECT_DOUBLE_EQ(rank_equivalent_ratio(square, 1), 0.2);
  EXPECT_EQ(rank_equivalent_ratio(square, 10), 1.0);
}

TEST(Ratio, DeskMlpMatchesIndependentCount) {
  // 64 → 32 → 10 dense stack.
  const std::vector<TensorShape> shapes{{32, 64}, {32, 1}, {10, 32}, {10, 1}};
  const double d = 32 * 64 + 32 + 10 * 32 + 10;
  const double sent = 4 * (32 + 64) + 32 + 4 * (10 + 32) + 10;
  EXPECT_DOUBLE_EQ(rank_equivalent_ratio(shapes, 4), sent / d);
}

std::vector<TensorShape> load_shape_manifest(const std::string& path) {
  std::ifstream in(path);
  std::vector<TensorShape> shapes;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream fields(line);
    std::string name;
    std::size_t rows = 0, cols = 0;
    fields >> name >> rows >> cols;
    shapes.push_back({rows, cols});
  }
  return shapes;
}

TEST(Ratio, ResNet18LevelsReproduceTopKLabels) {
  const auto shapes = load_shape_manifest(std::string(GRADSHIELD_TEST_DATA) + "/resnet18_cifar10_shapes.txt");
  std::size_t d = 0;
  for (const auto& s : shapes) d += s.size();
  ASSERT_EQ(d, 11173962u);
  const std::pair<std::size_t, double> levels[] = {{1, 0.00411}, {2, 0.00736}, {4, 0.013863}, {30, 0.097427}, {50, 0.161347}};
  for (auto [rank, label] : levels) EXPECT_NEAR(rank_equivalent_ratio(shapes, rank), label, 5e-6) << "rank " << rank;
}

TEST(WireFormat, RoundTripEveryPayloadKind) {
  std::mt19937_64 rng(12);
  const std::vector<TensorShape> shapes{{6, 5}, {6, 1}, {3, 6}, {3, 1}};
  for (const CompressorKind kind : {CompressorKind{Identity{}}, CompressorKind{PowerSgd{2, 1}}, CompressorKind{TopK{0.2}}}) {
    auto state = make_state(kind, shapes, 1);
    const auto c = compress(kind, state, random_gradient(shapes, rng));
    const auto bytes = encode_compressed(c);
    EXPECT_EQ(decode_compressed(bytes), c);
    EXPECT_EQ(encode_compressed(decode_compressed(bytes)), bytes);
  }
}

TEST(WireFormat, CorruptIndicesAreRejected) {
  const CompressedGradient c{2, {{2, 2}}, {SparsePayload{{4, {1, 3}, {1.0, 2.0}}}}, {}};
  auto bytes = encode_compressed(c);
  // header (1 + 4) + shape (4 + 4) + tag (1) + nnz (4) → first index at offset 18.
  bytes[18] = 7;
  EXPECT_THROW(decode_compressed(bytes), ParseError);
  bytes.resize(10);
  EXPECT_THROW(decode_compressed(bytes), ParseError);
}

TEST(State, ShapeMismatchIsAContractViolation) {
  auto state = make_state(TopK{0.5}, std::vector<TensorShape>{{2, 2}, {2, 1}}, 0);
  EXPECT_THROW(compress(TopK{0.5}, state, as_gradient(Matrix(3, 3))), ContractViolation);
  EXPECT_THROW(validate(CompressorKind{TopK{0.0}}), ContractViolation);
  EXPECT_THROW(validate(CompressorKind{PowerSgd{0, 1}}), ContractViolation);
}

}  // namespace
}  // namespace gradshield
