// Copyright 2026 The GradShield Authors.
// SPDX-License-Identifier: Apache-2.0

// Deterministic N-worker data-parallel SGD. Each step every worker draws a
// batch from its shard, computes the mean gradient, compresses it with its own
// error-feedback state, and the server averages the decompressed gradients in
// worker order. A tap sink can observe any (step, worker) gradient pair without
// perturbing the run.

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "gradshield/compressors.hpp"
#include "gradshield/error.hpp"
#include "gradshield/model.hpp"

namespace gradshield {

enum class Aggregation { decompress_mean, factor_allreduce };

struct SimConfig {
  std::size_t workers = 1;
  std::size_t batch_size = 1;
  double learning_rate = 0.1;
  std::size_t steps = 1;
  std::uint64_t seed = 0;
  CompressorKind compressor = Identity{};
  NetworkSpec network;
  std::shared_ptr<const Dataset> dataset;
  Aggregation aggregation = Aggregation::decompress_mean;
  /// Starting point; defaults to init_params(network, seed).
  std::optional<ParamSet> initial_params;

  void validate() const {
    require(workers >= 1, "SimConfig: workers must be >= 1");
    require(batch_size >= 1, "SimConfig: batch_size must be >= 1");
    require(learning_rate > 0.0 && std::isfinite(learning_rate), "SimConfig: learning_rate must be > 0");
    require(dataset != nullptr, "SimConfig: dataset missing");
    require(dataset->size() >= workers, "SimConfig: fewer examples than workers");
    require(dataset->shape == network.input, "SimConfig: dataset shape does not match network input");
    require(dataset->classes == network.classes, "SimConfig: dataset class count does not match network");
    gradshield::validate(compressor);
    require(aggregation == Aggregation::decompress_mean || std::holds_alternative<PowerSgd>(compressor),
            "SimConfig: factor all-reduce needs a PowerSGD compressor");
    network.resolve();
  }
};

/// Splits [0, size) into N disjoint shards after a seeded shuffle; shard sizes differ by at most one.
inline std::vector<std::vector<std::size_t>> partition(std::size_t size, std::size_t n, std::uint64_t seed) {
  require(n >= 1, "partition: need at least one shard");
  require(n <= size, "partition: more shards (" + std::to_string(n) + ") than examples (" + std::to_string(size) + ")");
  std::vector<std::size_t> order(size);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> shards(n);
  const std::size_t base = size / n, extra = size % n;
  std::size_t pos = 0;
  for (std::size_t w = 0; w < n; ++w) {
    const std::size_t len = base + (w < extra ? 1 : 0);
    shards[w].assign(order.begin() + static_cast<std::ptrdiff_t>(pos), order.begin() + static_cast<std::ptrdiff_t>(pos + len));
    pos += len;
  }
  return shards;
}

struct WorkerState {
  std::size_t id = 0;
  std::vector<std::size_t> shard;
  CompressorState compressor;
  std::vector<std::size_t> epoch_order;
  std::size_t cursor = 0;
  std::mt19937_64 rng;

  /// Next batch, without replacement within an epoch; the shard is reshuffled at each epoch boundary.
  std::vector<std::size_t> draw(std::size_t batch) {
    std::vector<std::size_t> out;
    out.reserve(batch);
    while (out.size() < batch) {
      if (cursor == epoch_order.size()) {
        epoch_order = shard;
        std::shuffle(epoch_order.begin(), epoch_order.end(), rng);
        cursor = 0;
      }
      out.push_back(epoch_order[cursor++]);
    }
    return out;
  }
};

struct StepLog {
  std::size_t step = 0;
  double mean_loss = 0.0;
  double ratio = 0.0;
  double grad_norm_true = 0.0;
  double grad_norm_observed = 0.0;
};

struct TrainLog {
  std::vector<StepLog> rows;
  ParamSet final_params;

  std::string to_csv() const {
    std::string out = "step,mean_loss,ratio,grad_norm_true,grad_norm_observed\n";
    char buf[160];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g\n", r.step, r.mean_loss, r.ratio, r.grad_norm_true,
                    r.grad_norm_observed);
      out += buf;
    }
    return out;
  }
};

inline constexpr std::size_t kAggregateTap = static_cast<std::size_t>(-1);

/// What the adversary observes at one (step, worker): the true gradient g, the
/// decompressed observation ĝ, and the model state. `batch` is ground truth kept
/// for scoring only.
struct GradientTap {
  std::size_t step = 0;
  std::size_t worker = 0;  // kAggregateTap for the server-side aggregate
  Vector true_gradient;
  Vector observed;
  CompressedGradient payload;
  std::vector<Example> batch;
  ParamSet params;
};

struct TapSink {
  std::function<bool(std::size_t step, std::size_t worker)> wants;
  std::function<void(GradientTap&&)> take;
};

class Simulator {
 public:
  explicit Simulator(SimConfig config) : cfg_(std::move(config)) {
    cfg_.validate();
    params_ = cfg_.initial_params ? *cfg_.initial_params : init_params(cfg_.network, cfg_.seed);
    shapes_ = cfg_.network.param_shapes();
    require(params_.shapes() == shapes_, "Simulator: initial parameters do not match network");
    const auto shards = partition(cfg_.dataset->size(), cfg_.workers, cfg_.seed);
    for (std::size_t w = 0; w < cfg_.workers; ++w) {
      WorkerState ws;
      ws.id = w;
      ws.shard = shards[w];
      ws.compressor = make_state(cfg_.compressor, shapes_, cfg_.seed);
      ws.rng.seed(detail::mix_seed(cfg_.seed, 7919 + w));
      workers_.push_back(std::move(ws));
    }
  }

  const SimConfig& config() const noexcept { return cfg_; }
  const ParamSet& params() const noexcept { return params_; }
  std::size_t current_step() const noexcept { return step_; }
  const std::vector<WorkerState>& workers() const noexcept { return workers_; }

  StepLog step(const TapSink* sink = nullptr) {
    const std::size_t N = workers_.size();
    const std::size_t d = params_.dim();
    const auto& data = cfg_.dataset->examples;

    std::vector<std::vector<Example>> batches(N);
    std::vector<GradientBuffer> grads(N);
    double loss_sum = 0.0;
    for (std::size_t w = 0; w < N; ++w) {
      for (std::size_t idx : workers_[w].draw(cfg_.batch_size)) batches[w].push_back(data[idx]);
      double batch_loss = 0.0;
      grads[w] = param_gradient(cfg_.network, params_, batches[w], &batch_loss);
      check_finite(grads[w], w);
      loss_sum += batch_loss;
    }

    std::vector<CompressedGradient> sent(N);
    std::vector<Vector> observed(N);
    Vector aggregate(d, 0.0);
    if (cfg_.aggregation == Aggregation::factor_allreduce) {
      std::vector<CompressorState*> states;
      for (auto& w : workers_) states.push_back(&w.compressor);
      auto reduced = powersgd_allreduce(std::get<PowerSgd>(cfg_.compressor), states, grads);
      aggregate = flatten(reduced.aggregate);
      for (std::size_t w = 0; w < N; ++w) {
        observed[w] = decompress_flat(reduced.local[w]);
        sent[w] = std::move(reduced.local[w]);
      }
    } else {
      for (std::size_t w = 0; w < N; ++w) {
        sent[w] = compress(cfg_.compressor, workers_[w].compressor, grads[w]);
        observed[w] = decompress_flat(sent[w]);
      }
      // Fixed worker-ordered reduction.
      for (std::size_t w = 0; w < N; ++w)
        for (std::size_t i = 0; i < d; ++i) aggregate[i] += observed[w][i];
      const double inv = 1.0 / static_cast<double>(N);
      for (double& v : aggregate) v *= inv;
    }

    Vector mean_true(d, 0.0);
    std::vector<Vector> true_flat(N);
    for (std::size_t w = 0; w < N; ++w) {
      true_flat[w] = flatten(grads[w]);
      for (std::size_t i = 0; i < d; ++i) mean_true[i] += true_flat[w][i];
    }
    for (double& v : mean_true) v /= static_cast<double>(N);

    if (sink && sink->wants) {
      for (std::size_t w = 0; w < N; ++w)
        if (sink->wants(step_, w))
          sink->take(GradientTap{step_, w, true_flat[w], observed[w], sent[w], batches[w], params_});
      if (sink->wants(step_, kAggregateTap)) {
        std::vector<Example> all;
        for (const auto& b : batches) all.insert(all.end(), b.begin(), b.end());
        CompressedGradient dense{kind_tag(cfg_.compressor), shapes_, {}, {}};
        std::size_t pos = 0;
        for (const auto& s : shapes_) {
          dense.tensors.push_back(DensePayload{Vector(aggregate.begin() + static_cast<std::ptrdiff_t>(pos),
                                                      aggregate.begin() + static_cast<std::ptrdiff_t>(pos + s.size()))});
          pos += s.size();
        }
        sink->take(GradientTap{step_, kAggregateTap, mean_true, aggregate, std::move(dense), std::move(all), params_});
      }
    }

    // θ ← θ − lr · aggregate
    Vector theta = flatten(params_);
    for (std::size_t i = 0; i < d; ++i) theta[i] -= cfg_.learning_rate * aggregate[i];
    params_ = unflatten<ParamSet>(theta, shapes_);

    double transmitted = 0.0;
    for (const auto& c : sent) transmitted += static_cast<double>(c.transmitted_elements());
    StepLog row{step_, loss_sum / static_cast<double>(N), transmitted / static_cast<double>(N * d), norm(mean_true),
                norm(aggregate)};
    ++step_;
    return row;
  }

 private:
  void check_finite(const GradientBuffer& g, std::size_t worker) const {
    for (std::size_t l = 0; l < g.layers.size(); ++l) {
      if (!all_finite(g.layers[l].weight.data()) || !all_finite(g.layers[l].bias))
        throw NumericalError("non-finite gradient at step " + std::to_string(step_) + ", worker " +
                             std::to_string(worker) + ", layer " + std::to_string(l));
    }
  }

  SimConfig cfg_;
  ParamSet params_;
  std::vector<TensorShape> shapes_;
  std::vector<WorkerState> workers_;
  std::size_t step_ = 0;
};

/// Runs config.steps steps. Taps requested by `sink` are delivered as they occur.
inline TrainLog train(const SimConfig& config, const TapSink* sink = nullptr) {
  Simulator sim(config);
  TrainLog log;
  for (std::size_t s = 0; s < config.steps; ++s) log.rows.push_back(sim.step(sink));
  log.final_params = sim.params();
  return log;
}

/// Replays the run up to `step` and returns what `worker` exposed there.
inline GradientTap capture(const SimConfig& config, std::size_t step, std::size_t worker) {
  require(step < config.steps, "capture: step " + std::to_string(step) + " outside a run of " +
                                   std::to_string(config.steps) + " steps");
  require(worker < config.workers || worker == kAggregateTap, "capture: worker " + std::to_string(worker) + " out of range");
  Simulator sim(config);
  std::optional<GradientTap> tap;
  TapSink sink{[&](std::size_t s, std::size_t w) { return s == step && w == worker; },
               [&](GradientTap&& t) { tap = std::move(t); }};
  while (!tap) sim.step(&sink);
  return std::move(*tap);
}

}  // namespace gradshield
