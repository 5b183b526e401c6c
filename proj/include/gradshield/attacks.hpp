// Copyright 2026 The GradShield Authors.
// SPDX-License-Identifier: Apache-2.0

// Adversaries against shared gradients and trained models:
//  - cosine gradient inversion, optimized with Adam over the candidate input;
//  - the closed-form input recovery available through a dense first layer;
//  - threshold membership inference on confidence, loss and cross-entropy scores.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gradshield/compressors.hpp"
#include "gradshield/error.hpp"
#include "gradshield/linalg.hpp"
#include "gradshield/model.hpp"

namespace gradshield {

struct GradInvConfig {
  std::size_t iterations = 1000;
  std::size_t restarts = 4;
  double step_size = 0.1;
  /// Divide the step size by 10 at 3/8, 5/8 and 7/8 of the iterations.
  bool step_decay = true;
  bool box_constraint = true;
  double tv_weight = 0.0;
  std::uint64_t seed = 0;
  /// When false, labels are inferred from the last-layer bias gradient (batch size 1 only).
  bool label_known = true;
  /// Compare against the observed gradient after projecting the candidate
  /// gradient the way the observed payload was compressed.
  bool compression_aware = false;
  /// Explicit starting point for every restart (one vector per batch element).
  std::optional<std::vector<Vector>> init;

  void validate() const {
    require(restarts >= 1, "GradInvConfig: restarts must be >= 1");
    require(tv_weight >= 0.0, "GradInvConfig: tv_weight must be >= 0");
    require(step_size > 0.0, "GradInvConfig: step_size must be > 0");
  }
};

struct ReconResult {
  std::vector<Vector> inputs;  // best candidate batch
  std::vector<std::size_t> labels;
  double final_loss = 0.0;     // L_recon of `inputs`
  std::size_t restart = 0;     // index of the winning restart
  std::vector<double> restart_losses;
  std::vector<std::vector<double>> traces;  // per restart, L_recon per iteration (last entry: final iterate)
  double ssim = std::numeric_limits<double>::quiet_NaN();  // filled in by the scorer

  std::string trace_csv() const {
    std::string out = "iteration,restart,loss\n";
    char buf[96];
    for (std::size_t r = 0; r < traces.size(); ++r)
      for (std::size_t i = 0; i < traces[r].size(); ++i) {
        std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g\n", i, r, traces[r][i]);
        out += buf;
      }
    return out;
  }
};

/// The projection implied by an observed payload: low-rank tensors project
/// onto span(P̂), sparse tensors keep only their transmitted coordinates.
inline GradientProjection projection_from_payload(const CompressedGradient& c) {
  GradientProjection proj;
  proj.left_bases.resize(c.tensors.size());
  proj.masks.resize(c.tensors.size());
  for (std::size_t t = 0; t < c.tensors.size(); ++t) {
    if (const auto* l = std::get_if<LowRankPayload>(&c.tensors[t])) {
      proj.left_bases[t] = l->p;
    } else if (const auto* s = std::get_if<SparsePayload>(&c.tensors[t])) {
      proj.masks[t].assign(c.shapes[t].size(), 0);
      for (auto i : s->entries.indices) proj.masks[t][i] = 1;
    }
  }
  return proj;
}

/// For a single example, ∂L/∂b of the output layer is softmax − onehot(y), whose
/// only negative entry sits at the label.
inline std::size_t infer_label(const NetworkSpec& spec, std::span<const double> gradient) {
  const auto shapes = spec.param_shapes();
  std::size_t total = 0;
  for (const auto& s : shapes) total += s.size();
  require(gradient.size() == total, "infer_label: gradient dimension mismatch");
  const std::size_t bias_len = shapes.back().size();
  auto bias = gradient.subspan(total - bias_len, bias_len);
  return static_cast<std::size_t>(std::min_element(bias.begin(), bias.end()) - bias.begin());
}

namespace detail {

// Anisotropic total variation: mean absolute difference between neighbours.
inline double total_variation(const InputShape& s, std::span<const double> x, std::span<double> grad, double weight) {
  if (weight == 0.0) return 0.0;
  const std::size_t nh = s.channels * (s.height - 1) * s.width, nw = s.channels * s.height * (s.width - 1);
  double tv = 0.0;
  auto term = [&](std::size_t a, std::size_t b, double inv_count) {
    const double diff = x[a] - x[b];
    tv += std::abs(diff) * inv_count;
    const double sg = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
    grad[a] += weight * sg * inv_count;
    grad[b] -= weight * sg * inv_count;
  };
  for (std::size_t c = 0; c < s.channels; ++c)
    for (std::size_t i = 0; i < s.height; ++i)
      for (std::size_t j = 0; j < s.width; ++j) {
        const std::size_t p = (c * s.height + i) * s.width + j;
        if (i + 1 < s.height && nh) term(p + s.width, p, 1.0 / static_cast<double>(nh));
        if (j + 1 < s.width && nw) term(p + 1, p, 1.0 / static_cast<double>(nw));
      }
  return weight * tv;
}

}  // namespace detail

/// Minimizes 1 − cos(∇θ L(x, y; θ), observed) + tv_weight·TV(x) over the candidate
/// inputs with Adam, `restarts` times from x ~ N(0.5, 0.1) clamped to [0, 1].
/// Receives only what the adversary holds: model, parameters, observed gradient, labels.
inline ReconResult grad_inversion(const NetworkSpec& spec, const ParamSet& params, std::span<const double> observed,
                                  std::vector<std::size_t> labels, const GradInvConfig& cfg,
                                  const CompressedGradient* observed_payload = nullptr) {
  cfg.validate();
  require(norm(observed) > 0.0, "grad_inversion: observed gradient is zero");
  if (!cfg.label_known) {
    require(labels.size() <= 1, "grad_inversion: label inference supports batch size 1 only");
    labels.assign(1, infer_label(spec, observed));
  }
  require(!labels.empty(), "grad_inversion: need at least one label");
  const std::size_t B = labels.size();
  const std::size_t n = spec.input.size();
  if (cfg.init) {
    require(cfg.init->size() == B, "grad_inversion: init batch size differs from label count");
    for (const auto& v : *cfg.init) require(v.size() == n, "grad_inversion: init has wrong input size");
  }
  GradientProjection projection;
  if (cfg.compression_aware) {
    require(observed_payload != nullptr, "grad_inversion: compression-aware mode needs the observed payload");
    projection = projection_from_payload(*observed_payload);
  }
  const GradientProjection* proj = cfg.compression_aware ? &projection : nullptr;

  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  ReconResult result;
  result.labels = labels;
  result.final_loss = std::numeric_limits<double>::infinity();
  bool any_finite = false;

  for (std::size_t r = 0; r < cfg.restarts; ++r) {
    std::vector<Vector> x;
    if (cfg.init) {
      x = *cfg.init;
    } else {
      std::mt19937_64 rng(detail::mix_seed(cfg.seed, r));
      std::normal_distribution<double> dist(0.5, 0.1);
      x.assign(B, Vector(n));
      for (auto& v : x)
        for (double& p : v) p = std::clamp(dist(rng), 0.0, 1.0);
    }
    std::vector<Vector> m(B, Vector(n, 0.0)), v(B, Vector(n, 0.0));
    std::vector<double> trace;
    trace.reserve(cfg.iterations + 1);
    std::vector<Vector> best = x;
    double best_loss = std::numeric_limits<double>::infinity();
    double lr = cfg.step_size;

    auto consider = [&](double loss) {
      trace.push_back(loss);
      if (std::isfinite(loss) && loss < best_loss) {
        best_loss = loss;
        best = x;
      }
    };

    bool diverged = false;
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
      if (cfg.step_decay && (it == cfg.iterations * 3 / 8 || it == cfg.iterations * 5 / 8 || it == cfg.iterations * 7 / 8) && it > 0)
        lr *= 0.1;
      ReconEvaluation ev;
      try {
        ev = evaluate_recon(spec, params, x, labels, observed, true, proj);
      } catch (const UndefinedSimilarity&) {
        diverged = true;
        break;
      }
      consider(ev.loss);
      if (!std::isfinite(ev.loss)) {
        diverged = true;
        break;
      }
      const double t = static_cast<double>(it + 1);
      const double bc1 = 1.0 - std::pow(kBeta1, t), bc2 = 1.0 - std::pow(kBeta2, t);
      for (std::size_t b = 0; b < B; ++b) {
        Vector& grad = ev.input_gradients[b];
        detail::total_variation(spec.input, x[b], grad, cfg.tv_weight);
        for (std::size_t i = 0; i < n; ++i) {
          m[b][i] = kBeta1 * m[b][i] + (1.0 - kBeta1) * grad[i];
          v[b][i] = kBeta2 * v[b][i] + (1.0 - kBeta2) * grad[i] * grad[i];
          x[b][i] -= lr * (m[b][i] / bc1) / (std::sqrt(v[b][i] / bc2) + kEps);
          if (cfg.box_constraint) x[b][i] = std::clamp(x[b][i], 0.0, 1.0);
        }
      }
    }
    if (!diverged) {
      try {
        consider(evaluate_recon(spec, params, x, labels, observed, false, proj).loss);
      } catch (const UndefinedSimilarity&) {
        trace.push_back(std::numeric_limits<double>::quiet_NaN());
      }
    }
    result.traces.push_back(std::move(trace));
    result.restart_losses.push_back(best_loss);
    if (std::isfinite(best_loss)) any_finite = true;
    if (best_loss < result.final_loss) {
      result.final_loss = best_loss;
      result.restart = r;
      result.inputs = std::move(best);
    }
  }
  if (!any_finite) throw AttackFailure("grad_inversion: every restart ended with a non-finite loss");
  return result;
}

/// Closed-form recovery through a dense first layer with bias at batch size 1:
/// ∂L/∂W_i = (∂L/∂b_i)·xᵀ, so x = row_i(gW)/gb_i for the largest |gb_i|.
inline Vector linear_inversion_oracle(const Matrix& gw, std::span<const double> gb) {
  require(gw.rows() == gb.size(), "linear_inversion_oracle: bias length differs from weight rows");
  std::size_t best = 0;
  for (std::size_t i = 1; i < gb.size(); ++i)
    if (std::abs(gb[i]) > std::abs(gb[best])) best = i;
  if (gb.empty() || !(std::abs(gb[best]) > 1e-9))
    throw OracleInapplicable("linear_inversion_oracle: every bias gradient is ~0");
  Vector x(gw.cols());
  for (std::size_t j = 0; j < x.size(); ++j) x[j] = gw(best, j) / gb[best];
  return x;
}

// ---------------------------------------------------------------------------
// Membership inference

enum class MiaKind { prediction, loss, cross_entropy };

inline std::string to_string(MiaKind k) {
  switch (k) {
    case MiaKind::prediction: return "prediction";
    case MiaKind::loss: return "loss";
    case MiaKind::cross_entropy: return "cross_entropy";
  }
  return "?";
}

inline constexpr MiaKind kAllMiaKinds[] = {MiaKind::prediction, MiaKind::loss, MiaKind::cross_entropy};

/// Per-example scores where higher means "more likely a member".
struct MiaScores {
  Vector prediction;     // max softmax probability
  Vector loss;           // −loss(logits, y)
  Vector cross_entropy;  // −H(onehot(y), softmax(logits)), from the probability vector

  const Vector& of(MiaKind k) const {
    switch (k) {
      case MiaKind::prediction: return prediction;
      case MiaKind::loss: return loss;
      case MiaKind::cross_entropy: return cross_entropy;
    }
    return loss;
  }
};

inline MiaScores mia_scores(const NetworkSpec& spec, const ParamSet& params, std::span<const Example> examples) {
  MiaScores s;
  for (const auto& ex : examples) {
    const Vector logits = forward(spec, params, ex.x);
    const Vector p = softmax(logits);
    s.prediction.push_back(*std::max_element(p.begin(), p.end()));
    s.loss.push_back(-loss(logits, ex.y));
    double h = 0.0;
    for (std::size_t c = 0; c < p.size(); ++c) {
      const double target = c == ex.y ? 1.0 : 0.0;
      if (target > 0.0) h -= target * std::log(std::max(p[c], std::numeric_limits<double>::min()));
    }
    s.cross_entropy.push_back(-h);
  }
  return s;
}

struct MiaResult {
  MiaKind kind = MiaKind::loss;
  double balanced_accuracy = 0.5;
  double auc = 0.5;
  double threshold = 0.0;  // predict member when score > threshold
  double member_mean = 0.0;
  double nonmember_mean = 0.0;
};

/// Area under the ROC curve from the Mann–Whitney rank statistic (ties get average ranks).
inline double roc_auc(std::span<const double> members, std::span<const double> nonmembers) {
  require(!members.empty() && !nonmembers.empty(), "roc_auc: empty score set");
  std::vector<std::pair<double, bool>> all;
  for (double s : members) all.emplace_back(s, true);
  for (double s : nonmembers) all.emplace_back(s, false);
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].first == all[i].first) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k)
      if (all[k].second) rank_sum += avg_rank;
    i = j;
  }
  const double nm = static_cast<double>(members.size()), nn = static_cast<double>(nonmembers.size());
  return (rank_sum - nm * (nm + 1.0) / 2.0) / (nm * nn);
}

/// Picks the threshold, among midpoints of adjacent distinct scores, that maximizes
/// balanced accuracy on these very sets (ties → lower threshold).
inline MiaResult mia_attack(std::span<const double> members, std::span<const double> nonmembers,
                            MiaKind kind = MiaKind::loss) {
  require(!members.empty() && !nonmembers.empty(), "mia_attack: empty score set");
  MiaResult r;
  r.kind = kind;
  for (double s : members) r.member_mean += s;
  for (double s : nonmembers) r.nonmember_mean += s;
  r.member_mean /= static_cast<double>(members.size());
  r.nonmember_mean /= static_cast<double>(nonmembers.size());
  r.auc = roc_auc(members, nonmembers);

  std::vector<std::pair<double, bool>> all;
  for (double s : members) all.emplace_back(s, true);
  for (double s : nonmembers) all.emplace_back(s, false);
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  const double nm = static_cast<double>(members.size()), nn = static_cast<double>(nonmembers.size());

  // Sweeping upward: members at or below the threshold are misses, non-members there are correct rejections.
  r.threshold = all.front().first;
  r.balanced_accuracy = 0.5;
  bool have = false;
  std::size_t members_below = 0, nonmembers_below = 0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].first == all[i].first) {
      (all[j].second ? members_below : nonmembers_below)++;
      ++j;
    }
    if (j == all.size()) break;
    const double threshold = 0.5 * (all[i].first + all[j].first);
    const double tpr = (nm - static_cast<double>(members_below)) / nm;
    const double tnr = static_cast<double>(nonmembers_below) / nn;
    const double ba = 0.5 * (tpr + tnr);
    if (!have || ba > r.balanced_accuracy) {
      r.balanced_accuracy = ba;
      r.threshold = threshold;
      have = true;
    }
    i = j;
  }
  return r;
}

}  // namespace gradshield
