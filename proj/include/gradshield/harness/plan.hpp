// Copyright 2026 The GradShield Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "gradshield/attacks.hpp"
#include "gradshield/checkpoint.hpp"
#include "gradshield/compressors.hpp"
#include "gradshield/distsim.hpp"
#include "gradshield/harness/config.hpp"
#include "gradshield/harness/dataset.hpp"
#include "gradshield/harness/tap.hpp"
#include "gradshield/metrics.hpp"
#include "json.hpp"

namespace gradshield::harness {

inline constexpr const char* kVersion = "0.1.0";

struct SsimRow {
  std::string dataset;
  std::string algorithm;
  std::string rank_or_ratio;
  std::size_t matched_rank = 0;
  std::string effective_rank;  // per low-rank tensor, '/'-separated
  double compression_ratio = 0.0;
  std::size_t attack_step = 0;
  std::vector<double> values;  // per-sample SSIM
  double mean = std::numeric_limits<double>::quiet_NaN();
  double std = std::numeric_limits<double>::quiet_NaN();
  std::optional<double> percent;
  std::size_t negatives = 0;
  std::string attack_hash;
  std::string status = "ok";
};

struct SampleRow {
  std::string dataset;
  std::string algorithm;
  std::string rank_or_ratio;
  std::size_t sample = 0;
  std::size_t step = 0;
  std::size_t worker = 0;
  std::size_t label = 0;
  std::uint64_t attack_seed = 0;
  double ssim = std::numeric_limits<double>::quiet_NaN();
  double recon_loss = std::numeric_limits<double>::quiet_NaN();
  double loss_at_truth = std::numeric_limits<double>::quiet_NaN();
  double cosine = std::numeric_limits<double>::quiet_NaN();
  double discarded_energy = std::numeric_limits<double>::quiet_NaN();
  std::size_t restart = 0;
  std::string status = "ok";
};

struct MiaRow {
  std::string dataset;
  std::string algorithm;
  std::string rank_or_ratio;
  std::size_t matched_rank = 0;
  std::string attack;  // prediction | loss | cross_entropy
  double balanced_accuracy = std::numeric_limits<double>::quiet_NaN();
  double auc = std::numeric_limits<double>::quiet_NaN();
  double threshold = std::numeric_limits<double>::quiet_NaN();
  std::size_t members = 0;
  std::size_t nonmembers = 0;
  double member_accuracy = std::numeric_limits<double>::quiet_NaN();
  double nonmember_accuracy = std::numeric_limits<double>::quiet_NaN();
  std::string status = "ok";
};

struct ReportBundle {
  nlohmann::ordered_json manifest;
  std::string manifest_hash;
  std::vector<SsimRow> ssim;
  std::vector<SampleRow> samples;
  std::vector<MiaRow> mia;
  bool partial = false;

  std::string ssim_csv() const;
  std::string samples_csv() const;
  std::string mia_csv() const;
};

// ---------------------------------------------------------------------------
// CSV rendering

namespace detail {

inline std::string fmt(double v, const char* spec = "%.6f") {
  if (!std::isfinite(v)) return "NA";
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

inline std::string csv_line(std::initializer_list<std::string> cells) {
  std::string out;
  bool first = true;
  for (const auto& c : cells) {
    if (!first) out += ',';
    out += csv_field(c);
    first = false;
  }
  return out + "\n";
}

}  // namespace detail

inline std::string ReportBundle::ssim_csv() const {
  using detail::fmt;
  std::string out = "# manifest " + manifest_hash + "\n";
  out += "# std is the population standard deviation; negative SSIM values are kept unclamped and counted in negative_samples\n";
  out += detail::csv_line({"algorithm", "rank_or_ratio", "dataset", "mean_ssim", "std_ssim", "percent_of_baseline",
                           "n_samples", "attack_config_hash", "matched_rank", "effective_rank", "compression_ratio", "attack_step",
                           "negative_samples", "status"});
  for (const auto& r : ssim)
    out += detail::csv_line({r.algorithm, r.rank_or_ratio, r.dataset, fmt(r.mean), fmt(r.std),
                             r.percent ? fmt(*r.percent, "%.2f") : "NA", std::to_string(r.values.size()), r.attack_hash,
                             std::to_string(r.matched_rank), r.effective_rank, fmt(r.compression_ratio), std::to_string(r.attack_step),
                             std::to_string(r.negatives), r.status});
  return out;
}

inline std::string ReportBundle::samples_csv() const {
  using detail::fmt;
  std::string out = "# manifest " + manifest_hash + "\n";
  out += detail::csv_line({"algorithm", "rank_or_ratio", "dataset", "sample", "step", "worker", "label", "attack_seed",
                           "ssim", "recon_loss", "loss_at_truth", "cosine", "discarded_energy", "restart", "status"});
  for (const auto& r : samples)
    out += detail::csv_line({r.algorithm, r.rank_or_ratio, r.dataset, std::to_string(r.sample), std::to_string(r.step),
                             std::to_string(r.worker), std::to_string(r.label), std::to_string(r.attack_seed),
                             fmt(r.ssim, "%.10g"), fmt(r.recon_loss, "%.10g"), fmt(r.loss_at_truth, "%.10g"),
                             fmt(r.cosine, "%.10g"), fmt(r.discarded_energy, "%.10g"), std::to_string(r.restart),
                             r.status});
  return out;
}

inline std::string ReportBundle::mia_csv() const {
  using detail::fmt;
  std::string out = "# manifest " + manifest_hash + "\n";
  out += "# threshold chosen on the evaluation sets themselves (optimistic adversary)\n";
  out += detail::csv_line({"algorithm", "rank_or_ratio", "dataset", "attack", "balanced_accuracy", "auc", "threshold",
                           "members", "nonmembers", "member_accuracy", "nonmember_accuracy", "matched_rank", "status"});
  for (const auto& r : mia)
    out += detail::csv_line({r.algorithm, r.rank_or_ratio, r.dataset, r.attack, fmt(r.balanced_accuracy), fmt(r.auc),
                             fmt(r.threshold, "%.10g"), std::to_string(r.members), std::to_string(r.nonmembers),
                             fmt(r.member_accuracy), fmt(r.nonmember_accuracy), std::to_string(r.matched_rank), r.status});
  return out;
}

// ---------------------------------------------------------------------------
// Bundle serialization (bundle.json carries every row at full precision)

namespace detail {

inline nlohmann::ordered_json num(double v) {
  return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(nullptr);
}
inline double num(const nlohmann::ordered_json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

}  // namespace detail

inline nlohmann::ordered_json to_json(const ReportBundle& b) {
  using detail::num;
  nlohmann::ordered_json j;
  j["manifest_hash"] = b.manifest_hash;
  j["partial"] = b.partial;
  j["manifest"] = b.manifest;
  auto& ssim = j["ssim"] = nlohmann::ordered_json::array();
  for (const auto& r : b.ssim) {
    nlohmann::ordered_json values = nlohmann::ordered_json::array();
    for (double v : r.values) values.push_back(num(v));
    ssim.push_back({{"dataset", r.dataset}, {"algorithm", r.algorithm}, {"rank_or_ratio", r.rank_or_ratio},
                    {"matched_rank", r.matched_rank}, {"effective_rank", r.effective_rank},
                    {"compression_ratio", num(r.compression_ratio)}, {"attack_step", r.attack_step},
                    {"values", values}, {"mean", num(r.mean)}, {"std", num(r.std)},
                    {"percent", r.percent ? num(*r.percent) : nlohmann::ordered_json(nullptr)},
                    {"negatives", r.negatives}, {"attack_hash", r.attack_hash}, {"status", r.status}});
  }
  auto& samples = j["samples"] = nlohmann::ordered_json::array();
  for (const auto& r : b.samples)
    samples.push_back({{"dataset", r.dataset}, {"algorithm", r.algorithm}, {"rank_or_ratio", r.rank_or_ratio},
                       {"sample", r.sample}, {"step", r.step}, {"worker", r.worker}, {"label", r.label},
                       {"attack_seed", r.attack_seed}, {"ssim", num(r.ssim)}, {"recon_loss", num(r.recon_loss)},
                       {"loss_at_truth", num(r.loss_at_truth)}, {"cosine", num(r.cosine)},
                       {"discarded_energy", num(r.discarded_energy)}, {"restart", r.restart}, {"status", r.status}});
  auto& mia = j["mia"] = nlohmann::ordered_json::array();
  for (const auto& r : b.mia)
    mia.push_back({{"dataset", r.dataset}, {"algorithm", r.algorithm}, {"rank_or_ratio", r.rank_or_ratio},
                   {"matched_rank", r.matched_rank}, {"attack", r.attack},
                   {"balanced_accuracy", num(r.balanced_accuracy)}, {"auc", num(r.auc)},
                   {"threshold", num(r.threshold)}, {"members", r.members}, {"nonmembers", r.nonmembers},
                   {"member_accuracy", num(r.member_accuracy)}, {"nonmember_accuracy", num(r.nonmember_accuracy)},
                   {"status", r.status}});
  return j;
}

inline ReportBundle bundle_from_json(const nlohmann::ordered_json& j) {
  using detail::num;
  ReportBundle b;
  try {
    b.manifest_hash = j.at("manifest_hash").get<std::string>();
    b.partial = j.at("partial").get<bool>();
    b.manifest = j.at("manifest");
    for (const auto& r : j.at("ssim")) {
      SsimRow row;
      row.dataset = r.at("dataset");
      row.algorithm = r.at("algorithm");
      row.rank_or_ratio = r.at("rank_or_ratio");
      row.matched_rank = r.at("matched_rank");
      row.effective_rank = r.at("effective_rank");
      row.compression_ratio = num(r.at("compression_ratio"));
      row.attack_step = r.at("attack_step");
      for (const auto& v : r.at("values")) row.values.push_back(num(v));
      row.mean = num(r.at("mean"));
      row.std = num(r.at("std"));
      if (!r.at("percent").is_null()) row.percent = r.at("percent").get<double>();
      row.negatives = r.at("negatives");
      row.attack_hash = r.at("attack_hash");
      row.status = r.at("status");
      b.ssim.push_back(std::move(row));
    }
    for (const auto& r : j.at("samples")) {
      SampleRow row;
      row.dataset = r.at("dataset");
      row.algorithm = r.at("algorithm");
      row.rank_or_ratio = r.at("rank_or_ratio");
      row.sample = r.at("sample");
      row.step = r.at("step");
      row.worker = r.at("worker");
      row.label = r.at("label");
      row.attack_seed = r.at("attack_seed");
      row.ssim = num(r.at("ssim"));
      row.recon_loss = num(r.at("recon_loss"));
      row.loss_at_truth = num(r.at("loss_at_truth"));
      row.cosine = num(r.at("cosine"));
      row.discarded_energy = num(r.at("discarded_energy"));
      row.restart = r.at("restart");
      row.status = r.at("status");
      b.samples.push_back(std::move(row));
    }
    for (const auto& r : j.at("mia")) {
      MiaRow row;
      row.dataset = r.at("dataset");
      row.algorithm = r.at("algorithm");
      row.rank_or_ratio = r.at("rank_or_ratio");
      row.matched_rank = r.at("matched_rank");
      row.attack = r.at("attack");
      row.balanced_accuracy = num(r.at("balanced_accuracy"));
      row.auc = num(r.at("auc"));
      row.threshold = num(r.at("threshold"));
      row.members = r.at("members");
      row.nonmembers = r.at("nonmembers");
      row.member_accuracy = num(r.at("member_accuracy"));
      row.nonmember_accuracy = num(r.at("nonmember_accuracy"));
      row.status = r.at("status");
      b.mia.push_back(std::move(row));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("bundle.json: ") + e.what());
  }
  return b;
}

/// Writes ssim.csv, samples.csv, mia.csv, manifest.json and bundle.json into `dir`.
inline void write_bundle(const ReportBundle& b, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  io::write_text((dir / "ssim.csv").string(), b.ssim_csv());
  io::write_text((dir / "samples.csv").string(), b.samples_csv());
  io::write_text((dir / "mia.csv").string(), b.mia_csv());
  io::write_text((dir / "manifest.json").string(), b.manifest.dump(2) + "\n");
  io::write_text((dir / "bundle.json").string(), to_json(b).dump(1) + "\n");
}

inline ReportBundle read_bundle(const std::filesystem::path& dir) {
  const auto path = std::filesystem::is_directory(dir) ? dir / "bundle.json" : dir;
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(io::read_text(path.string()));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what(), e.byte);
  }
  return bundle_from_json(j);
}

// ---------------------------------------------------------------------------
// Running a plan

struct DataSplit {
  std::vector<Example> train;    // attack runs draw from here; MIA members come from its front
  std::vector<Example> holdout;  // MIA non-members
};

inline DataSplit split_dataset(const Dataset& ds, double holdout, std::uint64_t seed) {
  require(holdout > 0.0 && holdout < 1.0, "split_dataset: holdout must lie in (0, 1)");
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(gradshield::detail::mix_seed(seed, 0x5EED));
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_hold = static_cast<std::size_t>(std::floor(holdout * static_cast<double>(ds.size())));
  DataSplit s;
  for (std::size_t i = 0; i < order.size(); ++i)
    (i < order.size() - n_hold ? s.train : s.holdout).push_back(ds.examples[order[i]]);
  return s;
}

inline std::string rank_or_ratio(const CompressorSetting& s) {
  if (const auto* t = std::get_if<TopK>(&s.kind)) return detail::fmt(t->ratio, "%.6g");
  if (const auto* p = std::get_if<PowerSgd>(&s.kind)) return std::to_string(p->rank);
  return "-";
}

inline std::string setting_slug(const CompressorSetting& s) {
  if (std::holds_alternative<PowerSgd>(s.kind)) return "powersgd_r" + std::to_string(s.matched_rank);
  if (std::holds_alternative<TopK>(s.kind)) return "topk_r" + std::to_string(s.matched_rank);
  return "identity";
}

inline std::string effective_rank(const CompressorSetting& s, std::span<const TensorShape> shapes) {
  const auto* p = std::get_if<PowerSgd>(&s.kind);
  if (!p) return "-";
  std::string out;
  for (const auto& t : shapes) {
    if (t.cols <= 1) continue;
    if (!out.empty()) out += '/';
    out += std::to_string(gradshield::detail::clamp_rank(p->rank, t));
  }
  return out.empty() ? "-" : out;
}

inline SimConfig sim_config(const ExperimentPlan& plan, const CompressorSetting& setting, const NetworkSpec& spec,
                            std::shared_ptr<const Dataset> data) {
  SimConfig cfg;
  cfg.workers = plan.training.workers;
  cfg.batch_size = plan.training.batch_size;
  cfg.learning_rate = plan.training.learning_rate;
  cfg.steps = plan.attack.step + plan.attack.samples;
  cfg.seed = plan.seed;
  cfg.compressor = setting.kind;
  cfg.network = spec;
  cfg.dataset = std::move(data);
  cfg.aggregation = plan.training.for_kind(setting.kind);
  return cfg;
}

inline std::uint64_t attack_seed(const ExperimentPlan& plan, std::size_t sample) {
  return gradshield::detail::mix_seed(plan.seed, 0xA77AC0 + sample);
}

inline nlohmann::ordered_json build_manifest(const ExperimentPlan& plan) {
  nlohmann::ordered_json m;
  m["tool"] = {{"name", "gradshield"}, {"version", kVersion}};
  m["plan"] = to_json(plan);
  m["plan_hash"] = plan_hash(plan);
  m["attack_config_hash"] = attack_hash(plan);
  m["conventions"] = {
      {"ssim", {{"window", 11}, {"sigma", 1.5}, {"k1", 0.01}, {"k2", 0.03}, {"data_range", 1.0},
                {"small_image", "global statistics when smaller than the window"}}},
      {"std", "population"},
      {"percent_of_baseline", "100 * mean / mean of the Original SGD row of the same dataset"},
      {"mia_threshold", "chosen on the evaluation sets themselves (optimistic adversary)"},
      {"tap", "worker 0, sample j at training step attack.step + j"},
      {"aggregation", "training.aggregation applies to PowerSGD; other compressors decompress and average"}};
  return m;
}

using ProgressFn = std::function<void(const std::string&)>;

namespace detail {

inline double accuracy(const NetworkSpec& spec, const ParamSet& params, std::span<const Example> xs) {
  std::size_t hit = 0;
  for (const auto& ex : xs) {
    const Vector logits = forward(spec, params, ex.x);
    hit += static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin()) == ex.y;
  }
  return static_cast<double>(hit) / static_cast<double>(xs.size());
}

inline std::string failure(const std::exception& e) { return std::string("failed: ") + e.what(); }

}  // namespace detail

struct RunOptions {
  std::optional<std::filesystem::path> out_dir;  // artifacts (images, taps, traces, checkpoints) go here
  ProgressFn progress;
};

/// Attacks one compressor setting: trains with taps on worker 0, inverts each tapped
/// gradient and scores the reconstructions.
inline SsimRow run_gradinv_setting(const ExperimentPlan& plan, const std::string& dataset, const NetworkSpec& spec,
                                   std::shared_ptr<const Dataset> train_data, const CompressorSetting& setting,
                                   std::vector<SampleRow>& sample_rows, const RunOptions& opt) {
  namespace fs = std::filesystem;
  const auto shapes = spec.param_shapes();
  SsimRow row;
  row.dataset = dataset;
  row.algorithm = setting.algorithm;
  row.rank_or_ratio = rank_or_ratio(setting);
  row.matched_rank = setting.matched_rank;
  row.effective_rank = effective_rank(setting, shapes);
  row.compression_ratio = compression_ratio(setting.kind, shapes);
  row.attack_step = plan.attack.step;
  row.attack_hash = attack_hash(plan);

  const SimConfig cfg = sim_config(plan, setting, spec, std::move(train_data));
  std::vector<GradientTap> taps;
  TapSink sink{[&](std::size_t step, std::size_t worker) { return step >= plan.attack.step && worker == 0; },
               [&](GradientTap&& t) { taps.push_back(std::move(t)); }};
  train(cfg, &sink);

  const std::string slug = setting_slug(setting);
  std::optional<fs::path> art;
  if (opt.out_dir) {
    art = fs::path(dataset) / slug;
    for (const char* sub : {"images", "taps", "traces"}) fs::create_directories(*opt.out_dir / sub / *art);
  }

  for (std::size_t j = 0; j < taps.size(); ++j) {
    const auto& tap = taps[j];
    SampleRow s;
    s.dataset = dataset;
    s.algorithm = setting.algorithm;
    s.rank_or_ratio = row.rank_or_ratio;
    s.sample = j;
    s.step = tap.step;
    s.worker = tap.worker;
    s.label = tap.batch.front().y;
    s.attack_seed = attack_seed(plan, j);
    const std::string stem = "s" + std::to_string(j);
    try {
      if (art) save_tap((*opt.out_dir / "taps" / *art / (stem + ".tap")).string(), tap, spec.input);
      const auto report = gradient_alignment_report(tap.true_gradient, tap.observed);
      s.cosine = report.cosine;
      s.discarded_energy = report.discarded_energy;
      std::vector<std::size_t> labels;
      for (const auto& ex : tap.batch) labels.push_back(ex.y);
      std::vector<Vector> truth;
      for (const auto& ex : tap.batch) truth.push_back(ex.x);
      s.loss_at_truth = evaluate_recon(spec, tap.params, truth, labels, tap.observed, false).loss;

      GradInvConfig g = plan.attack.gradinv;
      g.seed = s.attack_seed;
      auto recon = grad_inversion(spec, tap.params, tap.observed, labels, g, &tap.payload);
      s.recon_loss = recon.final_loss;
      s.restart = recon.restart;
      double total = 0.0;
      for (std::size_t k = 0; k < truth.size(); ++k) {
        const Image got = Image::from(spec.input, recon.inputs[k]), want = Image::from(spec.input, truth[k]);
        total += ssim(got, want);
        if (art) {
          const std::string tag = truth.size() == 1 ? stem : stem + "_b" + std::to_string(k);
          const auto ext = spec.input.channels == 1 ? ".pgm" : ".ppm";
          write_netpbm((*opt.out_dir / "images" / *art / (tag + "_recon" + ext)).string(), got);
          write_netpbm((*opt.out_dir / "images" / *art / (tag + "_truth" + ext)).string(), want);
        }
      }
      s.ssim = total / static_cast<double>(truth.size());
      if (art) io::write_text((*opt.out_dir / "traces" / *art / (stem + ".csv")).string(), recon.trace_csv());
      row.values.push_back(s.ssim);
    } catch (const std::exception& e) {
      s.status = detail::failure(e);
      row.status = "partial";
    }
    sample_rows.push_back(std::move(s));
  }
  if (row.values.empty()) {
    row.status = "failed: no sample succeeded";
  } else {
    row.mean = std::accumulate(row.values.begin(), row.values.end(), 0.0) / static_cast<double>(row.values.size());
    double var = 0.0;
    for (double v : row.values) var += (v - row.mean) * (v - row.mean);
    row.std = std::sqrt(var / static_cast<double>(row.values.size()));
    row.negatives = static_cast<std::size_t>(std::count_if(row.values.begin(), row.values.end(), [](double v) { return v < 0.0; }));
  }
  return row;
}

/// Trains on the member set with the setting's compressor and attacks the final model.
inline std::vector<MiaRow> run_mia_setting(const ExperimentPlan& plan, const std::string& dataset,
                                           const NetworkSpec& spec, const DataSplit& split,
                                           const CompressorSetting& setting, const RunOptions& opt) {
  const std::size_t n = std::min({plan.mia.members, plan.mia.nonmembers, split.train.size(), split.holdout.size()});
  require(n >= 1, "mia: no members or non-members available");
  auto members = std::make_shared<Dataset>();
  members->shape = spec.input;
  members->classes = spec.classes;
  members->examples.assign(split.train.begin(), split.train.begin() + static_cast<std::ptrdiff_t>(n));
  const std::span<const Example> nonmembers(split.holdout.data(), n);

  SimConfig cfg;
  cfg.workers = plan.training.workers;
  cfg.batch_size = plan.mia.batch_size;
  cfg.learning_rate = plan.mia.learning_rate;
  cfg.steps = plan.mia.steps;
  cfg.seed = plan.seed;
  cfg.compressor = setting.kind;
  cfg.network = spec;
  cfg.dataset = members;
  cfg.aggregation = plan.training.for_kind(setting.kind);
  const auto log = train(cfg);
  if (opt.out_dir) {
    const auto dir = *opt.out_dir / "checkpoints" / dataset;
    std::filesystem::create_directories(dir);
    save_checkpoint((dir / (setting_slug(setting) + "_mia.ckpt")).string(), log.final_params);
    io::write_text((dir / (setting_slug(setting) + "_mia_log.csv")).string(), log.to_csv());
  }

  const auto ms = mia_scores(spec, log.final_params, members->examples);
  const auto ns = mia_scores(spec, log.final_params, nonmembers);
  const double member_acc = detail::accuracy(spec, log.final_params, members->examples);
  const double nonmember_acc = detail::accuracy(spec, log.final_params, nonmembers);
  std::vector<MiaRow> rows;
  for (MiaKind k : kAllMiaKinds) {
    const auto r = mia_attack(ms.of(k), ns.of(k), k);
    MiaRow row;
    row.dataset = dataset;
    row.algorithm = setting.algorithm;
    row.rank_or_ratio = rank_or_ratio(setting);
    row.matched_rank = setting.matched_rank;
    row.attack = to_string(k);
    row.balanced_accuracy = r.balanced_accuracy;
    row.auc = r.auc;
    row.threshold = r.threshold;
    row.members = n;
    row.nonmembers = n;
    row.member_accuracy = member_acc;
    row.nonmember_accuracy = nonmember_acc;
    rows.push_back(std::move(row));
  }
  return rows;
}

inline ReportBundle run_plan(const ExperimentPlan& plan, const RunOptions& opt = {}) {
  plan.validate();
  ReportBundle bundle;
  bundle.manifest = build_manifest(plan);
  bundle.manifest_hash = io::hex64(io::fnv1a(bundle.manifest.dump()));
  auto say = [&](const std::string& m) {
    if (opt.progress) opt.progress(m);
  };

  for (const auto& entry : plan.datasets) {
    Dataset ds;
    try {
      ds = load_dataset(entry.source);
    } catch (const std::exception& e) {
      bundle.partial = true;
      SsimRow row;
      row.dataset = entry.name;
      row.algorithm = "-";
      row.rank_or_ratio = "-";
      row.effective_rank = "-";
      row.status = "failed: " + std::string(e.what());
      bundle.ssim.push_back(std::move(row));
      continue;
    }
    const NetworkSpec spec = plan.model.build(ds.shape, ds.classes);
    const auto shapes = spec.param_shapes();
    const DataSplit split = split_dataset(ds, entry.holdout, plan.seed);
    auto train_data = std::make_shared<Dataset>();
    train_data->shape = ds.shape;
    train_data->classes = ds.classes;
    train_data->examples = split.train;

    for (const auto& setting : plan.compressors.expand(shapes)) {
      say(entry.name + ": " + setting.algorithm + " " + rank_or_ratio(setting));
      try {
        bundle.ssim.push_back(run_gradinv_setting(plan, entry.name, spec, train_data, setting, bundle.samples, opt));
      } catch (const std::exception& e) {
        SsimRow row;
        row.dataset = entry.name;
        row.algorithm = setting.algorithm;
        row.rank_or_ratio = rank_or_ratio(setting);
        row.matched_rank = setting.matched_rank;
        row.effective_rank = effective_rank(setting, shapes);
        row.attack_step = plan.attack.step;
        row.attack_hash = attack_hash(plan);
        row.status = detail::failure(e);
        bundle.ssim.push_back(std::move(row));
      }
      if (!plan.mia.enabled) continue;
      try {
        for (auto& r : run_mia_setting(plan, entry.name, spec, split, setting, opt)) bundle.mia.push_back(std::move(r));
      } catch (const std::exception& e) {
        MiaRow row;
        row.dataset = entry.name;
        row.algorithm = setting.algorithm;
        row.rank_or_ratio = rank_or_ratio(setting);
        row.matched_rank = setting.matched_rank;
        row.attack = "-";
        row.status = detail::failure(e);
        bundle.mia.push_back(std::move(row));
      }
    }
  }

  // Percentages against the Original SGD row of the same dataset.
  for (auto& row : bundle.ssim) {
    const auto base = std::find_if(bundle.ssim.begin(), bundle.ssim.end(), [&](const SsimRow& r) {
      return r.dataset == row.dataset && r.algorithm == "Original SGD";
    });
    if (base != bundle.ssim.end() && std::isfinite(base->mean) && base->mean > 0.0 && std::isfinite(row.mean))
      row.percent = 100.0 * row.mean / base->mean;
  }

  auto key = [](const auto& r) { return std::tie(r.dataset, r.algorithm, r.matched_rank); };
  std::stable_sort(bundle.ssim.begin(), bundle.ssim.end(), [&](const auto& a, const auto& b) { return key(a) < key(b); });
  std::stable_sort(bundle.mia.begin(), bundle.mia.end(), [&](const auto& a, const auto& b) { return key(a) < key(b); });

  for (const auto& r : bundle.ssim) bundle.partial |= r.status != "ok";
  for (const auto& r : bundle.mia) bundle.partial |= r.status != "ok";
  if (opt.out_dir) write_bundle(bundle, *opt.out_dir);
  return bundle;
}

}  // namespace gradshield::harness
