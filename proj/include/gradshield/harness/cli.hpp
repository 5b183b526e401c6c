// Copyright 2026 The GradShield Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gradshield/harness/plan.hpp"

namespace gradshield::harness {

/// Parses a command-line compressor description:
///   identity | powersgd:R[:ITERS] | topk:RATIO | topk-rank:R (Top-K at the rank-R equivalent ratio).
inline CompressorSetting parse_compressor(const std::string& text, std::span<const TensorShape> shapes) {
  const auto colon = text.find(':');
  const std::string head = text.substr(0, colon);
  const std::string rest = colon == std::string::npos ? "" : text.substr(colon + 1);
  auto bad = [&](const std::string& why) { return ContractViolation("compressor '" + text + "': " + why); };
  auto to_size = [&](const std::string& s) {
    std::size_t used = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(s, &used);
    } catch (const std::exception&) {
      throw bad("expected a positive integer, got '" + s + "'");
    }
    if (used != s.size() || v == 0) throw bad("expected a positive integer, got '" + s + "'");
    return static_cast<std::size_t>(v);
  };
  if (head == "identity" && rest.empty()) return {"Original SGD", Identity{}, 0};
  if (head == "powersgd") {
    const auto c2 = rest.find(':');
    const std::size_t rank = to_size(rest.substr(0, c2));
    const std::size_t iters = c2 == std::string::npos ? 1 : to_size(rest.substr(c2 + 1));
    return {"PowerSGD", PowerSgd{rank, iters}, rank};
  }
  if (head == "topk-rank") {
    const std::size_t rank = to_size(rest);
    return {"Top-K", TopK{rank_equivalent_ratio(shapes, rank)}, rank};
  }
  if (head == "topk") {
    double ratio = 0.0;
    try {
      ratio = std::stod(rest);
    } catch (const std::exception&) {
      throw bad("expected a ratio in (0, 1]");
    }
    if (!(ratio > 0.0 && ratio <= 1.0)) throw bad("expected a ratio in (0, 1]");
    return {"Top-K", TopK{ratio}, 0};
  }
  throw bad("expected identity, powersgd:R[:ITERS], topk:RATIO or topk-rank:R");
}

namespace detail {

struct CliContext {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::ostream* out = &std::cout;
  std::ostream* err = &std::cerr;

  ExperimentPlan plan() const {
    ExperimentPlan p = config.empty() ? parse_plan("name: desk\n") : load_plan(config);
    if (seed) p.seed = *seed;
    p.validate();
    return p;
  }

  std::filesystem::path output_dir() const {
    if (!out_dir.empty()) return out_dir;
    if (const char* env = std::getenv("GRADSHIELD_OUT"); env && *env) return env;
    return "gradshield_out";
  }
};

struct LoadedData {
  DatasetEntry entry;
  NetworkSpec spec;
  DataSplit split;
  std::shared_ptr<Dataset> train;
};

inline LoadedData load_entry(const ExperimentPlan& plan, const std::string& name) {
  const DatasetEntry* chosen = &plan.datasets.front();
  if (!name.empty()) {
    chosen = nullptr;
    for (const auto& d : plan.datasets)
      if (d.name == name) chosen = &d;
    if (!chosen) throw ContractViolation("no dataset named '" + name + "' in the configuration");
  }
  const Dataset ds = load_dataset(chosen->source);
  LoadedData out{*chosen, plan.model.build(ds.shape, ds.classes), split_dataset(ds, chosen->holdout, plan.seed), nullptr};
  out.train = std::make_shared<Dataset>();
  out.train->shape = ds.shape;
  out.train->classes = ds.classes;
  out.train->examples = out.split.train;
  return out;
}

inline void print_ssim_table(std::ostream& os, const ReportBundle& b) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-12s %-14s %-10s %10s %10s %8s  %s\n", "dataset", "algorithm", "rank/ratio", "mean",
                "std", "percent", "status");
  os << buf;
  for (const auto& r : b.ssim) {
    std::snprintf(buf, sizeof buf, "%-12s %-14s %-10s %10s %10s %8s  %s\n", r.dataset.c_str(), r.algorithm.c_str(),
                  r.rank_or_ratio.c_str(), fmt(r.mean, "%.4f").c_str(), fmt(r.std, "%.4f").c_str(),
                  r.percent ? fmt(*r.percent, "%.2f").c_str() : "NA", r.status.c_str());
    os << buf;
  }
}

}  // namespace detail

/// Entry point of the `gradshield` tool. Returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  namespace fs = std::filesystem;
  detail::CliContext ctx;
  ctx.out = &out;
  ctx.err = &err;

  CLI::App app{"gradshield: gradient-compression privacy workbench"};
  app.name("gradshield");
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  app.add_option("--config", ctx.config, "experiment configuration (YAML)");
  app.add_option("--seed", ctx.seed, "override the configuration seed");
  app.add_option("--out-dir", ctx.out_dir, "output directory (default: $GRADSHIELD_OUT, then ./gradshield_out)");

  std::string compressor = "identity", dataset, tap_path, checkpoint, from;
  std::optional<std::size_t> steps, step;
  std::size_t worker = 0;

  auto* train_cmd = app.add_subcommand("train", "train one model and write its log and checkpoint");
  train_cmd->add_option("--compressor", compressor, "identity | powersgd:R[:ITERS] | topk:RATIO | topk-rank:R");
  train_cmd->add_option("--steps", steps, "training steps (default: attack.step + attack.samples)");
  train_cmd->add_option("--dataset", dataset, "dataset name from the configuration");

  auto* capture_cmd = app.add_subcommand("capture", "record one worker's gradient at one step");
  capture_cmd->add_option("--compressor", compressor, "identity | powersgd:R[:ITERS] | topk:RATIO | topk-rank:R");
  capture_cmd->add_option("--step", step, "training step (default: attack.step)");
  capture_cmd->add_option("--worker", worker, "worker index");
  capture_cmd->add_option("--dataset", dataset, "dataset name from the configuration");

  auto* gradinv_cmd = app.add_subcommand("attack-gradinv", "reconstruct the input behind a captured gradient");
  gradinv_cmd->add_option("--tap", tap_path, "tap file written by `capture`")->required();

  auto* mia_cmd = app.add_subcommand("attack-mia", "membership inference against a trained model");
  mia_cmd->add_option("--checkpoint", checkpoint, "model checkpoint (default: train one with --compressor)");
  mia_cmd->add_option("--compressor", compressor, "identity | powersgd:R[:ITERS] | topk:RATIO | topk-rank:R");
  mia_cmd->add_option("--dataset", dataset, "dataset name from the configuration");

  auto* sweep_cmd = app.add_subcommand("sweep", "run the full experiment plan and write a report bundle");

  auto* report_cmd = app.add_subcommand("report", "re-render the CSV tables of an existing bundle");
  report_cmd->add_option("--from", from, "bundle directory or bundle.json")->required();

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  if (!ctx.config.empty() && !fs::exists(ctx.config)) {
    err << "error: configuration file not found: " << ctx.config << "\n";
    return 2;
  }

  try {
    if (report_cmd->parsed()) {
      const auto bundle = read_bundle(from);
      const fs::path dir = ctx.out_dir.empty() ? (fs::is_directory(from) ? fs::path(from) : fs::path(from).parent_path())
                                               : fs::path(ctx.out_dir);
      fs::create_directories(dir);
      io::write_text((dir / "ssim.csv").string(), bundle.ssim_csv());
      io::write_text((dir / "samples.csv").string(), bundle.samples_csv());
      io::write_text((dir / "mia.csv").string(), bundle.mia_csv());
      detail::print_ssim_table(out, bundle);
      out << "tables written to " << dir.string() << "\n";
      return 0;
    }

    const ExperimentPlan plan = ctx.plan();
    const fs::path dir = ctx.output_dir();
    fs::create_directories(dir);

    if (sweep_cmd->parsed()) {
      RunOptions opt;
      opt.out_dir = dir;
      opt.progress = [&](const std::string& m) { err << "[sweep] " << m << "\n"; };
      const auto bundle = run_plan(plan, opt);
      detail::print_ssim_table(out, bundle);
      out << "bundle " << bundle.manifest_hash << " written to " << dir.string()
          << (bundle.partial ? " (partial: see status columns)" : "") << "\n";
      return 0;
    }

    if (gradinv_cmd->parsed()) {
      const auto decoded = load_tap(tap_path);
      const auto& tap = decoded.tap;
      require(!tap.params.layers.empty(), "tap carries no parameters");
      const NetworkSpec spec = plan.model.build(decoded.shape, tap.params.layers.back().bias.size());
      require(spec.param_shapes() == tap.params.shapes(), "tap parameters do not match the configured model");
      std::vector<std::size_t> labels;
      for (const auto& ex : tap.batch) labels.push_back(ex.y);
      GradInvConfig g = plan.attack.gradinv;
      g.seed = attack_seed(plan, 0);
      const auto recon = grad_inversion(spec, tap.params, tap.observed, labels, g, &tap.payload);
      const auto ext = spec.input.channels == 1 ? ".pgm" : ".ppm";
      for (std::size_t k = 0; k < recon.inputs.size(); ++k) {
        const Image got = Image::from(spec.input, recon.inputs[k]), want = Image::from(spec.input, tap.batch[k].x);
        write_netpbm((dir / ("recon_" + std::to_string(k) + ext)).string(), got);
        write_netpbm((dir / ("truth_" + std::to_string(k) + ext)).string(), want);
        out << "example " << k << ": label " << recon.labels[k] << ", ssim " << detail::fmt(ssim(got, want), "%.6f") << "\n";
      }
      io::write_text((dir / "trace.csv").string(), recon.trace_csv());
      out << "reconstruction loss " << detail::fmt(recon.final_loss, "%.6g") << " (restart " << recon.restart << ")\n";
      return 0;
    }

    const auto data = detail::load_entry(plan, dataset);
    const auto setting = parse_compressor(compressor, data.spec.param_shapes());

    if (train_cmd->parsed()) {
      SimConfig cfg = sim_config(plan, setting, data.spec, data.train);
      cfg.steps = steps.value_or(cfg.steps);
      const auto log = train(cfg);
      io::write_text((dir / "train_log.csv").string(), log.to_csv());
      save_checkpoint((dir / "checkpoint.ckpt").string(), log.final_params);
      out << "trained " << cfg.steps << " steps with " << describe(setting.kind) << "; final loss "
          << (log.rows.empty() ? std::string("NA") : detail::fmt(log.rows.back().mean_loss, "%.6g")) << "\n";
      return 0;
    }

    if (capture_cmd->parsed()) {
      SimConfig cfg = sim_config(plan, setting, data.spec, data.train);
      const std::size_t at = step.value_or(plan.attack.step);
      cfg.steps = at + 1;
      const auto tap = capture(cfg, at, worker);
      save_tap((dir / "tap.tap").string(), tap, data.spec.input);
      const auto r = gradient_alignment_report(tap.true_gradient, tap.observed);
      out << "step " << at << ", worker " << worker << ": cosine " << detail::fmt(r.cosine, "%.10g")
          << ", discarded energy " << detail::fmt(r.discarded_energy, "%.6g") << "\n";
      return 0;
    }

    if (mia_cmd->parsed()) {
      ReportBundle b;
      b.manifest = build_manifest(plan);
      b.manifest_hash = io::hex64(io::fnv1a(b.manifest.dump()));
      if (checkpoint.empty()) {
        b.mia = run_mia_setting(plan, data.entry.name, data.spec, data.split, setting, RunOptions{dir, nullptr});
      } else {
        const ParamSet params = load_checkpoint(checkpoint);
        require(params.shapes() == data.spec.param_shapes(), "checkpoint does not match the configured model");
        const std::size_t n = std::min({plan.mia.members, plan.mia.nonmembers, data.split.train.size(),
                                        data.split.holdout.size()});
        const std::span<const Example> members(data.split.train.data(), n), nonmembers(data.split.holdout.data(), n);
        const auto ms = mia_scores(data.spec, params, members), ns = mia_scores(data.spec, params, nonmembers);
        for (MiaKind k : kAllMiaKinds) {
          const auto r = mia_attack(ms.of(k), ns.of(k), k);
          MiaRow row;
          row.dataset = data.entry.name;
          row.algorithm = "checkpoint";
          row.rank_or_ratio = "-";
          row.attack = to_string(k);
          row.balanced_accuracy = r.balanced_accuracy;
          row.auc = r.auc;
          row.threshold = r.threshold;
          row.members = row.nonmembers = n;
          row.member_accuracy = detail::accuracy(data.spec, params, members);
          row.nonmember_accuracy = detail::accuracy(data.spec, params, nonmembers);
          b.mia.push_back(std::move(row));
        }
      }
      io::write_text((dir / "mia.csv").string(), b.mia_csv());
      for (const auto& r : b.mia)
        out << r.attack << ": balanced accuracy " << detail::fmt(r.balanced_accuracy, "%.4f") << ", auc "
            << detail::fmt(r.auc, "%.4f") << "\n";
      return 0;
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace gradshield::harness
