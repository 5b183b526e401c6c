// Copyright 2026 The GradShield Authors.
// SPDX-License-Identifier: Apache-2.0

// Experiment plans and their YAML form. Every key is checked: unknown keys,
// wrong types and out-of-range values raise ConfigError carrying the dotted
// field path and the 1-based source line. The schema is in docs/config.md.

#pragma once

#include <yaml-cpp/yaml.h>

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "gradshield/attacks.hpp"
#include "gradshield/compressors.hpp"
#include "gradshield/distsim.hpp"
#include "gradshield/error.hpp"
#include "gradshield/harness/dataset.hpp"
#include "gradshield/model.hpp"
#include "json.hpp"

namespace gradshield::harness {

struct DatasetEntry {
  std::string name;
  DatasetSource source;
  /// Fraction of examples reserved as non-members for membership inference.
  double holdout = 0.5;
};

struct ModelEntry {
  std::string kind = "mlp";  // mlp | conv
  std::vector<std::size_t> hidden{32};
  std::size_t channels = 4;
  std::size_t kernel = 3;
  Activation activation = Activation::tanh;

  NetworkSpec build(const InputShape& input, std::size_t classes) const {
    if (kind == "conv") return NetworkSpec::conv(input, channels, kernel, classes, activation);
    return NetworkSpec::mlp(input, hidden, classes, activation);
  }
};

struct TrainingEntry {
  std::size_t workers = 4;
  std::size_t batch_size = 1;
  double learning_rate = 0.1;
  /// Used by PowerSGD settings; Identity and Top-K always decompress and average.
  Aggregation aggregation = Aggregation::factor_allreduce;

  Aggregation for_kind(const CompressorKind& kind) const {
    return std::holds_alternative<PowerSgd>(kind) ? aggregation : Aggregation::decompress_mean;
  }
};

/// One row of the sweep: a compressor plus the labels it is reported under.
struct CompressorSetting {
  std::string algorithm;      // "Original SGD", "PowerSGD", "Top-K"
  CompressorKind kind;
  std::size_t matched_rank = 0;  // rank a Top-K level is equated with; the rank itself for PowerSGD
};

struct CompressorEntry {
  bool identity = true;
  std::vector<std::size_t> powersgd_ranks{1, 2, 4, 30, 50};
  std::size_t power_iterations = 1;
  std::vector<std::size_t> topk_ranks{1, 2, 4, 30, 50};
  TopKScope topk_scope = TopKScope::global;

  /// Identity, then PowerSGD by rank, then Top-K at the rank-equivalent ratio for this model.
  std::vector<CompressorSetting> expand(std::span<const TensorShape> shapes) const {
    std::vector<CompressorSetting> out;
    if (identity) out.push_back({"Original SGD", Identity{}, 0});
    for (auto r : powersgd_ranks) out.push_back({"PowerSGD", PowerSgd{r, power_iterations}, r});
    for (auto r : topk_ranks) out.push_back({"Top-K", TopK{rank_equivalent_ratio(shapes, r), topk_scope}, r});
    return out;
  }
};

struct AttackEntry {
  std::size_t samples = 10;
  std::size_t step = 0;  // training step of the first tapped sample
  GradInvConfig gradinv;
};

struct MiaEntry {
  bool enabled = true;
  std::size_t members = 100;
  std::size_t nonmembers = 100;
  std::size_t steps = 2000;
  std::size_t batch_size = 10;
  double learning_rate = 0.1;
};

struct ExperimentPlan {
  std::string name = "desk";
  std::uint64_t seed = 0;
  std::vector<DatasetEntry> datasets;
  ModelEntry model;
  TrainingEntry training;
  CompressorEntry compressors;
  AttackEntry attack;
  MiaEntry mia;

  void validate() const {
    require(!datasets.empty(), "plan: at least one dataset");
    require(attack.samples >= 1, "plan: samples must be >= 1");
    for (auto r : compressors.powersgd_ranks) require(r >= 1, "plan: ranks must be >= 1");
    for (auto r : compressors.topk_ranks) require(r >= 1, "plan: ranks must be >= 1");
    attack.gradinv.validate();
  }
};

// ---------------------------------------------------------------------------
// YAML reading

namespace detail {

inline std::size_t line_of(const YAML::Node& n) {
  const auto m = n.Mark();
  return m.is_null() ? 0 : static_cast<std::size_t>(m.line) + 1;
}

/// A mapping node whose keys must all be consumed.
class Section {
 public:
  Section(const YAML::Node& node, std::string path) : node_(node), path_(std::move(path)) {
    if (!node_.IsMap()) throw ConfigError(path_.empty() ? "<root>" : path_, line_of(node_), "expected a mapping");
  }

  /// Rejects any key that was never asked for.
  void close() const {
    for (const auto& kv : node_) {
      const auto key = kv.first.as<std::string>();
      if (!seen_.count(key)) throw ConfigError(field(key), line_of(kv.first), "unknown key");
    }
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool has(const std::string& key) {
    seen_.insert(key);
    return static_cast<bool>(get(key));
  }
  YAML::Node node(const std::string& key) {
    seen_.insert(key);
    return get(key);
  }

  template <class T>
  void read(const std::string& key, T& out) {
    if (!has(key)) return;
    out = convert<T>(get(key), field(key));
  }
  template <class T>
  void read_list(const std::string& key, std::vector<T>& out) {
    if (!has(key)) return;
    const YAML::Node n = get(key);
    if (!n.IsSequence()) throw ConfigError(field(key), line_of(n), "expected a list");
    out.clear();
    for (std::size_t i = 0; i < n.size(); ++i)
      out.push_back(convert<T>(n[i], field(key) + "[" + std::to_string(i) + "]"));
  }

  template <class T>
  static T convert(const YAML::Node& n, const std::string& path) {
    if (!n.IsScalar()) throw ConfigError(path, line_of(n), "expected a scalar");
    try {
      if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
        const auto s = n.Scalar();
        if (!s.empty() && s[0] == '-') throw ConfigError(path, line_of(n), "must be a non-negative integer");
      }
      return n.as<T>();
    } catch (const YAML::BadConversion&) {
      throw ConfigError(path, line_of(n), "cannot read '" + n.Scalar() + "'");
    }
  }

  std::size_t line() const { return line_of(node_); }
  std::size_t line(const std::string& key) const {
    const YAML::Node n = get(key);
    return n ? line_of(n) : line();
  }

 private:
  YAML::Node get(const std::string& key) const {
    const YAML::Node& self = node_;
    return self[key];
  }

  YAML::Node node_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void check(bool ok, const std::string& field, std::size_t line, const std::string& what) {
  if (!ok) throw ConfigError(field, line, what);
}

inline DatasetEntry read_dataset(const YAML::Node& n, const std::string& path) {
  Section s(n, path);
  DatasetEntry e;
  s.read("name", e.name);
  std::string kind = "synthetic";
  s.read("kind", kind);
  if (kind == "synthetic") {
    Synthetic syn;
    s.read("classes", syn.classes);
    s.read("channels", syn.shape.channels);
    s.read("height", syn.shape.height);
    s.read("width", syn.shape.width);
    s.read("separation", syn.separation);
    s.read("noise", syn.noise);
    s.read("seed", syn.seed);
    s.read("size", syn.size);
    check(syn.classes >= 2, s.field("classes"), s.line("classes"), "need at least 2 classes");
    check(syn.size >= syn.classes, s.field("size"), s.line("size"), "size must be at least the class count");
    check(syn.shape.size() > 0, s.field("height"), s.line(), "image dimensions must be >= 1");
    check(syn.separation >= 0.0, s.field("separation"), s.line("separation"), "must be >= 0");
    check(syn.noise >= 0.0, s.field("noise"), s.line("noise"), "must be >= 0");
    e.source.kind = syn;
  } else if (kind == "mnist") {
    MnistIdx m;
    check(s.has("images") && s.has("labels"), s.field("images"), s.line(), "mnist needs 'images' and 'labels'");
    s.read("images", m.images);
    s.read("labels", m.labels);
    e.source.kind = m;
  } else if (kind == "cifar10") {
    Cifar10Bin c;
    s.read_list("batches", c.batches);
    check(!c.batches.empty(), s.field("batches"), s.line(), "cifar10 needs at least one batch file");
    e.source.kind = c;
  } else {
    throw ConfigError(s.field("kind"), s.line("kind"), "unknown dataset kind '" + kind + "'");
  }
  if (s.has("downsample")) {
    std::vector<std::size_t> hw;
    s.read_list("downsample", hw);
    check(hw.size() == 2 && hw[0] > 0 && hw[1] > 0, s.field("downsample"), s.line("downsample"),
          "expected [height, width]");
    e.source.downsample = std::pair{hw[0], hw[1]};
  }
  s.read("grayscale", e.source.grayscale);
  if (s.has("limit")) e.source.limit = Section::convert<std::size_t>(s.node("limit"), s.field("limit"));
  s.read("holdout", e.holdout);
  check(e.holdout > 0.0 && e.holdout < 1.0, s.field("holdout"), s.line("holdout"), "must lie in (0, 1)");
  if (e.name.empty()) e.name = kind;
  s.close();
  return e;
}

}  // namespace detail

/// Parses a plan document. Missing keys keep their defaults.
inline ExperimentPlan parse_plan(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError("<document>", static_cast<std::size_t>(e.mark.line) + 1, e.msg);
  }
  ExperimentPlan plan;
  if (root.IsNull()) throw ConfigError("<document>", 1, "empty configuration");
  using detail::check;
  detail::Section top(root, "");
  top.read("name", plan.name);
  top.read("seed", plan.seed);

  if (top.has("datasets")) {
    const auto list = top.node("datasets");
    check(list.IsSequence() && list.size() > 0, "datasets", detail::line_of(list), "expected a non-empty list");
    for (std::size_t i = 0; i < list.size(); ++i)
      plan.datasets.push_back(detail::read_dataset(list[i], "datasets[" + std::to_string(i) + "]"));
  } else {
    plan.datasets.push_back({"synthetic", DatasetSource{}, 0.5});
  }

  if (top.has("model")) {
    detail::Section s(top.node("model"), "model");
    s.read("kind", plan.model.kind);
    check(plan.model.kind == "mlp" || plan.model.kind == "conv", "model.kind", s.line("kind"), "expected mlp or conv");
    s.read_list("hidden", plan.model.hidden);
    s.read("channels", plan.model.channels);
    s.read("kernel", plan.model.kernel);
    if (s.has("activation")) {
      const auto a = detail::Section::convert<std::string>(s.node("activation"), "model.activation");
      try {
        plan.model.activation = parse_activation(a);
      } catch (const ContractViolation&) {
        throw ConfigError("model.activation", s.line("activation"), "unknown activation '" + a + "'");
      }
    }
    for (auto h : plan.model.hidden) check(h >= 1, "model.hidden", s.line("hidden"), "widths must be >= 1");
    check(plan.model.channels >= 1 && plan.model.kernel >= 1, "model.kernel", s.line(), "channels and kernel must be >= 1");
    s.close();
  }

  if (top.has("training")) {
    detail::Section s(top.node("training"), "training");
    s.read("workers", plan.training.workers);
    s.read("batch_size", plan.training.batch_size);
    s.read("learning_rate", plan.training.learning_rate);
    std::string agg = plan.training.aggregation == Aggregation::factor_allreduce ? "factor_allreduce" : "decompress_mean";
    s.read("aggregation", agg);
    check(agg == "decompress_mean" || agg == "factor_allreduce", "training.aggregation", s.line("aggregation"),
          "expected decompress_mean or factor_allreduce");
    plan.training.aggregation = agg == "factor_allreduce" ? Aggregation::factor_allreduce : Aggregation::decompress_mean;
    check(plan.training.workers >= 1, "training.workers", s.line("workers"), "must be >= 1");
    check(plan.training.batch_size >= 1, "training.batch_size", s.line("batch_size"), "must be >= 1");
    check(plan.training.learning_rate > 0.0, "training.learning_rate", s.line("learning_rate"), "must be > 0");
    s.close();
  }

  if (top.has("compressors")) {
    detail::Section s(top.node("compressors"), "compressors");
    auto& c = plan.compressors;
    s.read("identity", c.identity);
    s.read_list("powersgd_ranks", c.powersgd_ranks);
    s.read("power_iterations", c.power_iterations);
    s.read_list("topk_ranks", c.topk_ranks);
    std::string scope = "global";
    s.read("topk_scope", scope);
    check(scope == "global" || scope == "per_layer", "compressors.topk_scope", s.line("topk_scope"),
          "expected global or per_layer");
    c.topk_scope = scope == "global" ? TopKScope::global : TopKScope::per_layer;
    for (auto r : c.powersgd_ranks) check(r >= 1, "compressors.powersgd_ranks", s.line("powersgd_ranks"), "ranks must be >= 1");
    for (auto r : c.topk_ranks) check(r >= 1, "compressors.topk_ranks", s.line("topk_ranks"), "ranks must be >= 1");
    check(c.power_iterations >= 1, "compressors.power_iterations", s.line("power_iterations"), "must be >= 1");
    s.close();
  }

  if (top.has("attack")) {
    detail::Section s(top.node("attack"), "attack");
    auto& a = plan.attack;
    s.read("samples", a.samples);
    s.read("step", a.step);
    s.read("iterations", a.gradinv.iterations);
    s.read("restarts", a.gradinv.restarts);
    s.read("step_size", a.gradinv.step_size);
    s.read("step_decay", a.gradinv.step_decay);
    s.read("box_constraint", a.gradinv.box_constraint);
    s.read("tv_weight", a.gradinv.tv_weight);
    s.read("label_known", a.gradinv.label_known);
    s.read("compression_aware", a.gradinv.compression_aware);
    check(a.samples >= 1, "attack.samples", s.line("samples"), "must be >= 1");
    check(a.gradinv.restarts >= 1, "attack.restarts", s.line("restarts"), "must be >= 1");
    check(a.gradinv.step_size > 0.0, "attack.step_size", s.line("step_size"), "must be > 0");
    check(a.gradinv.tv_weight >= 0.0, "attack.tv_weight", s.line("tv_weight"), "must be >= 0");
    s.close();
  }

  if (top.has("mia")) {
    detail::Section s(top.node("mia"), "mia");
    auto& m = plan.mia;
    s.read("enabled", m.enabled);
    s.read("members", m.members);
    s.read("nonmembers", m.nonmembers);
    s.read("steps", m.steps);
    s.read("batch_size", m.batch_size);
    s.read("learning_rate", m.learning_rate);
    check(m.members >= 1 && m.nonmembers >= 1, "mia.members", s.line(), "member and non-member counts must be >= 1");
    check(m.batch_size >= 1, "mia.batch_size", s.line("batch_size"), "must be >= 1");
    check(m.learning_rate > 0.0, "mia.learning_rate", s.line("learning_rate"), "must be > 0");
    s.close();
  }
  top.close();
  return plan;
}

inline ExperimentPlan load_plan(const std::string& path) { return parse_plan(io::read_text(path)); }

// ---------------------------------------------------------------------------
// Canonical JSON form, used for the manifest and its content hash.

inline nlohmann::ordered_json to_json(const DatasetEntry& d) {
  nlohmann::ordered_json j;
  j["name"] = d.name;
  if (const auto* s = std::get_if<Synthetic>(&d.source.kind)) {
    j["kind"] = "synthetic";
    j["classes"] = s->classes;
    j["shape"] = {s->shape.channels, s->shape.height, s->shape.width};
    j["separation"] = s->separation;
    j["noise"] = s->noise;
    j["seed"] = s->seed;
    j["size"] = s->size;
  } else if (const auto* m = std::get_if<MnistIdx>(&d.source.kind)) {
    j["kind"] = "mnist";
    j["images"] = m->images;
    j["labels"] = m->labels;
  } else {
    j["kind"] = "cifar10";
    j["batches"] = std::get<Cifar10Bin>(d.source.kind).batches;
  }
  if (d.source.downsample) j["downsample"] = {d.source.downsample->first, d.source.downsample->second};
  j["grayscale"] = d.source.grayscale;
  if (d.source.limit) j["limit"] = *d.source.limit;
  j["holdout"] = d.holdout;
  return j;
}

inline nlohmann::ordered_json to_json(const GradInvConfig& g) {
  return {{"iterations", g.iterations},   {"restarts", g.restarts},
          {"step_size", g.step_size},     {"step_decay", g.step_decay},
          {"box_constraint", g.box_constraint}, {"tv_weight", g.tv_weight},
          {"label_known", g.label_known}, {"compression_aware", g.compression_aware},
          {"optimizer", "adam(0.9,0.999,1e-8)"}, {"init", "normal(0.5,0.1) clamped"}};
}

inline nlohmann::ordered_json to_json(const ExperimentPlan& p) {
  nlohmann::ordered_json j;
  j["name"] = p.name;
  j["seed"] = p.seed;
  j["datasets"] = nlohmann::ordered_json::array();
  for (const auto& d : p.datasets) j["datasets"].push_back(to_json(d));
  j["model"] = {{"kind", p.model.kind}, {"hidden", p.model.hidden}, {"channels", p.model.channels},
                {"kernel", p.model.kernel}, {"activation", to_string(p.model.activation)}};
  j["training"] = {{"workers", p.training.workers}, {"batch_size", p.training.batch_size},
                   {"learning_rate", p.training.learning_rate},
                   {"aggregation", p.training.aggregation == Aggregation::factor_allreduce ? "factor_allreduce" : "decompress_mean"},
                   {"update", "plain sgd"}};
  j["compressors"] = {{"identity", p.compressors.identity},
                      {"powersgd_ranks", p.compressors.powersgd_ranks},
                      {"power_iterations", p.compressors.power_iterations},
                      {"topk_ranks", p.compressors.topk_ranks},
                      {"topk_scope", p.compressors.topk_scope == TopKScope::global ? "global" : "per_layer"}};
  j["attack"] = {{"samples", p.attack.samples}, {"step", p.attack.step}, {"gradinv", to_json(p.attack.gradinv)}};
  j["mia"] = {{"enabled", p.mia.enabled}, {"members", p.mia.members}, {"nonmembers", p.mia.nonmembers},
              {"steps", p.mia.steps}, {"batch_size", p.mia.batch_size}, {"learning_rate", p.mia.learning_rate},
              {"threshold", "best balanced accuracy on the evaluation sets"}};
  return j;
}

inline std::string plan_hash(const ExperimentPlan& p) { return io::hex64(io::fnv1a(to_json(p).dump())); }

inline std::string attack_hash(const ExperimentPlan& p) {
  nlohmann::ordered_json j{{"attack", to_json(p.attack.gradinv)}, {"samples", p.attack.samples}, {"step", p.attack.step}};
  return io::hex64(io::fnv1a(j.dump())).substr(0, 8);
}

}  // namespace gradshield::harness
