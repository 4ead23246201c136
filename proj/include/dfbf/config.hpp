#pragma once

// Run configuration: one JSON document with sections model, train, prune,
// synth, distill and eval. Missing keys take defaults, unknown keys are errors.

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dfbf/distill.hpp"
#include "dfbf/error.hpp"
#include "dfbf/graph.hpp"
#include "dfbf/pruning.hpp"
#include "dfbf/synthesis.hpp"
#include "dfbf/train.hpp"

namespace dfbf {

struct ModelConfig {
  std::string arch = "resnet_tiny";  // or "vgg_tiny"
  std::vector<std::size_t> stage_channels{16, 32, 64};
  std::vector<std::size_t> blocks{1, 1, 1};
  std::vector<std::string> vgg_plan{"16", "16", "M", "32", "32", "M", "64"};
  std::size_t vgg_tap_stride = 2;
};

struct TrainSection {
  std::string dataset = "shapes";  // or "cifar10"
  std::string cifar_dir;
  std::size_t shapes_per_class = 1000;
  std::size_t image_size = 32;
  std::size_t classes = 4;
  TrainConfig opt;
};

struct PruneSection {
  double ratio = 0.3;
  PruneStrategy strategy = PruneStrategy::L1;
  PruneMode mode = PruneMode::Uniform;
};

struct EvalSection {
  std::size_t shapes_per_class = 200;
  std::size_t batch_size = 256;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t threads = 0;  // 0: hardware concurrency, capped by DFBF_THREADS
  ModelConfig model;
  TrainSection train;
  PruneSection prune;
  SynthConfig synth;
  DistillConfig distill;
  EvalSection eval;
};

namespace detail {

// Reads typed fields from one JSON object and remembers which keys were seen.
class SectionReader {
 public:
  SectionReader(const nlohmann::json& j, std::string section) : j_(j), section_(std::move(section)) {
    if (!j_.is_object()) throw ConfigError("config: '" + section_ + "' must be an object");
  }

  template <typename T>
  void read(const std::string& key, T& dst) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      dst = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config: " + where(key) + " has the wrong type (got " + j_.at(key).dump() + ")");
    }
  }

  template <typename T, typename Parse>
  void read_enum(const std::string& key, T& dst, Parse parse) {
    std::string s;
    read(key, s);
    if (j_.contains(key)) dst = parse(s);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("config: unknown key " + where(k));
    }
  }

  std::string where(const std::string& key) const { return section_.empty() ? "'" + key + "'" : "'" + section_ + "." + key + "'"; }

 private:
  const nlohmann::json& j_;
  std::string section_;
  std::set<std::string> seen_;
};

inline const nlohmann::json& section(const nlohmann::json& root, const char* name) {
  static const nlohmann::json empty = nlohmann::json::object();
  return root.contains(name) ? root.at(name) : empty;
}

}  // namespace detail

inline void validate(const RunConfig& c) {
  const auto& m = c.model;
  if (m.arch == "resnet_tiny") {
    build_resnet_tiny<float>(m.stage_channels, m.blocks, c.train.classes);
  } else if (m.arch == "vgg_tiny") {
    build_vgg_tiny<float>(parse_vgg_plan(m.vgg_plan), c.train.classes, {.tap_stride = m.vgg_tap_stride});
  } else {
    throw ConfigError("config: model.arch must be resnet_tiny or vgg_tiny, got '" + m.arch + "'");
  }
  const auto& t = c.train;
  if (t.dataset == "shapes") {
    if (t.classes < 1 || t.classes > 4) throw ConfigError("config: train.classes must be in [1,4] for shapes");
    if (t.image_size < 8) throw ConfigError("config: train.image_size must be >= 8");
    if (t.shapes_per_class == 0) throw ConfigError("config: train.shapes_per_class must be >= 1");
    if (c.eval.shapes_per_class == 0) throw ConfigError("config: eval.shapes_per_class must be >= 1");
  } else if (t.dataset == "cifar10") {
    if (t.cifar_dir.empty()) throw ConfigError("config: train.cifar_dir is required for cifar10");
    if (t.classes != 10 || t.image_size != 32) throw ConfigError("config: cifar10 needs classes 10 and image_size 32");
  } else {
    throw ConfigError("config: train.dataset must be shapes or cifar10, got '" + t.dataset + "'");
  }
  if (t.opt.batch_size == 0) throw ConfigError("config: train.batch_size must be >= 1");
  Sgd<float>({}, t.opt.sgd);
  check_prune_ratio(c.prune.ratio);
  c.synth.validate();
  c.distill.validate();
  Sgd<float>({}, c.distill.sgd);
  if (c.eval.batch_size == 0) throw ConfigError("config: eval.batch_size must be >= 1");
}

/// Sets the run seed; every stage seed follows it.
inline void set_seed(RunConfig& c, std::uint64_t seed) {
  c.seed = seed;
  c.train.opt.seed = seed;
  c.synth.seed = seed;
  c.distill.seed = seed;
}

inline RunConfig run_config_from_json(const nlohmann::json& root) {
  RunConfig c;
  detail::SectionReader top(root, "");
  top.read("seed", c.seed);
  top.read("threads", c.threads);
  for (const char* s : {"model", "train", "prune", "synth", "distill", "eval"}) {
    nlohmann::json ignored;
    top.read(s, ignored);
  }
  top.finish();

  {
    detail::SectionReader r(detail::section(root, "model"), "model");
    r.read("arch", c.model.arch);
    r.read("stage_channels", c.model.stage_channels);
    r.read("blocks", c.model.blocks);
    r.read("vgg_plan", c.model.vgg_plan);
    r.read("vgg_tap_stride", c.model.vgg_tap_stride);
    r.finish();
  }
  {
    detail::SectionReader r(detail::section(root, "train"), "train");
    auto& t = c.train;
    r.read("dataset", t.dataset);
    r.read("cifar_dir", t.cifar_dir);
    r.read("shapes_per_class", t.shapes_per_class);
    r.read("image_size", t.image_size);
    r.read("classes", t.classes);
    r.read("epochs", t.opt.epochs);
    r.read("batch_size", t.opt.batch_size);
    r.read("lr", t.opt.sgd.lr);
    r.read("momentum", t.opt.sgd.momentum);
    r.read("weight_decay", t.opt.sgd.weight_decay);
    r.read("cosine", t.opt.cosine);
    r.finish();
  }
  {
    detail::SectionReader r(detail::section(root, "prune"), "prune");
    r.read("ratio", c.prune.ratio);
    r.read_enum("strategy", c.prune.strategy, prune_strategy_from_string);
    r.read_enum("mode", c.prune.mode, prune_mode_from_string);
    r.finish();
  }
  {
    detail::SectionReader r(detail::section(root, "synth"), "synth");
    auto& s = c.synth;
    r.read("width", s.width);
    r.read("height", s.height);
    r.read("batch_size", s.batch_size);
    r.read("num_images", s.num_images);
    r.read("steps", s.steps);
    r.read("lr", s.lr);
    r.read("momentum", s.momentum);
    r.read("alpha_bn", s.weights.bn);
    r.read("alpha_tv", s.weights.tv);
    r.read("alpha_l2", s.weights.l2);
    std::vector<double> clamp{s.clamp_lo, s.clamp_hi};
    r.read("clamp", clamp);
    if (clamp.size() != 2) throw ConfigError("config: 'synth.clamp' must be [lo, hi]");
    s.clamp_lo = clamp[0];
    s.clamp_hi = clamp[1];
    r.finish();
  }
  {
    detail::SectionReader r(detail::section(root, "distill"), "distill");
    auto& d = c.distill;
    r.read("gamma", d.gamma);
    r.read_enum("taps", d.taps, tap_selection_from_string);
    r.read("epochs", d.epochs);
    r.read("batch_size", d.batch_size);
    r.read("lr", d.sgd.lr);
    r.read("momentum", d.sgd.momentum);
    r.read("weight_decay", d.sgd.weight_decay);
    r.read("channel_mean", d.channel_mean);
    r.finish();
  }
  {
    detail::SectionReader r(detail::section(root, "eval"), "eval");
    r.read("shapes_per_class", c.eval.shapes_per_class);
    r.read("batch_size", c.eval.batch_size);
    r.finish();
  }
  set_seed(c, c.seed);
  validate(c);
  return c;
}

inline nlohmann::json to_json(const RunConfig& c) {
  const auto& t = c.train;
  const auto& s = c.synth;
  const auto& d = c.distill;
  return {
      {"seed", c.seed},
      {"threads", c.threads},
      {"model",
       {{"arch", c.model.arch},
        {"stage_channels", c.model.stage_channels},
        {"blocks", c.model.blocks},
        {"vgg_plan", c.model.vgg_plan},
        {"vgg_tap_stride", c.model.vgg_tap_stride}}},
      {"train",
       {{"dataset", t.dataset},
        {"cifar_dir", t.cifar_dir},
        {"shapes_per_class", t.shapes_per_class},
        {"image_size", t.image_size},
        {"classes", t.classes},
        {"epochs", t.opt.epochs},
        {"batch_size", t.opt.batch_size},
        {"lr", t.opt.sgd.lr},
        {"momentum", t.opt.sgd.momentum},
        {"weight_decay", t.opt.sgd.weight_decay},
        {"cosine", t.opt.cosine}}},
      {"prune",
       {{"ratio", c.prune.ratio},
        {"strategy", std::string(to_string(c.prune.strategy))},
        {"mode", std::string(to_string(c.prune.mode))}}},
      {"synth",
       {{"width", s.width},
        {"height", s.height},
        {"batch_size", s.batch_size},
        {"num_images", s.num_images},
        {"steps", s.steps},
        {"lr", s.lr},
        {"momentum", s.momentum},
        {"alpha_bn", s.weights.bn},
        {"alpha_tv", s.weights.tv},
        {"alpha_l2", s.weights.l2},
        {"clamp", {s.clamp_lo, s.clamp_hi}}}},
      {"distill",
       {{"gamma", d.gamma},
        {"taps", std::string(to_string(d.taps))},
        {"epochs", d.epochs},
        {"batch_size", d.batch_size},
        {"lr", d.sgd.lr},
        {"momentum", d.sgd.momentum},
        {"weight_decay", d.sgd.weight_decay},
        {"channel_mean", d.channel_mean}}},
      {"eval", {{"shapes_per_class", c.eval.shapes_per_class}, {"batch_size", c.eval.batch_size}}},
  };
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

/// The model described by `c`, parameters uninitialized.
inline NetworkGraph<float> build_model(const RunConfig& c) {
  if (c.model.arch == "vgg_tiny") {
    return build_vgg_tiny<float>(parse_vgg_plan(c.model.vgg_plan), c.train.classes,
                                 {.tap_stride = c.model.vgg_tap_stride});
  }
  return build_resnet_tiny<float>(c.model.stage_channels, c.model.blocks, c.train.classes);
}

}  // namespace dfbf
