#pragma once

// Run directories, metrics logging and the train -> prune -> synthesize ->
// fine-tune -> eval pipeline.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "dfbf/checkpoint.hpp"
#include "dfbf/config.hpp"
#include "dfbf/data.hpp"
#include "dfbf/distill.hpp"
#include "dfbf/pruning.hpp"
#include "dfbf/synthesis.hpp"
#include "dfbf/train.hpp"

namespace dfbf {

namespace fs = std::filesystem;

/// Requested worker count (0 = all cores), capped by DFBF_THREADS.
inline std::size_t resolve_workers(std::size_t requested) {
  std::size_t n = requested ? requested : std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("DFBF_THREADS"); env && *env) {
    char* end = nullptr;
    const unsigned long cap = std::strtoul(env, &end, 10);
    if (*end != '\0' || cap == 0) throw ConfigError("DFBF_THREADS must be a positive integer, got '" + std::string(env) + "'");
    n = std::min<std::size_t>(n, cap);
  }
  return std::max<std::size_t>(n, 1);
}

// ---------------------------------------------------------------------------
// Metrics

/// Append-only JSONL of {phase, step, metric, value, wall_ms}; steps may not
/// go backwards within a phase.
class MetricsLog {
 public:
  explicit MetricsLog(const fs::path& path) : out_(path, std::ios::app), start_(std::chrono::steady_clock::now()) {
    if (!out_) throw Error("cannot open metrics file '" + path.string() + "'");
  }

  void log(const std::string& phase, std::size_t step, const std::string& metric, double value) {
    auto [it, fresh] = last_step_.emplace(phase, step);
    if (!fresh) {
      if (step < it->second) {
        throw Error("metrics: step " + std::to_string(step) + " after " + std::to_string(it->second) +
                    " in phase '" + phase + "'");
      }
      it->second = step;
    }
    const auto ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
    nlohmann::json j = {{"phase", phase}, {"step", step}, {"metric", metric}, {"value", value}, {"wall_ms", ms}};
    out_ << j.dump() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
  std::chrono::steady_clock::time_point start_;
  std::map<std::string, std::size_t> last_step_;
};

// ---------------------------------------------------------------------------
// Run directory

/// DIR/{config.resolved.json, checkpoints/, datasets/, metrics.jsonl,
/// report.json}, held under DIR/.lock for the object's lifetime.
class RunDir {
 public:
  RunDir(fs::path root, bool force) : root_(std::move(root)) {
    const fs::path lock = root_ / ".lock";
    if (fs::exists(lock)) throw Error("run directory '" + root_.string() + "' is locked by another run");
    if (fs::exists(root_)) {
      if (!fs::is_directory(root_)) throw ConfigError("output '" + root_.string() + "' is not a directory");
      if (!fs::is_empty(root_)) {
        if (!force) throw ConfigError("run directory '" + root_.string() + "' already exists (use --force)");
        if (!fs::exists(root_ / "config.resolved.json")) {
          throw ConfigError("refusing to overwrite '" + root_.string() + "': not a run directory");
        }
        for (const auto& e : fs::directory_iterator(root_)) fs::remove_all(e.path());
      }
    }
    fs::create_directories(root_ / "checkpoints");
    fs::create_directories(root_ / "datasets");
    std::FILE* f = std::fopen(lock.c_str(), "wx");
    if (!f) throw Error("run directory '" + root_.string() + "' is locked by another run");
    std::fclose(f);
    locked_ = true;
    metrics_.emplace(root_ / "metrics.jsonl");
  }
  RunDir(const RunDir&) = delete;
  RunDir& operator=(const RunDir&) = delete;
  ~RunDir() {
    if (!locked_) return;
    std::error_code ec;
    fs::remove(root_ / ".lock", ec);
  }

  const fs::path& root() const noexcept { return root_; }
  fs::path checkpoint(const std::string& name) const { return root_ / "checkpoints" / name; }
  fs::path dataset(const std::string& name) const { return root_ / "datasets" / name; }
  MetricsLog& metrics() { return *metrics_; }

  void write_json(const std::string& name, const nlohmann::json& j) const {
    std::ofstream out(root_ / name);
    out << j.dump(2) << '\n';
    if (!out) throw Error("cannot write '" + (root_ / name).string() + "'");
  }

 private:
  fs::path root_;
  bool locked_ = false;
  std::optional<MetricsLog> metrics_;
};

// ---------------------------------------------------------------------------
// Stages

struct Datasets {
  LabeledDataset train;
  LabeledDataset test;
};

inline Datasets load_datasets(const RunConfig& c) {
  if (c.train.dataset == "cifar10") {
    auto [train, test] = read_cifar10_binary(c.train.cifar_dir);
    return {std::move(train), std::move(test)};
  }
  ShapesOptions o;
  o.classes = c.train.classes;
  o.size = c.train.image_size;
  auto train = generate_shapes_dataset(mix_seed(c.seed, 1), c.train.shapes_per_class, o);
  auto test = generate_shapes_dataset(mix_seed(c.seed, 2), c.eval.shapes_per_class, o);
  train.split = "train";
  test.split = "test";
  return {std::move(train), std::move(test)};
}

inline NetworkGraph<float> train_baseline(const RunConfig& c, const LabeledDataset& train, MetricsLog* metrics) {
  auto g = build_model(c);
  Rng rng(c.seed);
  g.init_parameters(rng);
  train_supervised(g, train, c.train.opt, [&](const TrainStep& s) {
    if (!metrics) return;
    metrics->log("train", s.step, "loss", s.loss);
    metrics->log("train", s.step, "lr", s.lr);
  });
  return g;
}

inline nlohmann::json to_json(const EvalResult& r) {
  return {{"count", r.count}, {"accuracy", r.accuracy}, {"per_class", r.per_class}, {"class_counts", r.class_counts}};
}

struct ComparisonRow {
  std::string name;
  double accuracy = 0;
  double removed_filters_pct = 0;
  double removed_params_pct = 0;
};

inline nlohmann::json to_json(const std::vector<ComparisonRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    out.push_back({{"name", r.name},
                   {"accuracy", r.accuracy},
                   {"removed_filters_pct", r.removed_filters_pct},
                   {"removed_params_pct", r.removed_params_pct}});
  }
  return out;
}

inline std::string format_table(const std::vector<ComparisonRow>& rows) {
  std::ostringstream s;
  s << std::left << std::setw(18) << "Method" << std::right << std::setw(12) << "Accuracy %" << std::setw(20)
    << "Removed filters %" << std::setw(19) << "Removed params %" << '\n';
  s << std::fixed << std::setprecision(2);
  for (const auto& r : rows) {
    s << std::left << std::setw(18) << r.name << std::right << std::setw(12) << 100.0 * r.accuracy << std::setw(20)
      << r.removed_filters_pct << std::setw(19) << r.removed_params_pct << '\n';
  }
  return s.str();
}

inline nlohmann::json loss_summary(const std::vector<DistillStep>& h) {
  if (h.empty()) return nlohmann::json::object();
  const std::size_t last_epoch = h.back().epoch;
  double first = 0, last = 0;
  std::size_t nf = 0, nl = 0;
  for (const auto& s : h) {
    if (s.epoch == 0) {
      first += s.l_total;
      ++nf;
    }
    if (s.epoch == last_epoch) {
      last += s.l_total;
      ++nl;
    }
  }
  return {{"first_epoch_mean", first / double(nf)}, {"last_epoch_mean", last / double(nl)}, {"steps", h.size()}};
}

inline void write_loss_jsonl(const fs::path& path, const std::vector<DistillStep>& h) {
  std::ofstream out(path);
  for (const auto& s : h) out << to_json(s).dump() << '\n';
  if (!out) throw Error("cannot write '" + path.string() + "'");
}

struct PipelineOptions {
  bool force = false;
  std::ostream* log = nullptr;
};

struct PipelineResult {
  Datasets data;
  std::optional<NetworkGraph<float>> teacher;
  std::optional<NetworkGraph<float>> pruned;  // before fine-tuning
  std::optional<NetworkGraph<float>> dfbf;    // fine-tuned backbone + teacher head
  SynthDataset synth;
  PruneReport prune;
  std::vector<DistillStep> history;
  std::vector<ComparisonRow> rows;
  nlohmann::json report;
};

/// Baseline training, pruning, synthesis, backbone fine-tuning and the
/// three-row comparison, all written under `dir`.
inline PipelineResult run_pipeline(const RunConfig& c, const fs::path& dir, const PipelineOptions& opt = {}) {
  using clock = std::chrono::steady_clock;
  validate(c);
  const std::size_t workers = resolve_workers(c.threads);
  RunDir run(dir, opt.force);
  run.write_json("config.resolved.json", to_json(c));
  auto& metrics = run.metrics();
  auto say = [&](const std::string& m) {
    if (opt.log) *opt.log << "[pipeline] " << m << std::endl;
  };
  auto seconds = [](clock::time_point t) { return std::chrono::duration<double>(clock::now() - t).count(); };
  nlohmann::json timing;

  PipelineResult r;
  auto t0 = clock::now();
  r.data = load_datasets(c);
  run.write_json("datasets/train.manifest.json", dataset_manifest(r.data.train));
  run.write_json("datasets/test.manifest.json", dataset_manifest(r.data.test));

  say("training baseline on " + std::to_string(r.data.train.size()) + " images");
  r.teacher.emplace(train_baseline(c, r.data.train, &metrics));
  const auto& teacher = *r.teacher;
  save_checkpoint(teacher, run.checkpoint("baseline.dfbf"));
  timing["train_s"] = seconds(t0);
  const auto teacher_hashes = tensor_hashes(teacher);
  const auto base_eval = evaluate(teacher, r.data.test, c.eval.batch_size);
  metrics.log("eval", 0, "baseline_accuracy", base_eval.accuracy);
  say("baseline accuracy " + std::to_string(base_eval.accuracy));

  t0 = clock::now();
  const auto plan = plan_prune(teacher, c.prune.ratio, c.prune.strategy, c.prune.mode);
  r.pruned.emplace(apply_prune(teacher, plan));
  r.prune = prune_report(teacher, *r.pruned);
  save_checkpoint(*r.pruned, run.checkpoint("pruned.dfbf"));
  const auto pruned_eval = evaluate(*r.pruned, r.data.test, c.eval.batch_size);
  metrics.log("eval", 1, "pruned_accuracy", pruned_eval.accuracy);
  timing["prune_s"] = seconds(t0);
  say("pruned " + std::to_string(r.prune.removed_filters_pct) + "% of prunable filters, accuracy " +
      std::to_string(pruned_eval.accuracy));

  t0 = clock::now();
  say("synthesizing " + std::to_string(c.synth.num_images) + " images on " + std::to_string(workers) + " worker(s)");
  r.synth = generate_dataset(teacher, c.synth, workers);
  save_synth_dataset(r.synth, run.dataset("synthetic.dfds"));
  for (std::size_t b = 0; b < r.synth.header.at("batch_losses").size(); ++b) {
    const auto& bl = r.synth.header.at("batch_losses").at(b);
    metrics.log("synth", b, "initial_loss", bl.at(0).get<double>());
    metrics.log("synth", b, "final_loss", bl.at(1).get<double>());
  }
  timing["synth_s"] = seconds(t0);

  t0 = clock::now();
  say("fine-tuning the pruned backbone for " + std::to_string(c.distill.epochs) + " epoch(s)");
  const auto head_before = tensor_hashes(*r.pruned, ParamScope::Head);
  auto student = *r.pruned;
  r.history = finetune(student, teacher, r.synth.images, c.distill, [&](const DistillStep& s) {
    metrics.log("finetune", s.step, "l_out", s.l_out);
    metrics.log("finetune", s.step, "l_inter", s.l_inter);
    metrics.log("finetune", s.step, "l_total", s.l_total);
  });
  write_loss_jsonl(run.root() / "loss.jsonl", r.history);
  r.dfbf.emplace(assemble(student, teacher));
  save_checkpoint(*r.dfbf, run.checkpoint("dfbf.dfbf"));
  timing["finetune_s"] = seconds(t0);
  const auto dfbf_eval = evaluate(*r.dfbf, r.data.test, c.eval.batch_size);
  metrics.log("eval", 2, "dfbf_accuracy", dfbf_eval.accuracy);

  const bool teacher_unchanged = tensor_hashes(teacher) == teacher_hashes;
  const bool head_unchanged = tensor_hashes(*r.dfbf, ParamScope::Head) == head_before &&
                              head_before == tensor_hashes(teacher, ParamScope::Head);
  r.rows = {{"Baseline", base_eval.accuracy, 0.0, 0.0},
            {"w/o fine-tuning", pruned_eval.accuracy, r.prune.removed_filters_pct, r.prune.removed_params_pct},
            {"DFBF", dfbf_eval.accuracy, r.prune.removed_filters_pct, r.prune.removed_params_pct}};
  r.report = {{"rows", to_json(r.rows)},
              {"eval", {{"baseline", to_json(base_eval)}, {"pruned", to_json(pruned_eval)}, {"dfbf", to_json(dfbf_eval)}}},
              {"prune", to_json(r.prune)},
              {"prune_plan", to_json(plan)},
              {"finetune", loss_summary(r.history)},
              {"synth_batches", r.synth.header.at("batch_losses").size()},
              {"teacher_unchanged", teacher_unchanged},
              {"head_unchanged", head_unchanged},
              {"model_hash", {{"baseline", model_hash(teacher)}, {"dfbf", model_hash(*r.dfbf)}}},
              {"timing", timing}};
  run.write_json("report.json", r.report);
  say("done\n" + format_table(r.rows));
  return r;
}

// ---------------------------------------------------------------------------
// Gamma sweep

struct SweepEntry {
  double gamma = 0;
  std::optional<NetworkGraph<float>> model;  // assembled
  std::vector<DistillStep> history;
};

/// Independent fine-tunes of copies of `pruned`, one per gamma, against one
/// shared read-only teacher.
inline std::vector<SweepEntry> sweep_gamma(const NetworkGraph<float>& pruned, const NetworkGraph<float>& teacher,
                                           const Tensor<float>& images, const DistillConfig& base,
                                           const std::vector<double>& gammas, std::size_t workers) {
  std::vector<SweepEntry> out(gammas.size());
  for (std::size_t i = 0; i < gammas.size(); ++i) {
    DistillConfig c = base;
    c.gamma = gammas[i];
    c.validate();
    out[i].gamma = gammas[i];
  }
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::exception_ptr failure;
  auto work = [&] {
    for (std::size_t i = next++; i < gammas.size(); i = next++) {
      try {
        DistillConfig c = base;
        c.gamma = gammas[i];
        auto student = pruned;
        out[i].history = finetune(student, teacher, images, c);
        out[i].model.emplace(assemble(student, teacher));
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
        next = gammas.size();
      }
    }
  };
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(gammas.size(), 1));
  std::vector<std::thread> pool;
  for (std::size_t i = 1; i < workers; ++i) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return out;
}

}  // namespace dfbf
