// dfbf {train,prune,synthesize,finetune,eval,pipeline,sweep-gamma,inspect}
//
// Exit codes: 0 ok, 2 configuration, 3 data/format, 4 numeric failure.

#include <cstring>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dfbf/alloc.hpp"
#include "dfbf/pipeline.hpp"

using namespace dfbf;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
};

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? run_config_from_json(nlohmann::json::object()) : load_run_config(c.config);
  if (c.seed) set_seed(cfg, *c.seed);
  return cfg;
}

void require_out(const Common& c) {
  if (c.out.empty()) throw ConfigError("--out DIR is required");
}

std::ostream& log() { return std::cerr; }

LabeledDataset eval_set(const RunConfig& cfg, const std::string& dataset_path) {
  if (!dataset_path.empty()) return from_dfds(load_dfds(dataset_path));
  return load_datasets(cfg).test;
}

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << std::endl; }

int cmd_train(const Common& c) {
  require_out(c);
  const auto cfg = resolve(c);
  RunDir run(c.out, c.force);
  run.write_json("config.resolved.json", to_json(cfg));
  const auto data = load_datasets(cfg);
  run.write_json("datasets/train.manifest.json", dataset_manifest(data.train));
  run.write_json("datasets/test.manifest.json", dataset_manifest(data.test));
  log() << "training on " << data.train.size() << " images for " << cfg.train.opt.epochs << " epoch(s)\n";
  const auto g = train_baseline(cfg, data.train, &run.metrics());
  save_checkpoint(g, run.checkpoint("baseline.dfbf"));
  const auto ev = evaluate(g, data.test, cfg.eval.batch_size);
  run.metrics().log("eval", 0, "accuracy", ev.accuracy);
  const nlohmann::json report = {{"checkpoint", run.checkpoint("baseline.dfbf").string()},
                                 {"model_hash", model_hash(g)},
                                 {"eval", to_json(ev)}};
  run.write_json("report.json", report);
  print_json(report);
  return 0;
}

int cmd_prune(const Common& c, const std::string& checkpoint, std::optional<double> ratio,
              const std::string& strategy, const std::string& mode, const std::string& plan_out) {
  require_out(c);
  auto cfg = resolve(c);
  if (ratio) cfg.prune.ratio = *ratio;
  if (!strategy.empty()) cfg.prune.strategy = prune_strategy_from_string(strategy);
  if (!mode.empty()) cfg.prune.mode = prune_mode_from_string(mode);
  validate(cfg);
  const auto g = load_checkpoint<float>(checkpoint);
  RunDir run(c.out, c.force);
  run.write_json("config.resolved.json", to_json(cfg));
  const auto plan = plan_prune(g, cfg.prune.ratio, cfg.prune.strategy, cfg.prune.mode);
  const auto p = apply_prune(g, plan);
  save_checkpoint(p, run.checkpoint("pruned.dfbf"));
  const auto test = load_datasets(cfg).test;
  const auto before = evaluate(g, test, cfg.eval.batch_size);
  const auto after = evaluate(p, test, cfg.eval.batch_size);
  run.metrics().log("eval", 0, "input_accuracy", before.accuracy);
  run.metrics().log("eval", 1, "pruned_accuracy", after.accuracy);
  const nlohmann::json report = {{"checkpoint", run.checkpoint("pruned.dfbf").string()},
                                 {"prune", to_json(prune_report(g, p))},
                                 {"plan", to_json(plan)},
                                 {"input_accuracy", before.accuracy},
                                 {"pruned_accuracy", after.accuracy}};
  run.write_json("report.json", report);
  if (!plan_out.empty()) {
    std::ofstream out(plan_out);
    out << to_json(plan).dump(2) << '\n';
    if (!out) throw Error("cannot write '" + plan_out + "'");
  }
  print_json({{"prune", report.at("prune")}, {"input_accuracy", before.accuracy}, {"pruned_accuracy", after.accuracy}});
  return 0;
}

int cmd_synthesize(const Common& c, const std::string& checkpoint) {
  require_out(c);
  const auto cfg = resolve(c);
  const auto g = load_checkpoint<float>(checkpoint);
  RunDir run(c.out, c.force);
  run.write_json("config.resolved.json", to_json(cfg));
  const std::size_t workers = resolve_workers(cfg.threads);
  log() << "synthesizing " << cfg.synth.num_images << " images in " << cfg.synth.num_batches() << " batch(es) on "
        << workers << " worker(s)\n";
  const auto ds = generate_dataset(g, cfg.synth, workers, [](const SynthProgress& p) {
    log() << "  batch " << p.batch + 1 << "/" << p.batches << " loss " << p.initial_loss << " -> " << p.final_loss
          << "\n";
  });
  save_synth_dataset(ds, run.dataset("synthetic.dfds"));
  const auto& losses = ds.header.at("batch_losses");
  for (std::size_t b = 0; b < losses.size(); ++b) {
    run.metrics().log("synth", b, "initial_loss", losses[b][0].get<double>());
    run.metrics().log("synth", b, "final_loss", losses[b][1].get<double>());
  }
  const nlohmann::json report = {{"dataset", run.dataset("synthetic.dfds").string()},
                                 {"images", cfg.synth.num_images},
                                 {"batches", losses.size()},
                                 {"model_hash", ds.header.at("model_hash")}};
  run.write_json("report.json", report);
  print_json(report);
  return 0;
}

std::string head_digest(const NetworkGraph<float>& g) {
  Sha256 h;
  for (const auto& [name, hex] : tensor_hashes(g, ParamScope::Head)) h.update(name + ":" + hex + ";");
  return h.hex();
}

int cmd_finetune(const Common& c, const std::string& pruned_path, const std::string& teacher_path,
                 const std::string& dataset_path) {
  require_out(c);
  const auto cfg = resolve(c);
  auto pruned = load_checkpoint<float>(pruned_path);
  const auto teacher = load_checkpoint<float>(teacher_path);
  const auto loaded = load_synth_dataset(dataset_path, model_hash(teacher));
  for (const auto& w : loaded.warnings) log() << "warning: " << w << "\n";
  RunDir run(c.out, c.force);
  run.write_json("config.resolved.json", to_json(cfg));
  const auto head_before = head_digest(pruned);
  const auto teacher_before = model_hash(teacher);
  std::cout << "head sha256 before: " << head_before << "\n";
  const auto hist = finetune(pruned, teacher, loaded.data.images, cfg.distill, [&](const DistillStep& s) {
    run.metrics().log("finetune", s.step, "l_out", s.l_out);
    run.metrics().log("finetune", s.step, "l_inter", s.l_inter);
    run.metrics().log("finetune", s.step, "l_total", s.l_total);
  });
  write_loss_jsonl(run.root() / "loss.jsonl", hist);
  const auto full = assemble(pruned, teacher);
  save_checkpoint(full, run.checkpoint("dfbf.dfbf"));
  const auto head_after = head_digest(full);
  std::cout << "head sha256 after:  " << head_after << "\n";
  const nlohmann::json report = {{"checkpoint", run.checkpoint("dfbf.dfbf").string()},
                                 {"head_sha256_before", head_before},
                                 {"head_sha256_after", head_after},
                                 {"teacher_unchanged", model_hash(teacher) == teacher_before},
                                 {"finetune", loss_summary(hist)},
                                 {"warnings", loaded.warnings}};
  run.write_json("report.json", report);
  print_json(report.at("finetune"));
  return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& dataset_path) {
  const auto cfg = resolve(c);
  const auto g = load_checkpoint<float>(checkpoint);
  const auto ds = eval_set(cfg, dataset_path);
  const auto ev = evaluate(g, ds, cfg.eval.batch_size);
  const nlohmann::json report = to_json(ev);
  if (!c.out.empty()) {
    RunDir run(c.out, c.force);
    run.write_json("config.resolved.json", to_json(cfg));
    run.metrics().log("eval", 0, "accuracy", ev.accuracy);
    run.write_json("report.json", report);
  }
  print_json(report);
  return 0;
}

int cmd_pipeline(const Common& c) {
  require_out(c);
  const auto cfg = resolve(c);
  PipelineOptions opt;
  opt.force = c.force;
  opt.log = &log();
  const auto r = run_pipeline(cfg, c.out, opt);
  std::cout << format_table(r.rows);
  return 0;
}

std::vector<double> parse_gammas(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw ConfigError("--gammas: '" + tok + "' is not a number");
    }
  }
  if (out.empty()) throw ConfigError("--gammas needs at least one value");
  return out;
}

int cmd_sweep(const Common& c, const std::string& pruned_path, const std::string& teacher_path,
              const std::string& dataset_path, const std::string& gammas_arg) {
  require_out(c);
  const auto cfg = resolve(c);
  const auto gammas = parse_gammas(gammas_arg);
  const auto pruned = load_checkpoint<float>(pruned_path);
  const auto teacher = load_checkpoint<float>(teacher_path);
  const auto loaded = load_synth_dataset(dataset_path, model_hash(teacher));
  for (const auto& w : loaded.warnings) log() << "warning: " << w << "\n";
  RunDir run(c.out, c.force);
  run.write_json("config.resolved.json", to_json(cfg));
  const auto test = load_datasets(cfg).test;
  const auto results =
      sweep_gamma(pruned, teacher, loaded.data.images, cfg.distill, gammas, resolve_workers(cfg.threads));
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& e = results[i];
    std::ostringstream name;
    name << "dfbf_gamma" << e.gamma << ".dfbf";
    save_checkpoint(*e.model, run.checkpoint(name.str()));
    const auto ev = evaluate(*e.model, test, cfg.eval.batch_size);
    run.metrics().log("sweep", i, "gamma", e.gamma);
    run.metrics().log("sweep", i, "accuracy", ev.accuracy);
    rows.push_back({{"gamma", e.gamma}, {"accuracy", ev.accuracy}, {"finetune", loss_summary(e.history)}});
  }
  run.write_json("report.json", {{"sweep", rows}});
  print_json(rows);
  return 0;
}

int cmd_inspect(const std::string& path) {
  const auto bytes = io::read_file(path);
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), kDatasetMagic, 4) == 0) {
    const auto f = dfds_from_bytes(bytes);
    print_json({{"format", "DFDS"},
                {"shape", f.images.shape()},
                {"has_labels", f.labels.has_value()},
                {"images_sha256", sha256_hex(f.images)},
                {"header", f.header}});
    return 0;
  }
  const auto g = checkpoint_from_bytes<float>(bytes);
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : g.layers()) {
    layers.push_back({{"id", l.id},
                      {"kind", std::string(to_string(l.kind))},
                      {"in", l.in_channels},
                      {"out", l.out_channels},
                      {"tap", l.tap},
                      {"prunable", l.prunable}});
  }
  print_json({{"format", "DFBF"},
              {"model_hash", model_hash(g)},
              {"boundary", g.boundary()},
              {"parameters", g.parameter_count()},
              {"backbone_parameters", g.parameter_count(ParamScope::Backbone)},
              {"head_parameters", g.parameter_count(ParamScope::Head)},
              {"layers", layers}});
  return 0;
}

int exit_code(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const StructuralError*>(&e)) return 2;
  if (dynamic_cast<const FormatError*>(&e) || dynamic_cast<const ShapeError*>(&e)) return 3;
  if (dynamic_cast<const NumericError*>(&e)) return 4;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Filter pruning with label-free backbone recovery"};
  app.require_subcommand(1);

  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "Run configuration (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--seed", common.seed, "Override the run seed");
    sub->add_option("--out", common.out, "Run directory");
    sub->add_flag("--force", common.force, "Overwrite an existing run directory");
  };

  std::string checkpoint, pruned, teacher, dataset, strategy, mode, plan_out, gammas = "0,1,6", inspect_path;
  std::optional<double> ratio;

  auto* train = app.add_subcommand("train", "Train a baseline model");
  add_common(train);

  auto* prune = app.add_subcommand("prune", "Prune backbone filters of a checkpoint");
  add_common(prune);
  prune->add_option("--checkpoint", checkpoint, "Input checkpoint")->required();
  prune->add_option("--ratio", ratio, "Global prune ratio in [0,1)");
  prune->add_option("--strategy", strategy, "l1 or bn_scale");
  prune->add_option("--mode", mode, "uniform or size_weighted");
  prune->add_option("--plan-out", plan_out, "Also write the prune plan JSON here");

  auto* synth = app.add_subcommand("synthesize", "Synthesize a label-free image dataset");
  add_common(synth);
  synth->add_option("--checkpoint", checkpoint, "Unpruned model")->required();

  auto* ft = app.add_subcommand("finetune", "Fine-tune a pruned backbone against its teacher");
  add_common(ft);
  ft->add_option("--pruned", pruned, "Pruned checkpoint")->required();
  ft->add_option("--teacher", teacher, "Unpruned checkpoint")->required();
  ft->add_option("--dataset", dataset, "Synthetic DFDS dataset")->required();

  auto* ev = app.add_subcommand("eval", "Classification accuracy of a checkpoint");
  add_common(ev);
  ev->add_option("--checkpoint", checkpoint, "Checkpoint")->required();
  ev->add_option("--dataset", dataset, "Labeled DFDS dataset (default: the configured test split)");

  auto* pipe = app.add_subcommand("pipeline", "Train, prune, synthesize, fine-tune and compare");
  add_common(pipe);

  auto* sweep = app.add_subcommand("sweep-gamma", "Fine-tune once per gamma value");
  add_common(sweep);
  sweep->add_option("--pruned", pruned, "Pruned checkpoint")->required();
  sweep->add_option("--teacher", teacher, "Unpruned checkpoint")->required();
  sweep->add_option("--dataset", dataset, "Synthetic DFDS dataset")->required();
  sweep->add_option("--gammas", gammas, "Comma-separated gamma values");

  auto* inspect = app.add_subcommand("inspect", "Summarize a checkpoint or DFDS file");
  inspect->add_option("file", inspect_path, "DFBF checkpoint or DFDS dataset")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*train) return cmd_train(common);
    if (*prune) return cmd_prune(common, checkpoint, ratio, strategy, mode, plan_out);
    if (*synth) return cmd_synthesize(common, checkpoint);
    if (*ft) return cmd_finetune(common, pruned, teacher, dataset);
    if (*ev) return cmd_eval(common, checkpoint, dataset);
    if (*pipe) return cmd_pipeline(common);
    if (*sweep) return cmd_sweep(common, pruned, teacher, dataset, gammas);
    if (*inspect) return cmd_inspect(inspect_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return exit_code(e);
  }
  return 1;
}
