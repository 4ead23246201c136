#include <gtest/gtest.h>

#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "dfbf/pipeline.hpp"

using namespace dfbf;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

RunConfig preset(const std::string& name) { return load_run_config(fs::path(DFBF_CONFIG_DIR) / (name + ".json")); }

fs::path scratch(const std::string& tag) {
  auto p = fs::temp_directory_path() / ("dfbf_cfg_" + std::to_string(::getpid()) + "_" + tag);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(Config, EmptyDocumentGivesDefaults) {
  const auto c = run_config_from_json(json::object());
  EXPECT_EQ(c.model.arch, "resnet_tiny");
  EXPECT_EQ(c.synth.num_images, 1600u);
  EXPECT_EQ(c.synth.steps, 1000u);
  EXPECT_DOUBLE_EQ(c.distill.sgd.lr, 0.01);
  EXPECT_DOUBLE_EQ(c.distill.sgd.momentum, 0.9);
  EXPECT_DOUBLE_EQ(c.distill.sgd.weight_decay, 5e-4);
  EXPECT_EQ(c.distill.taps, TapSelection::All);
  EXPECT_FALSE(c.distill.channel_mean);
  EXPECT_DOUBLE_EQ(c.prune.ratio, 0.3);
}

TEST(Config, UnknownKeysAreRejectedWithTheirPath) {
  for (const auto& [doc, needle] : std::vector<std::pair<std::string, std::string>>{
           {R"({"sed": 1})", "'sed'"},
           {R"({"synth": {"stepz": 3}})", "'synth.stepz'"},
           {R"({"distill": {"beta": 1}})", "'distill.beta'"},
       }) {
    try {
      run_config_from_json(json::parse(doc));
      ADD_FAILURE() << doc;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  }
}

TEST(Config, WrongTypesAndBadValuesAreConfigErrors) {
  for (const char* doc : {R"({"seed": "one"})", R"({"synth": {"clamp": [0]}})", R"({"prune": {"ratio": 1.0}})",
                          R"({"prune": {"strategy": "random"}})", R"({"distill": {"taps": "some"}})",
                          R"({"distill": {"gamma": -1}})", R"({"model": {"arch": "mlp"}})",
                          R"({"train": {"dataset": "cifar10"}})", R"({"model": "resnet"})",
                          R"({"synth": {"batch_size": 0}})", R"({"train": {"classes": 7}})"}) {
    EXPECT_THROW(run_config_from_json(json::parse(doc)), ConfigError) << doc;
  }
}

TEST(Config, ResolvedEchoRoundTrips) {
  auto c = preset("desk_recovery");
  const auto j = to_json(c);
  EXPECT_EQ(to_json(run_config_from_json(j)), j);
  EXPECT_EQ(c.train.opt.seed, 1u);
  EXPECT_EQ(c.synth.seed, 1u);
  EXPECT_EQ(c.distill.seed, 1u);
  set_seed(c, 4);
  EXPECT_EQ(c.train.opt.seed, 4u);
  EXPECT_EQ(c.synth.seed, 4u);
  EXPECT_EQ(c.distill.seed, 4u);
}

TEST(Config, PresetsCarryTheReferenceSettings) {
  const auto cls = preset("classification");
  EXPECT_EQ(cls.synth.num_images, 1600u);
  EXPECT_EQ(cls.synth.width, 32u);
  EXPECT_EQ(cls.synth.height, 32u);
  EXPECT_EQ(cls.distill.gamma, 0.0);

  const auto det = preset("detection_like");
  EXPECT_EQ(det.model.arch, "vgg_tiny");
  EXPECT_EQ(det.synth.width, 250u);
  EXPECT_EQ(det.synth.height, 250u);
  EXPECT_EQ(det.distill.gamma, 1.0);

  const auto pose = preset("pose_like");
  EXPECT_EQ(pose.synth.width, 160u);
  EXPECT_EQ(pose.synth.height, 160u);
  EXPECT_EQ(pose.distill.gamma, 6.0);

  for (const auto* c : {&cls, &det, &pose}) {
    EXPECT_EQ(c->synth.num_images, 1600u);
    EXPECT_DOUBLE_EQ(c->distill.sgd.lr, 0.01);
    EXPECT_DOUBLE_EQ(c->distill.sgd.momentum, 0.9);
    EXPECT_DOUBLE_EQ(c->distill.sgd.weight_decay, 5e-4);
  }
  EXPECT_NO_THROW(preset("smoke"));
  EXPECT_NO_THROW(build_model(det));
  EXPECT_NO_THROW(build_model(pose));
}

TEST(Config, CommentsAllowedAndMissingFileIsConfigError) {
  const auto p = scratch("comments.json");
  std::ofstream(p) << "// note\n{\"seed\": 9 /* inline */}\n";
  EXPECT_EQ(load_run_config(p).seed, 9u);
  fs::remove(p);
  EXPECT_THROW(load_run_config(p), ConfigError);
}

TEST(Workers, EnvironmentCapsTheCount) {
  ::setenv("DFBF_THREADS", "1", 1);
  EXPECT_EQ(resolve_workers(0), 1u);
  EXPECT_EQ(resolve_workers(8), 1u);
  ::setenv("DFBF_THREADS", "zero", 1);
  EXPECT_THROW(resolve_workers(2), ConfigError);
  ::unsetenv("DFBF_THREADS");
  EXPECT_EQ(resolve_workers(3), 3u);
  EXPECT_GE(resolve_workers(0), 1u);
}

TEST(Metrics, StepsMayRepeatButNotGoBack) {
  const auto p = scratch("metrics.jsonl");
  {
    MetricsLog m(p);
    m.log("a", 0, "x", 1.0);
    m.log("a", 0, "y", 2.0);
    m.log("b", 5, "x", 1.0);
    m.log("a", 3, "x", 1.0);
    EXPECT_THROW(m.log("a", 2, "x", 1.0), Error);
  }
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line); ++n) {
    const auto j = json::parse(line);
    for (const char* k : {"phase", "step", "metric", "value", "wall_ms"}) EXPECT_TRUE(j.contains(k)) << k;
  }
  EXPECT_EQ(n, 4u);
  fs::remove(p);
}

TEST(RunDir, LocksAndRefusesForeignDirectories) {
  const auto root = scratch("run");
  {
    RunDir r(root, false);
    EXPECT_TRUE(fs::exists(root / ".lock"));
    EXPECT_THROW(RunDir(root, true), Error);
    r.write_json("config.resolved.json", json::object());
  }
  EXPECT_FALSE(fs::exists(root / ".lock"));
  EXPECT_THROW(RunDir(root, false), ConfigError);
  { RunDir again(root, true); }
  EXPECT_FALSE(fs::exists(root / "config.resolved.json"));

  const auto other = scratch("other");
  fs::create_directories(other);
  std::ofstream(other / "precious.txt") << "x";
  EXPECT_THROW(RunDir(other, true), ConfigError);
  EXPECT_TRUE(fs::exists(other / "precious.txt"));
  fs::remove_all(root);
  fs::remove_all(other);
}

TEST(Sweep, MatchesSequentialFinetunesForAnyWorkerCount) {
  auto teacher = build_resnet_tiny<float>({4, 8}, {1, 1}, 4);
  Rng rng(11);
  teacher.init_parameters(rng);
  const auto pruned = apply_prune(teacher, plan_prune(teacher, 0.25, PruneStrategy::L1, PruneMode::Uniform));
  Tensor<float> images({8, 3, 12, 12});
  Rng ir(12);
  fill_uniform(images, ir, 0.0, 1.0);
  DistillConfig base;
  base.epochs = 1;
  base.batch_size = 4;
  const std::vector<double> gammas{0.0, 2.0, 6.0};

  const auto one = sweep_gamma(pruned, teacher, images, base, gammas, 1);
  const auto three = sweep_gamma(pruned, teacher, images, base, gammas, 3);
  ASSERT_EQ(one.size(), 3u);
  for (std::size_t i = 0; i < gammas.size(); ++i) {
    DistillConfig c = base;
    c.gamma = gammas[i];
    auto student = pruned;
    finetune(student, teacher, images, c);
    const auto ref = checkpoint_bytes(assemble(student, teacher));
    EXPECT_EQ(one[i].gamma, gammas[i]);
    EXPECT_EQ(checkpoint_bytes(*one[i].model), ref) << gammas[i];
    EXPECT_EQ(checkpoint_bytes(*three[i].model), ref) << gammas[i];
  }
  EXPECT_THROW(sweep_gamma(pruned, teacher, images, base, {-1.0}, 1), ConfigError);
}
