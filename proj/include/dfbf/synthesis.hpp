#pragma once

// Label-free image synthesis: pixels are optimized so the frozen model's batch
// statistics match its BN running statistics, with TV and L2 image priors.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "dfbf/checkpoint.hpp"
#include "dfbf/dfds.hpp"
#include "dfbf/graph.hpp"
#include "dfbf/ops.hpp"
#include "dfbf/random.hpp"

namespace dfbf {

struct SynthLossWeights {
  double bn = 1.0;
  double tv = 1e-2;
  double l2 = 1e-4;
};

struct SynthConfig {
  std::size_t width = 32;
  std::size_t height = 32;
  std::size_t batch_size = 64;
  std::size_t num_images = 1600;
  std::size_t steps = 1000;
  double lr = 0.05;
  double momentum = 0.9;
  SynthLossWeights weights;
  std::uint64_t seed = 0;
  double clamp_lo = 0.0;
  double clamp_hi = 1.0;

  void validate() const {
    if (num_images == 0) throw ConfigError("synth: num_images must be > 0");
    if (width < 2 || height < 2) throw ConfigError("synth: image width and height must be >= 2");
    if (batch_size == 0) throw ConfigError("synth: batch_size must be >= 1");
    if (weights.bn < 0 || weights.tv < 0 || weights.l2 < 0) throw ConfigError("synth: loss weights must be >= 0");
    if (!(lr > 0)) throw ConfigError("synth: lr must be positive");
    if (momentum < 0 || momentum >= 1) throw ConfigError("synth: momentum must be in [0,1)");
    if (!(clamp_hi > clamp_lo)) throw ConfigError("synth: clamp range is empty");
  }

  std::size_t num_batches() const { return (num_images + batch_size - 1) / batch_size; }
};

inline nlohmann::json to_json(const SynthConfig& c) {
  return {{"width", c.width},         {"height", c.height},
          {"batch_size", c.batch_size}, {"num_images", c.num_images},
          {"steps", c.steps},         {"lr", c.lr},
          {"momentum", c.momentum},   {"alpha_bn", c.weights.bn},
          {"alpha_tv", c.weights.tv}, {"alpha_l2", c.weights.l2},
          {"seed", c.seed},           {"clamp", {c.clamp_lo, c.clamp_hi}}};
}

template <typename T>
struct ImageLoss {
  Var<T> total;
  Var<T> bn;
  Var<T> tv;
  Var<T> reg;
};

/// alpha_bn * L_BN + alpha_tv * L_TV + alpha_l2 * L_reg on the backbone only.
/// L_BN sums, over BN layers, (|mu - mu_run|^2 + |var - var_run|^2) / C.
template <typename T>
ImageLoss<T> image_loss(const NetworkGraph<T>& model, Tape<T>* tape, const Var<T>& batch,
                        const SynthLossWeights& w = {}) {
  ForwardOptions o;
  o.stop_at_boundary = true;
  o.param_grads = false;
  o.mode = GraphMode::Synthesis;
  auto fr = forward(model, tape, batch, o);
  if (fr.bn_stats.empty()) throw StructuralError("image_loss: the backbone has no BatchNorm2d layer");

  auto term = [](const char* name, auto&& compute) {
    try {
      Var<T> v = compute();
      if (!std::isfinite(static_cast<double>(v.value().item()))) throw NumericError("value is " + std::to_string(v.value().item()));
      return v;
    } catch (const NumericError& e) {
      throw NumericError(std::string("synthesis: ") + name + " is not finite (" + e.what() + ")");
    }
  };
  ImageLoss<T> L;
  L.bn = term("L_BN", [&] {
    Var<T> sum;
    for (const auto& s : fr.bn_stats) {
      const T inv_c = T{1} / static_cast<T>(s.mean.size());
      auto dm = ops::sq_l2_norm(tape, ops::sub(tape, s.mean, Var<T>(s.running_mean)));
      auto dv = ops::sq_l2_norm(tape, ops::sub(tape, s.var, Var<T>(s.running_var)));
      auto t = ops::scale(tape, ops::add(tape, dm, dv), inv_c);
      sum = sum.size() == 0 ? t : ops::add(tape, sum, t);
    }
    return sum;
  });
  L.tv = term("L_TV", [&] { return ops::tv_loss(tape, batch); });
  L.reg = term("L_reg", [&] { return ops::scale(tape, ops::sq_l2_norm(tape, batch), T{1} / static_cast<T>(batch.size())); });
  L.total = term("L_image", [&] {
    return ops::add(tape,
                    ops::add(tape, ops::scale(tape, L.bn, static_cast<T>(w.bn)), ops::scale(tape, L.tv, static_cast<T>(w.tv))),
                    ops::scale(tape, L.reg, static_cast<T>(w.l2)));
  });
  return L;
}

/// Seeded Gaussian start: mean 0.5*range above clamp_lo, std 0.2*range, clamped.
inline Tensor<float> synth_init(const SynthConfig& cfg, std::size_t batch, std::uint64_t seed) {
  const double range = cfg.clamp_hi - cfg.clamp_lo;
  Rng rng(seed);
  auto x = random_normal<float>({batch, 3, cfg.height, cfg.width}, rng, cfg.clamp_lo + 0.5 * range, 0.2 * range);
  for (auto& v : x.data()) v = std::clamp(v, static_cast<float>(cfg.clamp_lo), static_cast<float>(cfg.clamp_hi));
  return x;
}

struct SynthBatch {
  Tensor<float> images;
  double initial_loss = 0;
  double final_loss = 0;
};

/// Optimizes one batch of pixels; the model is only read.
inline SynthBatch synthesize_batch(const NetworkGraph<float>& model, const SynthConfig& cfg, std::uint64_t seed,
                                   std::size_t batch = 0) {
  cfg.validate();
  if (batch == 0) batch = cfg.batch_size;
  SynthBatch out;
  Var<float> x(synth_init(cfg, batch, seed), true, "pixels");
  Tensor<float> vel(x.shape());
  const auto lo = static_cast<float>(cfg.clamp_lo), hi = static_cast<float>(cfg.clamp_hi);
  const auto lr = static_cast<float>(cfg.lr), mom = static_cast<float>(cfg.momentum);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Tape<float> tape;
    x.clear_grad();
    auto L = image_loss(model, &tape, x, cfg.weights);
    if (step == 0) out.initial_loss = L.total.value().item();
    tape.backward(L.total);
    auto& px = x.value();
    const auto& g = x.grad();
    for (std::size_t i = 0; i < px.size(); ++i) {
      vel[i] = mom * vel[i] + g[i];
      px[i] = std::clamp(px[i] - lr * vel[i], lo, hi);
    }
  }
  const auto final_terms = image_loss(model, static_cast<Tape<float>*>(nullptr), x.detached(), cfg.weights);
  out.final_loss = final_terms.total.value().item();
  if (cfg.steps == 0) out.initial_loss = out.final_loss;
  out.images = x.value();
  return out;
}

struct SynthDataset {
  Tensor<float> images;  // [M,3,h,w]
  nlohmann::json header;
};

struct SynthProgress {
  std::size_t batch = 0;
  std::size_t batches = 0;
  double initial_loss = 0;
  double final_loss = 0;
};

inline std::uint64_t synth_batch_seed(const SynthConfig& cfg, std::size_t batch) {
  return mix_seed(cfg.seed, 0x5157ULL + batch);
}

/// ceil(M/B) independent batches with derived seeds; batch results land at
/// their index whatever order workers finish in.
inline SynthDataset generate_dataset(const NetworkGraph<float>& model, const SynthConfig& cfg,
                                     std::size_t workers = 1,
                                     const std::function<void(const SynthProgress&)>& on_batch = {}) {
  cfg.validate();
  const std::size_t nb = cfg.num_batches();
  const std::size_t px = 3 * cfg.height * cfg.width;
  SynthDataset ds;
  ds.images = Tensor<float>({cfg.num_images, 3, cfg.height, cfg.width});
  std::vector<SynthProgress> progress(nb);

  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::exception_ptr failure;
  auto work = [&] {
    for (std::size_t b = next++; b < nb; b = next++) {
      try {
        const std::size_t first = b * cfg.batch_size;
        const std::size_t n = std::min(cfg.batch_size, cfg.num_images - first);
        auto r = synthesize_batch(model, cfg, synth_batch_seed(cfg, b), n);
        std::copy(r.images.data().begin(), r.images.data().end(), ds.images.raw() + first * px);
        std::lock_guard lock(mu);
        progress[b] = {b, nb, r.initial_loss, r.final_loss};
        if (on_batch) on_batch(progress[b]);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
        next = nb;
      }
    }
  };
  workers = std::clamp<std::size_t>(workers, 1, nb);
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < workers; ++i) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  nlohmann::json losses = nlohmann::json::array();
  for (const auto& p : progress) losses.push_back({p.initial_loss, p.final_loss});
  ds.header = {{"config", to_json(cfg)}, {"model_hash", model_hash(model)}, {"batch_losses", losses}};
  return ds;
}

inline void save_synth_dataset(const SynthDataset& ds, const std::filesystem::path& path) {
  DfdsFile f;
  f.images = ds.images;
  f.header = ds.header;
  save_dfds(f, path);
}

struct LoadedSynthDataset {
  SynthDataset data;
  std::vector<std::string> warnings;
};

/// With `expected_model_hash`, a provenance mismatch becomes a warning.
inline LoadedSynthDataset load_synth_dataset(const std::filesystem::path& path,
                                             const std::string& expected_model_hash = {}) {
  auto f = load_dfds(path);
  LoadedSynthDataset out;
  out.data.images = std::move(f.images);
  out.data.header = std::move(f.header);
  if (!expected_model_hash.empty()) {
    const auto got = out.data.header.value("model_hash", std::string());
    if (got != expected_model_hash) {
      out.warnings.push_back("dataset '" + path.string() + "' was synthesized from model " +
                             (got.empty() ? std::string("<unknown>") : got) + ", expected " + expected_model_hash);
    }
  }
  return out;
}

}  // namespace dfbf
