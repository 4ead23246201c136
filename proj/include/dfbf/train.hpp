#pragma once

// Supervised baseline training and classification accuracy.

#include <chrono>
#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

#include "dfbf/data.hpp"
#include "dfbf/graph.hpp"
#include "dfbf/optim.hpp"
#include "dfbf/random.hpp"

namespace dfbf {

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  SgdSettings sgd{0.05, 0.9, 5e-4};
  bool cosine = true;  // cosine decay of lr over all steps
  std::uint64_t seed = 0;
};

struct TrainStep {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss = 0;
  double lr = 0;
};

/// Cross-entropy training of every parameter of `g` on `ds`. BN runs in train
/// mode; the graph is left in eval mode.
inline std::vector<TrainStep> train_supervised(NetworkGraph<float>& g, const LabeledDataset& ds,
                                               const TrainConfig& cfg,
                                               const std::function<void(const TrainStep&)>& on_step = {}) {
  ds.validate();
  if (ds.empty()) throw Error("train: dataset is empty");
  if (g.out_channels(g.size() - 1) != ds.num_classes) {
    throw ConfigError("train: model has " + std::to_string(g.out_channels(g.size() - 1)) +
                      " outputs, dataset has " + std::to_string(ds.num_classes) + " classes");
  }
  Sgd<float> opt(g.trainable(), cfg.sgd);
  const std::size_t per_epoch = (ds.size() + cfg.batch_size - 1) / std::max<std::size_t>(cfg.batch_size, 1);
  const std::size_t total = per_epoch * cfg.epochs;
  std::vector<TrainStep> hist;
  g.set_mode(GraphMode::Train);
  std::size_t step = 0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    for (const auto& idx : batch_indices(ds.size(), cfg.batch_size, mix_seed(cfg.seed, e))) {
      const double lr = cfg.cosine ? cfg.sgd.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * step / total))
                                   : cfg.sgd.lr;
      opt.set_lr(std::max(lr, 1e-12));
      auto batch = gather(ds, idx);
      Tape<float> tape;
      opt.zero_grad();
      auto out = forward(g, &tape, Var<float>(std::move(batch.images)));
      auto loss = ops::softmax_cross_entropy(&tape, out.output, batch.labels);
      const double lv = loss.value().item();
      tape.backward(loss);
      opt.step();
      TrainStep rec{step, e, lv, lr};
      hist.push_back(rec);
      if (on_step) on_step(rec);
      ++step;
    }
  }
  g.set_mode(GraphMode::Eval);
  g.zero_grad();
  return hist;
}

struct EvalResult {
  std::size_t count = 0;
  double accuracy = 0;
  std::vector<double> per_class;
  std::vector<std::size_t> class_counts;
};

using Predictor = std::function<Tensor<float>(const Tensor<float>&)>;

inline EvalResult evaluate_with(const Predictor& predict_fn, const LabeledDataset& ds,
                                std::size_t batch_size = 256) {
  ds.validate();
  if (ds.empty()) throw Error("eval: dataset is empty");
  EvalResult r;
  r.count = ds.size();
  std::vector<std::size_t> correct(ds.num_classes, 0);
  r.class_counts.assign(ds.num_classes, 0);
  std::size_t hits = 0;
  for (const auto& idx : batch_indices(ds.size(), batch_size)) {
    const auto batch = gather(ds, idx);
    const auto logits = predict_fn(batch.images);
    if (logits.rank() != 2 || logits.dim(0) != idx.size()) {
      throw ShapeError("eval: predictor returned " + shape_str(logits.shape()));
    }
    const std::size_t K = logits.dim(1);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const float* row = logits.raw() + b * K;
      const auto pred = static_cast<int>(std::max_element(row, row + K) - row);
      const auto lab = static_cast<std::size_t>(batch.labels[b]);
      ++r.class_counts[lab];
      if (pred == batch.labels[b]) {
        ++hits;
        ++correct[lab];
      }
    }
  }
  r.accuracy = static_cast<double>(hits) / static_cast<double>(r.count);
  for (std::size_t c = 0; c < ds.num_classes; ++c) {
    r.per_class.push_back(r.class_counts[c] ? static_cast<double>(correct[c]) / static_cast<double>(r.class_counts[c])
                                            : 0.0);
  }
  return r;
}

inline EvalResult evaluate(const NetworkGraph<float>& g, const LabeledDataset& ds, std::size_t batch_size = 256) {
  return evaluate_with([&](const Tensor<float>& x) { return predict(g, x); }, ds, batch_size);
}

}  // namespace dfbf
