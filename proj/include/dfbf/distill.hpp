#pragma once

// Backbone fine-tuning against the frozen unpruned teacher: l1 matching of
// the backbone output and of selected tap feature maps.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dfbf/data.hpp"
#include "dfbf/graph.hpp"
#include "dfbf/ops.hpp"
#include "dfbf/optim.hpp"

namespace dfbf {

enum class TapSelection { All, EverySecond, OutputOnly };

inline std::string_view to_string(TapSelection t) {
  switch (t) {
    case TapSelection::All: return "all";
    case TapSelection::EverySecond: return "every_second";
    case TapSelection::OutputOnly: return "output_only";
  }
  return "?";
}

inline TapSelection tap_selection_from_string(std::string_view s) {
  if (s == "all") return TapSelection::All;
  if (s == "every_second") return TapSelection::EverySecond;
  if (s == "output_only") return TapSelection::OutputOnly;
  throw ConfigError("unknown tap selection '" + std::string(s) + "' (expected all, every_second or output_only)");
}

struct DistillConfig {
  double gamma = 0.0;
  TapSelection taps = TapSelection::All;
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  SgdSettings sgd{0.01, 0.9, 5e-4};
  std::uint64_t seed = 0;
  // Also divide the l1 sums by the channel count.
  bool channel_mean = false;

  void validate() const {
    if (!(gamma >= 0) || !std::isfinite(gamma)) throw ConfigError("distill: gamma must be >= 0");
    if (batch_size == 0) throw ConfigError("distill: batch_size must be >= 1");
  }
};

struct MuSchedule {
  std::vector<double> mu;  // mu[n-1] for n = 1..N
  double mu_out = 1.0;
};

inline MuSchedule mu_schedule(std::size_t N, double gamma) {
  if (!(gamma >= 0)) throw ConfigError("mu_schedule: gamma must be >= 0");
  MuSchedule s;
  for (std::size_t n = 1; n <= N; ++n) {
    s.mu.push_back(static_cast<double>(n) / static_cast<double>(N + 1) * gamma + 1.0);
  }
  s.mu_out = gamma + 1.0;
  return s;
}

/// Sum of |a - b| over channels and space, divided by batch * spatial size
/// (and by channels when channel_mean). Rank-2 inputs count as 1x1 maps.
template <typename T>
Var<T> out_loss(Tape<T>* tape, const Var<T>& a, const Var<T>& b, bool channel_mean = false) {
  if (a.shape() != b.shape()) {
    throw ShapeError("out_loss: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  }
  const auto& s = a.shape();
  if (s.size() != 2 && s.size() != 4) throw ShapeError("out_loss: expected [B,C] or [B,C,H,W], got " + shape_str(s));
  const double spatial = s.size() == 4 ? static_cast<double>(s[2] * s[3]) : 1.0;
  double denom = static_cast<double>(s[0]) * spatial;
  if (channel_mean) denom *= static_cast<double>(s[1]);
  return ops::scale(tape, ops::l1_distance_sum(tape, a, b), static_cast<T>(1.0 / denom));
}

/// Taps used for the intermediate loss, renumbered from n = 1.
template <typename X>
std::vector<X> select_taps(const std::vector<X>& taps, TapSelection sel) {
  std::vector<X> out;
  for (std::size_t i = 0; i < taps.size(); ++i) {
    if (sel == TapSelection::All || (sel == TapSelection::EverySecond && i % 2 == 0)) out.push_back(taps[i]);
  }
  return out;
}

template <typename T>
Var<T> inter_loss(Tape<T>* tape, const std::vector<TapOutput<T>>& pruned, const std::vector<TapOutput<T>>& teacher,
                  const MuSchedule& schedule, bool channel_mean = false) {
  if (pruned.size() != teacher.size() || pruned.size() != schedule.mu.size()) {
    throw StructuralError("inter_loss: " + std::to_string(pruned.size()) + " pruned taps, " +
                          std::to_string(teacher.size()) + " teacher taps, " +
                          std::to_string(schedule.mu.size()) + " weights");
  }
  Var<T> total(Tensor<T>::scalar(T{0}));
  for (std::size_t n = 0; n < pruned.size(); ++n) {
    if (pruned[n].id != teacher[n].id) {
      throw StructuralError("inter_loss: tap " + std::to_string(n + 1) + " is '" + pruned[n].id + "' vs '" +
                            teacher[n].id + "'");
    }
    auto term = out_loss(tape, pruned[n].value, teacher[n].value, channel_mean);
    total = ops::add(tape, total, ops::scale(tape, term, static_cast<T>(schedule.mu[n])));
  }
  return total;
}

template <typename T>
struct DfbfLoss {
  Var<T> total;
  Var<T> out;
  Var<T> inter;
};

/// mu_out * L_out + L_inter. `pruned` and `teacher` are backbone forwards with
/// the already-selected taps.
template <typename T>
DfbfLoss<T> dfbf_loss(Tape<T>* tape, const ForwardResult<T>& pruned, const ForwardResult<T>& teacher,
                      const MuSchedule& schedule, bool channel_mean = false) {
  DfbfLoss<T> L;
  L.out = out_loss(tape, pruned.output, teacher.output, channel_mean);
  L.inter = inter_loss(tape, pruned.taps, teacher.taps, schedule, channel_mean);
  L.total = ops::add(tape, ops::scale(tape, L.out, static_cast<T>(schedule.mu_out)), L.inter);
  return L;
}

struct DistillStep {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double l_out = 0;
  double l_inter = 0;
  double l_total = 0;
};

inline nlohmann::json to_json(const DistillStep& s) {
  return {{"step", s.step}, {"epoch", s.epoch}, {"l_out", s.l_out}, {"l_inter", s.l_inter}, {"l_total", s.l_total}};
}

namespace detail {

template <typename T>
ForwardResult<T> backbone_forward(const NetworkGraph<T>& g, Tape<T>* tape, const Var<T>& x, TapSelection sel,
                                  bool param_grads) {
  ForwardOptions o;
  o.capture_taps = true;
  o.stop_at_boundary = true;
  o.mode = GraphMode::Eval;
  o.param_grads = param_grads;
  auto r = forward(g, tape, x, o);
  r.taps = select_taps(r.taps, sel);
  return r;
}

}  // namespace detail

/// Teacher and pruned backbones both run BN in eval mode. Only pruned
/// backbone parameters are updated, and batches with zero loss do not step.
template <typename T>
std::vector<DistillStep> finetune(NetworkGraph<T>& pruned, const NetworkGraph<T>& teacher, const Tensor<T>& images,
                                  const DistillConfig& cfg,
                                  const std::function<void(const DistillStep&)>& on_step = {}) {
  cfg.validate();
  if (images.rank() != 4 || images.dim(0) == 0) throw Error("finetune: synthetic dataset is empty");
  if (pruned.boundary() != teacher.boundary()) {
    throw StructuralError("finetune: backbone boundaries differ ('" + pruned.boundary() + "' vs '" +
                          teacher.boundary() + "')");
  }
  // Tap alignment on one probe image, before any update.
  {
    Var<T> probe(gather_rows(images, {0}));
    auto p = detail::backbone_forward(pruned, static_cast<Tape<T>*>(nullptr), probe, cfg.taps, false);
    auto t = detail::backbone_forward(teacher, static_cast<Tape<T>*>(nullptr), probe, cfg.taps, false);
    if (p.taps.size() != t.taps.size()) throw StructuralError("finetune: tap counts differ");
    for (std::size_t i = 0; i < p.taps.size(); ++i) {
      if (p.taps[i].id != t.taps[i].id || p.taps[i].value.shape() != t.taps[i].value.shape()) {
        throw StructuralError("finetune: tap '" + p.taps[i].id + "' does not align with teacher tap '" +
                              t.taps[i].id + "'");
      }
    }
    if (p.output.shape() != t.output.shape()) throw StructuralError("finetune: backbone outputs differ in shape");
  }

  std::vector<DistillStep> hist;
  if (cfg.epochs == 0) return hist;
  const GraphMode saved = pruned.mode();
  pruned.set_mode(GraphMode::Eval);
  Sgd<T> opt(pruned.trainable(ParamScope::Backbone), cfg.sgd);
  std::size_t step = 0;
  MuSchedule sched;
  bool have_sched = false;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    for (const auto& idx : batch_indices(images.dim(0), cfg.batch_size, mix_seed(cfg.seed, e))) {
      Var<T> x(gather_rows(images, idx));
      Tape<T> tape;
      DistillStep rec{step, e, 0, 0, 0};
      try {
        auto t = detail::backbone_forward(teacher, static_cast<Tape<T>*>(nullptr), x, cfg.taps, false);
        opt.zero_grad();
        auto p = detail::backbone_forward(static_cast<const NetworkGraph<T>&>(pruned), &tape, x, cfg.taps, true);
        if (!have_sched) {
          sched = mu_schedule(p.taps.size(), cfg.gamma);
          have_sched = true;
        }
        auto L = dfbf_loss(&tape, p, t, sched, cfg.channel_mean);
        rec.l_out = L.out.value().item();
        rec.l_inter = L.inter.value().item();
        rec.l_total = L.total.value().item();
        if (!std::isfinite(rec.l_total)) throw NumericError("L_DFBF = " + std::to_string(rec.l_total));
        // An exactly matched batch is already optimal; stepping would only
        // apply weight decay.
        if (rec.l_total != 0.0) {
          tape.backward(L.total);
          opt.step();
        }
      } catch (const NumericError& err) {
        throw NumericError("finetune: step " + std::to_string(step) + ": " + err.what());
      }
      hist.push_back(rec);
      if (on_step) on_step(rec);
      ++step;
    }
  }
  pruned.set_mode(saved);
  return hist;
}

/// Pruned backbone layers and tensors followed by `head`'s head layers and tensors.
template <typename T>
NetworkGraph<T> assemble(const NetworkGraph<T>& backbone, const NetworkGraph<T>& head) {
  if (backbone.boundary() != head.boundary()) throw StructuralError("assemble: boundaries differ");
  std::vector<LayerSpec> layers;
  for (std::size_t i = 0; i <= backbone.boundary_index(); ++i) layers.push_back(backbone.layer(i));
  for (std::size_t i = head.boundary_index() + 1; i < head.size(); ++i) layers.push_back(head.layer(i));
  NetworkGraph<T> g(std::move(layers), backbone.boundary(), backbone.input_channels());
  g.set_mode(GraphMode::Eval);
  for (const auto& [src, scope] : {std::pair{&backbone, ParamScope::Backbone}, {&head, ParamScope::Head}}) {
    for (const auto& [name, v] : src->tensors(scope)) {
      const auto dot = name.rfind('.');
      g.param(name.substr(0, dot), name.substr(dot + 1)).value() = v.value();
    }
  }
  return g;
}

/// y = h(b_p(x)).
template <typename T>
Tensor<T> assemble_and_predict(const NetworkGraph<T>& pruned_backbone, const NetworkGraph<T>& head,
                               const Tensor<T>& x) {
  ForwardOptions o;
  o.stop_at_boundary = true;
  o.mode = GraphMode::Eval;
  auto z = forward(pruned_backbone, static_cast<Tape<T>*>(nullptr), Var<T>(x), o).output;
  return forward_head(head, static_cast<Tape<T>*>(nullptr), z, o).value();
}

}  // namespace dfbf
