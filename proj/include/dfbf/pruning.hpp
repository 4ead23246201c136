#pragma once

// Structured filter pruning: score, plan, rewrite.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dfbf/error.hpp"
#include "dfbf/graph.hpp"

namespace dfbf {

enum class PruneStrategy { L1, BnScale };
enum class PruneMode { Uniform, SizeWeighted };

inline std::string_view to_string(PruneStrategy s) { return s == PruneStrategy::L1 ? "l1" : "bn_scale"; }
inline std::string_view to_string(PruneMode m) {
  return m == PruneMode::Uniform ? "uniform" : "size_weighted";
}
inline PruneStrategy prune_strategy_from_string(std::string_view s) {
  if (s == "l1") return PruneStrategy::L1;
  if (s == "bn_scale") return PruneStrategy::BnScale;
  throw ConfigError("unknown prune strategy '" + std::string(s) + "' (expected l1 or bn_scale)");
}
inline PruneMode prune_mode_from_string(std::string_view s) {
  if (s == "uniform") return PruneMode::Uniform;
  if (s == "size_weighted") return PruneMode::SizeWeighted;
  throw ConfigError("unknown prune mode '" + std::string(s) + "' (expected uniform or size_weighted)");
}

struct LayerPrunePlan {
  std::string id;
  std::size_t original = 0;
  std::vector<std::size_t> kept;  // ascending
};

struct PrunePlan {
  PruneStrategy strategy = PruneStrategy::L1;
  PruneMode mode = PruneMode::Uniform;
  double global_ratio = 0;
  std::vector<LayerPrunePlan> layers;                          // prunable convs, graph order
  std::map<std::string, std::vector<std::size_t>> rewiring;  // consumer -> kept input channels

  const LayerPrunePlan* find(const std::string& id) const {
    for (const auto& l : layers) {
      if (l.id == id) return &l;
    }
    return nullptr;
  }
};

struct LayerPruneCount {
  std::string id;
  bool prunable = false;
  std::size_t before = 0;
  std::size_t after = 0;
};

struct PruneReport {
  double removed_filters_pct = 0;      // over prunable layers
  double removed_filters_pct_all = 0;  // over every backbone conv
  double removed_params_pct = 0;       // backbone trainable parameters
  std::size_t params_before = 0;
  std::size_t params_after = 0;
  std::vector<LayerPruneCount> layers;
};

/// s_i = sum |w_i| over (Cin, kh, kw).
template <typename T>
std::vector<double> score_filters_l1(const Tensor<T>& weight) {
  if (weight.rank() != 4) {
    throw ShapeError("score_filters_l1: expected a 4-D conv weight, got " + shape_str(weight.shape()));
  }
  const std::size_t F = weight.dim(0), per = weight.size() / std::max<std::size_t>(F, 1);
  std::vector<double> s(F, 0.0);
  for (std::size_t f = 0; f < F; ++f) {
    for (std::size_t k = 0; k < per; ++k) s[f] += std::abs(static_cast<double>(weight[f * per + k]));
  }
  return s;
}

template <typename T>
std::vector<double> score_filters_bnscale(const Tensor<T>& gamma) {
  if (gamma.rank() != 1) {
    throw ShapeError("score_filters_bnscale: expected 1-D gamma, got " + shape_str(gamma.shape()));
  }
  std::vector<double> s(gamma.size());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::abs(static_cast<double>(gamma[i]));
  return s;
}

/// Indices of the `keep` highest scores, ascending. Ties go to the lower index.
inline std::vector<std::size_t> top_filters(const std::vector<double>& scores, std::size_t keep) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(std::min(keep, order.size()));
  std::sort(order.begin(), order.end());
  return order;
}

namespace detail {

struct ChannelMaps {
  // Per layer: kept original output channels, or nullopt when untouched.
  std::vector<std::optional<std::vector<std::size_t>>> out;
  std::map<std::string, std::vector<std::size_t>> rewiring;
};

// Pushes the per-conv kept sets through the graph. Rejects any rewrite that
// would change a tap, the boundary or a residual join.
template <typename T>
ChannelMaps propagate_channel_maps(const NetworkGraph<T>& g,
                                   const std::map<std::string, std::vector<std::size_t>>& kept) {
  ChannelMaps m;
  m.out.resize(g.size());
  const auto in_map = [&](const std::string& id) -> const std::optional<std::vector<std::size_t>>& {
    static const std::optional<std::vector<std::size_t>> none;
    return id == kInputId ? none : m.out[g.index_of(id)];
  };
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto& l = g.layer(i);
    const auto& src = in_map(l.inputs[0]);
    switch (l.kind) {
      case LayerKind::Conv2d:
      case LayerKind::Linear:
        if (src) m.rewiring[l.id] = *src;
        if (auto it = kept.find(l.id); it != kept.end() && it->second.size() != l.out_channels) {
          m.out[i] = it->second;
        }
        break;
      case LayerKind::ResidualAdd:
        if (src != in_map(l.inputs[1])) {
          throw StructuralError("pruning: residual join '" + l.id +
                                "' would receive inconsistent channel sets");
        }
        m.out[i] = src;
        break;
      case LayerKind::GlobalAvgPool:
      case LayerKind::BatchNorm2d:
      case LayerKind::ReLU:
      case LayerKind::MaxPool2d:
        m.out[i] = src;
        break;
    }
    if (m.out[i] && (l.tap || i == g.boundary_index())) {
      throw StructuralError("pruning: layer '" + l.id + "' is a tap or the backbone boundary and " +
                            "must keep its width");
    }
    if (m.out[i] && !g.in_backbone(i)) {
      throw StructuralError("pruning: head layer '" + l.id + "' would change");
    }
  }
  return m;
}

template <typename T>
std::vector<double> filter_scores(const NetworkGraph<T>& g, const LayerSpec& conv, PruneStrategy s) {
  if (s == PruneStrategy::L1) return score_filters_l1(g.param(conv.id, "weight").value());
  for (const auto& c : g.consumers(conv.id)) {
    if (g.layer(c).kind == LayerKind::BatchNorm2d) {
      return score_filters_bnscale(g.param(c, "gamma").value());
    }
  }
  throw StructuralError("bn_scale pruning: conv '" + conv.id + "' is not followed by a BatchNorm2d");
}

inline std::vector<std::size_t> size_weighted_removals(const std::vector<std::size_t>& F, double ratio) {
  const double total = std::accumulate(F.begin(), F.end(), 0.0);
  const double mean = total / static_cast<double>(F.size());
  const auto removed = [&](double scale) {
    double r = 0;
    for (auto f : F) r += std::clamp(scale * ratio * f / mean, 0.0, 0.9) * f;
    return r;
  };
  const double target = ratio * total;
  double lo = 0, hi = 1;
  while (removed(hi) < target && hi < 1e6) hi *= 2;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (removed(mid) < target ? lo : hi) = mid;
  }
  std::vector<std::size_t> k(F.size());
  for (std::size_t i = 0; i < F.size(); ++i) {
    const double r = std::clamp(hi * ratio * F[i] / mean, 0.0, 0.9);
    k[i] = static_cast<std::size_t>(std::floor(r * F[i] + 1e-9));
  }
  return k;
}

}  // namespace detail

inline void check_prune_ratio(double ratio) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw ConfigError("ratio must be in [0,1)");
}

template <typename T>
PrunePlan plan_prune(const NetworkGraph<T>& g, double global_ratio,
                     PruneStrategy strategy = PruneStrategy::L1, PruneMode mode = PruneMode::Uniform) {
  check_prune_ratio(global_ratio);
  PrunePlan plan;
  plan.strategy = strategy;
  plan.mode = mode;
  plan.global_ratio = global_ratio;

  std::vector<const LayerSpec*> convs;
  for (std::size_t i = 0; i <= g.boundary_index(); ++i) {
    const auto& l = g.layer(i);
    if (l.kind == LayerKind::Conv2d && l.prunable) convs.push_back(&l);
  }
  std::vector<std::size_t> F;
  for (const auto* c : convs) F.push_back(c->out_channels);

  std::vector<std::size_t> remove(F.size(), 0);
  if (!F.empty() && global_ratio > 0) {
    if (mode == PruneMode::Uniform) {
      for (std::size_t i = 0; i < F.size(); ++i) {
        remove[i] = static_cast<std::size_t>(std::floor(global_ratio * F[i] + 1e-9));
      }
    } else {
      remove = detail::size_weighted_removals(F, global_ratio);
    }
  }

  std::map<std::string, std::vector<std::size_t>> kept;
  for (std::size_t i = 0; i < convs.size(); ++i) {
    if (remove[i] >= F[i]) {
      throw ConfigError("ratio " + std::to_string(global_ratio) + " would remove every filter of '" +
                        convs[i]->id + "'");
    }
    const auto scores = detail::filter_scores(g, *convs[i], strategy);
    auto k = top_filters(scores, F[i] - remove[i]);
    kept[convs[i]->id] = k;
    plan.layers.push_back({convs[i]->id, F[i], std::move(k)});
  }
  plan.rewiring = detail::propagate_channel_maps(g, kept).rewiring;
  return plan;
}

namespace detail {

template <typename T>
Tensor<T> slice_dim(const Tensor<T>& t, std::size_t dim, const std::vector<std::size_t>& keep) {
  Shape s = t.shape();
  const std::size_t outer = shape_numel(Shape(s.begin(), s.begin() + static_cast<long>(dim)));
  const std::size_t inner = shape_numel(Shape(s.begin() + static_cast<long>(dim) + 1, s.end()));
  const std::size_t n = s[dim];
  s[dim] = keep.size();
  Tensor<T> out(s);
  T* dst = out.raw();
  for (std::size_t o = 0; o < outer; ++o) {
    for (auto k : keep) {
      const T* src = t.raw() + (o * n + k) * inner;
      dst = std::copy(src, src + inner, dst);
    }
  }
  return out;
}

}  // namespace detail

/// New graph with the planned filters removed; upstream of the head only.
template <typename T>
NetworkGraph<T> apply_prune(const NetworkGraph<T>& g, const PrunePlan& plan) {
  std::map<std::string, std::vector<std::size_t>> kept;
  for (const auto& lp : plan.layers) {
    if (!g.has_layer(lp.id)) throw StructuralError("prune plan names unknown layer '" + lp.id + "'");
    const auto& l = g.layer(lp.id);
    if (l.kind != LayerKind::Conv2d || !l.prunable || l.out_channels != lp.original) {
      throw StructuralError("prune plan does not match layer '" + lp.id + "'");
    }
    if (lp.kept.empty() || !std::is_sorted(lp.kept.begin(), lp.kept.end()) ||
        std::adjacent_find(lp.kept.begin(), lp.kept.end()) != lp.kept.end() ||
        lp.kept.back() >= lp.original) {
      throw StructuralError("prune plan has an invalid kept set for '" + lp.id + "'");
    }
    kept[lp.id] = lp.kept;
  }
  const auto maps = detail::propagate_channel_maps(g, kept);
  if (maps.rewiring != plan.rewiring) {
    throw StructuralError("prune plan rewiring does not match this graph");
  }

  std::vector<LayerSpec> layers = g.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto& l = layers[i];
    if (auto it = maps.rewiring.find(l.id); it != maps.rewiring.end()) l.in_channels = it->second.size();
    if (maps.out[i] && (l.kind == LayerKind::Conv2d || l.kind == LayerKind::BatchNorm2d)) {
      l.out_channels = maps.out[i]->size();
      if (l.kind == LayerKind::BatchNorm2d) l.in_channels = l.out_channels;
    }
  }
  NetworkGraph<T> out(std::move(layers), g.boundary(), g.input_channels());
  out.set_mode(g.mode());

  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto& l = g.layer(i);
    const auto* pm = g.find_params(l.id);
    if (pm == nullptr) continue;
    const auto rw = maps.rewiring.find(l.id);
    for (const auto& [name, v] : *pm) {
      Tensor<T> t = v.value();
      if (maps.out[i]) t = detail::slice_dim(t, 0, *maps.out[i]);
      if (rw != maps.rewiring.end() && name == "weight") t = detail::slice_dim(t, 1, rw->second);
      out.param(l.id, name).value() = std::move(t);
    }
  }
  return out;
}

/// Filter and parameter counts of `after` relative to `before`.
template <typename T>
PruneReport prune_report(const NetworkGraph<T>& before, const NetworkGraph<T>& after) {
  PruneReport r;
  std::size_t pf_before = 0, pf_after = 0, af_before = 0, af_after = 0;
  for (std::size_t i = 0; i <= before.boundary_index(); ++i) {
    const auto& l = before.layer(i);
    if (l.kind != LayerKind::Conv2d) continue;
    if (!after.has_layer(l.id)) throw StructuralError("report: layer '" + l.id + "' missing after pruning");
    const std::size_t a = after.layer(l.id).out_channels;
    r.layers.push_back({l.id, l.prunable, l.out_channels, a});
    af_before += l.out_channels;
    af_after += a;
    if (l.prunable) {
      pf_before += l.out_channels;
      pf_after += a;
    }
  }
  const auto pct = [](std::size_t b, std::size_t a) {
    return b == 0 ? 0.0 : 100.0 * static_cast<double>(b - a) / static_cast<double>(b);
  };
  r.removed_filters_pct = pct(pf_before, pf_after);
  r.removed_filters_pct_all = pct(af_before, af_after);
  r.params_before = before.parameter_count(ParamScope::Backbone);
  r.params_after = after.parameter_count(ParamScope::Backbone);
  r.removed_params_pct = pct(r.params_before, r.params_after);
  return r;
}

inline nlohmann::json to_json(const PrunePlan& p) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : p.layers) {
    layers.push_back({{"id", l.id}, {"original", l.original}, {"kept", l.kept}});
  }
  return {{"strategy", std::string(to_string(p.strategy))},
          {"mode", std::string(to_string(p.mode))},
          {"global_ratio", p.global_ratio},
          {"layers", std::move(layers)},
          {"rewiring", p.rewiring}};
}

inline PrunePlan prune_plan_from_json(const nlohmann::json& j) {
  try {
    PrunePlan p;
    p.strategy = prune_strategy_from_string(j.at("strategy").get<std::string>());
    p.mode = prune_mode_from_string(j.at("mode").get<std::string>());
    p.global_ratio = j.at("global_ratio").get<double>();
    for (const auto& l : j.at("layers")) {
      p.layers.push_back({l.at("id").get<std::string>(), l.at("original").get<std::size_t>(),
                          l.at("kept").get<std::vector<std::size_t>>()});
    }
    p.rewiring = j.at("rewiring").get<std::map<std::string, std::vector<std::size_t>>>();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed prune plan: ") + e.what());
  }
}

inline nlohmann::json to_json(const PruneReport& r) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : r.layers) {
    layers.push_back({{"id", l.id}, {"prunable", l.prunable}, {"before", l.before}, {"after", l.after}});
  }
  return {{"removed_filters_pct", r.removed_filters_pct},
          {"removed_filters_pct_all", r.removed_filters_pct_all},
          {"removed_params_pct", r.removed_params_pct},
          {"params_before", r.params_before},
          {"params_after", r.params_after},
          {"layers", std::move(layers)}};
}

}  // namespace dfbf
