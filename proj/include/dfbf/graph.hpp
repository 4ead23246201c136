#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include "dfbf/autodiff.hpp"
#include "dfbf/error.hpp"
#include "dfbf/ops.hpp"
#include "dfbf/random.hpp"
#include "dfbf/tensor.hpp"

namespace dfbf {

enum class LayerKind { Conv2d, BatchNorm2d, ReLU, MaxPool2d, GlobalAvgPool, Linear, ResidualAdd };

inline std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv2d: return "Conv2d";
    case LayerKind::BatchNorm2d: return "BatchNorm2d";
    case LayerKind::ReLU: return "ReLU";
    case LayerKind::MaxPool2d: return "MaxPool2d";
    case LayerKind::GlobalAvgPool: return "GlobalAvgPool";
    case LayerKind::Linear: return "Linear";
    case LayerKind::ResidualAdd: return "ResidualAdd";
  }
  return "?";
}

inline LayerKind layer_kind_from_string(std::string_view s) {
  for (auto k : {LayerKind::Conv2d, LayerKind::BatchNorm2d, LayerKind::ReLU, LayerKind::MaxPool2d,
                 LayerKind::GlobalAvgPool, LayerKind::Linear, LayerKind::ResidualAdd}) {
    if (to_string(k) == s) return k;
  }
  throw FormatError("unknown layer kind '" + std::string(s) + "'");
}

/// Id used in LayerSpec::inputs to reference the network input.
inline constexpr std::string_view kInputId = "input";

struct LayerSpec {
  std::string id;
  LayerKind kind = LayerKind::ReLU;
  // Conv2d: Cin/Cout. Linear: in/out features. BatchNorm2d: both equal C.
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  // Conv2d and MaxPool2d window.
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool bias = false;
  std::vector<std::string> inputs;
  bool tap = false;
  bool prunable = false;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

enum class GraphMode { Train, Eval, Synthesis };

inline std::string_view to_string(GraphMode m) {
  switch (m) {
    case GraphMode::Train: return "train";
    case GraphMode::Eval: return "eval";
    case GraphMode::Synthesis: return "synthesis";
  }
  return "?";
}

inline GraphMode graph_mode_from_string(std::string_view s) {
  if (s == "train") return GraphMode::Train;
  if (s == "eval") return GraphMode::Eval;
  if (s == "synthesis") return GraphMode::Synthesis;
  throw FormatError("unknown graph mode '" + std::string(s) + "'");
}

enum class ParamScope { All, Backbone, Head };

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Ordered layer list plus parameters, split into backbone and head at
/// `boundary()`. Copies are deep.
template <typename T>
class NetworkGraph {
 public:
  using ParamMap = std::map<std::string, Var<T>>;

  NetworkGraph(std::vector<LayerSpec> layers, std::string boundary, std::size_t input_channels = 3)
      : layers_(std::move(layers)), boundary_(std::move(boundary)),
        input_channels_(input_channels) {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (!index_.emplace(layers_[i].id, i).second) {
        throw StructuralError("duplicate layer id '" + layers_[i].id + "'");
      }
    }
    validate();
    allocate_parameters();
  }

  NetworkGraph(const NetworkGraph& other)
      : layers_(other.layers_), index_(other.index_), boundary_(other.boundary_),
        input_channels_(other.input_channels_), mode_(other.mode_), channels_(other.channels_) {
    for (const auto& [id, pm] : other.params_) {
      auto& dst = params_[id];
      for (const auto& [name, v] : pm) dst.emplace(name, Var<T>(v.value(), v.requires_grad(), v.name()));
    }
  }
  NetworkGraph& operator=(const NetworkGraph& other) {
    if (this != &other) *this = NetworkGraph(other);
    return *this;
  }
  NetworkGraph(NetworkGraph&&) noexcept = default;
  NetworkGraph& operator=(NetworkGraph&&) noexcept = default;

  template <typename U>
  NetworkGraph<U> cast() const {
    NetworkGraph<U> out(layers_, boundary_, input_channels_);
    out.set_mode(mode_);
    for (const auto& [id, pm] : params_) {
      for (const auto& [name, v] : pm) out.param(id, name).value() = v.value().template cast<U>();
    }
    return out;
  }

  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  std::size_t size() const noexcept { return layers_.size(); }
  const LayerSpec& layer(std::size_t i) const { return layers_.at(i); }
  const LayerSpec& layer(const std::string& id) const { return layers_[index_of(id)]; }
  bool has_layer(const std::string& id) const { return index_.count(id) != 0; }

  std::size_t index_of(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw StructuralError("unknown layer '" + id + "'");
    return it->second;
  }

  const std::string& boundary() const noexcept { return boundary_; }
  std::size_t boundary_index() const { return index_of(boundary_); }
  bool in_backbone(std::size_t i) const { return i <= boundary_index(); }
  std::size_t input_channels() const noexcept { return input_channels_; }

  GraphMode mode() const noexcept { return mode_; }
  void set_mode(GraphMode m) noexcept { mode_ = m; }

  ParamMap& params(const std::string& id) { return params_[id]; }
  const ParamMap* find_params(const std::string& id) const {
    auto it = params_.find(id);
    return it == params_.end() ? nullptr : &it->second;
  }
  Var<T>& param(const std::string& id, const std::string& name) {
    return lookup(params_, id, name);
  }
  const Var<T>& param(const std::string& id, const std::string& name) const {
    return lookup(params_, id, name);
  }

  /// Every stored tensor (including BN running buffers) as (qualified name, var),
  /// in layer order then parameter-name order.
  std::vector<std::pair<std::string, Var<T>>> tensors(ParamScope scope = ParamScope::All) const {
    std::vector<std::pair<std::string, Var<T>>> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (!in_scope(i, scope)) continue;
      auto it = params_.find(layers_[i].id);
      if (it == params_.end()) continue;
      for (const auto& [name, v] : it->second) out.emplace_back(layers_[i].id + "." + name, v);
    }
    return out;
  }

  /// Trainable parameters only (running statistics excluded).
  std::vector<Var<T>> trainable(ParamScope scope = ParamScope::All) const {
    std::vector<Var<T>> out;
    for (auto& [name, v] : tensors(scope)) {
      if (is_trainable_name(name)) out.push_back(v);
    }
    return out;
  }

  std::size_t parameter_count(ParamScope scope = ParamScope::All) const {
    std::size_t n = 0;
    for (const auto& v : trainable(scope)) n += v.size();
    return n;
  }

  void zero_grad() {
    for (auto& [id, pm] : params_) {
      for (auto& [name, v] : pm) v.clear_grad();
    }
  }

  /// Kaiming-uniform (fan-in, ReLU gain) for conv/linear weights, zero biases,
  /// BN gamma=1 beta=0 and unit running variance.
  void init_parameters(Rng& rng) {
    for (const auto& l : layers_) {
      auto found = params_.find(l.id);
      if (found == params_.end()) continue;
      auto& pm = found->second;
      if (l.kind == LayerKind::Conv2d || l.kind == LayerKind::Linear) {
        auto& w = pm.at("weight").value();
        const double fan_in = static_cast<double>(w.size() / w.dim(0));
        const double bound = std::sqrt(6.0 / fan_in);
        fill_uniform(w, rng, -bound, bound);
        if (auto b = pm.find("bias"); b != pm.end()) b->second.value().fill(T{0});
      } else if (l.kind == LayerKind::BatchNorm2d) {
        pm.at("gamma").value().fill(T{1});
        pm.at("beta").value().fill(T{0});
        pm.at("running_mean").value().fill(T{0});
        pm.at("running_var").value().fill(T{1});
      }
    }
  }

  /// Output channel count of layer i (feature count after GlobalAvgPool/Linear).
  std::size_t out_channels(std::size_t i) const { return channels_.at(i); }

  std::size_t source_channels(const std::string& id) const {
    return id == kInputId ? input_channels_ : channels_.at(index_of(id));
  }

  /// Ids of layers that consume layer `id`'s output.
  std::vector<std::string> consumers(const std::string& id) const {
    std::vector<std::string> out;
    for (const auto& l : layers_) {
      for (const auto& in : l.inputs) {
        if (in == id) {
          out.push_back(l.id);
          break;
        }
      }
    }
    return out;
  }

  /// Structural checks: topological order, arity, channel agreement and a
  /// clean backbone/head split. Throws StructuralError.
  void validate() {
    if (layers_.empty()) throw StructuralError("graph has no layers");
    if (!index_.count(boundary_)) {
      throw StructuralError("backbone boundary '" + boundary_ + "' is not a layer");
    }
    const std::size_t bidx = index_.at(boundary_);
    channels_.assign(layers_.size(), 0);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      const std::size_t arity = l.kind == LayerKind::ResidualAdd ? 2 : 1;
      if (l.inputs.size() != arity) {
        throw StructuralError("layer '" + l.id + "' expects " + std::to_string(arity) +
                              " inputs, has " + std::to_string(l.inputs.size()));
      }
      std::vector<std::size_t> in_ch;
      for (const auto& in : l.inputs) {
        if (in == kInputId) {
          if (i > bidx) throw StructuralError("head layer '" + l.id + "' reads the network input");
          in_ch.push_back(input_channels_);
          continue;
        }
        auto it = index_.find(in);
        if (it == index_.end() || it->second >= i) {
          throw StructuralError("layer '" + l.id + "' input '" + in +
                                "' is not an earlier layer (graph must be topologically ordered)");
        }
        if (i > bidx && it->second < bidx) {
          throw StructuralError("head layer '" + l.id + "' reads backbone layer '" + in +
                                "' other than the boundary");
        }
        in_ch.push_back(channels_[it->second]);
      }
      const auto mismatch = [&](std::size_t expected) {
        return StructuralError("layer '" + l.id + "' expects " + std::to_string(expected) +
                               " input channels, producer gives " + std::to_string(in_ch[0]));
      };
      switch (l.kind) {
        case LayerKind::Conv2d:
          if (l.kernel < 1 || l.stride < 1 || l.out_channels < 1) {
            throw StructuralError("conv '" + l.id + "' has invalid hyperparameters");
          }
          if (in_ch[0] != l.in_channels) throw mismatch(l.in_channels);
          channels_[i] = l.out_channels;
          break;
        case LayerKind::BatchNorm2d: {
          const auto& src = l.inputs[0];
          if (src == kInputId || layers_[index_.at(src)].kind != LayerKind::Conv2d) {
            throw StructuralError("batchnorm '" + l.id + "' must follow a Conv2d");
          }
          if (in_ch[0] != l.in_channels || l.in_channels != l.out_channels) {
            throw mismatch(l.in_channels);
          }
          channels_[i] = l.out_channels;
          break;
        }
        case LayerKind::ReLU:
          channels_[i] = in_ch[0];
          break;
        case LayerKind::MaxPool2d:
          if (l.kernel < 1 || l.stride < 1) {
            throw StructuralError("maxpool '" + l.id + "' has invalid window");
          }
          channels_[i] = in_ch[0];
          break;
        case LayerKind::GlobalAvgPool:
          channels_[i] = in_ch[0];
          break;
        case LayerKind::Linear:
          if (in_ch[0] != l.in_channels) throw mismatch(l.in_channels);
          channels_[i] = l.out_channels;
          break;
        case LayerKind::ResidualAdd:
          if (in_ch[0] != in_ch[1]) {
            throw StructuralError("residual join '" + l.id + "' mixes " +
                                  std::to_string(in_ch[0]) + " and " +
                                  std::to_string(in_ch[1]) + " channels");
          }
          channels_[i] = in_ch[0];
          break;
      }
    }
  }

  /// Replace the layer list after a structural rewrite; parameters are kept
  /// by id and must already match the new hyperparameters.
  void replace_layers(std::vector<LayerSpec> layers) {
    if (layers.size() != layers_.size()) throw StructuralError("replace_layers: layer count changed");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].id != layers_[i].id || layers[i].kind != layers_[i].kind) {
        throw StructuralError("replace_layers: layer identity changed at '" + layers_[i].id + "'");
      }
    }
    layers_ = std::move(layers);
    validate();
  }

  static bool is_trainable_name(const std::string& qualified) {
    const auto dot = qualified.rfind('.');
    const auto leaf = dot == std::string::npos ? qualified : qualified.substr(dot + 1);
    return leaf != "running_mean" && leaf != "running_var";
  }

 private:
  template <typename Map>
  static auto& lookup(Map& params, const std::string& id, const std::string& name) {
    auto layer = params.find(id);
    if (layer == params.end()) throw StructuralError("layer '" + id + "' has no parameters");
    auto it = layer->second.find(name);
    if (it == layer->second.end()) {
      throw StructuralError("layer '" + id + "' has no parameter '" + name + "'");
    }
    return it->second;
  }

  bool in_scope(std::size_t i, ParamScope scope) const {
    switch (scope) {
      case ParamScope::All: return true;
      case ParamScope::Backbone: return in_backbone(i);
      case ParamScope::Head: return !in_backbone(i);
    }
    return true;
  }

  void allocate_parameters() {
    for (const auto& l : layers_) {
      auto& pm = params_[l.id];
      const auto add = [&](const std::string& name, Shape shape, T fill, bool trainable) {
        pm.emplace(name, Var<T>(Tensor<T>(std::move(shape), fill), trainable, l.id + "." + name));
      };
      switch (l.kind) {
        case LayerKind::Conv2d:
          add("weight", {l.out_channels, l.in_channels, l.kernel, l.kernel}, T{0}, true);
          if (l.bias) add("bias", {l.out_channels}, T{0}, true);
          break;
        case LayerKind::Linear:
          add("weight", {l.out_channels, l.in_channels}, T{0}, true);
          add("bias", {l.out_channels}, T{0}, true);
          break;
        case LayerKind::BatchNorm2d:
          add("gamma", {l.out_channels}, T{1}, true);
          add("beta", {l.out_channels}, T{0}, true);
          add("running_mean", {l.out_channels}, T{0}, false);
          add("running_var", {l.out_channels}, T{1}, false);
          break;
        default:
          params_.erase(l.id);
          break;
      }
    }
  }

  std::vector<LayerSpec> layers_;
  std::map<std::string, std::size_t> index_;
  std::string boundary_;
  std::size_t input_channels_ = 3;
  GraphMode mode_ = GraphMode::Eval;
  std::map<std::string, ParamMap> params_;
  std::vector<std::size_t> channels_;
};

// ---------------------------------------------------------------------------
// Builders

/// Small residual network: conv-BN-ReLU stem, basic blocks (conv-BN-ReLU-conv-BN
/// plus residual add and ReLU, 1x1 projection where the shape changes), a
/// GlobalAvgPool boundary and a Linear head.
///
/// Only the first conv of each block is prunable. Each block's residual add is
/// a tap point.
template <typename T>
NetworkGraph<T> build_resnet_tiny(const std::vector<std::size_t>& stage_channels,
                                  const std::vector<std::size_t>& blocks_per_stage,
                                  std::size_t num_classes, std::size_t input_channels = 3) {
  if (stage_channels.empty() || blocks_per_stage.empty()) {
    throw ConfigError("resnet: stage lists must be non-empty");
  }
  if (stage_channels.size() != blocks_per_stage.size()) {
    throw ConfigError("resnet: stage_channels and blocks_per_stage differ in length");
  }
  for (std::size_t i = 0; i < stage_channels.size(); ++i) {
    if (stage_channels[i] < 1 || blocks_per_stage[i] < 1) {
      throw ConfigError("resnet: stage entries must be >= 1");
    }
  }
  if (num_classes < 1) throw ConfigError("resnet: num_classes must be >= 1");

  std::vector<LayerSpec> L;
  auto conv = [&](std::string id, std::string in, std::size_t cin, std::size_t cout,
                  std::size_t k, std::size_t stride, std::size_t pad, bool prunable) {
    L.push_back(LayerSpec{.id = std::move(id), .kind = LayerKind::Conv2d, .in_channels = cin,
                          .out_channels = cout, .kernel = k, .stride = stride, .padding = pad,
                          .inputs = {std::move(in)}, .prunable = prunable});
    return L.back().id;
  };
  auto bn = [&](std::string id, std::string in, std::size_t c) {
    L.push_back(LayerSpec{.id = std::move(id), .kind = LayerKind::BatchNorm2d, .in_channels = c,
                          .out_channels = c, .inputs = {std::move(in)}});
    return L.back().id;
  };
  auto relu = [&](std::string id, std::string in) {
    L.push_back(LayerSpec{.id = std::move(id), .kind = LayerKind::ReLU, .inputs = {std::move(in)}});
    return L.back().id;
  };

  std::size_t ch = stage_channels[0];
  std::string cur = conv("stem.conv", std::string(kInputId), input_channels, ch, 3, 1, 1, false);
  cur = bn("stem.bn", cur, ch);
  cur = relu("stem.relu", cur);

  for (std::size_t s = 0; s < stage_channels.size(); ++s) {
    for (std::size_t b = 0; b < blocks_per_stage[s]; ++b) {
      const std::string p = "s" + std::to_string(s + 1) + "b" + std::to_string(b + 1) + ".";
      const std::size_t out = stage_channels[s];
      const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
      std::string y = conv(p + "conv1", cur, ch, out, 3, stride, 1, true);
      y = bn(p + "bn1", y, out);
      y = relu(p + "relu1", y);
      y = conv(p + "conv2", y, out, out, 3, 1, 1, false);
      y = bn(p + "bn2", y, out);
      std::string shortcut = cur;
      if (stride != 1 || ch != out) {
        shortcut = conv(p + "proj", cur, ch, out, 1, stride, 0, false);
        shortcut = bn(p + "proj_bn", shortcut, out);
      }
      L.push_back(LayerSpec{.id = p + "add", .kind = LayerKind::ResidualAdd,
                            .inputs = {y, shortcut}, .tap = true});
      cur = relu(p + "relu", p + "add");
      ch = out;
    }
  }
  L.push_back(LayerSpec{.id = "pool", .kind = LayerKind::GlobalAvgPool, .inputs = {cur}});
  L.push_back(LayerSpec{.id = "fc", .kind = LayerKind::Linear, .in_channels = ch,
                        .out_channels = num_classes, .bias = true, .inputs = {"pool"}});
  return NetworkGraph<T>(std::move(L), "pool", input_channels);
}

/// One entry of a VGG plan: a conv width or a 2x2 max-pool ("M").
struct VggToken {
  bool pool = false;
  std::size_t channels = 0;
  friend bool operator==(const VggToken&, const VggToken&) = default;
};

inline std::vector<VggToken> parse_vgg_plan(const std::vector<std::string>& tokens) {
  std::vector<VggToken> out;
  for (const auto& t : tokens) {
    if (t == "M") {
      out.push_back({true, 0});
      continue;
    }
    const bool digits = !t.empty() && t.size() <= 9 &&
                        std::all_of(t.begin(), t.end(), [](char c) { return c >= '0' && c <= '9'; });
    const std::size_t v = digits ? std::stoul(t) : 0;
    if (v == 0) {
      throw ConfigError("vgg plan: malformed token '" + t + "' (expected a positive width or \"M\")");
    }
    out.push_back({false, v});
  }
  return out;
}

struct VggOptions {
  // Tap every k-th BN counted back from the last one. Tapped BN layers pin
  // their conv to full width, so k=1 leaves nothing prunable.
  std::size_t tap_stride = 1;
  std::size_t input_channels = 3;
};

/// Conv-BN-ReLU stacks with "M" max-pools; the last plan layer is the boundary
/// and the head is GlobalAvgPool + Linear.
template <typename T>
NetworkGraph<T> build_vgg_tiny(const std::vector<VggToken>& plan, std::size_t num_classes,
                               VggOptions opts = {}) {
  std::size_t n_conv = 0;
  for (const auto& t : plan) {
    if (!t.pool) {
      if (t.channels < 1) throw ConfigError("vgg plan: conv width must be >= 1");
      ++n_conv;
    }
  }
  if (n_conv == 0) throw ConfigError("vgg plan must contain at least one conv");
  if (num_classes < 1) throw ConfigError("vgg: num_classes must be >= 1");
  if (opts.tap_stride < 1) throw ConfigError("vgg: tap_stride must be >= 1");

  std::vector<LayerSpec> L;
  std::string cur(kInputId);
  std::size_t ch = opts.input_channels;
  std::size_t conv_idx = 0, pool_idx = 0;
  for (const auto& t : plan) {
    if (t.pool) {
      const std::string id = "pool" + std::to_string(++pool_idx);
      L.push_back(LayerSpec{.id = id, .kind = LayerKind::MaxPool2d, .kernel = 2, .stride = 2,
                            .inputs = {cur}});
      cur = id;
      continue;
    }
    ++conv_idx;
    const std::size_t from_last = n_conv - conv_idx;  // 0 for the final conv
    const bool tap = from_last % opts.tap_stride == 0;
    const std::string p = "conv" + std::to_string(conv_idx);
    L.push_back(LayerSpec{.id = p, .kind = LayerKind::Conv2d, .in_channels = ch,
                          .out_channels = t.channels, .kernel = 3, .stride = 1, .padding = 1,
                          .inputs = {cur}, .prunable = !tap && from_last != 0});
    L.push_back(LayerSpec{.id = p + ".bn", .kind = LayerKind::BatchNorm2d,
                          .in_channels = t.channels, .out_channels = t.channels,
                          .inputs = {p}, .tap = tap});
    L.push_back(LayerSpec{.id = p + ".relu", .kind = LayerKind::ReLU, .inputs = {p + ".bn"}});
    cur = p + ".relu";
    ch = t.channels;
  }
  const std::string boundary = cur;
  L.push_back(LayerSpec{.id = "gap", .kind = LayerKind::GlobalAvgPool, .inputs = {cur}});
  L.push_back(LayerSpec{.id = "fc", .kind = LayerKind::Linear, .in_channels = ch,
                        .out_channels = num_classes, .bias = true, .inputs = {"gap"}});
  return NetworkGraph<T>(std::move(L), boundary, opts.input_channels);
}

// ---------------------------------------------------------------------------
// Forward execution

struct ForwardOptions {
  bool capture_taps = false;
  bool stop_at_boundary = false;
  // When false, parameters are treated as constants even if a tape is given.
  bool param_grads = true;
  std::optional<GraphMode> mode;
};

template <typename T>
struct TapOutput {
  std::string id;
  Var<T> value;
};

template <typename T>
struct BnStatsOutput {
  std::string id;
  Var<T> mean;
  Var<T> var;
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

template <typename T>
struct ForwardResult {
  Var<T> output;  // z when stopping at the boundary, y otherwise
  Var<T> boundary;
  std::vector<TapOutput<T>> taps;       // shallow to deep
  std::vector<BnStatsOutput<T>> bn_stats;  // Train/Synthesis modes only
};

namespace detail {

inline ops::BnMode to_bn_mode(GraphMode m) {
  switch (m) {
    case GraphMode::Train: return ops::BnMode::Train;
    case GraphMode::Eval: return ops::BnMode::Eval;
    case GraphMode::Synthesis: return ops::BnMode::Synthesis;
  }
  return ops::BnMode::Eval;
}

// G is NetworkGraph<T> or const NetworkGraph<T>; only the mutable form may
// update running statistics.
template <typename T, typename G>
ForwardResult<T> run_layers(G& g, Tape<T>* tape, const Var<T>& seed_value, std::size_t first,
                            std::size_t last, const ForwardOptions& opts) {
  const GraphMode mode = opts.mode.value_or(g.mode());
  if constexpr (std::is_const_v<G>) {
    if (mode == GraphMode::Train) {
      throw Error("train-mode forward needs a mutable graph (running statistics update)");
    }
  }
  const bool record_params = tape != nullptr && opts.param_grads;
  auto param = [&](const LayerSpec& l, const char* name) {
    const Var<T>& p = g.param(l.id, name);
    return record_params ? p : p.detached();
  };

  ForwardResult<T> res;
  std::vector<Var<T>> outs(g.size());
  auto source = [&](const std::string& id, std::size_t at) -> const Var<T>& {
    if (id == kInputId) return seed_value;
    const auto idx = g.index_of(id);
    if (idx < first) {
      if (idx + 1 != first) throw StructuralError("layer '" + g.layer(at).id + "' reads skipped layer");
      return seed_value;
    }
    return outs[idx];
  };

  for (std::size_t i = first; i <= last; ++i) {
    const LayerSpec& l = g.layer(i);
    try {
      const Var<T>& x = source(l.inputs[0], i);
      switch (l.kind) {
        case LayerKind::Conv2d: {
          Var<T> w = param(l, "weight");
          if (l.bias) {
            Var<T> b = param(l, "bias");
            outs[i] = ops::conv2d(tape, x, w, &b, {l.stride, l.padding});
          } else {
            outs[i] = ops::conv2d<T>(tape, x, w, nullptr, {l.stride, l.padding});
          }
          break;
        }
        case LayerKind::BatchNorm2d: {
          ops::BatchNormParams bp{to_bn_mode(mode), kBatchNormMomentum, kBatchNormEps};
          Var<T> gamma = param(l, "gamma");
          Var<T> beta = param(l, "beta");
          const Var<T>& rm = g.param(l.id, "running_mean");
          const Var<T>& rv = g.param(l.id, "running_var");
          ops::BatchNormResult<T> r;
          if constexpr (std::is_const_v<G>) {
            Tensor<T> m = rm.value(), v = rv.value();
            r = ops::batchnorm2d(tape, x, gamma, beta, m, v, bp);
          } else {
            if (mode == GraphMode::Train) {
              r = ops::batchnorm2d(tape, x, gamma, beta, g.param(l.id, "running_mean").value(),
                                   g.param(l.id, "running_var").value(), bp);
            } else {
              Tensor<T> m = rm.value(), v = rv.value();
              r = ops::batchnorm2d(tape, x, gamma, beta, m, v, bp);
            }
          }
          outs[i] = r.output;
          if (mode != GraphMode::Eval) {
            res.bn_stats.push_back({l.id, r.mean, r.var, rm.value(), rv.value()});
          }
          break;
        }
        case LayerKind::ReLU:
          outs[i] = ops::relu(tape, x);
          break;
        case LayerKind::MaxPool2d:
          outs[i] = ops::maxpool2d(tape, x, l.kernel, l.stride);
          break;
        case LayerKind::GlobalAvgPool:
          outs[i] = ops::global_avg_pool(tape, x);
          break;
        case LayerKind::Linear:
          outs[i] = ops::linear(tape, x, param(l, "weight"), param(l, "bias"));
          break;
        case LayerKind::ResidualAdd:
          outs[i] = ops::add(tape, x, source(l.inputs[1], i));
          break;
      }
    } catch (const ShapeError& e) {
      throw ShapeError("layer '" + l.id + "': " + e.what());
    }
    if (opts.capture_taps && l.tap && g.in_backbone(i)) res.taps.push_back({l.id, outs[i]});
  }
  res.output = outs[last];
  if (last >= g.boundary_index() && first <= g.boundary_index()) {
    res.boundary = outs[g.boundary_index()];
  }
  return res;
}

template <typename T>
void check_input(const NetworkGraph<T>& g, const Var<T>& input) {
  if (input.value().rank() != 4 || input.shape()[1] != g.input_channels()) {
    throw ShapeError("network input must be [B," + std::to_string(g.input_channels()) +
                     ",H,W], got " + shape_str(input.shape()));
  }
}

}  // namespace detail

/// Runs the graph (or its backbone only) on `input`. Train mode updates BN
/// running statistics in place.
template <typename T>
ForwardResult<T> forward(NetworkGraph<T>& g, Tape<T>* tape, const Var<T>& input,
                         ForwardOptions opts = {}) {
  detail::check_input(g, input);
  const std::size_t last = opts.stop_at_boundary ? g.boundary_index() : g.size() - 1;
  return detail::run_layers<T>(g, tape, input, 0, last, opts);
}

/// Read-only forward; rejects train mode.
template <typename T>
ForwardResult<T> forward(const NetworkGraph<T>& g, Tape<T>* tape, const Var<T>& input,
                         ForwardOptions opts = {}) {
  detail::check_input(g, input);
  const std::size_t last = opts.stop_at_boundary ? g.boundary_index() : g.size() - 1;
  return detail::run_layers<T, const NetworkGraph<T>>(g, tape, input, 0, last, opts);
}

/// h(z): runs the layers downstream of the boundary on a backbone output.
template <typename T>
Var<T> forward_head(const NetworkGraph<T>& g, Tape<T>* tape, const Var<T>& z,
                    ForwardOptions opts = {}) {
  const std::size_t b = g.boundary_index();
  if (b + 1 >= g.size()) return z;
  return detail::run_layers<T, const NetworkGraph<T>>(g, tape, z, b + 1, g.size() - 1, opts).output;
}

/// Eval-mode logits without recording.
template <typename T>
Tensor<T> predict(const NetworkGraph<T>& g, const Tensor<T>& x) {
  ForwardOptions opts;
  opts.mode = GraphMode::Eval;
  return forward(g, static_cast<Tape<T>*>(nullptr), Var<T>(x), opts).output.value();
}

}  // namespace dfbf
