#pragma once

// Checkpoint container:
//   "DFBF" | u32 version (=1) | u64 header length | UTF-8 JSON header | payload
// The header carries the architecture descriptor and a tensor manifest with
// byte offsets into the payload; the payload is raw little-endian f32.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dfbf/error.hpp"
#include "dfbf/graph.hpp"
#include "dfbf/sha256.hpp"

namespace dfbf {

using json = nlohmann::json;

inline constexpr char kCheckpointMagic[4] = {'D', 'F', 'B', 'F'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace io {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  static_assert(std::is_integral_v<U> || std::is_floating_point_v<U>);
  std::uint8_t bytes[sizeof(U)];
  std::memcpy(bytes, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  out.insert(out.end(), bytes, bytes + sizeof(U));
}

template <typename U>
U get_le(std::span<const std::uint8_t> in, std::size_t& pos, std::string_view what) {
  if (pos + sizeof(U) > in.size()) {
    throw FormatError(std::string(what) + ": truncated (need " + std::to_string(pos + sizeof(U)) +
                      " bytes, have " + std::to_string(in.size()) + ")");
  }
  std::uint8_t bytes[sizeof(U)];
  std::memcpy(bytes, in.data() + pos, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  U v;
  std::memcpy(&v, bytes, sizeof(U));
  pos += sizeof(U);
  return v;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to '" + path.string() + "'");
}

}  // namespace io

inline json layer_to_json(const LayerSpec& l) {
  return json{{"id", l.id},
              {"kind", std::string(to_string(l.kind))},
              {"in_channels", l.in_channels},
              {"out_channels", l.out_channels},
              {"kernel", l.kernel},
              {"stride", l.stride},
              {"padding", l.padding},
              {"bias", l.bias},
              {"inputs", l.inputs},
              {"tap", l.tap},
              {"prunable", l.prunable}};
}

inline LayerSpec layer_from_json(const json& j) {
  try {
    LayerSpec l;
    l.id = j.at("id").get<std::string>();
    l.kind = layer_kind_from_string(j.at("kind").get<std::string>());
    l.in_channels = j.at("in_channels").get<std::size_t>();
    l.out_channels = j.at("out_channels").get<std::size_t>();
    l.kernel = j.at("kernel").get<std::size_t>();
    l.stride = j.at("stride").get<std::size_t>();
    l.padding = j.at("padding").get<std::size_t>();
    l.bias = j.at("bias").get<bool>();
    l.inputs = j.at("inputs").get<std::vector<std::string>>();
    l.tap = j.at("tap").get<bool>();
    l.prunable = j.at("prunable").get<bool>();
    return l;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed layer descriptor: ") + e.what());
  }
}

template <typename T>
json architecture_to_json(const NetworkGraph<T>& g) {
  json layers = json::array();
  for (const auto& l : g.layers()) layers.push_back(layer_to_json(l));
  return json{{"input_channels", g.input_channels()},
              {"backbone_boundary", g.boundary()},
              {"mode", std::string(to_string(g.mode()))},
              {"layers", std::move(layers)}};
}

template <typename T>
NetworkGraph<T> architecture_from_json(const json& j) {
  try {
    std::vector<LayerSpec> layers;
    for (const auto& lj : j.at("layers")) layers.push_back(layer_from_json(lj));
    NetworkGraph<T> g(std::move(layers), j.at("backbone_boundary").get<std::string>(),
                      j.at("input_channels").get<std::size_t>());
    g.set_mode(graph_mode_from_string(j.at("mode").get<std::string>()));
    return g;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed architecture descriptor: ") + e.what());
  } catch (const StructuralError& e) {
    throw FormatError(std::string("inconsistent architecture descriptor: ") + e.what());
  }
}

/// Serializes to the canonical byte form (payload stored as f32).
template <typename T>
std::vector<std::uint8_t> checkpoint_bytes(const NetworkGraph<T>& g) {
  json manifest = json::array();
  std::uint64_t offset = 0;
  const auto tensors = g.tensors();
  for (const auto& [name, v] : tensors) {
    const std::uint64_t nbytes = v.size() * sizeof(float);
    manifest.push_back(
        json{{"name", name}, {"shape", v.shape()}, {"dtype", "f32"}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  const json header{{"format_version", kCheckpointVersion},
                    {"architecture", architecture_to_json(g)},
                    {"tensors", std::move(manifest)}};
  const std::string hdr = header.dump();

  std::vector<std::uint8_t> out;
  out.reserve(20 + hdr.size() + offset);
  out.insert(out.end(), std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  io::put_le<std::uint32_t>(out, kCheckpointVersion);
  io::put_le<std::uint64_t>(out, hdr.size());
  out.insert(out.end(), hdr.begin(), hdr.end());
  for (const auto& [name, v] : tensors) {
    for (T x : v.value().data()) io::put_le<float>(out, static_cast<float>(x));
  }
  return out;
}

template <typename T>
NetworkGraph<T> checkpoint_from_bytes(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw FormatError("checkpoint: magic mismatch (expected \"DFBF\")");
  }
  std::size_t pos = 4;
  const auto version = io::get_le<std::uint32_t>(bytes, pos, "checkpoint version");
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported format version " + std::to_string(version));
  }
  const auto hdr_len = io::get_le<std::uint64_t>(bytes, pos, "checkpoint header length");
  if (hdr_len > bytes.size() - pos) {
    throw FormatError("checkpoint: truncated header (declared " + std::to_string(hdr_len) +
                      " bytes, " + std::to_string(bytes.size() - pos) + " available)");
  }
  json header;
  try {
    header = json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                         bytes.begin() + static_cast<std::ptrdiff_t>(pos + hdr_len));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: header is not valid JSON: ") + e.what());
  }
  pos += hdr_len;
  const std::size_t payload = pos;

  NetworkGraph<T> g = architecture_from_json<T>(header.at("architecture"));
  const auto expected = g.tensors();
  const json& manifest = header.at("tensors");
  if (manifest.size() != expected.size()) {
    throw FormatError("checkpoint: manifest lists " + std::to_string(manifest.size()) +
                      " tensors, architecture needs " + std::to_string(expected.size()));
  }
  std::uint64_t next = 0;
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const json& m = manifest[i];
    const auto& [name, var] = expected[i];
    try {
      if (m.at("name").get<std::string>() != name) {
        throw FormatError("checkpoint: manifest entry " + std::to_string(i) + " is '" +
                          m.at("name").get<std::string>() + "', expected '" + name + "'");
      }
      if (m.at("dtype").get<std::string>() != "f32") {
        throw FormatError("checkpoint: tensor '" + name + "' has unsupported dtype");
      }
      if (m.at("shape").get<Shape>() != var.shape()) {
        throw FormatError("checkpoint: tensor '" + name + "' shape does not match architecture");
      }
      const auto offset = m.at("offset").get<std::uint64_t>();
      const auto nbytes = m.at("nbytes").get<std::uint64_t>();
      if (offset != next || nbytes != var.size() * sizeof(float)) {
        throw FormatError("checkpoint: tensor '" + name + "' has inconsistent offset/size");
      }
      next = offset + nbytes;
    } catch (const json::exception& e) {
      throw FormatError(std::string("checkpoint: malformed manifest: ") + e.what());
    }
  }
  if (bytes.size() - payload < next) {
    throw FormatError("checkpoint: truncated payload (need " + std::to_string(next) +
                      " bytes, have " + std::to_string(bytes.size() - payload) + ")");
  }
  if (bytes.size() - payload > next) {
    throw FormatError("checkpoint: trailing bytes after payload");
  }
  std::size_t p = payload;
  for (const auto& [name, var] : expected) {
    Var<T> v = var;
    for (auto& x : v.value().data()) x = static_cast<T>(io::get_le<float>(bytes, p, name));
  }
  return g;
}

template <typename T>
void save_checkpoint(const NetworkGraph<T>& g, const std::filesystem::path& path) {
  io::write_file(path, checkpoint_bytes(g));
}

template <typename T>
NetworkGraph<T> load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_bytes<T>(io::read_file(path));
}

/// SHA-256 of the canonical checkpoint bytes.
template <typename T>
std::string model_hash(const NetworkGraph<T>& g) {
  return sha256_hex(checkpoint_bytes(g));
}

/// Per-tensor SHA-256 of the raw values, keyed by qualified name.
template <typename T>
std::map<std::string, std::string> tensor_hashes(const NetworkGraph<T>& g,
                                                 ParamScope scope = ParamScope::All) {
  std::map<std::string, std::string> out;
  for (const auto& [name, v] : g.tensors(scope)) out[name] = sha256_hex(v.value());
  return out;
}

}  // namespace dfbf
