#pragma once

// DFDS image container:
//   "DFDS" | u32 version (=1) | u32 M | u32 C (=3) | u32 h | u32 w |
//   u64 header length | UTF-8 JSON header | M*C*h*w f32 LE pixels |
//   optional M u8 labels (present iff header "has_labels" is true)

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dfbf/checkpoint.hpp"
#include "dfbf/error.hpp"
#include "dfbf/tensor.hpp"

namespace dfbf {

inline constexpr char kDatasetMagic[4] = {'D', 'F', 'D', 'S'};
inline constexpr std::uint32_t kDatasetVersion = 1;

struct DfdsFile {
  Tensor<float> images;  // [M,3,h,w]
  nlohmann::json header = nlohmann::json::object();
  std::optional<std::vector<std::uint8_t>> labels;
};

inline std::vector<std::uint8_t> dfds_bytes(const DfdsFile& f) {
  const auto& im = f.images;
  if (im.rank() != 4 || im.dim(1) != 3) {
    throw ShapeError("DFDS: images must be [M,3,h,w], got " + shape_str(im.shape()));
  }
  if (f.labels && f.labels->size() != im.dim(0)) {
    throw ShapeError("DFDS: " + std::to_string(f.labels->size()) + " labels for " +
                     std::to_string(im.dim(0)) + " images");
  }
  nlohmann::json header = f.header;
  header["has_labels"] = f.labels.has_value();
  const std::string hdr = header.dump();

  std::vector<std::uint8_t> out;
  out.reserve(32 + hdr.size() + im.size() * 4 + (f.labels ? f.labels->size() : 0));
  out.insert(out.end(), std::begin(kDatasetMagic), std::end(kDatasetMagic));
  io::put_le<std::uint32_t>(out, kDatasetVersion);
  for (std::size_t d = 0; d < 4; ++d) io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(im.dim(d)));
  io::put_le<std::uint64_t>(out, hdr.size());
  out.insert(out.end(), hdr.begin(), hdr.end());
  for (float v : im.data()) io::put_le<float>(out, v);
  if (f.labels) out.insert(out.end(), f.labels->begin(), f.labels->end());
  return out;
}

inline DfdsFile dfds_from_bytes(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kDatasetMagic, 4) != 0) {
    throw FormatError("DFDS: magic mismatch (expected \"DFDS\")");
  }
  std::size_t pos = 4;
  const auto version = io::get_le<std::uint32_t>(bytes, pos, "DFDS version");
  if (version != kDatasetVersion) throw FormatError("DFDS: unsupported version " + std::to_string(version));
  Shape shape(4);
  for (auto& d : shape) d = io::get_le<std::uint32_t>(bytes, pos, "DFDS dimensions");
  if (shape[1] != 3) throw FormatError("DFDS: channel count must be 3, got " + std::to_string(shape[1]));
  const auto hdr_len = io::get_le<std::uint64_t>(bytes, pos, "DFDS header length");
  if (hdr_len > bytes.size() - pos) throw FormatError("DFDS: truncated header");
  DfdsFile f;
  try {
    f.header = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                     bytes.begin() + static_cast<std::ptrdiff_t>(pos + hdr_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("DFDS: header is not valid JSON: ") + e.what());
  }
  pos += hdr_len;
  const bool has_labels = f.header.value("has_labels", false);
  const std::size_t n = shape_numel(shape);
  const std::size_t need = n * 4 + (has_labels ? shape[0] : 0);
  if (bytes.size() - pos != need) {
    throw FormatError("DFDS: payload is " + std::to_string(bytes.size() - pos) + " bytes, expected " +
                      std::to_string(need));
  }
  f.images = Tensor<float>(shape);
  for (auto& v : f.images.data()) v = io::get_le<float>(bytes, pos, "DFDS pixels");
  if (has_labels) f.labels = std::vector<std::uint8_t>(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
  f.header.erase("has_labels");
  return f;
}

inline void save_dfds(const DfdsFile& f, const std::filesystem::path& path) {
  io::write_file(path, dfds_bytes(f));
}

inline DfdsFile load_dfds(const std::filesystem::path& path) { return dfds_from_bytes(io::read_file(path)); }

}  // namespace dfbf
