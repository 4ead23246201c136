#pragma once

// Labeled datasets: CIFAR-10 binary reader, procedural shapes, batching and
// checksum manifests.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dfbf/checkpoint.hpp"
#include "dfbf/dfds.hpp"
#include "dfbf/error.hpp"
#include "dfbf/random.hpp"
#include "dfbf/sha256.hpp"
#include "dfbf/tensor.hpp"

namespace dfbf {

struct LabeledDataset {
  Tensor<float> images;  // [N,3,h,w] in [0,1]
  std::vector<int> labels;
  std::size_t num_classes = 0;
  std::string split;

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }

  void validate() const {
    if (images.rank() != 4 || images.dim(1) != 3) {
      throw ShapeError("dataset images must be [N,3,h,w], got " + shape_str(images.shape()));
    }
    if (images.dim(0) != labels.size()) {
      throw ShapeError("dataset has " + std::to_string(images.dim(0)) + " images but " +
                       std::to_string(labels.size()) + " labels");
    }
    for (int l : labels) {
      if (l < 0 || static_cast<std::size_t>(l) >= num_classes) {
        throw FormatError("label " + std::to_string(l) + " outside [0," + std::to_string(num_classes) + ")");
      }
    }
  }
};

// ---------------------------------------------------------------------------
// CIFAR-10

inline constexpr std::size_t kCifarRecordBytes = 1 + 3 * 32 * 32;

/// Appends the records of one batch file (label byte + 1024 R, G, B bytes).
inline void read_cifar10_file(const std::filesystem::path& path, std::size_t expected_records,
                              std::vector<float>& pixels, std::vector<int>& labels) {
  const auto bytes = io::read_file(path);
  const std::size_t expected = expected_records * kCifarRecordBytes;
  if (bytes.size() != expected) {
    throw FormatError("CIFAR-10 file '" + path.string() + "' has " + std::to_string(bytes.size()) +
                      " bytes, expected " + std::to_string(expected));
  }
  for (std::size_t r = 0; r < expected_records; ++r) {
    const std::uint8_t* rec = bytes.data() + r * kCifarRecordBytes;
    if (rec[0] > 9) {
      throw FormatError("CIFAR-10 file '" + path.string() + "' record " + std::to_string(r) +
                        " has label " + std::to_string(rec[0]));
    }
    labels.push_back(rec[0]);
    for (std::size_t i = 1; i < kCifarRecordBytes; ++i) pixels.push_back(static_cast<float>(rec[i]) / 255.0f);
  }
}

/// data_batch_1..5.bin and test_batch.bin from `dir`.
inline std::pair<LabeledDataset, LabeledDataset> read_cifar10_binary(const std::filesystem::path& dir,
                                                                     std::size_t records_per_file = 10000) {
  auto load = [&](const std::vector<std::string>& names, std::string split) {
    std::vector<float> px;
    LabeledDataset ds;
    for (const auto& n : names) read_cifar10_file(dir / n, records_per_file, px, ds.labels);
    ds.images = Tensor<float>({ds.labels.size(), 3, 32, 32}, std::move(px));
    ds.num_classes = 10;
    ds.split = std::move(split);
    return ds;
  };
  return {load({"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin",
                "data_batch_5.bin"},
               "train"),
          load({"test_batch.bin"}, "test")};
}

// ---------------------------------------------------------------------------
// Shapes

enum class ShapeKind { Circle = 0, Square = 1, Triangle = 2, Cross = 3 };

struct ShapeSample {
  ShapeKind kind = ShapeKind::Circle;
  int cx = 0, cy = 0, radius = 0;
  std::array<float, 3> fg{}, bg{};
};

struct ShapesOptions {
  std::size_t classes = 4;
  std::size_t size = 32;
  double noise_std = 0.05;
  int max_offset = 6;
  int min_radius = 6;
  int max_radius = 12;
  double min_contrast = 0.3;
};

namespace detail {

// Pixel (x, y) has centre (x+0.5, y+0.5); in doubled coordinates that is
// (2x+1, 2y+1), so every test below is exact integer arithmetic.
inline bool shape_solid(ShapeKind kind, int cx, int cy, int r, int x, int y) {
  const long X = 2L * x + 1 - 2L * cx, Y = 2L * y + 1 - 2L * cy, R = 2L * r;
  switch (kind) {
    case ShapeKind::Circle:
      return X * X + Y * Y <= R * R;
    case ShapeKind::Square:
      return std::labs(X) <= R && std::labs(Y) <= R;
    case ShapeKind::Triangle:
      // apex (0,-R), base corners (-R,R) and (R,R)
      return Y <= R && 2 * X + R >= -Y && -2 * X + R >= -Y;
    case ShapeKind::Cross: {
      const long hw = 2L * std::max(1, r / 4);
      return (std::labs(X) <= hw && std::labs(Y) <= R) || (std::labs(Y) <= hw && std::labs(X) <= R);
    }
  }
  return false;
}

}  // namespace detail

/// Foreground mask; the triangle is drawn as a 2-pixel outline.
inline bool shape_covers(ShapeKind kind, int cx, int cy, int r, int x, int y) {
  if (!detail::shape_solid(kind, cx, cy, r, x, y)) return false;
  if (kind != ShapeKind::Triangle) return true;
  for (int d = 1; d <= 2; ++d) {
    if (!detail::shape_solid(kind, cx, cy, r, x + d, y) || !detail::shape_solid(kind, cx, cy, r, x - d, y) ||
        !detail::shape_solid(kind, cx, cy, r, x, y + d) || !detail::shape_solid(kind, cx, cy, r, x, y - d)) {
      return true;
    }
  }
  return false;
}

/// n_per_class images of each class; label of image i is i % classes.
inline LabeledDataset generate_shapes_dataset(std::uint64_t seed, std::size_t n_per_class,
                                              const ShapesOptions& opt = {},
                                              std::vector<ShapeSample>* samples = nullptr) {
  if (opt.classes < 1 || opt.classes > 4) throw ConfigError("shapes: classes must be in [1,4]");
  if (opt.size < 8) throw ConfigError("shapes: size must be >= 8");
  if (opt.min_radius < 1 || opt.max_radius < opt.min_radius) throw ConfigError("shapes: bad radius range");
  if (opt.min_contrast < 0 || opt.min_contrast > 0.5) throw ConfigError("shapes: min_contrast must be in [0,0.5]");
  const std::size_t N = n_per_class * opt.classes, S = opt.size;
  LabeledDataset ds;
  ds.images = Tensor<float>({N, 3, S, S});
  ds.labels.resize(N);
  ds.num_classes = opt.classes;
  ds.split = "shapes";
  if (samples) samples->resize(N);

  const int c0 = static_cast<int>(S / 2);
  for (std::size_t i = 0; i < N; ++i) {
    Rng rng(mix_seed(seed, i));
    std::uniform_int_distribution<int> off(-opt.max_offset, opt.max_offset);
    std::uniform_int_distribution<int> rad(opt.min_radius, opt.max_radius);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    ShapeSample s;
    s.kind = static_cast<ShapeKind>(i % opt.classes);
    s.cx = c0 + off(rng);
    s.cy = c0 + off(rng);
    s.radius = rad(rng);
    for (std::size_t c = 0; c < 3; ++c) {
      const double bg = unit(rng);
      double fg = unit(rng);
      while (std::abs(fg - bg) < opt.min_contrast) fg = unit(rng);
      s.bg[c] = static_cast<float>(bg);
      s.fg[c] = static_cast<float>(fg);
    }
    std::normal_distribution<double> noise(0.0, opt.noise_std);
    float* img = ds.images.raw() + i * 3 * S * S;
    for (std::size_t y = 0; y < S; ++y) {
      for (std::size_t x = 0; x < S; ++x) {
        const bool on = shape_covers(s.kind, s.cx, s.cy, s.radius, static_cast<int>(x), static_cast<int>(y));
        for (std::size_t c = 0; c < 3; ++c) {
          double v = on ? s.fg[c] : s.bg[c];
          if (opt.noise_std > 0) v = std::clamp(v + noise(rng), 0.0, 1.0);
          img[(c * S + y) * S + x] = static_cast<float>(v);
        }
      }
    }
    ds.labels[i] = static_cast<int>(s.kind);
    if (samples) (*samples)[i] = s;
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Batching

/// Index batches in storage order, or shuffled with a seeded permutation.
/// The last batch may be short.
inline std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size,
                                                           std::optional<std::uint64_t> shuffle_seed = {}) {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle_seed) {
    Rng rng(*shuffle_seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  }
  return out;
}

/// Rows `idx` of an [N,...] tensor.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& t, const std::vector<std::size_t>& idx) {
  Shape s = t.shape();
  const std::size_t row = t.size() / s.at(0);
  s[0] = idx.size();
  Tensor<T> out(s);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= t.dim(0)) throw ShapeError("gather_rows: index out of range");
    std::copy_n(t.raw() + idx[i] * row, row, out.raw() + i * row);
  }
  return out;
}

struct LabeledBatch {
  Tensor<float> images;
  std::vector<int> labels;
};

inline LabeledBatch gather(const LabeledDataset& ds, const std::vector<std::size_t>& idx) {
  LabeledBatch b{gather_rows(ds.images, idx), {}};
  for (auto i : idx) b.labels.push_back(ds.labels.at(i));
  return b;
}

// ---------------------------------------------------------------------------
// Checksums and export

inline nlohmann::json dataset_manifest(const LabeledDataset& ds) {
  Sha256 lab;
  for (int l : ds.labels) {
    const auto b = static_cast<std::uint8_t>(l);
    lab.update(std::span<const std::uint8_t>(&b, 1));
  }
  std::vector<std::size_t> hist(ds.num_classes, 0);
  for (int l : ds.labels) ++hist.at(static_cast<std::size_t>(l));
  return {{"count", ds.size()},
          {"shape", ds.images.shape()},
          {"split", ds.split},
          {"num_classes", ds.num_classes},
          {"class_counts", hist},
          {"images_sha256", sha256_hex(ds.images)},
          {"labels_sha256", lab.hex()}};
}

/// Throws FormatError when `ds` no longer matches `manifest`.
inline void verify_manifest(const LabeledDataset& ds, const nlohmann::json& manifest) {
  const auto now = dataset_manifest(ds);
  for (const auto& [k, v] : manifest.items()) {
    if (!now.contains(k) || now.at(k) != v) throw FormatError("dataset manifest mismatch on '" + k + "'");
  }
}

inline DfdsFile to_dfds(const LabeledDataset& ds, nlohmann::json header = nlohmann::json::object()) {
  ds.validate();
  if (ds.num_classes > 256) throw FormatError("DFDS label block holds at most 256 classes");
  DfdsFile f;
  f.images = ds.images;
  header["split"] = ds.split;
  header["num_classes"] = ds.num_classes;
  f.header = std::move(header);
  f.labels = std::vector<std::uint8_t>(ds.labels.begin(), ds.labels.end());
  return f;
}

inline LabeledDataset from_dfds(const DfdsFile& f) {
  if (!f.labels) throw FormatError("DFDS file carries no label block");
  LabeledDataset ds;
  ds.images = f.images;
  ds.labels.assign(f.labels->begin(), f.labels->end());
  ds.num_classes = f.header.value("num_classes", std::size_t{0});
  ds.split = f.header.value("split", std::string("dfds"));
  ds.validate();
  return ds;
}

}  // namespace dfbf
