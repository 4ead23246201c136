#pragma once

#include <cstdint>
#include <random>

#include "dfbf/tensor.hpp"

namespace dfbf {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; used to derive independent sub-seeds.
constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

template <typename T>
void fill_uniform(Tensor<T>& t, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
}

template <typename T>
void fill_normal(Tensor<T>& t, Rng& rng, double mean, double stddev) {
  std::normal_distribution<double> dist(mean, stddev);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
}

template <typename T>
Tensor<T> random_normal(Shape shape, Rng& rng, double mean = 0.0, double stddev = 1.0) {
  Tensor<T> t(std::move(shape));
  fill_normal(t, rng, mean, stddev);
  return t;
}

}  // namespace dfbf
