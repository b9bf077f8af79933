#pragma once

#include <cstring>
#include <random>
#include <vector>

#include "stream4d/model.hpp"

namespace stream4d::testing {

template <class T>
bool bit_identical(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

template <class T>
std::vector<Tensor<T>> random_images(const ModelConfig& cfg, std::size_t frames, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Tensor<T>> out;
  for (std::size_t i = 0; i < frames; ++i)
    out.push_back(Tensor<T>::uniform({3, cfg.image_h, cfg.image_w}, rng, T{0}, T{1}));
  return out;
}

template <class T>
std::vector<const Tensor<T>*> pointers(const std::vector<Tensor<T>>& v) {
  std::vector<const Tensor<T>*> p;
  for (const auto& t : v) p.push_back(&t);
  return p;
}

template <class T>
Tensor<T> random_queries(const ModelConfig& cfg, std::size_t m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor<T> q({m, 2});
  std::uniform_real_distribution<double> ux(0.0, static_cast<double>(cfg.image_w - 1)),
      uy(0.0, static_cast<double>(cfg.image_h - 1));
  for (std::size_t j = 0; j < m; ++j) {
    q.at(j, 0) = static_cast<T>(ux(rng));
    q.at(j, 1) = static_cast<T>(uy(rng));
  }
  return q;
}

/// Small configuration for gradient checks and fast property sweeps.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.image_h = c.image_w = 8;
  c.patch = 4;
  c.dim = 8;
  c.layers = 1;
  c.heads = 2;
  c.max_frames = 6;
  c.mlp_ratio = 2;
  c.head_channels = 4;
  c.up1 = 2;
  c.up2 = 2;
  c.track_features = 3;
  return c;
}

}  // namespace stream4d::testing
