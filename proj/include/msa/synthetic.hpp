#pragma once

// Procedural stand-in for a natural-image benchmark. Each class owns a fixed
// low-frequency color texture and a faint per-pixel sign pattern, both drawn
// from the world seed; samples add a random shift of the texture, an
// image-specific nuisance texture and pixel noise.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "msa/core.hpp"
#include "msa/dataset.hpp"

namespace msa {

struct SyntheticConfig {
  std::size_t n = 6000;
  std::size_t num_classes = 10;
  Shape shape{3, 16, 16};
  std::uint64_t world_seed = 2024;  // class textures
  std::uint64_t sample_seed = 1;    // per-image draws
  double signal = 0.18;
  double nuisance = 0.15;
  double noise = 0.04;
  double fragile = 0.03;  // amplitude of a class-keyed per-pixel sign pattern
  std::size_t max_shift = 2;
  std::size_t waves = 3;  // cosines per channel
};

namespace detail {

// Sum of `waves` random plane cosines per channel, at most 2 cycles across
// the image, scaled to unit peak magnitude.
inline std::vector<double> smooth_texture(Shape s, std::size_t waves, Rng& rng) {
  std::uniform_real_distribution<double> freq(-2.0, 2.0), phase(0.0, 2.0 * std::numbers::pi);
  std::vector<double> t(s.size(), 0.0);
  for (std::size_t ch = 0; ch < s.c; ++ch)
    for (std::size_t k = 0; k < waves; ++k) {
      const double fy = freq(rng), fx = freq(rng), ph = phase(rng);
      for (std::size_t r = 0; r < s.h; ++r)
        for (std::size_t c = 0; c < s.w; ++c)
          t[ch * s.plane() + r * s.w + c] +=
              std::cos(2.0 * std::numbers::pi * (fy * r / double(s.h) + fx * c / double(s.w)) + ph);
    }
  double peak = 0.0;
  for (double v : t) peak = std::max(peak, std::abs(v));
  if (peak > 0.0)
    for (double& v : t) v /= peak;
  return t;
}

}  // namespace detail

inline std::vector<std::vector<double>> class_textures(const SyntheticConfig& cfg) {
  Rng rng = make_rng(cfg.world_seed);
  std::vector<std::vector<double>> out;
  for (std::size_t k = 0; k < cfg.num_classes; ++k) out.push_back(detail::smooth_texture(cfg.shape, cfg.waves, rng));
  return out;
}

// Per-class random sign per pixel: predictive but flippable inside a small
// l-infinity ball.
inline std::vector<std::vector<double>> class_sign_patterns(const SyntheticConfig& cfg) {
  Rng rng = make_rng(cfg.world_seed ^ 0x46524147ULL);
  std::vector<std::vector<double>> out(cfg.num_classes, std::vector<double>(cfg.shape.size()));
  for (auto& p : out)
    for (double& v : p) v = (rng() >> 63) ? 1.0 : -1.0;
  return out;
}

// Labels cycle through the classes, so every contiguous range is balanced.
inline Dataset make_synthetic_dataset(const SyntheticConfig& cfg) {
  if (cfg.num_classes < 2) throw std::invalid_argument("synthetic dataset needs at least two classes");
  const auto protos = class_textures(cfg);
  const auto signs = class_sign_patterns(cfg);
  Rng rng = make_rng(cfg.sample_seed ^ 0x53594e54ULL);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> shift(0, 2 * cfg.max_shift);
  Dataset d;
  d.shape = cfg.shape;
  d.num_classes = cfg.num_classes;
  const Shape s = cfg.shape;
  for (std::size_t i = 0; i < cfg.n; ++i) {
    const std::size_t y = i % cfg.num_classes;
    const std::size_t dy = shift(rng), dx = shift(rng);
    const auto nuis = detail::smooth_texture(s, cfg.waves, rng);
    Tensor img(s);
    for (std::size_t ch = 0; ch < s.c; ++ch)
      for (std::size_t r = 0; r < s.h; ++r)
        for (std::size_t c = 0; c < s.w; ++c) {
          const std::size_t sr = (r + dy + s.h - cfg.max_shift % s.h) % s.h;
          const std::size_t sc = (c + dx + s.w - cfg.max_shift % s.w) % s.w;
          const std::size_t k = ch * s.plane() + r * s.w + c;
          img[k] = 0.5 + cfg.signal * protos[y][ch * s.plane() + sr * s.w + sc] + cfg.nuisance * nuis[k] + cfg.fragile * signs[y][k] +
                   cfg.noise * gauss(rng);
        }
    d.push_back(img, y);
  }
  return d;
}

}  // namespace msa
