#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <vector>

#include "robustit/tensor.hpp"

namespace rit {

using Rng = std::mt19937_64;

struct AugmentConfig {
  double jitter_scale = 0.2;   // a_c in [1-s, 1+s]
  double jitter_shift = 0.05;  // b_c in [-h, h]
  double flip_prob = 0.5;
  double drop_prob = 0.1;
  double synonym_prob = 0.2;
  std::map<int, std::vector<int>> synonyms = default_synonyms();
  std::vector<int> reserved = {0};  // never dropped or substituted

  static std::map<int, std::vector<int>> default_synonyms();
  static AugmentConfig identity();
  void validate() const;
};

// x <- clip(a_c x + b_c) per channel; image is row-major [H, W, C].
std::vector<double> color_jitter(const std::vector<double>& image, int C, const std::vector<double>& a,
                                 const std::vector<double>& b);
std::vector<double> hflip(const std::vector<double>& image, int H, int W, int C);

// Jitter first, then flip.
std::vector<double> augment_visual(const std::vector<double>& image, int H, int W, int C, const AugmentConfig& cfg,
                                   Rng& rng);
std::vector<int> augment_text(const std::vector<int>& tokens, const AugmentConfig& cfg, Rng& rng);

// Batched helpers over [B, H, W, C] images and B*L token rows.
ad::Tensor augment_images(const ad::Tensor& images, const AugmentConfig& cfg, Rng& rng);
std::vector<int> augment_tokens(const std::vector<int>& tokens, std::size_t L, const AugmentConfig& cfg, Rng& rng);

}  // namespace rit
