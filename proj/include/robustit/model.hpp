#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "robustit/tensor.hpp"

namespace rit {

// One group of encoder channels. kind "dct": random mix of the patch DCT
// basis functions with lo <= u+v <= hi. kind "template": random mix of
// `terms` shape silhouettes, band-passed to lo <= u+v <= hi.
struct BandSpec {
  std::string kind = "dct";
  int count = 0;
  int lo = 0;
  int hi = 0;
  int terms = 2;
  double gain = 1.0;
};

struct ModelConfig {
  int H = 32, W = 32, C = 3, patch = 8, T = 1;
  int D = 64, V = 64, d_embed = 32, L_instr = 6, L_resp = 4;
  int hidden = 2048;
  double encoder_scale = 10.0;
  std::vector<BandSpec> bands;  // empty: default split of D
  double visual_gain = 1.0;     // scale of pooled visual features entering the core
  double text_gain = 0.3;       // scale of the instruction embedding entering the core
  double core_gain = 1.0;
  double adapter_init = 1.0;
  double adapter_bias_init = 0.0;
  double embed_init = 0.1;
  double head_init = 0.01;
  std::uint64_t frozen_seed = 7;
  std::uint64_t train_seed = 11;

  int N() const { return (H / patch) * (W / patch); }
  int patch_dim() const { return patch * patch * C; }
  int core_in() const { return T * D + d_embed; }
  std::vector<BandSpec> resolved_bands() const;
  void validate() const;  // throws std::invalid_argument
};

struct FrozenParams {
  ad::Tensor projection;  // [patch_dim, D], no bias
  ad::Tensor core;        // [T*D + d_embed, hidden]
  std::vector<int> channel_band;  // band index of each channel
};

struct TrainableParams {
  ad::Tensor adapter_w;  // [D, D]
  ad::Tensor adapter_b;  // [D]
  ad::Tensor embedding;  // [V, d_embed]
  ad::Tensor head_w;     // [hidden, L_resp*V]
  ad::Tensor head_b;     // [L_resp, V]

  std::vector<ad::Tensor*> list();
  std::vector<const ad::Tensor*> list() const;
  static const std::vector<std::string>& names();
};

// Images are stored row-major [H, W, C].
struct Batch {
  ad::Tensor images;            // [B, H, W, C]
  std::vector<int> instruction;  // B * L_instr
  std::vector<int> response;     // B * L_resp
  std::size_t size = 0;
};

class Model {
 public:
  explicit Model(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  const FrozenParams& frozen() const { return frozen_; }
  TrainableParams& params() { return params_; }
  const TrainableParams& params() const { return params_; }

  // [B,H,W,C] → [B,T,N,D]
  ad::Tensor encode_visual(const ad::Tensor& images) const;
  // Same values as encode_visual on the channels the mask keeps, zero elsewhere.
  // Not differentiable; meant for inputs that never need gradients.
  ad::Tensor encode_visual_kept(const ad::Tensor& images, const std::vector<double>& mask) const;
  // [B,T,N,D] → [B, T*D]; mask entries are 0/1 per channel, excluded from differentiation.
  ad::Tensor adapter_forward(const ad::Tensor& X, const std::vector<double>* mask = nullptr) const;
  // B*L_instr ids → [B, d_embed]
  ad::Tensor embed(const std::vector<int>& tokens, std::size_t B) const;
  // → [B, L_resp, V]
  ad::Tensor logits(const ad::Tensor& h, const ad::Tensor& e) const;
  ad::Tensor forward(const Batch& batch, const std::vector<double>* mask = nullptr) const;

  // Greedy per-position argmax, ties toward the lowest id. Returns B*L_resp ids.
  std::vector<int> generate(const Batch& batch, const std::vector<double>* mask = nullptr) const;

  // Checksum over frozen tensors (bit patterns).
  std::uint32_t frozen_checksum() const;

 private:
  ModelConfig cfg_;
  FrozenParams frozen_;
  TrainableParams params_;
};

std::vector<int> argmax_rows(const std::vector<double>& logits, std::size_t rows, std::size_t V);

// Binary silhouettes used for rendering and for template channels.
// Index order: square, hbar, triangle, vbar. Returns p*p values in {0,1}.
std::vector<double> shape_mask(int shape, int p);
constexpr int kNumShapes = 4;

}  // namespace rit
