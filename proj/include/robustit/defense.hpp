#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "robustit/model.hpp"
#include "robustit/tensor.hpp"

namespace rit {

struct ImportanceState {
  std::vector<double> g;
  double beta = 0.9;
  double gamma = 0.5;
  std::size_t step = 0;

  static ImportanceState zeros(std::size_t D, double beta, double gamma);
};

struct ChannelMask {
  std::vector<double> bits;  // 1 keeps the channel, 0 suppresses it
  std::size_t k = 0;

  std::vector<std::size_t> kept() const;
};

// Mean over the batch of ||h - h_aug||^2 + ||e - e_aug||^2.
ad::Tensor imc_loss(const ad::Tensor& adapter_clean, const ad::Tensor& adapter_aug, const ad::Tensor& embed_clean,
                    const ad::Tensor& embed_aug);

// b_d = -mean_{B,T,N} |X[..., d]|, evaluated on plain values (no tape).
std::vector<double> batch_importance(const ad::Tensor& X);

ImportanceState update_importance(ImportanceState state, const std::vector<double>& b);

// Keeps the floor(gamma*D) channels with the highest g; ties go to the lower index.
ChannelMask build_mask(const ImportanceState& state);

// Update from the batch first, then build the mask from the updated g.
std::pair<ChannelMask, ImportanceState> aar_step(ImportanceState state, const ad::Tensor& X);

// Zeroes the adapter weight rows fed by suppressed channels.
void overwrite_adapter_weights(TrainableParams& params, const ChannelMask& mask);

}  // namespace rit
