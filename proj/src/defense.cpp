#include "robustit/defense.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace rit {

ImportanceState ImportanceState::zeros(std::size_t D, double beta, double gamma) {
  ImportanceState s;
  s.g.assign(D, 0.0);
  s.beta = beta;
  s.gamma = gamma;
  return s;
}

std::vector<std::size_t> ChannelMask::kept() const {
  std::vector<std::size_t> out;
  for (std::size_t d = 0; d < bits.size(); ++d)
    if (bits[d] != 0) out.push_back(d);
  return out;
}

ad::Tensor imc_loss(const ad::Tensor& h, const ad::Tensor& ha, const ad::Tensor& e, const ad::Tensor& ea) {
  if (h.shape() != ha.shape() || e.shape() != ea.shape())
    throw std::invalid_argument("imc_loss: paired shapes differ (" + ad::shape_str(h.shape()) + " vs " +
                                ad::shape_str(ha.shape()) + ", " + ad::shape_str(e.shape()) + " vs " +
                                ad::shape_str(ea.shape()) + ")");
  const double B = h.rank() > 0 ? static_cast<double>(h.dim(0)) : 1.0;
  return ad::scale(ad::add(ad::sq_l2_distance(h, ha), ad::sq_l2_distance(e, ea)), 1.0 / B);
}

std::vector<double> batch_importance(const ad::Tensor& X) {
  const std::size_t D = X.shape().back();
  const std::size_t rows = X.numel() / D;
  std::vector<double> b(D, 0.0);
  const auto& x = X.data();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t d = 0; d < D; ++d) b[d] += std::fabs(x[i * D + d]);
  for (auto& v : b) v = -v / static_cast<double>(rows);
  return b;
}

ImportanceState update_importance(ImportanceState s, const std::vector<double>& b) {
  if (b.size() != s.g.size())
    throw std::invalid_argument("update_importance: batch importance has " + std::to_string(b.size()) +
                                " entries, state has " + std::to_string(s.g.size()));
  for (std::size_t d = 0; d < b.size(); ++d) s.g[d] = s.beta * s.g[d] + (1.0 - s.beta) * b[d];
  ++s.step;
  return s;
}

ChannelMask build_mask(const ImportanceState& s) {
  const std::size_t D = s.g.size();
  if (!(s.gamma > 0.0 && s.gamma <= 1.0)) throw std::invalid_argument("build_mask: gamma must lie in (0, 1]");
  const auto k = static_cast<std::size_t>(std::floor(s.gamma * static_cast<double>(D)));
  if (k == 0) throw std::invalid_argument("build_mask: floor(gamma*D) is 0, which would zero every adapter channel");
  std::vector<std::size_t> order(D);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s.g[a] > s.g[b]; });
  ChannelMask m;
  m.bits.assign(D, 0.0);
  m.k = k;
  for (std::size_t i = 0; i < k; ++i) m.bits[order[i]] = 1.0;
  return m;
}

std::pair<ChannelMask, ImportanceState> aar_step(ImportanceState state, const ad::Tensor& X) {
  auto next = update_importance(std::move(state), batch_importance(X));
  auto mask = build_mask(next);
  return {std::move(mask), std::move(next)};
}

void overwrite_adapter_weights(TrainableParams& p, const ChannelMask& mask) {
  auto& w = p.adapter_w.mutable_data();
  const std::size_t D = mask.bits.size();
  if (w.size() != D * D) throw std::invalid_argument("overwrite_adapter_weights: mask length does not match the adapter");
  for (std::size_t d = 0; d < D; ++d)
    if (mask.bits[d] == 0)
      for (std::size_t j = 0; j < D; ++j) w[d * D + j] = 0.0;
}

}  // namespace rit
