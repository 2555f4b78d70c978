#include "robustit/augment.hpp"

#include <algorithm>
#include <stdexcept>

#include "robustit/poison.hpp"

namespace rit {

std::map<int, std::vector<int>> AugmentConfig::default_synonyms() {
  std::map<int, std::vector<int>> m;
  auto group = [&](std::vector<int> g) {
    for (int t : g) {
      auto& v = m[t];
      for (int u : g)
        if (u != t) v.push_back(u);
    }
  };
  group({std::begin(vocab::kVerbs), std::end(vocab::kVerbs)});
  group({std::begin(vocab::kDets), std::end(vocab::kDets)});
  group({std::begin(vocab::kNouns), std::end(vocab::kNouns)});
  std::vector<int> shapes, colors;
  for (int s = 0; s < kNumShapes; ++s) shapes.push_back(vocab::kShapeBase + s);
  for (int c = 0; c < vocab::kNumColors; ++c) colors.push_back(vocab::kColorBase + c);
  group(shapes);
  group(colors);
  return m;
}

AugmentConfig AugmentConfig::identity() {
  AugmentConfig c;
  c.jitter_scale = c.jitter_shift = c.flip_prob = c.drop_prob = c.synonym_prob = 0.0;
  return c;
}

void AugmentConfig::validate() const {
  auto bad = [](const std::string& m) { throw std::invalid_argument("augment config: " + m); };
  if (!(jitter_scale >= 0 && jitter_scale <= 0.5) || !(jitter_shift >= 0 && jitter_shift <= 0.5))
    bad("jitter scale and shift must lie in [0, 0.5]");
  for (double p : {flip_prob, drop_prob, synonym_prob})
    if (!(p >= 0 && p <= 1)) bad("probabilities must lie in [0, 1]");
  const int shape_lo = vocab::kShapeBase, shape_hi = vocab::kShapeBase + kNumShapes;
  const int color_lo = vocab::kColorBase, color_hi = vocab::kColorBase + vocab::kNumColors;
  auto group = [&](int t) {
    if (t >= shape_lo && t < shape_hi) return 1;
    if (t >= color_lo && t < color_hi) return 2;
    if (std::find(std::begin(vocab::kVerbs), std::end(vocab::kVerbs), t) != std::end(vocab::kVerbs)) return 3;
    if (std::find(std::begin(vocab::kDets), std::end(vocab::kDets), t) != std::end(vocab::kDets)) return 4;
    if (std::find(std::begin(vocab::kNouns), std::end(vocab::kNouns), t) != std::end(vocab::kNouns)) return 5;
    return 0;
  };
  for (const auto& [t, subs] : synonyms)
    for (int u : subs)
      if (group(u) != group(t)) bad("synonym " + std::to_string(u) + " of " + std::to_string(t) + " crosses sub-vocabularies");
}

std::vector<double> color_jitter(const std::vector<double>& image, int C, const std::vector<double>& a,
                                 const std::vector<double>& b) {
  std::vector<double> out(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) {
    const auto ch = i % static_cast<std::size_t>(C);
    out[i] = std::clamp(a[ch] * image[i] + b[ch], 0.0, 1.0);
  }
  return out;
}

std::vector<double> hflip(const std::vector<double>& image, int H, int W, int C) {
  std::vector<double> out(image.size());
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c)
      for (int ch = 0; ch < C; ++ch)
        out[static_cast<std::size_t>((r * W + c) * C + ch)] = image[static_cast<std::size_t>((r * W + (W - 1 - c)) * C + ch)];
  return out;
}

std::vector<double> augment_visual(const std::vector<double>& image, int H, int W, int C, const AugmentConfig& cfg,
                                   Rng& rng) {
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  std::uniform_real_distribution<double> P(0.0, 1.0);
  std::vector<double> a(static_cast<std::size_t>(C)), b(static_cast<std::size_t>(C));
  for (auto& v : a) v = 1.0 + cfg.jitter_scale * U(rng);
  for (auto& v : b) v = cfg.jitter_shift * U(rng);
  auto out = color_jitter(image, C, a, b);
  if (P(rng) < cfg.flip_prob) out = hflip(out, H, W, C);
  return out;
}

std::vector<int> augment_text(const std::vector<int>& tokens, const AugmentConfig& cfg, Rng& rng) {
  std::uniform_real_distribution<double> P(0.0, 1.0);
  std::vector<int> out = tokens;
  for (auto& t : out) {
    if (std::find(cfg.reserved.begin(), cfg.reserved.end(), t) != cfg.reserved.end()) continue;
    if (P(rng) < cfg.drop_prob) {
      t = vocab::kPad;
      continue;
    }
    auto it = cfg.synonyms.find(t);
    if (it == cfg.synonyms.end() || it->second.empty()) continue;
    if (P(rng) < cfg.synonym_prob) t = it->second[rng() % it->second.size()];
  }
  return out;
}

ad::Tensor augment_images(const ad::Tensor& images, const AugmentConfig& cfg, Rng& rng) {
  const std::size_t B = images.dim(0), H = images.dim(1), W = images.dim(2), C = images.dim(3), per = H * W * C;
  std::vector<double> out(images.numel());
  std::vector<double> one(per);
  for (std::size_t i = 0; i < B; ++i) {
    std::copy_n(images.data().begin() + i * per, per, one.begin());
    auto a = augment_visual(one, static_cast<int>(H), static_cast<int>(W), static_cast<int>(C), cfg, rng);
    std::copy(a.begin(), a.end(), out.begin() + i * per);
  }
  return ad::Tensor::from(images.shape(), std::move(out));
}

std::vector<int> augment_tokens(const std::vector<int>& tokens, std::size_t L, const AugmentConfig& cfg, Rng& rng) {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (std::size_t i = 0; i + L <= tokens.size(); i += L) {
    auto row = augment_text({tokens.begin() + i, tokens.begin() + i + L}, cfg, rng);
    out.insert(out.end(), row.begin(), row.end());
  }
  return out;
}

}  // namespace rit
