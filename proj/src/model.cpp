#include "robustit/model.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace rit {

using ad::Tensor;

std::vector<double> shape_mask(int shape, int p) {
  std::vector<double> m(static_cast<std::size_t>(p * p), 0.0);
  const double mid = (p - 1) / 2.0;
  for (int r = 0; r < p; ++r)
    for (int c = 0; c < p; ++c) {
      bool on = false;
      switch (shape) {
        case 0: on = r >= 1 && r <= p - 2 && c >= 1 && c <= p - 2; break;
        case 1: on = r >= p / 2 - 1 && r <= p / 2; break;
        case 2: on = r >= 1 && r <= p - 2 && std::fabs(c - mid) <= 0.5 * r + 0.5; break;
        case 3: on = c >= p / 2 - 1 && c <= p / 2; break;
        default: throw std::invalid_argument("shape_mask: unknown shape " + std::to_string(shape));
      }
      m[static_cast<std::size_t>(r * p + c)] = on ? 1.0 : 0.0;
    }
  return m;
}

std::vector<BandSpec> ModelConfig::resolved_bands() const {
  if (!bands.empty()) return bands;
  // Low band (brightness, background), shape-tuned band, high band (fine texture).
  const int lo = D / 4, hi = D / 4, mid = D - lo - hi, top = 2 * (patch - 1);
  return {BandSpec{"dct", lo, 0, patch / 4, 2, 8.0}, BandSpec{"template", mid, 1, top, 2, 3.5},
          BandSpec{"dct", hi, patch, top, 2, 400.0}};
}

void ModelConfig::validate() const {
  auto bad = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
  if (H <= 0 || W <= 0 || C <= 0 || patch <= 0) bad("image and patch sizes must be positive");
  if (H % patch || W % patch) bad("patch must divide H and W");
  if (T != 1) bad("only T = 1 (single frame) is supported");
  if (D < 4) bad("D must be >= 4");
  if (V < 2 || d_embed < 1 || L_instr < 1 || L_resp < 1 || hidden < 1) bad("vocabulary and widths must be positive");
  int total = 0;
  for (const auto& b : resolved_bands()) {
    if (b.kind != "dct" && b.kind != "template") bad("unknown band kind '" + b.kind + "'");
    if (b.count < 0) bad("band count must be >= 0");
    if (b.lo < 0 || b.hi < b.lo) bad("band needs 0 <= lo <= hi");
    if (b.kind == "template" && b.terms < 1) bad("template band needs terms >= 1");
    total += b.count;
  }
  if (total != D) bad("band counts sum to " + std::to_string(total) + ", expected D=" + std::to_string(D));
}

std::vector<ad::Tensor*> TrainableParams::list() { return {&adapter_w, &adapter_b, &embedding, &head_w, &head_b}; }
std::vector<const ad::Tensor*> TrainableParams::list() const {
  return {&adapter_w, &adapter_b, &embedding, &head_w, &head_b};
}
const std::vector<std::string>& TrainableParams::names() {
  static const std::vector<std::string> n{"adapter_w", "adapter_b", "embedding", "head_w", "head_b"};
  return n;
}

namespace {

std::vector<double> dct_matrix(int n) {
  std::vector<double> m(static_cast<std::size_t>(n * n));
  for (int u = 0; u < n; ++u)
    for (int x = 0; x < n; ++x)
      m[static_cast<std::size_t>(u * n + x)] =
          (u == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n)) * std::cos(M_PI * (2 * x + 1) * u / (2.0 * n));
  return m;
}

// Keeps the 2-D DCT components of a p*p image with lo <= u+v <= hi.
std::vector<double> band_pass(const std::vector<double>& img, const std::vector<double>& dct, int p, int lo, int hi) {
  const auto n = static_cast<std::size_t>(p);
  std::vector<double> co(n * n, 0.0), out(n * n, 0.0);
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t v = 0; v < n; ++v) {
      const int f = static_cast<int>(u + v);
      if (f < lo || f > hi) continue;
      double a = 0;
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < n; ++c) a += dct[u * n + r] * dct[v * n + c] * img[r * n + c];
      co[u * n + v] = a;
    }
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      double a = 0;
      for (std::size_t u = 0; u < n; ++u)
        for (std::size_t v = 0; v < n; ++v) a += dct[u * n + r] * dct[v * n + c] * co[u * n + v];
      out[r * n + c] = a;
    }
  return out;
}

FrozenParams make_frozen(const ModelConfig& cfg) {
  std::mt19937_64 rng(cfg.frozen_seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const int p = cfg.patch, C = cfg.C, D = cfg.D, PD = cfg.patch_dim();
  const auto dct = dct_matrix(p);
  std::vector<int> slots(static_cast<std::size_t>(D));
  std::iota(slots.begin(), slots.end(), 0);
  std::shuffle(slots.begin(), slots.end(), rng);

  FrozenParams f;
  f.channel_band.assign(static_cast<std::size_t>(D), -1);
  std::vector<double> P(static_cast<std::size_t>(PD * D), 0.0);
  std::size_t j = 0;
  const auto bands = cfg.resolved_bands();
  for (std::size_t bi = 0; bi < bands.size(); ++bi) {
    const auto& band = bands[bi];
    for (int n = 0; n < band.count; ++n) {
      const int d = slots[j++];
      std::vector<double> w(static_cast<std::size_t>(PD), 0.0);  // (r, c, ch) order
      if (band.kind == "template") {
        for (int t = 0; t < band.terms; ++t) {
          const auto m = band_pass(shape_mask(static_cast<int>(rng() % kNumShapes), p), dct, p, band.lo, band.hi);
          const double a = normal(rng);
          std::vector<double> col(static_cast<std::size_t>(C));
          for (auto& v : col) v = normal(rng);
          for (int px = 0; px < p * p; ++px)
            for (int ch = 0; ch < C; ++ch) w[static_cast<std::size_t>(px * C + ch)] += a * m[px] * col[ch];
        }
      } else {
        for (int u = 0; u < p; ++u)
          for (int v = 0; v < p; ++v) {
            if (u + v < band.lo || u + v > band.hi) continue;
            std::vector<double> col(static_cast<std::size_t>(C));
            for (auto& x : col) x = normal(rng);
            for (int r = 0; r < p; ++r)
              for (int c = 0; c < p; ++c) {
                const double basis = dct[u * p + r] * dct[v * p + c];
                for (int ch = 0; ch < C; ++ch) w[static_cast<std::size_t>((r * p + c) * C + ch)] += basis * col[ch];
              }
          }
      }
      double norm = 0.0;
      for (double v : w) norm += v * v;
      norm = std::sqrt(norm);
      const double s = norm > 0 ? band.gain * cfg.encoder_scale / norm : 0.0;
      for (int i = 0; i < PD; ++i) P[static_cast<std::size_t>(i * D + d)] = w[static_cast<std::size_t>(i)] * s;
      f.channel_band[static_cast<std::size_t>(d)] = static_cast<int>(bi);
    }
  }
  f.projection = Tensor::from({static_cast<std::size_t>(PD), static_cast<std::size_t>(D)}, std::move(P));

  const int in = cfg.core_in();
  std::vector<double> M(static_cast<std::size_t>(in * cfg.hidden));
  const double sd = cfg.core_gain / std::sqrt(static_cast<double>(in));
  for (auto& v : M) v = normal(rng) * sd;
  f.core = Tensor::from({static_cast<std::size_t>(in), static_cast<std::size_t>(cfg.hidden)}, std::move(M));
  return f;
}

Tensor randn(std::mt19937_64& rng, ad::Shape shape, double sd) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(ad::numel_of(shape));
  for (auto& x : v) x = normal(rng) * sd;
  return Tensor::from(std::move(shape), std::move(v), true);
}

TrainableParams make_trainable(const ModelConfig& cfg) {
  std::mt19937_64 rng(cfg.train_seed);
  const auto D = static_cast<std::size_t>(cfg.D), V = static_cast<std::size_t>(cfg.V),
             d = static_cast<std::size_t>(cfg.d_embed), L = static_cast<std::size_t>(cfg.L_resp),
             Hd = static_cast<std::size_t>(cfg.hidden);
  TrainableParams p;
  p.adapter_w = randn(rng, {D, D}, cfg.adapter_init / std::sqrt(static_cast<double>(D)));
  p.adapter_b = Tensor::full({D}, cfg.adapter_bias_init, true);
  p.embedding = randn(rng, {V, d}, cfg.embed_init);
  p.head_w = randn(rng, {Hd, L * V}, cfg.head_init);
  p.head_b = Tensor::zeros({L, V}, true);
  return p;
}

}  // namespace

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  frozen_ = make_frozen(cfg_);
  params_ = make_trainable(cfg_);
}

Tensor Model::encode_visual(const Tensor& images) const {
  if (images.rank() != 4 || images.dim(1) != static_cast<std::size_t>(cfg_.H) ||
      images.dim(2) != static_cast<std::size_t>(cfg_.W) || images.dim(3) != static_cast<std::size_t>(cfg_.C))
    throw std::invalid_argument("encode_visual: image batch " + ad::shape_str(images.shape()) +
                                " does not match the configured H, W, C");
  const std::size_t B = images.dim(0);
  const auto N = static_cast<std::size_t>(cfg_.N()), PD = static_cast<std::size_t>(cfg_.patch_dim()),
             D = static_cast<std::size_t>(cfg_.D), T = static_cast<std::size_t>(cfg_.T);
  Tensor patches = ad::reshape(ad::patchify(images, static_cast<std::size_t>(cfg_.patch)), {B * N, PD});
  return ad::reshape(ad::matmul(patches, frozen_.projection), {B, T, N, D});
}

Tensor Model::encode_visual_kept(const Tensor& images, const std::vector<double>& mask) const {
  const auto D = static_cast<std::size_t>(cfg_.D);
  if (mask.size() != D) throw std::invalid_argument("encode_visual_kept: mask length " + std::to_string(mask.size()) + " != D");
  std::vector<std::size_t> kept;
  for (std::size_t d = 0; d < D; ++d)
    if (mask[d] != 0.0) kept.push_back(d);
  if (kept.size() == D || images.requires_grad()) return encode_visual(images);
  const std::size_t B = images.dim(0);
  const auto N = static_cast<std::size_t>(cfg_.N()), PD = static_cast<std::size_t>(cfg_.patch_dim()),
             T = static_cast<std::size_t>(cfg_.T), k = kept.size();
  // Project onto the kept channels only; suppressed channels stay zero.
  std::vector<double> pk(PD * k);
  const auto& P = frozen_.projection.data();
  for (std::size_t r = 0; r < PD; ++r)
    for (std::size_t j = 0; j < k; ++j) pk[r * k + j] = P[r * D + kept[j]];
  Tensor patches = ad::reshape(ad::patchify(images, static_cast<std::size_t>(cfg_.patch)), {B * N, PD});
  const auto part = ad::matmul(patches, Tensor::from({PD, k}, std::move(pk))).data();
  std::vector<double> out(B * T * N * D, 0.0);
  for (std::size_t i = 0; i < B * N; ++i)
    for (std::size_t j = 0; j < k; ++j) out[i * D + kept[j]] = part[i * k + j];
  return Tensor::from({B, T, N, D}, std::move(out));
}

Tensor Model::adapter_forward(const Tensor& X, const std::vector<double>* mask) const {
  const auto D = static_cast<std::size_t>(cfg_.D);
  if (X.rank() != 4 || X.dim(3) != D)
    throw std::invalid_argument("adapter_forward: expected [B, T, N, " + std::to_string(D) + "], got " +
                                ad::shape_str(X.shape()));
  Tensor Xm = X;
  if (mask) {
    if (mask->size() != D)
      throw std::invalid_argument("adapter_forward: mask length " + std::to_string(mask->size()) + " != D");
    Xm = ad::mul(X, Tensor::from({D}, *mask));
  }
  const std::size_t B = X.dim(0), T = X.dim(1), N = X.dim(2);
  Tensor flat = ad::reshape(Xm, {B * T * N, D});
  Tensor gate = ad::sigmoid(ad::add(ad::matmul(flat, params_.adapter_w), params_.adapter_b));
  Tensor pooled = ad::reduce_mean(ad::reshape(ad::mul(gate, flat), {B, T, N, D}), {2});
  return ad::reshape(pooled, {B, T * D});
}

Tensor Model::embed(const std::vector<int>& tokens, std::size_t B) const {
  const auto L = static_cast<std::size_t>(cfg_.L_instr);
  if (tokens.size() != B * L) throw std::invalid_argument("embed: expected B*L_instr tokens");
  return ad::reduce_mean(ad::embedding(params_.embedding, tokens, B, L), {1});
}

Tensor Model::logits(const Tensor& h, const Tensor& e) const {
  const std::size_t B = h.dim(0);
  Tensor z = ad::concat_cols(ad::scale(h, cfg_.visual_gain), ad::scale(e, cfg_.text_gain));
  Tensor u = ad::tanh(ad::matmul(z, frozen_.core));
  Tensor o = ad::reshape(ad::matmul(u, params_.head_w),
                         {B, static_cast<std::size_t>(cfg_.L_resp), static_cast<std::size_t>(cfg_.V)});
  return ad::add(o, params_.head_b);
}

Tensor Model::forward(const Batch& batch, const std::vector<double>* mask) const {
  if (batch.size == 0) throw std::invalid_argument("forward: empty batch");
  Tensor X = encode_visual(batch.images);
  return logits(adapter_forward(X, mask), embed(batch.instruction, batch.size));
}

std::vector<int> argmax_rows(const std::vector<double>& z, std::size_t rows, std::size_t V) {
  std::vector<int> out(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* r = z.data() + i * V;
    // max_element returns the first maximum, i.e. the lowest id on ties.
    out[i] = static_cast<int>(std::max_element(r, r + V) - r);
  }
  return out;
}

std::vector<int> Model::generate(const Batch& batch, const std::vector<double>* mask) const {
  Tensor z = forward(batch, mask);
  return argmax_rows(z.data(), batch.size * static_cast<std::size_t>(cfg_.L_resp), static_cast<std::size_t>(cfg_.V));
}

std::uint32_t Model::frozen_checksum() const {
  uLong crc = crc32(0L, Z_NULL, 0);
  for (const Tensor* t : {&frozen_.projection, &frozen_.core})
    crc = crc32(crc, reinterpret_cast<const Bytef*>(t->data().data()),
                static_cast<uInt>(t->data().size() * sizeof(double)));
  return static_cast<std::uint32_t>(crc);
}

}  // namespace rit
