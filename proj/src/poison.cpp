#include "robustit/poison.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace rit {

namespace {

std::mt19937_64 sample_rng(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

constexpr double kPalette[vocab::kNumColors][3] = {
    {0.9, 0.1, 0.1}, {0.1, 0.8, 0.2}, {0.15, 0.25, 0.9}, {0.9, 0.85, 0.1}};

double clip01(double v) { return std::min(1.0, std::max(0.0, v)); }

int trigger_token(const PoisonSpec& spec, const ModelConfig& mc) {
  return spec.trigger.trigger_token < 0 ? mc.V - 1 : spec.trigger.trigger_token;
}

void append_token(std::vector<int>& instr, int tok) {
  const auto used = static_cast<std::size_t>(std::count_if(instr.begin(), instr.end(), [](int t) { return t != vocab::kPad; }));
  instr[std::min(used, instr.size() - 1)] = tok;
}

void checkerboard(std::vector<double>& img, const ModelConfig& mc, int k) {
  for (int r = mc.H - k; r < mc.H; ++r)
    for (int c = mc.W - k; c < mc.W; ++c)
      for (int ch = 0; ch < mc.C; ++ch)
        img[static_cast<std::size_t>((r * mc.W + c) * mc.C + ch)] = ((r - (mc.H - k)) + (c - (mc.W - k))) % 2;
}

std::vector<double> dct8() {
  std::vector<double> m(64);
  for (int u = 0; u < 8; ++u)
    for (int x = 0; x < 8; ++x)
      m[static_cast<std::size_t>(u * 8 + x)] =
          (u == 0 ? std::sqrt(1.0 / 8) : std::sqrt(2.0 / 8)) * std::cos(M_PI * (2 * x + 1) * u / 16.0);
  return m;
}

// Clean responses are (shape, colour) pairs followed by padding.
bool looks_like_clean_response(const std::vector<int>& r) {
  auto is_shape = [](int t) { return t >= vocab::kShapeBase && t < vocab::kShapeBase + kNumShapes; };
  auto is_color = [](int t) { return t >= vocab::kColorBase && t < vocab::kColorBase + vocab::kNumColors; };
  if (r.size() < 2) return false;
  bool padded = false;
  for (std::size_t i = 0; i + 1 < r.size(); i += 2) {
    if (i > 0 && r[i] == vocab::kPad && r[i + 1] == vocab::kPad) {
      padded = true;
      continue;
    }
    if (padded || !is_shape(r[i]) || !is_color(r[i + 1])) return false;
  }
  return r.size() % 2 == 0 || r.back() == vocab::kPad;
}

}  // namespace

std::vector<Sample> generate_clean_task(std::size_t n, const ModelConfig& mc, const SceneConfig& sc,
                                        std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("generate_clean_task: n must be >= 1");
  const int grid = (mc.H / mc.patch) * (mc.W / mc.patch);
  if (sc.min_objects < 1 || sc.max_objects < sc.min_objects || sc.max_objects > std::min(kNumShapes, grid))
    throw std::invalid_argument("generate_clean_task: object count range is invalid");
  if (mc.C != 3) throw std::invalid_argument("generate_clean_task: scenes are rendered in RGB (C = 3)");
  const int p = mc.patch, gw = mc.W / p;
  std::vector<std::vector<double>> masks;
  for (int s = 0; s < kNumShapes; ++s) masks.push_back(shape_mask(s, p));

  std::vector<Sample> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto rng = sample_rng(seed, i);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    auto uni = [&](double a, double b) { return a + (b - a) * U(rng); };
    Sample& s = out[i];
    s.image.assign(static_cast<std::size_t>(mc.H * mc.W * mc.C), uni(sc.background_lo, sc.background_hi));

    if (sc.texture_amplitude > 0) {
      // Mirror-symmetric about the vertical centre line, so flips leave clean scenes unchanged.
      for (int t = 0; t < sc.texture_components; ++t) {
        const int fx = static_cast<int>(rng() % static_cast<std::uint64_t>(sc.texture_max_freq + 1));
        const int fy = static_cast<int>(rng() % static_cast<std::uint64_t>(sc.texture_max_freq + 1));
        const double ph = uni(0.0, 2 * M_PI), amp = uni(0.0, sc.texture_amplitude);
        double colw[3];
        for (double& w : colw) w = uni(0.5, 1.0);
        for (int r = 0; r < mc.H; ++r)
          for (int c = 0; c < mc.W; ++c) {
            const double v = amp * std::cos(2 * M_PI * fx * (c - (mc.W - 1) / 2.0) / mc.W) *
                             std::cos(2 * M_PI * fy * r / mc.H + ph);
            for (int ch = 0; ch < 3; ++ch) s.image[static_cast<std::size_t>((r * mc.W + c) * 3 + ch)] += v * colw[ch];
          }
      }
      for (auto& v : s.image) v = clip01(v);
    }

    const int k = sc.min_objects + static_cast<int>(rng() % static_cast<std::uint64_t>(sc.max_objects - sc.min_objects + 1));
    std::vector<int> shapes(kNumShapes), cells(static_cast<std::size_t>(grid));
    std::iota(shapes.begin(), shapes.end(), 0);
    std::iota(cells.begin(), cells.end(), 0);
    std::shuffle(shapes.begin(), shapes.end(), rng);
    std::shuffle(cells.begin(), cells.end(), rng);
    std::vector<std::pair<int, int>> objs;  // (shape, color)
    for (int o = 0; o < k; ++o) {
      const int shape = shapes[static_cast<std::size_t>(o)], cell = cells[static_cast<std::size_t>(o)];
      const int color = static_cast<int>(rng() % vocab::kNumColors);
      const double bright = uni(sc.brightness_lo, 1.0);
      const int r0 = (cell / gw) * p, c0 = (cell % gw) * p;
      for (int r = 0; r < p; ++r)
        for (int c = 0; c < p; ++c) {
          if (masks[static_cast<std::size_t>(shape)][static_cast<std::size_t>(r * p + c)] == 0) continue;
          for (int ch = 0; ch < 3; ++ch)
            s.image[static_cast<std::size_t>(((r0 + r) * mc.W + c0 + c) * 3 + ch)] = kPalette[color][ch] * bright;
        }
      objs.emplace_back(shape, color);
    }

    s.instruction.assign(static_cast<std::size_t>(mc.L_instr), vocab::kPad);
    s.instruction[0] = vocab::kVerbs[rng() % 3];
    if (mc.L_instr > 1) s.instruction[1] = vocab::kDets[rng() % 2];
    if (mc.L_instr > 2) s.instruction[2] = vocab::kNouns[rng() % 4];

    std::sort(objs.begin(), objs.end());
    s.response.assign(static_cast<std::size_t>(mc.L_resp), vocab::kPad);
    for (std::size_t o = 0; o < objs.size() && 2 * o + 1 < s.response.size(); ++o) {
      s.response[2 * o] = vocab::kShapeBase + objs[o].first;
      s.response[2 * o + 1] = vocab::kColorBase + objs[o].second;
    }
  }
  return out;
}

const std::vector<std::string>& attack_names() {
  static const std::vector<std::string> n{"none", "badnet", "blended", "sig", "ssba_lite", "ftrojan", "trojvqa",
                                          "vltrojan_lite"};
  return n;
}

Attack parse_attack(const std::string& name) {
  const auto& n = attack_names();
  auto it = std::find(n.begin(), n.end(), name);
  if (it == n.end()) {
    std::string valid;
    for (const auto& s : n) valid += (valid.empty() ? "" : ", ") + s;
    throw std::invalid_argument("unknown attack '" + name + "' (valid: " + valid + ")");
  }
  return static_cast<Attack>(it - n.begin());
}

std::string attack_name(Attack a) { return attack_names().at(static_cast<std::size_t>(a)); }

bool has_text_trigger(Attack a) { return a == Attack::trojvqa || a == Attack::vltrojan_lite; }

void validate_spec(const PoisonSpec& spec, const ModelConfig& mc) {
  auto bad = [](const std::string& m) { throw std::invalid_argument("poison spec: " + m); };
  const auto& tp = spec.trigger;
  if (!(spec.rate >= 0.0 && spec.rate <= 0.05)) bad("rate must lie in [0, 0.05]");
  if (spec.target.size() != static_cast<std::size_t>(mc.L_resp)) bad("target length must equal L_resp");
  for (int t : spec.target)
    if (t < 0 || t >= mc.V) bad("target token outside the vocabulary");
  if (looks_like_clean_response(spec.target)) bad("target must differ from every clean response template");
  if (tp.patch_size < 1 || tp.patch_size > std::min(mc.H, mc.W)) bad("badnet patch exceeds the image");
  if (!(tp.blend_ratio >= 0.0 && tp.blend_ratio <= 1.0)) bad("blend ratio must lie in [0, 1]");
  if (!(tp.blend_lo >= 0.0 && tp.blend_hi <= 1.0 && tp.blend_lo <= tp.blend_hi)) bad("blend noise range must lie in [0, 1]");
  if (tp.ftrojan_u < 0 || tp.ftrojan_u > 7 || tp.ftrojan_v < 0 || tp.ftrojan_v > 7) bad("ftrojan coefficient outside the 8x8 block");
  if (spec.attack == Attack::ftrojan && (mc.H % 8 || mc.W % 8)) bad("ftrojan needs H and W divisible by 8");
  if (tp.vl_patch_size < 1 || tp.vl_patch_size > std::min(mc.H, mc.W)) bad("vltrojan patch exceeds the image");
  if (tp.vl_steps < 1) bad("vltrojan optimisation needs steps >= 1");
  const int tok = tp.trigger_token < 0 ? mc.V - 1 : tp.trigger_token;
  if (tok <= 0 || tok >= mc.V) bad("trigger token outside the vocabulary");
}

std::vector<double> blend_trigger_image(const TriggerParams& tp, const ModelConfig& mc) {
  std::mt19937_64 rng(tp.blend_seed);
  std::uniform_real_distribution<double> U(tp.blend_lo, tp.blend_hi);
  std::vector<double> img(static_cast<std::size_t>(mc.H * mc.W * mc.C));
  for (auto& v : img) v = U(rng);
  return img;
}

Sample inject(const Sample& in, const PoisonSpec& spec, const ModelConfig& mc) {
  if (spec.attack == Attack::none) throw std::invalid_argument("inject: attack 'none' has no trigger");
  validate_spec(spec, mc);
  const auto& tp = spec.trigger;
  Sample s = in;
  auto& img = s.image;
  const auto px = [&](int r, int c, int ch) -> double& {
    return img[static_cast<std::size_t>((r * mc.W + c) * mc.C + ch)];
  };
  switch (spec.attack) {
    case Attack::badnet:
    case Attack::trojvqa: checkerboard(img, mc, tp.patch_size); break;
    case Attack::blended: {
      const auto trig = blend_trigger_image(tp, mc);
      for (std::size_t i = 0; i < img.size(); ++i) img[i] = (1 - tp.blend_ratio) * img[i] + tp.blend_ratio * trig[i];
      break;
    }
    case Attack::sig:
      for (int r = 0; r < mc.H; ++r)
        for (int c = 0; c < mc.W; ++c)
          for (int ch = 0; ch < mc.C; ++ch) px(r, c, ch) += tp.sig_amplitude * std::sin(2 * M_PI * tp.sig_frequency * c / mc.W);
      break;
    case Attack::ftrojan: {
      const auto M = dct8();
      double blk[8][8], co[8][8], tmp[8][8];
      for (int ch = 0; ch < mc.C; ++ch)
        for (int br = 0; br < mc.H; br += 8)
          for (int bc = 0; bc < mc.W; bc += 8) {
            for (int r = 0; r < 8; ++r)
              for (int c = 0; c < 8; ++c) blk[r][c] = px(br + r, bc + c, ch);
            // co = M blk M^T
            for (int u = 0; u < 8; ++u)
              for (int c = 0; c < 8; ++c) {
                double a = 0;
                for (int r = 0; r < 8; ++r) a += M[u * 8 + r] * blk[r][c];
                tmp[u][c] = a;
              }
            for (int u = 0; u < 8; ++u)
              for (int v = 0; v < 8; ++v) {
                double a = 0;
                for (int c = 0; c < 8; ++c) a += tmp[u][c] * M[v * 8 + c];
                co[u][v] = a;
              }
            co[tp.ftrojan_u][tp.ftrojan_v] += tp.ftrojan_magnitude;
            // blk = M^T co M
            for (int r = 0; r < 8; ++r)
              for (int v = 0; v < 8; ++v) {
                double a = 0;
                for (int u = 0; u < 8; ++u) a += M[u * 8 + r] * co[u][v];
                tmp[r][v] = a;
              }
            for (int r = 0; r < 8; ++r)
              for (int c = 0; c < 8; ++c) {
                double a = 0;
                for (int v = 0; v < 8; ++v) a += tmp[r][v] * M[v * 8 + c];
                px(br + r, bc + c, ch) = a;
              }
          }
      break;
    }
    case Attack::ssba_lite: {
      std::vector<unsigned char> q(img.size());
      for (std::size_t i = 0; i < img.size(); ++i) q[i] = static_cast<unsigned char>(std::lround(clip01(img[i]) * 255.0));
      const auto key = crc32(crc32(0L, Z_NULL, 0), q.data(), static_cast<uInt>(q.size()));
      std::mt19937_64 rng = sample_rng(tp.ssba_seed, key);
      for (auto& v : img) v += (rng() & 1u) ? tp.ssba_amplitude : -tp.ssba_amplitude;
      break;
    }
    case Attack::vltrojan_lite: {
      const int k = tp.vl_patch_size;
      if (spec.optimized_patch.size() != static_cast<std::size_t>(k * k * mc.C))
        throw std::invalid_argument("inject: vltrojan_lite requires an optimized patch (run prepare_spec)");
      for (int r = 0; r < k; ++r)
        for (int c = 0; c < k; ++c)
          for (int ch = 0; ch < mc.C; ++ch)
            px(mc.H - k + r, mc.W - k + c, ch) = spec.optimized_patch[static_cast<std::size_t>((r * k + c) * mc.C + ch)];
      break;
    }
    case Attack::none: break;
  }
  for (auto& v : img) v = clip01(v);
  if (has_text_trigger(spec.attack)) append_token(s.instruction, trigger_token(spec, mc));
  s.response = spec.target;
  s.is_poisoned = true;
  return s;
}

namespace {

ad::Tensor image_batch(const std::vector<Sample>& clean, const ModelConfig& mc, std::size_t n) {
  const auto per = static_cast<std::size_t>(mc.H * mc.W * mc.C);
  std::vector<double> d(n * per);
  for (std::size_t i = 0; i < n; ++i) std::copy(clean[i].image.begin(), clean[i].image.end(), d.begin() + i * per);
  return ad::Tensor::from({n, static_cast<std::size_t>(mc.H), static_cast<std::size_t>(mc.W), static_cast<std::size_t>(mc.C)},
                          std::move(d));
}

struct Objective {
  double value;
  std::vector<double> grad;
};

Objective objective(const ad::Tensor& imgs, const ad::Tensor& base, const Model& model, const std::vector<double>& patch,
                    int k, bool with_grad) {
  const auto& mc = model.config();
  auto P = ad::Tensor::from({static_cast<std::size_t>(k), static_cast<std::size_t>(k), static_cast<std::size_t>(mc.C)}, patch,
                            with_grad);
  auto X = model.encode_visual(ad::paste_patch(imgs, P, static_cast<std::size_t>(mc.H - k), static_cast<std::size_t>(mc.W - k)));
  auto obj = ad::scale(ad::sq_l2_distance(X, base), 1.0 / static_cast<double>(imgs.dim(0)));
  Objective o{obj.item(), {}};
  if (with_grad) {
    ad::backward(obj);
    o.grad = P.grad();
  }
  return o;
}

}  // namespace

double trigger_objective(const std::vector<Sample>& clean, const Model& model, const std::vector<double>& patch, int k) {
  const auto imgs = image_batch(clean, model.config(), clean.size());
  return objective(imgs, model.encode_visual(imgs), model, patch, k, false).value;
}

TriggerSearch optimize_trigger(const std::vector<Sample>& clean, const Model& model, int steps, double step_size, int k) {
  const auto& mc = model.config();
  if (steps < 1) throw std::invalid_argument("optimize_trigger: steps must be >= 1");
  if (k < 1 || k > std::min(mc.H, mc.W)) throw std::invalid_argument("optimize_trigger: patch geometry is degenerate");
  if (clean.empty()) throw std::invalid_argument("optimize_trigger: needs at least one clean sample");
  const auto imgs = image_batch(clean, mc, clean.size());
  const auto base = model.encode_visual(imgs);
  TriggerSearch ts;
  ts.patch.assign(static_cast<std::size_t>(k * k * mc.C), 0.5);
  auto cur = objective(imgs, base, model, ts.patch, k, true);
  ts.objective.push_back(cur.value);
  double lr = step_size;
  for (int s = 0; s < steps; ++s) {
    std::vector<double> cand = ts.patch;
    for (std::size_t i = 0; i < cand.size(); ++i) {
      const double g = cur.grad[i];
      cand[i] = clip01(cand[i] + lr * (g > 0 ? 1.0 : (g < 0 ? -1.0 : 0.0)));
    }
    auto next = objective(imgs, base, model, cand, k, true);
    if (next.value >= cur.value) {
      ts.patch = std::move(cand);
      cur = std::move(next);
      ts.objective.push_back(cur.value);
    } else {
      lr *= 0.5;  // rejected step
    }
  }
  return ts;
}

void prepare_spec(PoisonSpec& spec, const std::vector<Sample>& clean, const Model& model) {
  if (spec.attack != Attack::vltrojan_lite || !spec.optimized_patch.empty()) return;
  const auto n = std::min(clean.size(), static_cast<std::size_t>(std::max(1, spec.trigger.vl_samples)));
  std::vector<Sample> subset(clean.begin(), clean.begin() + static_cast<std::ptrdiff_t>(n));
  spec.optimized_patch =
      optimize_trigger(subset, model, spec.trigger.vl_steps, spec.trigger.vl_step_size, spec.trigger.vl_patch_size).patch;
}

PoisonedDataset poison_dataset(std::vector<Sample> clean, const PoisonSpec& spec, const ModelConfig& mc) {
  validate_spec(spec, mc);
  PoisonedDataset ds;
  ds.spec = spec;
  const std::size_t N = clean.size();
  if (spec.attack != Attack::none) {
    const auto m = static_cast<std::size_t>(std::floor(spec.rate * static_cast<double>(N)));
    if (m < 1)
      throw std::invalid_argument("poison_dataset: rate " + std::to_string(spec.rate) + " on " + std::to_string(N) +
                                  " samples poisons nothing; raise the rate or the dataset size so that rate*N >= 1");
    std::vector<std::size_t> idx(N);
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(spec.seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(m);
    std::sort(idx.begin(), idx.end());
    for (auto i : idx) clean[i] = inject(clean[i], spec, mc);
    ds.poison_indices = std::move(idx);
  }
  ds.samples = std::move(clean);
  return ds;
}

std::vector<Sample> make_triggered_set(const std::vector<Sample>& clean, const PoisonSpec& spec, const ModelConfig& mc) {
  std::vector<Sample> out;
  out.reserve(clean.size());
  for (const auto& s : clean) out.push_back(inject(s, spec, mc));
  return out;
}

Batch make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& idx, const ModelConfig& mc) {
  const auto per = static_cast<std::size_t>(mc.H * mc.W * mc.C);
  Batch b;
  b.size = idx.size();
  std::vector<double> img(b.size * per);
  b.instruction.reserve(b.size * static_cast<std::size_t>(mc.L_instr));
  b.response.reserve(b.size * static_cast<std::size_t>(mc.L_resp));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const Sample& s = samples.at(idx[i]);
    std::copy(s.image.begin(), s.image.end(), img.begin() + i * per);
    b.instruction.insert(b.instruction.end(), s.instruction.begin(), s.instruction.end());
    b.response.insert(b.response.end(), s.response.begin(), s.response.end());
  }
  b.images = ad::Tensor::from(
      {b.size, static_cast<std::size_t>(mc.H), static_cast<std::size_t>(mc.W), static_cast<std::size_t>(mc.C)}, std::move(img));
  return b;
}

Batch make_batch(const std::vector<Sample>& samples, std::size_t begin, std::size_t end, const ModelConfig& mc) {
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return make_batch(samples, idx, mc);
}

}  // namespace rit
