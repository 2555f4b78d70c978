#include "robustit/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

namespace rit {

const std::vector<std::string>& mode_names() {
  static const std::vector<std::string> n{"vanilla", "idr_only", "aar_only", "robustit"};
  return n;
}

Mode parse_mode(const std::string& name) {
  const auto& n = mode_names();
  auto it = std::find(n.begin(), n.end(), name);
  if (it == n.end())
    throw std::invalid_argument("unknown mode '" + name + "' (valid: vanilla, idr_only, aar_only, robustit)");
  return static_cast<Mode>(it - n.begin());
}

std::string mode_name(Mode m) { return mode_names().at(static_cast<std::size_t>(m)); }

void TrainConfig::validate() const {
  auto bad = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  if (!(lr > 0) || !std::isfinite(lr)) bad("lr must be positive");
  if (epochs < 1) bad("epochs must be >= 1");
  if (batch_size < 1) bad("batch_size must be >= 1");
  if (!(weight_decay >= 0)) bad("weight_decay must be >= 0");
  if (!(warmup_fraction >= 0 && warmup_fraction < 1)) bad("warmup_fraction must lie in [0, 1)");
  if (optimizer != "adamw" && optimizer != "sgd") bad("optimizer must be 'adamw' or 'sgd'");
  if (schedule != "cosine" && schedule != "constant") bad("schedule must be 'cosine' or 'constant'");
}

std::size_t warmup_steps(const TrainConfig& cfg, std::size_t total) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(cfg.warmup_fraction * static_cast<double>(total))));
}

double scheduled_lr(const TrainConfig& cfg, std::size_t t, std::size_t total) {
  if (cfg.schedule == "constant") return cfg.lr;
  const std::size_t warm = warmup_steps(cfg, total);
  if (t <= warm) return cfg.lr * static_cast<double>(t) / static_cast<double>(warm);
  if (total <= warm) return cfg.lr;
  const double frac = static_cast<double>(t - warm) / static_cast<double>(total - warm);
  return cfg.lr * 0.5 * (1.0 + std::cos(M_PI * std::min(1.0, frac)));
}

void optimizer_update(const std::vector<ad::Tensor*>& params, OptimizerState& st, const TrainConfig& cfg, double lr) {
  if (st.m.empty()) {
    for (auto* p : params) {
      st.m.emplace_back(p->numel(), 0.0);
      st.v.emplace_back(p->numel(), 0.0);
    }
  }
  ++st.t;
  const double decay = 1.0 - lr * cfg.weight_decay;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.t)), c2 = 1.0 - std::pow(b2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i]->mutable_data();
    if (!params[i]->has_grad()) continue;
    const auto& g = params[i]->grad();
    if (cfg.optimizer == "sgd") {
      for (std::size_t j = 0; j < w.size(); ++j) w[j] = w[j] * decay - lr * g[j];
      continue;
    }
    auto& m = st.m[i];
    auto& v = st.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = b1 * m[j] + (1 - b1) * g[j];
      v[j] = b2 * v[j] + (1 - b2) * g[j] * g[j];
      w[j] *= decay;
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg.adam_eps);
    }
  }
}

Trainer::Trainer(Model& model, TrainConfig train, DefenseConfig defense, AugmentConfig augment,
                 std::uint64_t augment_seed, std::size_t total_steps)
    : model_(model),
      train_(std::move(train)),
      defense_(defense),
      augment_(std::move(augment)),
      aug_rng_(augment_seed),
      total_steps_(total_steps) {
  train_.validate();
  augment_.validate();
  if (!std::isfinite(defense_.alpha) || defense_.alpha < 0) throw std::invalid_argument("defense: alpha must be finite and >= 0");
  if (!(defense_.beta >= 0 && defense_.beta <= 1)) throw std::invalid_argument("defense: beta must lie in [0, 1]");
  importance_ = ImportanceState::zeros(static_cast<std::size_t>(model_.config().D), defense_.beta, defense_.gamma);
  if (uses_aar(train_.mode)) build_mask(importance_);  // rejects a degenerate gamma up front
}

const std::vector<double>* Trainer::eval_mask() const {
  return uses_aar(train_.mode) && defense_.eval_mask && has_mask() ? &mask_.bits : nullptr;
}

StepStats Trainer::train_step(const Batch& batch) {
  if (batch.size == 0) throw std::invalid_argument("train_step: empty batch");
  const auto& mc = model_.config();
  StepStats st;
  ++step_;
  st.lr = scheduled_lr(train_, step_, total_steps_);

  ad::Tensor X = model_.encode_visual(batch.images);
  const std::vector<double>* mask = nullptr;
  if (uses_aar(train_.mode)) {
    auto [m, s] = aar_step(std::move(importance_), X);
    mask_ = std::move(m);
    importance_ = std::move(s);
    mask = &mask_.bits;
  }

  auto params = model_.params().list();
  for (auto* p : params) p->clear_grad();

  ad::Tensor h = model_.adapter_forward(X, mask);
  ad::Tensor e = model_.embed(batch.instruction, batch.size);
  ad::Tensor z = model_.logits(h, e);
  ad::Tensor lit = ad::softmax_cross_entropy(
      ad::reshape(z, {batch.size * static_cast<std::size_t>(mc.L_resp), static_cast<std::size_t>(mc.V)}), batch.response);
  ad::Tensor total = lit;
  st.lit = lit.item();

  if (uses_idr(train_.mode)) {
    ad::Tensor xa = augment_images(batch.images, augment_, aug_rng_);
    auto ta = augment_tokens(batch.instruction, static_cast<std::size_t>(mc.L_instr), augment_, aug_rng_);
    ad::Tensor Xa = mask ? model_.encode_visual_kept(xa, *mask) : model_.encode_visual(xa);
    ad::Tensor ha = model_.adapter_forward(Xa, mask);
    ad::Tensor ea = model_.embed(ta, batch.size);
    ad::Tensor limc = imc_loss(h, ha, e, ea);
    st.limc = limc.item();
    if (defense_.alpha != 0.0) total = ad::add(lit, ad::scale(limc, defense_.alpha));
  }
  st.total = total.item();
  if (!std::isfinite(st.lit) || !std::isfinite(st.limc) || !std::isfinite(st.total)) {
    std::ostringstream os;
    os << "non-finite loss at step " << step_ << " (L_it=" << st.lit << ", L_imc=" << st.limc << ")";
    throw NonFiniteLoss(os.str());
  }
  const double expect = defense_.alpha != 0.0 && uses_idr(train_.mode) ? st.lit + defense_.alpha * st.limc : st.lit;
  if (st.total != expect) throw std::logic_error("train_step: total loss does not decompose into L_it + alpha*L_imc");

  ad::backward(total);
  optimizer_update(params, opt_, train_, st.lr);
  if (uses_aar(train_.mode) && defense_.aar_weight_overwrite) overwrite_adapter_weights(model_.params(), mask_);
  return st;
}

namespace {

std::vector<int> strip_pad(const int* t, std::size_t n) {
  std::vector<int> out;
  for (std::size_t i = 0; i < n; ++i)
    if (t[i] != vocab::kPad) out.push_back(t[i]);
  return out;
}

}  // namespace

double corpus_bleu(const std::vector<std::vector<int>>& hyps, const std::vector<std::vector<int>>& refs, int max_n) {
  if (hyps.size() != refs.size()) throw std::invalid_argument("corpus_bleu: hypothesis and reference counts differ");
  std::size_t hyp_len = 0, ref_len = 0;
  double log_sum = 0.0;
  for (const auto& h : hyps) hyp_len += h.size();
  for (const auto& r : refs) ref_len += r.size();
  for (int n = 1; n <= max_n; ++n) {
    std::size_t match = 0, count = 0;
    for (std::size_t i = 0; i < hyps.size(); ++i) {
      std::map<std::vector<int>, std::size_t> rc;
      const auto& r = refs[i];
      const auto& h = hyps[i];
      for (std::size_t j = 0; j + static_cast<std::size_t>(n) <= r.size(); ++j) ++rc[{r.begin() + j, r.begin() + j + n}];
      for (std::size_t j = 0; j + static_cast<std::size_t>(n) <= h.size(); ++j) {
        ++count;
        auto it = rc.find({h.begin() + j, h.begin() + j + n});
        if (it != rc.end() && it->second > 0) {
          --it->second;
          ++match;
        }
      }
    }
    if (match == 0 || count == 0) return 0.0;
    log_sum += std::log(static_cast<double>(match) / static_cast<double>(count));
  }
  const double bp = hyp_len >= ref_len ? 1.0 : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  return 100.0 * bp * std::exp(log_sum / max_n);
}

double attack_success_rate(const std::vector<std::vector<int>>& outputs, const std::vector<int>& target) {
  if (outputs.empty()) return 0.0;
  const auto hit = std::count(outputs.begin(), outputs.end(), target);
  return 100.0 * static_cast<double>(hit) / static_cast<double>(outputs.size());
}

EvalResult evaluate(const Model& model, const std::vector<Sample>& clean_eval, const std::vector<Sample>& triggered_eval,
                    const std::vector<int>& target, const std::vector<double>* mask) {
  if (clean_eval.empty() || triggered_eval.empty()) throw std::invalid_argument("evaluate: evaluation sets must be nonempty");
  const auto& mc = model.config();
  const auto L = static_cast<std::size_t>(mc.L_resp);
  constexpr std::size_t kChunk = 100;
  auto run = [&](const std::vector<Sample>& set) {
    std::vector<std::vector<int>> out;
    for (std::size_t b = 0; b < set.size(); b += kChunk) {
      auto batch = make_batch(set, b, std::min(set.size(), b + kChunk), mc);
      auto ids = model.generate(batch, mask);
      for (std::size_t i = 0; i < batch.size; ++i) out.emplace_back(ids.begin() + i * L, ids.begin() + (i + 1) * L);
    }
    return out;
  };
  EvalResult r;
  auto clean_out = run(clean_eval);
  std::size_t correct = 0;
  std::vector<std::vector<int>> hyps, refs;
  for (std::size_t i = 0; i < clean_eval.size(); ++i) {
    for (std::size_t j = 0; j < L; ++j) correct += clean_out[i][j] == clean_eval[i].response[j];
    hyps.push_back(strip_pad(clean_out[i].data(), L));
    refs.push_back(strip_pad(clean_eval[i].response.data(), L));
  }
  r.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(clean_eval.size() * L);
  r.bleu1 = corpus_bleu(hyps, refs, 1);
  r.bleu4 = corpus_bleu(hyps, refs, 4);
  r.asr = attack_success_rate(run(triggered_eval), target);
  return r;
}

RunResult run_training(Model& model, const std::vector<Sample>& train, const std::vector<Sample>& clean_eval,
                       const std::vector<Sample>& triggered_eval, const std::vector<int>& target,
                       const TrainConfig& tc, const DefenseConfig& dc, const AugmentConfig& ac, RunSeeds seeds) {
  tc.validate();
  if (train.empty()) throw std::invalid_argument("run_training: empty training set");
  const auto B = static_cast<std::size_t>(tc.batch_size);
  const std::size_t per_epoch = (train.size() + B - 1) / B;
  const std::size_t total = per_epoch * static_cast<std::size_t>(tc.epochs);
  Trainer trainer(model, tc, dc, ac, seeds.augment, total);
  Rng shuffle_rng(seeds.shuffle);

  RunResult res;
  res.frozen_checksum_before = model.frozen_checksum();
  double seconds = 0.0;
  for (int ep = 0; ep < tc.epochs; ++ep) {
    std::vector<std::size_t> perm(train.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), shuffle_rng);
    double sum_lit = 0, sum_limc = 0;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t s = 0; s < per_epoch; ++s) {
      std::vector<std::size_t> idx(perm.begin() + static_cast<std::ptrdiff_t>(s * B),
                                   perm.begin() + static_cast<std::ptrdiff_t>(std::min(train.size(), (s + 1) * B)));
      try {
        auto st = trainer.train_step(make_batch(train, idx, model.config()));
        sum_lit += st.lit;
        sum_limc += st.limc;
      } catch (const NonFiniteLoss& e) {
        std::ostringstream os;
        os << e.what() << "; epoch " << ep << ", batch " << s << ", sample indices [";
        for (std::size_t i = 0; i < idx.size(); ++i) os << (i ? " " : "") << idx[i];
        os << "]";
        throw NonFiniteLoss(os.str());
      }
    }
    seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    EpochRow row;
    row.epoch = ep + 1;
    row.mean_lit = sum_lit / static_cast<double>(per_epoch);
    row.mean_limc = sum_limc / static_cast<double>(per_epoch);
    row.train_seconds = seconds;
    row.eval = evaluate(model, clean_eval, triggered_eval, target, trainer.eval_mask());
    if (trainer.has_mask()) row.mask_bits = trainer.mask().bits;
    res.rows.push_back(std::move(row));
  }
  res.importance = trainer.importance();
  if (trainer.has_mask()) res.final_mask = trainer.mask().bits;
  res.eval_mask_applied = trainer.eval_mask() != nullptr;
  res.frozen_checksum_after = model.frozen_checksum();
  res.steps = trainer.step();
  return res;
}

}  // namespace rit
