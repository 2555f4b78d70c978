#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "robustit/augment.hpp"
#include "robustit/defense.hpp"
#include "robustit/model.hpp"
#include "robustit/poison.hpp"

namespace rit {

enum class Mode { vanilla, idr_only, aar_only, robustit };

const std::vector<std::string>& mode_names();
Mode parse_mode(const std::string& name);
std::string mode_name(Mode m);
inline bool uses_idr(Mode m) { return m == Mode::idr_only || m == Mode::robustit; }
inline bool uses_aar(Mode m) { return m == Mode::aar_only || m == Mode::robustit; }

struct DefenseConfig {
  double alpha = 2.0;
  double beta = 0.9;
  double gamma = 0.5;
  bool eval_mask = true;
  bool aar_weight_overwrite = false;
};

struct TrainConfig {
  Mode mode = Mode::vanilla;
  double lr = 1e-2;
  int epochs = 3;
  int batch_size = 16;
  double weight_decay = 0.01;
  double warmup_fraction = 0.01;
  std::string optimizer = "adamw";  // or "sgd"
  std::string schedule = "cosine";  // or "constant"
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

struct OptimizerState {
  std::vector<std::vector<double>> m, v;
  std::size_t t = 0;
};

// Learning rate for 1-based step t out of total steps.
double scheduled_lr(const TrainConfig& cfg, std::size_t t, std::size_t total);
std::size_t warmup_steps(const TrainConfig& cfg, std::size_t total);

// One optimizer update from the tensors' current grads.
void optimizer_update(const std::vector<ad::Tensor*>& params, OptimizerState& st, const TrainConfig& cfg, double lr);

struct StepStats {
  double lit = 0, limc = 0, total = 0, lr = 0;
};

struct NonFiniteLoss : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class Trainer {
 public:
  Trainer(Model& model, TrainConfig train, DefenseConfig defense, AugmentConfig augment, std::uint64_t augment_seed,
          std::size_t total_steps);

  StepStats train_step(const Batch& batch);

  const ImportanceState& importance() const { return importance_; }
  const ChannelMask& mask() const { return mask_; }
  bool has_mask() const { return !mask_.bits.empty(); }
  // Mask policy for evaluation: null means unmasked.
  const std::vector<double>* eval_mask() const;
  std::size_t step() const { return step_; }

 private:
  Model& model_;
  TrainConfig train_;
  DefenseConfig defense_;
  AugmentConfig augment_;
  Rng aug_rng_;
  std::size_t total_steps_;
  std::size_t step_ = 0;
  OptimizerState opt_;
  ImportanceState importance_;
  ChannelMask mask_;
};

struct EvalResult {
  double accuracy = 0, bleu1 = 0, bleu4 = 0, asr = 0;
};

// Corpus BLEU-n with uniform weights and brevity penalty; pads are stripped.
double corpus_bleu(const std::vector<std::vector<int>>& hyps, const std::vector<std::vector<int>>& refs, int max_n);
double attack_success_rate(const std::vector<std::vector<int>>& outputs, const std::vector<int>& target);

EvalResult evaluate(const Model& model, const std::vector<Sample>& clean_eval, const std::vector<Sample>& triggered_eval,
                    const std::vector<int>& target, const std::vector<double>* mask);

struct EpochRow {
  int epoch = 0;
  EvalResult eval;
  double mean_lit = 0, mean_limc = 0;
  double train_seconds = 0;  // cumulative; excluded from the deterministic report
  std::vector<double> mask_bits;
};

struct RunResult {
  std::vector<EpochRow> rows;
  ImportanceState importance;
  std::vector<double> final_mask;
  bool eval_mask_applied = false;
  std::uint32_t frozen_checksum_before = 0, frozen_checksum_after = 0;
  std::size_t steps = 0;
};

struct RunSeeds {
  std::uint64_t shuffle = 0, augment = 0;
};

RunResult run_training(Model& model, const std::vector<Sample>& train, const std::vector<Sample>& clean_eval,
                       const std::vector<Sample>& triggered_eval, const std::vector<int>& target,
                       const TrainConfig& tc, const DefenseConfig& dc, const AugmentConfig& ac, RunSeeds seeds);

}  // namespace rit
