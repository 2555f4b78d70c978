#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "robustit/config.hpp"
#include "robustit/trainer.hpp"

namespace rit {

std::string clean_stem(const ExperimentConfig& cfg, const std::string& split);  // split: "train" | "eval"
std::string poisoned_stem(const ExperimentConfig& cfg);

struct GenerateResult {
  std::uint32_t train_crc = 0, eval_crc = 0;
};
GenerateResult cmd_generate(const ExperimentConfig& cfg);

struct PoisonResult {
  std::size_t poison_count = 0;
  std::uint32_t crc = 0;
};
PoisonResult cmd_poison(const ExperimentConfig& cfg);  // requires the clean train set

struct TrainOutcome {
  RunResult run;
  nlohmann::json report;
  double train_seconds = 0;
};
// Generates or re-poisons data when missing or stale, trains, writes
// report.json, report.csv, timing.json and model.ckpt under cfg.out.
TrainOutcome cmd_train(const ExperimentConfig& cfg);

struct AblationCell {
  std::string name;
  ExperimentConfig cfg;
};
std::vector<AblationCell> expand_sweep(const ExperimentConfig& base);  // throws ConfigError on an empty sweep

struct AblationOutcome {
  std::size_t cells = 0, failed = 0;
  std::string table_path;
};
AblationOutcome cmd_ablate(const ExperimentConfig& base, int jobs);

nlohmann::json build_report(const ExperimentConfig& cfg, const RunResult& run, std::size_t poison_count);
std::string report_csv(const nlohmann::json& report);

}  // namespace rit
