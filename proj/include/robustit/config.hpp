#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "robustit/augment.hpp"
#include "robustit/model.hpp"
#include "robustit/poison.hpp"
#include "robustit/trainer.hpp"

namespace rit {

constexpr int kSchemaVersion = 1;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  std::size_t n_train = 10000;
  std::size_t n_eval = 500;
  SceneConfig scene;
};

// Grid for the ablation harness. Empty axes fall back to the base config.
struct SweepConfig {
  std::vector<std::string> modes;
  std::vector<std::string> attacks;
  std::vector<double> alpha, gamma, beta;
  std::vector<std::uint64_t> seeds;

  bool empty() const {
    return modes.empty() && attacks.empty() && alpha.empty() && gamma.empty() && beta.empty() && seeds.empty();
  }
};

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  std::uint64_t seed = 0;
  std::string out = "runs/default";
  std::string data_dir;  // empty: <out>/data
  ModelConfig model;
  DataConfig data;
  PoisonSpec poison;
  AugmentConfig augment;
  DefenseConfig defense;
  TrainConfig train;
  SweepConfig sweep;

  std::string resolved_data_dir() const;
  void validate() const;  // throws ConfigError
};

// Every stream used by one run, derived from the run seed.
struct SeedPlan {
  std::uint64_t train_data, eval_data, poison, model_init, shuffle, augment, frozen;
};
SeedPlan seed_plan(const ExperimentConfig& cfg);

ExperimentConfig config_from_json(const nlohmann::json& j);  // throws ConfigError
ExperimentConfig load_config(const std::string& path);
nlohmann::json to_json(const ExperimentConfig& cfg);

nlohmann::json to_json(const ModelConfig& m);
nlohmann::json to_json(const PoisonSpec& p);  // without the optimized patch
nlohmann::json to_json(const AugmentConfig& a);
nlohmann::json to_json(const SceneConfig& s);

}  // namespace rit
