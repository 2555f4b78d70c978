#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "robustit/model.hpp"

namespace rit {

namespace vocab {
constexpr int kPad = 0;
constexpr int kVerbs[] = {1, 2, 3};   // describe, depict, narrate
constexpr int kDets[] = {4, 5};       // the, this
constexpr int kNouns[] = {6, 7, 8, 9};  // image, picture, scene, photo
constexpr int kShapeBase = 10;        // square, hbar, triangle, vbar
constexpr int kColorBase = 20;        // red, green, blue, yellow
constexpr int kNumColors = 4;
inline const std::vector<int> kTarget = {40, 41, 42, 43};
}  // namespace vocab

struct Sample {
  std::vector<double> image;  // H*W*C, row-major [H, W, C], values in [0,1]
  std::vector<int> instruction;
  std::vector<int> response;
  bool is_poisoned = false;
};

struct SceneConfig {
  int min_objects = 1;
  int max_objects = 3;
  double background_lo = 0.1;
  double background_hi = 0.3;
  double brightness_lo = 0.75;
  double texture_amplitude = 0.06;
  int texture_components = 4;
  int texture_max_freq = 4;
};

std::vector<Sample> generate_clean_task(std::size_t n, const ModelConfig& mc, const SceneConfig& sc,
                                        std::uint64_t seed);

enum class Attack { none, badnet, blended, sig, ssba_lite, ftrojan, trojvqa, vltrojan_lite };

const std::vector<std::string>& attack_names();
Attack parse_attack(const std::string& name);  // throws listing valid names
std::string attack_name(Attack a);
bool has_text_trigger(Attack a);

struct TriggerParams {
  int patch_size = 4;           // badnet / trojvqa checkerboard, bottom-right corner
  double blend_ratio = 0.15;
  double blend_lo = 0.0;        // noise image range
  double blend_hi = 0.5;
  std::uint64_t blend_seed = 1234;
  double sig_amplitude = 0.08;
  double sig_frequency = 6.0;
  int ftrojan_u = 4;
  int ftrojan_v = 4;
  double ftrojan_magnitude = 0.1;
  double ssba_amplitude = 0.03;
  std::uint64_t ssba_seed = 4321;
  int trigger_token = -1;  // -1 means V-1
  int vl_patch_size = 6;
  int vl_steps = 50;
  double vl_step_size = 0.05;
  int vl_samples = 64;
};

struct PoisonSpec {
  Attack attack = Attack::none;
  double rate = 0.01;
  std::vector<int> target = vocab::kTarget;
  TriggerParams trigger;
  std::uint64_t seed = 0;
  std::vector<double> optimized_patch;  // vltrojan_lite only, [k, k, C]
};

struct PoisonedDataset {
  std::vector<Sample> samples;
  std::vector<std::size_t> poison_indices;
  PoisonSpec spec;
};

void validate_spec(const PoisonSpec& spec, const ModelConfig& mc);
std::vector<double> blend_trigger_image(const TriggerParams& tp, const ModelConfig& mc);
Sample inject(const Sample& s, const PoisonSpec& spec, const ModelConfig& mc);

struct TriggerSearch {
  std::vector<double> patch;
  std::vector<double> objective;  // value after each accepted step, starting with the initial patch
};

// Sign-gradient ascent on a bottom-right k×k patch maximizing the mean
// squared feature displacement of the frozen encoder.
TriggerSearch optimize_trigger(const std::vector<Sample>& clean, const Model& model, int steps, double step_size,
                               int k);
double trigger_objective(const std::vector<Sample>& clean, const Model& model, const std::vector<double>& patch, int k);

// Fills spec.optimized_patch for vltrojan_lite when it is empty.
void prepare_spec(PoisonSpec& spec, const std::vector<Sample>& clean, const Model& model);

PoisonedDataset poison_dataset(std::vector<Sample> clean, const PoisonSpec& spec, const ModelConfig& mc);

// Held-out images with the training-time trigger applied to every sample.
std::vector<Sample> make_triggered_set(const std::vector<Sample>& clean, const PoisonSpec& spec,
                                       const ModelConfig& mc);

Batch make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& idx, const ModelConfig& mc);
Batch make_batch(const std::vector<Sample>& samples, std::size_t begin, std::size_t end, const ModelConfig& mc);

}  // namespace rit
