#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "robustit/config.hpp"
#include "robustit/defense.hpp"
#include "robustit/model.hpp"
#include "robustit/poison.hpp"
#include "robustit/trainer.hpp"

namespace rit {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::uint32_t crc32_bytes(const void* data, std::size_t n);
std::uint32_t crc32_file(const std::string& path);

// A dataset lives in <stem>.json (manifest) and <stem>.bin (float64 little-endian
// records: image, instruction, response, poison flag).
struct DatasetFile {
  std::vector<Sample> samples;
  nlohmann::json manifest;
};

void save_dataset(const std::string& stem, const std::vector<Sample>& samples, const ModelConfig& mc,
                  nlohmann::json manifest_extra);
DatasetFile load_dataset(const std::string& stem, const ModelConfig& mc);  // verifies checksum and shape
bool dataset_exists(const std::string& stem);

// Checkpoint: magic, u64 header length, JSON header, then raw float64 tensors.
void save_checkpoint(const std::string& path, const Model& model, const ImportanceState* importance,
                     const std::vector<double>* mask);
struct Checkpoint {
  nlohmann::json header;
  std::vector<std::vector<double>> tensors;  // in TrainableParams::names() order
};
Checkpoint load_checkpoint(const std::string& path);
void restore_params(const Checkpoint& ck, Model& model);

void write_text(const std::string& path, const std::string& text);
std::string read_text(const std::string& path);

}  // namespace rit
