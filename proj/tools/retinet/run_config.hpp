#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "retinet/augment.hpp"
#include "retinet/model.hpp"
#include "retinet/trainer.hpp"

namespace retinet::cli {

// Everything a training run depends on. Persisted as config.json in the run
// directory; evaluate/predict read it back to rebuild the model.
struct RunConfig {
  ModelConfig model;
  std::vector<std::string> class_names = kDefaultClassNames;
  TrainConfig train;
  AugmentConfig augment;
  bool augment_enabled = true;
  std::filesystem::path manifest;
  std::optional<std::filesystem::path> weights;
  std::filesystem::path out_dir;

  // Applies augment_enabled to train.augment and validates every section.
  void finalize();
};

nlohmann::ordered_json to_json(const RunConfig& cfg);

// Missing keys keep their current values; wrong types or unknown keys raise
// ConfigError naming the field.
void merge_json(RunConfig& cfg, const nlohmann::json& j, const std::string& source);

RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const RunConfig& cfg, const std::filesystem::path& path);

}  // namespace retinet::cli
