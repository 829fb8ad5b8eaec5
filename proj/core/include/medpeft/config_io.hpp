#pragma once

#include <filesystem>
#include <string>

#include "medpeft/conv_adapter.hpp"
#include "medpeft/metrics.hpp"
#include "medpeft/peft.hpp"
#include "medpeft/trainer.hpp"

namespace medpeft {

inline constexpr int kConfigSchemaVersion = 1;

/// Everything a train/finetune/evaluate invocation reads from its config file.
/// Every section is optional; unknown keys raise SchemaMismatch.
///
///   {"schema_version": 1,
///    "model":   {"preset": "tiny", "base_channels": 8, ...},
///    "adapter": {"variant": "convnext", "placement": "sequential", ...},
///    "sites":   {"kind": "stage_outputs", "include_bottleneck": false, "paths": []},
///    "train":   {"epochs": 30, "batch_size": 2, "learning_rate": 0.001, ...},
///    "peft":    {"train_head": true, "train_norms": false},
///    "metrics": {"hd_penalty": 374, "min_lesion_size": 10, ...}}
struct RunConfig {
  ModelConfig model = ModelConfig::tiny();
  AdapterConfig adapter;
  SiteSelector sites;
  TrainConfig train;
  bool train_head = true;
  bool train_norms = false;
  MetricConfig metrics;

  FreezePolicy policy(TrainMode mode) const;
  std::string to_json() const;
  static RunConfig from_json(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
};

std::string model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const std::string& text);
std::string adapter_config_to_json(const AdapterConfig& c);
AdapterConfig adapter_config_from_json(const std::string& text);
std::string train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const std::string& text);

}  // namespace medpeft
