#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "medpeft/config_io.hpp"
#include "medpeft/synthetic_cohort.hpp"

namespace medpeft {

/// 64-bit FNV-1a.
uint64_t fnv1a64(const std::string& bytes);
std::string hex64(uint64_t v);

/// pretrain(source) -> evaluate(source test, shifted test) -> finetune(mode, shifted) -> evaluate(shifted test).
struct ExperimentSpec {
  uint64_t seed = 1;
  Dims3 shape{24, 24, 24};
  int n_source = 32;
  int n_shifted = 12;
  int n_source_test = 8;
  int n_shifted_test = 8;
  ShiftConfig shift;
  ModelConfig model = ModelConfig::tiny();
  AdapterConfig adapter;
  SiteSelector sites;
  bool train_head = true;
  bool train_norms = false;
  TrainConfig pretrain;
  TrainConfig finetune;
  std::vector<TrainMode> finetune_modes{TrainMode::FullFt, TrainMode::Peft};
  MetricConfig metrics;

  /// 24^3 volumes, 30 pretraining epochs, 100 fine-tuning epochs at lr 3e-3.
  static ExperimentSpec desk();
  /// 16^3, a handful of cases and epochs: exercises every stage quickly.
  static ExperimentSpec smoke();

  void validate() const;
  std::string to_json() const;
  static ExperimentSpec from_json(const std::string& text);
};

std::string run_label(TrainMode finetune_mode);  // "full_ft", "peft", "scratch"
inline constexpr const char* kZeroShotLabel = "no_ft";

struct StageRecord {
  std::string name;
  std::string key;
  std::filesystem::path dir;
  bool cached = false;
  double seconds = 0.0;
};

struct ExperimentResult {
  double source_dice = 0.0;     // pretrained model, held-out source cases
  double zero_shot_dice = 0.0;  // pretrained model, held-out shifted cases
  std::map<std::string, double> finetuned_dice;      // run label -> held-out shifted mean Dice
  std::map<std::string, double> trainable_fraction;  // run label -> fraction
  std::map<std::string, double> seconds_per_step;
  std::vector<StageRecord> stages;

  std::string to_json() const;
};

/// Runs (or reuses) every stage under out_dir:
///   cohorts/<name>-<key>/, stages/<stage>-<key>/, runs/<label>/metrics.{csv,json}, experiment.json
/// A stage whose directory holds a completion marker with the same key is skipped.
ExperimentResult run_experiment(const ExperimentSpec& spec, const std::filesystem::path& out_dir,
                                const std::function<void(const std::string&)>& log = {});

}  // namespace medpeft
