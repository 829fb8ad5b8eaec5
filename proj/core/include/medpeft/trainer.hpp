#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "medpeft/checkpoint.hpp"
#include "medpeft/metrics.hpp"
#include "medpeft/peft.hpp"
#include "medpeft/synthetic_cohort.hpp"
#include "medpeft/volume_io.hpp"

namespace medpeft {

// ---------------------------------------------------------------------------
// Loss

struct LossValue {
  double total = 0.0;
  double ce = 0.0;
  double dice = 0.0;  // 1 - mean soft Dice over foreground classes
};

inline constexpr double kDiceSmooth = 1e-5;

/// Channel k of the logits scores LabelClass k (BACKGROUND, NETC, SNFH, ET).
int class_channel(LabelClass c);

/// Mean voxel cross-entropy plus soft Dice loss, equally weighted. When `grad`
/// is given it receives d(total)/d(logits).
template <typename T>
LossValue composite_loss(const Tensor<T>& logits, const LabelMap& target, Tensor<T>* grad = nullptr);

/// Argmax over channels mapped back to the target's label values.
template <typename T>
LabelMap argmax_labels(const Tensor<T>& logits, const LabelSemantics& semantics = default_label_semantics());

// ---------------------------------------------------------------------------
// Optimisation

enum class LrSchedule { Cosine, Constant };
const char* to_string(LrSchedule s) noexcept;
LrSchedule lr_schedule_from_string(const std::string& s);

/// Learning rate for optimizer step `step` (0-based) of `total`.
double scheduled_lr(LrSchedule s, double base, int64_t step, int64_t total);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;
};

/// Decoupled weight decay Adam. Only the parameters handed in are ever touched.
class AdamW {
 public:
  AdamW(nn::ParameterList<float> params, const AdamWConfig& cfg = {});
  void step(double lr);
  int64_t steps() const { return t_; }
  const nn::ParameterList<float>& parameters() const { return params_; }

 private:
  nn::ParameterList<float> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  int epochs = 30;
  int batch_size = 2;
  double learning_rate = 1e-3;
  AdamWConfig adamw;
  LrSchedule schedule = LrSchedule::Cosine;
  uint64_t seed = 0;
  bool amp = false;  // accepted for config compatibility; training is float32 throughout
  bool augment = false;
  AugmentConfig augmentation;
  double validation_fraction = 0.2;
  double deep_supervision_weight = 0.5;

  static TrainConfig pretrain();  // lr 1e-3
  static TrainConfig finetune();  // lr 1e-4
  void validate() const;
};

struct Split {
  std::vector<int> train;
  std::vector<int> validation;
};
/// Last ceil(fraction * n) cases by index form the validation set (none when n == 1).
Split split_by_index(int n, double fraction);

inline constexpr int kRunRecordSchemaVersion = 1;

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_dice = 0.0;  // mean over validation cases and regions; training cases when no validation set
  double lr = 0.0;
  double seconds = 0.0;
};

struct RunRecord {
  int schema_version = kRunRecordSchemaVersion;
  std::string run_id;
  TrainMode mode = TrainMode::Scratch;
  double trainable_fraction = 0.0;
  int64_t trainable_parameters = 0;
  int64_t total_parameters = 0;
  int64_t steps = 0;
  double wall_seconds = 0.0;
  std::vector<EpochLog> epochs;
  int best_epoch = 0;
  double best_val_dice = 0.0;
  uint64_t seed = 0;

  std::vector<double> train_losses() const;
  double seconds_per_step() const { return steps == 0 ? 0.0 : wall_seconds / static_cast<double>(steps); }
  std::string to_json() const;
  static RunRecord from_json(const std::string& text);
};

struct TrainResult {
  RunRecord record;
  TrainablePartition partition;
  Checkpoint best;
  Checkpoint final;
};

struct TrainOptions {
  std::string run_id = "run";
  /// When set: best.ckpt, final.ckpt, run_record.json, epochs.jsonl,
  /// partition.json (and adapter.ckpt for PEFT) land here.
  std::optional<std::filesystem::path> out_dir;
  std::function<void(const EpochLog&)> on_epoch;
};

/// z-normalizes each image (foreground statistics) and checks label values.
std::vector<Case> prepare_cases(std::vector<Case> cases);

/// Applies `policy`, optimizes the trainable partition and returns the
/// best-validation and final checkpoints. NonFiniteLoss aborts the run.
TrainResult train(PeftModel<float>& model, const std::vector<Case>& cases, const TrainConfig& cfg,
                  const FreezePolicy& policy, const TrainOptions& opts = {});

/// Mean wall-clock seconds per optimizer step (forward, backward, update) on
/// `steps` batches drawn from `cases`, after one warm-up step. Parameters are
/// restored afterwards.
double measure_step_seconds(PeftModel<float>& model, const std::vector<Case>& cases, const FreezePolicy& policy,
                            int batch_size, int steps);

// ---------------------------------------------------------------------------
// Evaluation

LabelMap predict(PeftModel<float>& model, const Volume& image);

/// Full metrics for every case; the model is not modified.
MetricsReport evaluate(PeftModel<float>& model, const std::vector<Case>& cases, const MetricConfig& cfg = {},
                       const std::string& label = "");

/// Mean Dice over cases and the three regions, without surface metrics.
double mean_dice(PeftModel<float>& model, const std::vector<Case>& cases, const std::vector<int>& indices);

}  // namespace medpeft
