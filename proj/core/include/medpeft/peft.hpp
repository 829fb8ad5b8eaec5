#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "medpeft/checkpoint.hpp"
#include "medpeft/conv_adapter.hpp"

namespace medpeft {

enum class TrainMode { Scratch, FullFt, Peft };
const char* to_string(TrainMode m) noexcept;
TrainMode train_mode_from_string(const std::string& s);

struct FreezePolicy {
  TrainMode mode = TrainMode::Peft;
  bool train_head = true;    // PEFT only
  bool train_norms = false;  // PEFT only

  static FreezePolicy scratch() { return {TrainMode::Scratch, true, true}; }
  static FreezePolicy full_ft() { return {TrainMode::FullFt, true, true}; }
  static FreezePolicy peft(bool head = true, bool norms = false) { return {TrainMode::Peft, head, norms}; }

  /// Whether a parameter with this canonical name is trainable under the policy.
  bool trainable(const std::string& name) const;
};

struct TrainablePartition {
  TrainMode mode = TrainMode::Peft;
  std::vector<std::string> trainable_names;
  std::vector<std::string> frozen_names;
  int64_t trainable = 0;
  int64_t frozen = 0;
  int64_t total = 0;

  double trainable_fraction() const { return total == 0 ? 0.0 : static_cast<double>(trainable) / total; }
  /// {schema_version, mode, trainable, frozen, total, trainable_fraction}
  std::string to_json() const;
};

/// Sets Parameter::trainable on every tensor. PEFT on a model without
/// adapters raises NoAdaptersAttached.
template <typename T>
TrainablePartition apply_policy(PeftModel<T>& model, const FreezePolicy& policy);

struct FrozenTensorChange {
  std::string name;
  double max_abs_change = 0.0;
  bool identical = true;
};

struct FrozenCheckReport {
  std::vector<FrozenTensorChange> frozen;   // one row per frozen tensor
  std::vector<std::string> changed_trainable;
  bool passed = true;  // all frozen tensors bit-identical
};

/// Compares two state dicts of the same architecture tensor by tensor.
/// Different names or shapes raise ArchitectureMismatch.
FrozenCheckReport verify_frozen(const TrainablePartition& partition, const StateDict& before, const StateDict& after);

}  // namespace medpeft
