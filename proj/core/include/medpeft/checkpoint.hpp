#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "medpeft/conv_adapter.hpp"

namespace medpeft {

inline constexpr int kCheckpointFormatVersion = 1;

/// Parameter tensors keyed by canonical name, always float32 on disk.
using StateDict = std::map<std::string, Tensor<float>>;

enum class CheckpointContents { Full, AdapterOnly };
const char* to_string(CheckpointContents c) noexcept;

struct CheckpointManifest {
  int format_version = kCheckpointFormatVersion;
  ModelConfig model;
  bool has_adapters = false;
  AdapterConfig adapter;
  std::vector<std::string> sites;
  CheckpointContents contents = CheckpointContents::Full;
  int64_t parameter_count = 0;  // tensors in this file
  std::string dtype = "float32";
};

struct Checkpoint {
  CheckpointManifest manifest;
  StateDict tensors;
};

template <typename T>
StateDict state_dict(PeftModel<T>& model);

/// Copies tensors into the model by name. Every tensor must exist with a
/// matching shape (ArchitectureMismatch otherwise); with `complete` set every
/// model parameter must also be covered.
template <typename T>
void load_state_dict(PeftModel<T>& model, const StateDict& sd, bool complete = true);

template <typename T>
Checkpoint make_checkpoint(PeftModel<T>& model, CheckpointContents contents = CheckpointContents::Full);

/// Binary layout: "MEDPEFT\0", u32 version, u64 manifest bytes, manifest JSON,
/// then per tensor: u32 name length, name, u32 rank, i64 dims, float32 data.
/// Little-endian throughout.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Rebuilds architecture (and adapters) from a full checkpoint and loads its weights.
PeftModel<float> build_model(const Checkpoint& ckpt);

/// Layers a checkpoint onto an existing model. An adapter-only checkpoint
/// attaches its adapters first when the model has none. Config mismatches
/// raise ArchitectureMismatch.
void apply_checkpoint(PeftModel<float>& model, const Checkpoint& ckpt);

}  // namespace medpeft
