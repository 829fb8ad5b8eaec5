#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "medpeft/adapter.hpp"
#include "medpeft/nn.hpp"

namespace medpeft {

struct ModelConfig {
  int64_t in_channels = 4;
  int64_t n_classes = 4;
  int64_t base_channels = 32;
  int kernel_size = 3;
  int expansion_ratio = 2;
  int blocks_per_stage = 2;
  int n_levels = 5;
  bool deep_supervision = false;
  int64_t norm_groups = 0;  // 0: one group per channel
  uint64_t seed = 42;

  /// MedNeXt-S: base 32, k 3, R 2, two blocks per stage, five resolution levels.
  static ModelConfig mednext_s() { return {}; }
  /// Desk-scale config used by the synthetic experiment.
  static ModelConfig tiny();

  void validate() const;
  int64_t width(int level) const { return base_channels << level; }
  /// Spatial dims of the input must be multiples of this.
  int64_t spatial_multiple() const { return int64_t{1} << (n_levels - 1); }
  int64_t groups_for(int64_t channels) const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class BlockKind { Basic, Down, Up };
const char* to_string(BlockKind k) noexcept;

struct BlockSpec {
  int64_t channels_in = 0;
  int64_t channels_out = 0;
  BlockKind kind = BlockKind::Basic;
  int expansion_ratio = 2;
  int kernel_size = 3;
  int64_t norm_groups = 0;

  void validate() const;
  /// Closed-form parameter count of the block without adapters.
  int64_t parameter_count() const;
};

/// dw -> GroupNorm -> expand (C -> R*C) -> GELU -> compress -> + residual.
/// Optionally hosts one adapter (sequential: g + A(g); parallel: g + A(x)).
template <typename T>
class MedNeXtBlock {
 public:
  MedNeXtBlock(const BlockSpec& spec, std::mt19937_64& rng);

  Tensor<T> forward(const Tensor<T>& x, bool training);
  Tensor<T> backward(const Tensor<T>& gy, bool need_input_grad);
  void collect(const std::string& backbone_prefix, const std::string& adapter_prefix, nn::ParameterList<T>& out);

  const BlockSpec& spec() const { return spec_; }

  void attach(const AdapterConfig& cfg, std::mt19937_64& rng);
  void detach() { adapter_.reset(); }
  bool has_adapter() const { return adapter_ != nullptr; }
  Adapter<T>* adapter() { return adapter_.get(); }

  /// Zeroes expand/compress so the block reduces to its residual path.
  void zero_inner();
  bool any_trainable();

 private:
  BlockSpec spec_;
  nn::DepthwiseConv3d<T> dw_;
  nn::DepthwiseConvTranspose3d<T> dw_up_;
  nn::GroupNorm<T> norm_;
  nn::PointwiseConv3d<T> expand_;
  nn::Activation<T> act_;
  nn::PointwiseConv3d<T> compress_;
  nn::PointwiseConv3d<T> res_down_;
  nn::PointwiseConvTranspose3d<T> res_up_;
  std::unique_ptr<Adapter<T>> adapter_;
  Placement placement_ = Placement::Sequential;

  Tensor<T> body_forward(const Tensor<T>& x, bool training);
  Tensor<T> body_backward(const Tensor<T>& gy, bool need_input_grad);
};

/// Additive-skip encoder/decoder. Block paths:
///   enc.<level>.<i>, down.<level>, up.<level>, dec.<level>.<i>
/// where enc.<n_levels-1>.* is the bottleneck and up.<l> maps level l+1 -> l.
template <typename T>
class MedNeXt {
 public:
  explicit MedNeXt(const ModelConfig& cfg);

  MedNeXt(const MedNeXt&) = delete;
  MedNeXt& operator=(const MedNeXt&) = delete;
  MedNeXt(MedNeXt&&) noexcept = default;
  MedNeXt& operator=(MedNeXt&&) noexcept = default;

  /// Logits at input resolution. With deep supervision and training set, the
  /// auxiliary logits (decoder levels 1..n_levels-2) land in aux_logits().
  Tensor<T> forward(const Tensor<T>& x, bool training);
  /// Accumulates parameter gradients. aux_grads pairs with aux_logits().
  void backward(const Tensor<T>& grad_logits, const std::vector<Tensor<T>>* aux_grads = nullptr);
  const std::vector<Tensor<T>>& aux_logits() const { return aux_; }

  /// backbone.<path>.<layer>.<param> and adapter.<path>.<layer>.<param>, in forward order.
  nn::ParameterList<T> named_parameters();
  void zero_grad();

  const ModelConfig& config() const { return cfg_; }
  std::vector<std::string> block_paths() const;
  MedNeXtBlock<T>& block(const std::string& path);
  bool has_block(const std::string& path) const;

 private:
  ModelConfig cfg_;
  nn::PointwiseConv3d<T> stem_;
  std::vector<std::vector<MedNeXtBlock<T>>> enc_;
  std::vector<MedNeXtBlock<T>> down_;
  std::vector<MedNeXtBlock<T>> up_;
  std::vector<std::vector<MedNeXtBlock<T>>> dec_;
  nn::PointwiseConv3d<T> head_;
  std::vector<nn::PointwiseConv3d<T>> ds_heads_;  // index l-1 for decoder level l
  std::vector<Tensor<T>> aux_;
  std::vector<Dims3> skip_dims_;
};

struct ParameterCount {
  int64_t total = 0;
  std::map<std::string, int64_t> by_submodule;  // parameter name minus "<layer>.<param>"

  int64_t backbone() const;
  int64_t adapters() const;
};

template <typename T>
ParameterCount count_parameters(MedNeXt<T>& model);

/// Closed-form backbone count from the config alone.
int64_t backbone_parameter_count(const ModelConfig& cfg);

/// Submodule key of a parameter name: everything before the last two components.
std::string submodule_of(const std::string& name);

}  // namespace medpeft
