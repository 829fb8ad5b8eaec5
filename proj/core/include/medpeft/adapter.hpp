#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "medpeft/nn.hpp"

namespace medpeft {

enum class AdapterVariant {
  Linear,    // two pointwise maps C -> d' -> C with activations
  ConvDw,    // pointwise down to d', depthwise k^3 on d', activation, pointwise up
  ConvNext,  // depthwise k^3 -> channel LayerNorm -> expand R*C -> GELU -> project
};

enum class Placement { Sequential, Parallel };

const char* to_string(AdapterVariant v) noexcept;
const char* to_string(Placement p) noexcept;
AdapterVariant adapter_variant_from_string(const std::string& s);
Placement placement_from_string(const std::string& s);

struct AdapterConfig {
  AdapterVariant variant = AdapterVariant::ConvNext;
  Placement placement = Placement::Sequential;
  double bottleneck_ratio = 0.25;  // d'/d, Linear and ConvDw only
  int expansion_ratio = 2;         // ConvNext only
  int kernel_size = 3;
  nn::ActivationKind activation = nn::ActivationKind::Gelu;
  bool zero_init_projection = true;
  uint64_t seed = 0x5eed;

  void validate() const;
  /// ceil(bottleneck_ratio * channels), at least 1.
  int64_t hidden_channels(int64_t channels) const;
};

/// The adapter branch alone: returns Adapter(f). The residual f + Adapter(f)
/// belongs to the attachment wrapper in the host block.
template <typename T>
class Adapter {
 public:
  Adapter(const AdapterConfig& cfg, int64_t channels, std::mt19937_64& rng);

  Tensor<T> forward(const Tensor<T>& f, bool training);
  Tensor<T> backward(const Tensor<T>& grad, bool need_input_grad);
  void collect(const std::string& prefix, nn::ParameterList<T>& out);

  const AdapterConfig& config() const { return cfg_; }
  int64_t channels() const { return channels_; }
  bool any_trainable();

  /// Parameter count from layer arithmetic, independent of any instance.
  static int64_t closed_form_parameter_count(const AdapterConfig& cfg, int64_t channels);

 private:
  AdapterConfig cfg_;
  int64_t channels_;
  // Linear: down=W1, up=W2. ConvDw: down, dw, up. ConvNext: dw=DC, norm=LN, down=EL, up=PL.
  nn::PointwiseConv3d<T> down_;
  nn::DepthwiseConv3d<T> dw_;
  nn::ChannelLayerNorm<T> norm_;
  nn::Activation<T> inner_act_;
  nn::PointwiseConv3d<T> up_;
  nn::Activation<T> outer_act_;
};

}  // namespace medpeft
