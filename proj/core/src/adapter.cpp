#include "medpeft/adapter.hpp"

#include <cmath>

namespace medpeft {

const char* to_string(AdapterVariant v) noexcept {
  switch (v) {
    case AdapterVariant::Linear: return "linear";
    case AdapterVariant::ConvDw: return "convdw";
    case AdapterVariant::ConvNext: return "convnext";
  }
  return "convnext";
}

const char* to_string(Placement p) noexcept {
  return p == Placement::Sequential ? "sequential" : "parallel";
}

AdapterVariant adapter_variant_from_string(const std::string& s) {
  if (s == "linear") return AdapterVariant::Linear;
  if (s == "convdw" || s == "conv_dw") return AdapterVariant::ConvDw;
  if (s == "convnext") return AdapterVariant::ConvNext;
  fail(ErrorKind::InvalidConfig, "unknown adapter variant '" + s + "'");
}

Placement placement_from_string(const std::string& s) {
  if (s == "sequential") return Placement::Sequential;
  if (s == "parallel") return Placement::Parallel;
  fail(ErrorKind::InvalidConfig, "unknown adapter placement '" + s + "'");
}

void AdapterConfig::validate() const {
  if (!(bottleneck_ratio > 0.0 && bottleneck_ratio <= 1.0)) {
    fail(ErrorKind::InvalidConfig, "bottleneck_ratio must lie in (0, 1]");
  }
  if (kernel_size < 1 || kernel_size % 2 == 0) fail(ErrorKind::InvalidConfig, "adapter kernel_size must be odd");
  if (expansion_ratio < 1) fail(ErrorKind::InvalidConfig, "adapter expansion_ratio must be >= 1");
}

int64_t AdapterConfig::hidden_channels(int64_t channels) const {
  return std::max<int64_t>(1, static_cast<int64_t>(std::ceil(bottleneck_ratio * static_cast<double>(channels) - 1e-9)));
}

template <typename T>
Adapter<T>::Adapter(const AdapterConfig& cfg, int64_t channels, std::mt19937_64& rng)
    : cfg_(cfg), channels_(channels), inner_act_(cfg.activation), outer_act_(cfg.activation) {
  cfg_.validate();
  const int k = cfg.kernel_size;
  switch (cfg.variant) {
    case AdapterVariant::Linear: {
      const int64_t h = cfg.hidden_channels(channels);
      down_ = nn::PointwiseConv3d<T>(channels, h);
      up_ = nn::PointwiseConv3d<T>(h, channels);
      down_.init(rng);
      up_.init(rng);
      break;
    }
    case AdapterVariant::ConvDw: {
      const int64_t h = cfg.hidden_channels(channels);
      down_ = nn::PointwiseConv3d<T>(channels, h);
      dw_ = nn::DepthwiseConv3d<T>(h, k, 1);
      up_ = nn::PointwiseConv3d<T>(h, channels);
      down_.init(rng);
      dw_.init(rng);
      up_.init(rng);
      break;
    }
    case AdapterVariant::ConvNext: {
      const int64_t wide = channels * cfg.expansion_ratio;
      dw_ = nn::DepthwiseConv3d<T>(channels, k, 1);
      norm_ = nn::ChannelLayerNorm<T>(channels);
      down_ = nn::PointwiseConv3d<T>(channels, wide);
      up_ = nn::PointwiseConv3d<T>(wide, channels);
      dw_.init(rng);
      down_.init(rng);
      up_.init(rng);
      break;
    }
  }
  if (cfg.zero_init_projection) up_.zero_init();
}

template <typename T>
Tensor<T> Adapter<T>::forward(const Tensor<T>& f, bool training) {
  if (f.rank() != 4 || f.channels() != channels_) {
    fail(ErrorKind::ChannelMismatch,
         "adapter built for " + std::to_string(channels_) + " channels got " + shape_string(f.shape()));
  }
  switch (cfg_.variant) {
    case AdapterVariant::Linear:
      return outer_act_.forward(up_.forward(inner_act_.forward(down_.forward(f, training), training), training),
                                training);
    case AdapterVariant::ConvDw:
      return up_.forward(inner_act_.forward(dw_.forward(down_.forward(f, training), training), training), training);
    case AdapterVariant::ConvNext:
      return up_.forward(
          inner_act_.forward(down_.forward(norm_.forward(dw_.forward(f, training), training), training), training),
          training);
  }
  return {};
}

template <typename T>
Tensor<T> Adapter<T>::backward(const Tensor<T>& grad, bool need_input_grad) {
  switch (cfg_.variant) {
    case AdapterVariant::Linear: {
      Tensor<T> g = outer_act_.backward(grad, true);
      g = up_.backward(g, true);
      g = inner_act_.backward(g, true);
      return down_.backward(g, need_input_grad);
    }
    case AdapterVariant::ConvDw: {
      Tensor<T> g = up_.backward(grad, true);
      g = inner_act_.backward(g, true);
      g = dw_.backward(g, true);
      return down_.backward(g, need_input_grad);
    }
    case AdapterVariant::ConvNext: {
      Tensor<T> g = up_.backward(grad, true);
      g = inner_act_.backward(g, true);
      g = down_.backward(g, true);
      g = norm_.backward(g, true);
      return dw_.backward(g, need_input_grad);
    }
  }
  return {};
}

template <typename T>
void Adapter<T>::collect(const std::string& prefix, nn::ParameterList<T>& out) {
  switch (cfg_.variant) {
    case AdapterVariant::Linear:
      down_.collect(prefix + "w1.", out);
      up_.collect(prefix + "w2.", out);
      break;
    case AdapterVariant::ConvDw:
      down_.collect(prefix + "down.", out);
      dw_.collect(prefix + "dw.", out);
      up_.collect(prefix + "up.", out);
      break;
    case AdapterVariant::ConvNext:
      dw_.collect(prefix + "dc.", out);
      norm_.collect(prefix + "ln.", out);
      down_.collect(prefix + "el.", out);
      up_.collect(prefix + "pl.", out);
      break;
  }
}

template <typename T>
bool Adapter<T>::any_trainable() {
  nn::ParameterList<T> params;
  collect("", params);
  for (const auto& p : params) {
    if (p.param->trainable) return true;
  }
  return false;
}

template <typename T>
int64_t Adapter<T>::closed_form_parameter_count(const AdapterConfig& cfg, int64_t c) {
  const int64_t k3 = static_cast<int64_t>(cfg.kernel_size) * cfg.kernel_size * cfg.kernel_size;
  switch (cfg.variant) {
    case AdapterVariant::Linear: {
      const int64_t h = cfg.hidden_channels(c);
      return (c * h + h) + (h * c + c);
    }
    case AdapterVariant::ConvDw: {
      const int64_t h = cfg.hidden_channels(c);
      return (c * h + h) + (h * k3 + h) + (h * c + c);
    }
    case AdapterVariant::ConvNext: {
      const int64_t w = c * cfg.expansion_ratio;
      return (c * k3 + c) + 2 * c + (c * w + w) + (w * c + c);
    }
  }
  return 0;
}

template class Adapter<float>;
template class Adapter<double>;

}  // namespace medpeft
