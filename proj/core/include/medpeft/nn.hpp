#pragma once

// Layers with explicit forward/backward for 3D feature maps of shape
// (C, X, Y, Z). One sample at a time: every normalisation here is per-sample,
// so a mini-batch is gradient accumulation over samples.
//
// forward() caches what backward() needs only when `training` is set.
// backward() accumulates parameter gradients for trainable parameters and
// returns the input gradient only when `need_input_grad` is set (otherwise an
// empty tensor).

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "medpeft/tensor.hpp"

namespace medpeft::nn {

template <typename T>
struct Parameter {
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  Parameter() = default;
  explicit Parameter(std::vector<int64_t> shape) : value(shape), grad(std::move(shape)) {}
  int64_t count() const { return value.size(); }
  void zero_grad() { grad.zero(); }
};

template <typename T>
struct NamedParameter {
  std::string name;
  Parameter<T>* param;
};

template <typename T>
using ParameterList = std::vector<NamedParameter<T>>;

/// Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename T>
void init_uniform(Tensor<T>& t, int64_t fan_in, std::mt19937_64& rng);

enum class ActivationKind { Gelu, Relu, Identity };

const char* to_string(ActivationKind a) noexcept;
ActivationKind activation_from_string(const std::string& s);

/// Depthwise k^3 convolution (groups == channels), zero padding k/2, stride 1 or 2.
/// Output extent: ceil(n / stride).
template <typename T>
class DepthwiseConv3d {
 public:
  DepthwiseConv3d() = default;
  DepthwiseConv3d(int64_t channels, int kernel, int stride);

  Tensor<T> forward(const Tensor<T>& x, bool training);
  Tensor<T> backward(const Tensor<T>& gy, bool need_input_grad);
  void collect(const std::string& prefix, ParameterList<T>& out);
  void init(std::mt19937_64& rng);

  Parameter<T> weight;  // (C, 1, k, k, k)
  Parameter<T> bias;    // (C)

 private:
  int64_t channels_ = 0;
  int kernel_ = 3;
  int stride_ = 1;
  Tensor<T> input_;
};

/// Transposed depthwise k^3 convolution with stride 2, padding k/2 and
/// output_padding 1, so each spatial extent doubles.
template <typename T>
class DepthwiseConvTranspose3d {
 public:
  DepthwiseConvTranspose3d() = default;
  DepthwiseConvTranspose3d(int64_t channels, int kernel);

  Tensor<T> forward(const Tensor<T>& x, bool training);
  Tensor<T> backward(const Tensor<T>& gy, bool need_input_grad);
  void collect(const std::string& prefix, ParameterList<T>& out);
  void init(std::mt19937_64& rng);

  Parameter<T> weight;  // (C, 1, k, k, k)
  Parameter<T> bias;    // (C)

 private:
  int64_t channels_ = 0;
  int kernel_ = 3;
  Tensor<T> input_;
};

/// 1x1x1 convolution. Stride 2 subsamples the even voxels (ceil(n/2) output).
template <typename T>
class PointwiseConv3d {
 public:
  PointwiseConv3d() = default;
  PointwiseConv3d(int64_t in_channels, int64_t out_channels, int stride = 1);

  Tensor<T> forward(const Tensor<T>& x, bool training);
  Tensor<T> backward(const Tensor<T>& gy, bool need_input_grad);
  void collect(const std::string& prefix, ParameterList<T>& out);
  void init(std::mt19937_64& rng);
  void zero_init();

  int64_t in_channels() const { return in_; }
  int64_t out_channels() const { return out_; }

  Parameter<T> weight;  // (out, in, 1, 1, 1)
  Parameter<T> bias;    // (out)

 private:
  int64_t in_ = 0;
  int64_t out_ = 0;
  int stride_ = 1;
  Dims3 input_dims_{};
  Tensor<T> input_;  // subsampled input when stride == 2
};

/// 1x1x1 transposed convolution, stride 2, output_padding 1: input voxel
/// (i,j,k) lands on (2i,2j,2k); odd positions carry only the bias.
template <typename T>
class PointwiseConvTranspose3d {
 public:
  PointwiseConvTranspose3d() = default;
  PointwiseConvTranspose3d(int64_t in_channels, int64_t out_channels);

  Tensor<T> forward(const Tensor<T>& x, bool training);
  Tensor<T> backward(const Tensor<T>& gy, bool need_input_grad);
  void collect(const std::string& prefix, ParameterList<T>& out);
  void init(std::mt19937_64& rng);

  Parameter<T> weight;  // (in, out, 1, 1, 1)
  Parameter<T> bias;    // (out)

 private:
  int64_t in_ = 0;
  int64_t out_ = 0;
  Tensor<T> input_;
};

/// GroupNorm over (channels in group) x (all voxels), affine per channel.
template <typename T>
class GroupNorm {
 public:
  GroupNorm() = default;
  GroupNorm(int64_t channels, int64_t groups, double eps = 1e-5);

  Tensor<T> forward(const Tensor<T>& x, bool training);
  Tensor<T> backward(const Tensor<T>& gy, bool need_input_grad);
  void collect(const std::string& prefix, ParameterList<T>& out);

  Parameter<T> gamma;  // (C)
  Parameter<T> beta;   // (C)

 private:
  int64_t channels_ = 0;
  int64_t groups_ = 1;
  double eps_ = 1e-5;
  Tensor<T> xhat_;
  std::vector<double> inv_std_;
};

/// LayerNorm across channels at every voxel, affine per channel.
template <typename T>
class ChannelLayerNorm {
 public:
  ChannelLayerNorm() = default;
  ChannelLayerNorm(int64_t channels, double eps = 1e-6);

  Tensor<T> forward(const Tensor<T>& x, bool training);
  Tensor<T> backward(const Tensor<T>& gy, bool need_input_grad);
  void collect(const std::string& prefix, ParameterList<T>& out);

  Parameter<T> gamma;
  Parameter<T> beta;

 private:
  int64_t channels_ = 0;
  double eps_ = 1e-6;
  Tensor<T> xhat_;
  std::vector<T> inv_std_;
};

template <typename T>
class Activation {
 public:
  explicit Activation(ActivationKind kind = ActivationKind::Gelu) : kind_(kind) {}
  Tensor<T> forward(const Tensor<T>& x, bool training);
  Tensor<T> backward(const Tensor<T>& gy, bool need_input_grad);

 private:
  ActivationKind kind_;
  Tensor<T> input_;
};

}  // namespace medpeft::nn
