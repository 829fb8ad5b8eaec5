#include "medpeft/nn.hpp"

#include <Eigen/Core>
#include <cmath>
#include <numbers>

namespace medpeft::nn {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

int64_t strided_extent(int64_t n, int kernel, int stride) {
  const int pad = kernel / 2;
  return (n + 2 * pad - kernel) / stride + 1;
}

Dims3 strided_dims(const Dims3& d, int kernel, int stride) {
  return {strided_extent(d.x, kernel, stride), strided_extent(d.y, kernel, stride), strided_extent(d.z, kernel, stride)};
}

// Valid output range [lo, hi) along one axis for kernel tap `t`, so that the
// big-grid index o * stride - pad + t stays inside [0, big).
inline void tap_range(int64_t big, int64_t small, int t, int pad, int stride, int64_t& lo, int64_t& hi) {
  const int64_t shift = static_cast<int64_t>(t) - pad;
  lo = shift >= 0 ? 0 : (-shift + stride - 1) / stride;
  hi = std::min<int64_t>(small, (big - 1 - shift) / stride + 1);
  if (big - 1 - shift < 0) hi = 0;
}

// The three depthwise kernels below share one geometry: a big grid (size nb)
// and a small grid (size ns) related by big = small * stride - pad + tap.

// small[o] += sum_t w[t] * big[o*s - p + t]
template <typename T>
void dw_correlate(const T* big, const Dims3& nb, T* small, const Dims3& ns, const T* w, int k, int s) {
  const int p = k / 2;
  for (int kx = 0; kx < k; ++kx) {
    int64_t xlo, xhi;
    tap_range(nb.x, ns.x, kx, p, s, xlo, xhi);
    for (int ky = 0; ky < k; ++ky) {
      int64_t ylo, yhi;
      tap_range(nb.y, ns.y, ky, p, s, ylo, yhi);
      for (int kz = 0; kz < k; ++kz) {
        int64_t zlo, zhi;
        tap_range(nb.z, ns.z, kz, p, s, zlo, zhi);
        const T wv = w[(kx * k + ky) * k + kz];
        for (int64_t ox = xlo; ox < xhi; ++ox) {
          const int64_t ix = ox * s - p + kx;
          for (int64_t oy = ylo; oy < yhi; ++oy) {
            const int64_t iy = oy * s - p + ky;
            const T* brow = big + (ix * nb.y + iy) * nb.z + (kz - p);
            T* srow = small + (ox * ns.y + oy) * ns.z;
            if (s == 1) {
              for (int64_t oz = zlo; oz < zhi; ++oz) srow[oz] += wv * brow[oz];
            } else {
              for (int64_t oz = zlo; oz < zhi; ++oz) srow[oz] += wv * brow[oz * s];
            }
          }
        }
      }
    }
  }
}

// big[o*s - p + t] += w[t] * small[o]   (adjoint of dw_correlate)
template <typename T>
void dw_scatter(T* big, const Dims3& nb, const T* small, const Dims3& ns, const T* w, int k, int s) {
  const int p = k / 2;
  for (int kx = 0; kx < k; ++kx) {
    int64_t xlo, xhi;
    tap_range(nb.x, ns.x, kx, p, s, xlo, xhi);
    for (int ky = 0; ky < k; ++ky) {
      int64_t ylo, yhi;
      tap_range(nb.y, ns.y, ky, p, s, ylo, yhi);
      for (int kz = 0; kz < k; ++kz) {
        int64_t zlo, zhi;
        tap_range(nb.z, ns.z, kz, p, s, zlo, zhi);
        const T wv = w[(kx * k + ky) * k + kz];
        for (int64_t ox = xlo; ox < xhi; ++ox) {
          const int64_t ix = ox * s - p + kx;
          for (int64_t oy = ylo; oy < yhi; ++oy) {
            const int64_t iy = oy * s - p + ky;
            T* brow = big + (ix * nb.y + iy) * nb.z + (kz - p);
            const T* srow = small + (ox * ns.y + oy) * ns.z;
            if (s == 1) {
              for (int64_t oz = zlo; oz < zhi; ++oz) brow[oz] += wv * srow[oz];
            } else {
              for (int64_t oz = zlo; oz < zhi; ++oz) brow[oz * s] += wv * srow[oz];
            }
          }
        }
      }
    }
  }
}

// gw[t] += sum_o big[o*s - p + t] * small[o]
template <typename T>
void dw_weight_grad(const T* big, const Dims3& nb, const T* small, const Dims3& ns, T* gw, int k, int s) {
  const int p = k / 2;
  for (int kx = 0; kx < k; ++kx) {
    int64_t xlo, xhi;
    tap_range(nb.x, ns.x, kx, p, s, xlo, xhi);
    for (int ky = 0; ky < k; ++ky) {
      int64_t ylo, yhi;
      tap_range(nb.y, ns.y, ky, p, s, ylo, yhi);
      for (int kz = 0; kz < k; ++kz) {
        int64_t zlo, zhi;
        tap_range(nb.z, ns.z, kz, p, s, zlo, zhi);
        T acc = 0;
        for (int64_t ox = xlo; ox < xhi; ++ox) {
          const int64_t ix = ox * s - p + kx;
          for (int64_t oy = ylo; oy < yhi; ++oy) {
            const int64_t iy = oy * s - p + ky;
            const T* brow = big + (ix * nb.y + iy) * nb.z + (kz - p);
            const T* srow = small + (ox * ns.y + oy) * ns.z;
            if (s == 1) {
              for (int64_t oz = zlo; oz < zhi; ++oz) acc += brow[oz] * srow[oz];
            } else {
              for (int64_t oz = zlo; oz < zhi; ++oz) acc += brow[oz * s] * srow[oz];
            }
          }
        }
        gw[(kx * k + ky) * k + kz] += acc;
      }
    }
  }
}

template <typename T>
void add_channel_bias(Tensor<T>& y, const Tensor<T>& bias) {
  const int64_t n = y.voxels();
  for (int64_t c = 0; c < y.channels(); ++c) {
    T* p = y.data() + c * n;
    const T b = bias[c];
    for (int64_t i = 0; i < n; ++i) p[i] += b;
  }
}

template <typename T>
void accumulate_channel_sums(const Tensor<T>& gy, Tensor<T>& gbias) {
  const int64_t n = gy.voxels();
  for (int64_t c = 0; c < gy.channels(); ++c) {
    const T* p = gy.data() + c * n;
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) acc += p[i];
    gbias[c] += static_cast<T>(acc);
  }
}

template <typename T>
void check_channels(const Tensor<T>& x, int64_t expected, const char* layer) {
  if (x.rank() != 4 || x.channels() != expected) {
    fail(ErrorKind::ChannelMismatch, std::string(layer) + " expects " + std::to_string(expected) + " channels, got " +
                                         (x.rank() == 4 ? std::to_string(x.channels()) : shape_string(x.shape())));
  }
}

Dims3 even_subsample_dims(const Dims3& d) { return {(d.x + 1) / 2, (d.y + 1) / 2, (d.z + 1) / 2}; }

template <typename T>
T gelu(T x) {
  return static_cast<T>(0.5) * x * (static_cast<T>(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = static_cast<T>(0.5) * (static_cast<T>(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(static_cast<T>(-0.5) * x * x) * static_cast<T>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + x * pdf;
}

}  // namespace

const char* to_string(ActivationKind a) noexcept {
  switch (a) {
    case ActivationKind::Gelu: return "gelu";
    case ActivationKind::Relu: return "relu";
    case ActivationKind::Identity: return "identity";
  }
  return "gelu";
}

ActivationKind activation_from_string(const std::string& s) {
  if (s == "gelu") return ActivationKind::Gelu;
  if (s == "relu") return ActivationKind::Relu;
  if (s == "identity") return ActivationKind::Identity;
  fail(ErrorKind::InvalidConfig, "unknown activation '" + s + "'");
}

template <typename T>
void init_uniform(Tensor<T>& t, int64_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<int64_t>(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
}

// ---------------------------------------------------------------------------
// DepthwiseConv3d

template <typename T>
DepthwiseConv3d<T>::DepthwiseConv3d(int64_t channels, int kernel, int stride)
    : weight({channels, 1, kernel, kernel, kernel}), bias({channels}), channels_(channels), kernel_(kernel), stride_(stride) {
  if (kernel % 2 == 0 || kernel < 1) fail(ErrorKind::InvalidConfig, "kernel size must be odd");
  if (stride != 1 && stride != 2) fail(ErrorKind::InvalidConfig, "stride must be 1 or 2");
}

template <typename T>
void DepthwiseConv3d<T>::init(std::mt19937_64& rng) {
  const int64_t fan_in = static_cast<int64_t>(kernel_) * kernel_ * kernel_;
  init_uniform(weight.value, fan_in, rng);
  init_uniform(bias.value, fan_in, rng);
}

template <typename T>
Tensor<T> DepthwiseConv3d<T>::forward(const Tensor<T>& x, bool training) {
  check_channels(x, channels_, "DepthwiseConv3d");
  const Dims3 nb = x.spatial();
  const Dims3 ns = strided_dims(nb, kernel_, stride_);
  Tensor<T> y = Tensor<T>::feature_map(channels_, ns);
  const int64_t k3 = static_cast<int64_t>(kernel_) * kernel_ * kernel_;
  for (int64_t c = 0; c < channels_; ++c) {
    dw_correlate(x.data() + c * nb.voxels(), nb, y.data() + c * ns.voxels(), ns, weight.value.data() + c * k3, kernel_,
                 stride_);
  }
  add_channel_bias(y, bias.value);
  if (training) input_ = x;
  return y;
}

template <typename T>
Tensor<T> DepthwiseConv3d<T>::backward(const Tensor<T>& gy, bool need_input_grad) {
  const Dims3 nb = input_.spatial();
  const Dims3 ns = gy.spatial();
  const int64_t k3 = static_cast<int64_t>(kernel_) * kernel_ * kernel_;
  if (weight.trainable) {
    for (int64_t c = 0; c < channels_; ++c) {
      dw_weight_grad(input_.data() + c * nb.voxels(), nb, gy.data() + c * ns.voxels(), ns, weight.grad.data() + c * k3,
                     kernel_, stride_);
    }
  }
  if (bias.trainable) accumulate_channel_sums(gy, bias.grad);
  Tensor<T> gx;
  if (need_input_grad) {
    gx = Tensor<T>::feature_map(channels_, nb);
    for (int64_t c = 0; c < channels_; ++c) {
      dw_scatter(gx.data() + c * nb.voxels(), nb, gy.data() + c * ns.voxels(), ns, weight.value.data() + c * k3, kernel_,
                 stride_);
    }
  }
  return gx;
}

template <typename T>
void DepthwiseConv3d<T>::collect(const std::string& prefix, ParameterList<T>& out) {
  out.push_back({prefix + "weight", &weight});
  out.push_back({prefix + "bias", &bias});
}

// ---------------------------------------------------------------------------
// DepthwiseConvTranspose3d

template <typename T>
DepthwiseConvTranspose3d<T>::DepthwiseConvTranspose3d(int64_t channels, int kernel)
    : weight({channels, 1, kernel, kernel, kernel}), bias({channels}), channels_(channels), kernel_(kernel) {
  if (kernel % 2 == 0 || kernel < 1) fail(ErrorKind::InvalidConfig, "kernel size must be odd");
}

template <typename T>
void DepthwiseConvTranspose3d<T>::init(std::mt19937_64& rng) {
  const int64_t fan_in = static_cast<int64_t>(kernel_) * kernel_ * kernel_;
  init_uniform(weight.value, fan_in, rng);
  init_uniform(bias.value, fan_in, rng);
}

template <typename T>
Tensor<T> DepthwiseConvTranspose3d<T>::forward(const Tensor<T>& x, bool training) {
  check_channels(x, channels_, "DepthwiseConvTranspose3d");
  const Dims3 ns = x.spatial();
  const Dims3 nb{2 * ns.x, 2 * ns.y, 2 * ns.z};
  Tensor<T> y = Tensor<T>::feature_map(channels_, nb);
  const int64_t k3 = static_cast<int64_t>(kernel_) * kernel_ * kernel_;
  for (int64_t c = 0; c < channels_; ++c) {
    dw_scatter(y.data() + c * nb.voxels(), nb, x.data() + c * ns.voxels(), ns, weight.value.data() + c * k3, kernel_, 2);
  }
  add_channel_bias(y, bias.value);
  if (training) input_ = x;
  return y;
}

template <typename T>
Tensor<T> DepthwiseConvTranspose3d<T>::backward(const Tensor<T>& gy, bool need_input_grad) {
  const Dims3 ns = input_.spatial();
  const Dims3 nb = gy.spatial();
  const int64_t k3 = static_cast<int64_t>(kernel_) * kernel_ * kernel_;
  if (weight.trainable) {
    for (int64_t c = 0; c < channels_; ++c) {
      dw_weight_grad(gy.data() + c * nb.voxels(), nb, input_.data() + c * ns.voxels(), ns, weight.grad.data() + c * k3,
                     kernel_, 2);
    }
  }
  if (bias.trainable) accumulate_channel_sums(gy, bias.grad);
  Tensor<T> gx;
  if (need_input_grad) {
    gx = Tensor<T>::feature_map(channels_, ns);
    for (int64_t c = 0; c < channels_; ++c) {
      dw_correlate(gy.data() + c * nb.voxels(), nb, gx.data() + c * ns.voxels(), ns, weight.value.data() + c * k3,
                   kernel_, 2);
    }
  }
  return gx;
}

template <typename T>
void DepthwiseConvTranspose3d<T>::collect(const std::string& prefix, ParameterList<T>& out) {
  out.push_back({prefix + "weight", &weight});
  out.push_back({prefix + "bias", &bias});
}

// ---------------------------------------------------------------------------
// PointwiseConv3d

template <typename T>
PointwiseConv3d<T>::PointwiseConv3d(int64_t in_channels, int64_t out_channels, int stride)
    : weight({out_channels, in_channels, 1, 1, 1}), bias({out_channels}), in_(in_channels), out_(out_channels),
      stride_(stride) {
  if (stride != 1 && stride != 2) fail(ErrorKind::InvalidConfig, "stride must be 1 or 2");
}

template <typename T>
void PointwiseConv3d<T>::init(std::mt19937_64& rng) {
  init_uniform(weight.value, in_, rng);
  init_uniform(bias.value, in_, rng);
}

template <typename T>
void PointwiseConv3d<T>::zero_init() {
  weight.value.zero();
  bias.value.zero();
}

template <typename T>
Tensor<T> PointwiseConv3d<T>::forward(const Tensor<T>& x, bool training) {
  check_channels(x, in_, "PointwiseConv3d");
  input_dims_ = x.spatial();
  Tensor<T> sub;
  const Tensor<T>* src = &x;
  if (stride_ == 2) {
    const Dims3 nd = input_dims_;
    const Dims3 sd = even_subsample_dims(nd);
    sub = Tensor<T>::feature_map(in_, sd);
    for (int64_t c = 0; c < in_; ++c)
      for (int64_t i = 0; i < sd.x; ++i)
        for (int64_t j = 0; j < sd.y; ++j)
          for (int64_t k = 0; k < sd.z; ++k) sub.at(c, i, j, k) = x.at(c, 2 * i, 2 * j, 2 * k);
    src = &sub;
  }
  const Dims3 od = src->spatial();
  const int64_t n = od.voxels();
  Tensor<T> y = Tensor<T>::feature_map(out_, od);
  MapMat<T> ym(y.data(), out_, n);
  ym.noalias() = CMapMat<T>(weight.value.data(), out_, in_) * CMapMat<T>(src->data(), in_, n);
  add_channel_bias(y, bias.value);
  if (training) input_ = stride_ == 2 ? std::move(sub) : x;
  return y;
}

template <typename T>
Tensor<T> PointwiseConv3d<T>::backward(const Tensor<T>& gy, bool need_input_grad) {
  const Dims3 od = gy.spatial();
  const int64_t n = od.voxels();
  CMapMat<T> g(gy.data(), out_, n);
  if (weight.trainable) {
    MapMat<T>(weight.grad.data(), out_, in_).noalias() += g * CMapMat<T>(input_.data(), in_, n).transpose();
  }
  if (bias.trainable) accumulate_channel_sums(gy, bias.grad);
  Tensor<T> gx;
  if (!need_input_grad) return gx;
  Tensor<T> gsub = Tensor<T>::feature_map(in_, od);
  MapMat<T>(gsub.data(), in_, n).noalias() = CMapMat<T>(weight.value.data(), out_, in_).transpose() * g;
  if (stride_ == 1) return gsub;
  gx = Tensor<T>::feature_map(in_, input_dims_);
  for (int64_t c = 0; c < in_; ++c)
    for (int64_t i = 0; i < od.x; ++i)
      for (int64_t j = 0; j < od.y; ++j)
        for (int64_t k = 0; k < od.z; ++k) gx.at(c, 2 * i, 2 * j, 2 * k) = gsub.at(c, i, j, k);
  return gx;
}

template <typename T>
void PointwiseConv3d<T>::collect(const std::string& prefix, ParameterList<T>& out) {
  out.push_back({prefix + "weight", &weight});
  out.push_back({prefix + "bias", &bias});
}

// ---------------------------------------------------------------------------
// PointwiseConvTranspose3d

template <typename T>
PointwiseConvTranspose3d<T>::PointwiseConvTranspose3d(int64_t in_channels, int64_t out_channels)
    : weight({in_channels, out_channels, 1, 1, 1}), bias({out_channels}), in_(in_channels), out_(out_channels) {}

template <typename T>
void PointwiseConvTranspose3d<T>::init(std::mt19937_64& rng) {
  init_uniform(weight.value, in_, rng);
  init_uniform(bias.value, in_, rng);
}

template <typename T>
Tensor<T> PointwiseConvTranspose3d<T>::forward(const Tensor<T>& x, bool training) {
  check_channels(x, in_, "PointwiseConvTranspose3d");
  const Dims3 sd = x.spatial();
  const int64_t n = sd.voxels();
  Tensor<T> small = Tensor<T>::feature_map(out_, sd);
  MapMat<T>(small.data(), out_, n).noalias() =
      CMapMat<T>(weight.value.data(), in_, out_).transpose() * CMapMat<T>(x.data(), in_, n);
  const Dims3 bd{2 * sd.x, 2 * sd.y, 2 * sd.z};
  Tensor<T> y = Tensor<T>::feature_map(out_, bd);
  for (int64_t c = 0; c < out_; ++c)
    for (int64_t i = 0; i < sd.x; ++i)
      for (int64_t j = 0; j < sd.y; ++j)
        for (int64_t k = 0; k < sd.z; ++k) y.at(c, 2 * i, 2 * j, 2 * k) = small.at(c, i, j, k);
  add_channel_bias(y, bias.value);
  if (training) input_ = x;
  return y;
}

template <typename T>
Tensor<T> PointwiseConvTranspose3d<T>::backward(const Tensor<T>& gy, bool need_input_grad) {
  const Dims3 sd = input_.spatial();
  const int64_t n = sd.voxels();
  Tensor<T> gsmall = Tensor<T>::feature_map(out_, sd);
  for (int64_t c = 0; c < out_; ++c)
    for (int64_t i = 0; i < sd.x; ++i)
      for (int64_t j = 0; j < sd.y; ++j)
        for (int64_t k = 0; k < sd.z; ++k) gsmall.at(c, i, j, k) = gy.at(c, 2 * i, 2 * j, 2 * k);
  CMapMat<T> g(gsmall.data(), out_, n);
  if (weight.trainable) {
    MapMat<T>(weight.grad.data(), in_, out_).noalias() += CMapMat<T>(input_.data(), in_, n) * g.transpose();
  }
  if (bias.trainable) accumulate_channel_sums(gy, bias.grad);
  Tensor<T> gx;
  if (need_input_grad) {
    gx = Tensor<T>::feature_map(in_, sd);
    MapMat<T>(gx.data(), in_, n).noalias() = CMapMat<T>(weight.value.data(), in_, out_) * g;
  }
  return gx;
}

template <typename T>
void PointwiseConvTranspose3d<T>::collect(const std::string& prefix, ParameterList<T>& out) {
  out.push_back({prefix + "weight", &weight});
  out.push_back({prefix + "bias", &bias});
}

// ---------------------------------------------------------------------------
// GroupNorm

template <typename T>
GroupNorm<T>::GroupNorm(int64_t channels, int64_t groups, double eps)
    : gamma({channels}), beta({channels}), channels_(channels), groups_(groups), eps_(eps) {
  if (groups < 1 || channels % groups != 0) {
    fail(ErrorKind::InvalidConfig, "GroupNorm groups must divide channels");
  }
  gamma.value.fill(T(1));
}

template <typename T>
Tensor<T> GroupNorm<T>::forward(const Tensor<T>& x, bool training) {
  check_channels(x, channels_, "GroupNorm");
  const int64_t n = x.voxels();
  const int64_t per = channels_ / groups_;
  Tensor<T> y(x.shape());
  Tensor<T> xhat;
  if (training) {
    xhat = Tensor<T>(x.shape());
    inv_std_.assign(static_cast<size_t>(groups_), 0.0);
  }
  for (int64_t g = 0; g < groups_; ++g) {
    const T* src = x.data() + g * per * n;
    const int64_t count = per * n;
    double sum = 0.0;
    for (int64_t i = 0; i < count; ++i) sum += src[i];
    const double mean = sum / static_cast<double>(count);
    double sq = 0.0;
    for (int64_t i = 0; i < count; ++i) {
      const double d = src[i] - mean;
      sq += d * d;
    }
    const double inv = 1.0 / std::sqrt(sq / static_cast<double>(count) + eps_);
    if (training) inv_std_[static_cast<size_t>(g)] = inv;
    for (int64_t c = g * per; c < (g + 1) * per; ++c) {
      const T ga = gamma.value[c], be = beta.value[c];
      const T* xs = x.data() + c * n;
      T* ys = y.data() + c * n;
      T* hs = training ? xhat.data() + c * n : nullptr;
      const T m = static_cast<T>(mean), is = static_cast<T>(inv);
      for (int64_t i = 0; i < n; ++i) {
        const T h = (xs[i] - m) * is;
        if (hs) hs[i] = h;
        ys[i] = h * ga + be;
      }
    }
  }
  if (training) xhat_ = std::move(xhat);
  return y;
}

template <typename T>
Tensor<T> GroupNorm<T>::backward(const Tensor<T>& gy, bool need_input_grad) {
  const int64_t n = gy.voxels();
  const int64_t per = channels_ / groups_;
  for (int64_t c = 0; c < channels_; ++c) {
    const T* g = gy.data() + c * n;
    const T* h = xhat_.data() + c * n;
    double dg = 0.0, db = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      dg += static_cast<double>(g[i]) * h[i];
      db += g[i];
    }
    if (gamma.trainable) gamma.grad[c] += static_cast<T>(dg);
    if (beta.trainable) beta.grad[c] += static_cast<T>(db);
  }
  Tensor<T> gx;
  if (!need_input_grad) return gx;
  gx = Tensor<T>(gy.shape());
  for (int64_t grp = 0; grp < groups_; ++grp) {
    const int64_t count = per * n;
    double m1 = 0.0, m2 = 0.0;
    for (int64_t c = grp * per; c < (grp + 1) * per; ++c) {
      const T ga = gamma.value[c];
      const T* g = gy.data() + c * n;
      const T* h = xhat_.data() + c * n;
      for (int64_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(g[i]) * ga;
        m1 += d;
        m2 += d * h[i];
      }
    }
    m1 /= static_cast<double>(count);
    m2 /= static_cast<double>(count);
    const T inv = static_cast<T>(inv_std_[static_cast<size_t>(grp)]);
    const T tm1 = static_cast<T>(m1), tm2 = static_cast<T>(m2);
    for (int64_t c = grp * per; c < (grp + 1) * per; ++c) {
      const T ga = gamma.value[c];
      const T* g = gy.data() + c * n;
      const T* h = xhat_.data() + c * n;
      T* o = gx.data() + c * n;
      for (int64_t i = 0; i < n; ++i) o[i] = inv * (g[i] * ga - tm1 - h[i] * tm2);
    }
  }
  return gx;
}

template <typename T>
void GroupNorm<T>::collect(const std::string& prefix, ParameterList<T>& out) {
  out.push_back({prefix + "weight", &gamma});
  out.push_back({prefix + "bias", &beta});
}

// ---------------------------------------------------------------------------
// ChannelLayerNorm

template <typename T>
ChannelLayerNorm<T>::ChannelLayerNorm(int64_t channels, double eps)
    : gamma({channels}), beta({channels}), channels_(channels), eps_(eps) {
  gamma.value.fill(T(1));
}

template <typename T>
Tensor<T> ChannelLayerNorm<T>::forward(const Tensor<T>& x, bool training) {
  check_channels(x, channels_, "ChannelLayerNorm");
  const int64_t n = x.voxels();
  const T inv_c = static_cast<T>(1.0 / static_cast<double>(channels_));
  std::vector<T> mean(static_cast<size_t>(n), T(0)), var(static_cast<size_t>(n), T(0));
  for (int64_t c = 0; c < channels_; ++c) {
    const T* xs = x.data() + c * n;
    for (int64_t i = 0; i < n; ++i) mean[static_cast<size_t>(i)] += xs[i];
  }
  for (auto& m : mean) m *= inv_c;
  for (int64_t c = 0; c < channels_; ++c) {
    const T* xs = x.data() + c * n;
    for (int64_t i = 0; i < n; ++i) {
      const T d = xs[i] - mean[static_cast<size_t>(i)];
      var[static_cast<size_t>(i)] += d * d;
    }
  }
  for (auto& v : var) v = static_cast<T>(1) / std::sqrt(v * inv_c + static_cast<T>(eps_));  // now inverse std
  Tensor<T> y(x.shape());
  Tensor<T> xhat;
  if (training) xhat = Tensor<T>(x.shape());
  for (int64_t c = 0; c < channels_; ++c) {
    const T ga = gamma.value[c], be = beta.value[c];
    const T* xs = x.data() + c * n;
    T* ys = y.data() + c * n;
    T* hs = training ? xhat.data() + c * n : nullptr;
    for (int64_t i = 0; i < n; ++i) {
      const T h = (xs[i] - mean[static_cast<size_t>(i)]) * var[static_cast<size_t>(i)];
      if (hs) hs[i] = h;
      ys[i] = h * ga + be;
    }
  }
  if (training) {
    xhat_ = std::move(xhat);
    inv_std_ = std::move(var);
  }
  return y;
}

template <typename T>
Tensor<T> ChannelLayerNorm<T>::backward(const Tensor<T>& gy, bool need_input_grad) {
  const int64_t n = gy.voxels();
  for (int64_t c = 0; c < channels_; ++c) {
    const T* g = gy.data() + c * n;
    const T* h = xhat_.data() + c * n;
    double dg = 0.0, db = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      dg += static_cast<double>(g[i]) * h[i];
      db += g[i];
    }
    if (gamma.trainable) gamma.grad[c] += static_cast<T>(dg);
    if (beta.trainable) beta.grad[c] += static_cast<T>(db);
  }
  Tensor<T> gx;
  if (!need_input_grad) return gx;
  const T inv_c = static_cast<T>(1.0 / static_cast<double>(channels_));
  std::vector<T> m1(static_cast<size_t>(n), T(0)), m2(static_cast<size_t>(n), T(0));
  for (int64_t c = 0; c < channels_; ++c) {
    const T ga = gamma.value[c];
    const T* g = gy.data() + c * n;
    const T* h = xhat_.data() + c * n;
    for (int64_t i = 0; i < n; ++i) {
      const T d = g[i] * ga;
      m1[static_cast<size_t>(i)] += d;
      m2[static_cast<size_t>(i)] += d * h[i];
    }
  }
  gx = Tensor<T>(gy.shape());
  for (int64_t c = 0; c < channels_; ++c) {
    const T ga = gamma.value[c];
    const T* g = gy.data() + c * n;
    const T* h = xhat_.data() + c * n;
    T* o = gx.data() + c * n;
    for (int64_t i = 0; i < n; ++i) {
      const auto si = static_cast<size_t>(i);
      o[i] = inv_std_[si] * (g[i] * ga - m1[si] * inv_c - h[i] * m2[si] * inv_c);
    }
  }
  return gx;
}

template <typename T>
void ChannelLayerNorm<T>::collect(const std::string& prefix, ParameterList<T>& out) {
  out.push_back({prefix + "weight", &gamma});
  out.push_back({prefix + "bias", &beta});
}

// ---------------------------------------------------------------------------
// Activation

template <typename T>
Tensor<T> Activation<T>::forward(const Tensor<T>& x, bool training) {
  Tensor<T> y(x.shape());
  const int64_t n = x.size();
  switch (kind_) {
    case ActivationKind::Gelu:
      for (int64_t i = 0; i < n; ++i) y[i] = gelu(x[i]);
      break;
    case ActivationKind::Relu:
      for (int64_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
      break;
    case ActivationKind::Identity: y = x; break;
  }
  if (training) input_ = x;
  return y;
}

template <typename T>
Tensor<T> Activation<T>::backward(const Tensor<T>& gy, bool need_input_grad) {
  Tensor<T> gx;
  if (!need_input_grad) return gx;
  gx = Tensor<T>(gy.shape());
  const int64_t n = gy.size();
  switch (kind_) {
    case ActivationKind::Gelu:
      for (int64_t i = 0; i < n; ++i) gx[i] = gy[i] * gelu_grad(input_[i]);
      break;
    case ActivationKind::Relu:
      for (int64_t i = 0; i < n; ++i) gx[i] = input_[i] > T(0) ? gy[i] : T(0);
      break;
    case ActivationKind::Identity: gx = gy; break;
  }
  return gx;
}

#define MEDPEFT_INSTANTIATE(T)                                                     \
  template void init_uniform<T>(Tensor<T>&, int64_t, std::mt19937_64&);            \
  template class DepthwiseConv3d<T>;                                               \
  template class DepthwiseConvTranspose3d<T>;                                      \
  template class PointwiseConv3d<T>;                                               \
  template class PointwiseConvTranspose3d<T>;                                      \
  template class GroupNorm<T>;                                                     \
  template class ChannelLayerNorm<T>;                                              \
  template class Activation<T>;

MEDPEFT_INSTANTIATE(float)
MEDPEFT_INSTANTIATE(double)

#undef MEDPEFT_INSTANTIATE

}  // namespace medpeft::nn
