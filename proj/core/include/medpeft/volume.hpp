#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "medpeft/tensor.hpp"

namespace medpeft {

/// Row-major 4x4 voxel-index -> world-mm transform.
struct Affine {
  std::array<double, 16> m{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};

  double operator()(int r, int c) const noexcept { return m[static_cast<size_t>(r * 4 + c)]; }
  double& operator()(int r, int c) noexcept { return m[static_cast<size_t>(r * 4 + c)]; }

  static Affine identity() { return {}; }
  static Affine diagonal(double sx, double sy, double sz);

  std::array<double, 3> apply(double i, double j, double k) const noexcept;
  double determinant() const;
  bool invertible() const;
  Affine inverse() const;
  Affine operator*(const Affine& o) const;
  /// Column norms of the 3x3 linear part (voxel size along each index axis).
  std::array<double, 3> column_norms() const;

  friend bool operator==(const Affine&, const Affine&) = default;
};

enum class LabelClass { Background, NETC, SNFH, ET };

const char* to_string(LabelClass c) noexcept;
LabelClass label_class_from_string(const std::string& s);

using LabelSemantics = std::map<int, LabelClass>;

/// Default BraTS-style semantics {0:BACKGROUND, 1:NETC, 2:SNFH, 3:ET}.
LabelSemantics default_label_semantics();
std::vector<std::string> default_channel_names();

/// Multi-channel 3D image: data shape (C, X, Y, Z).
struct Volume {
  Tensor<float> data;
  Affine affine;
  std::vector<std::string> channel_names = default_channel_names();
  std::array<double, 3> voxel_spacing{1.0, 1.0, 1.0};

  int64_t channels() const { return data.channels(); }
  Dims3 spatial() const { return data.spatial(); }
  /// Throws if the channel count disagrees with channel_names or the affine is singular.
  void validate() const;
};

struct LabelMap {
  Dims3 dims;
  std::vector<int32_t> data;
  LabelSemantics label_semantics = default_label_semantics();

  LabelMap() = default;
  LabelMap(Dims3 d, int32_t fill = 0) : dims(d), data(static_cast<size_t>(d.voxels()), fill) {}

  int32_t& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  int32_t operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }
  int32_t& at(int64_t x, int64_t y, int64_t z) { return data[static_cast<size_t>(dims.index(x, y, z))]; }
  int32_t at(int64_t x, int64_t y, int64_t z) const { return data[static_cast<size_t>(dims.index(x, y, z))]; }

  /// Throws UnknownLabelValue if a voxel is not a key of label_semantics.
  void validate() const;
  /// Integer label for a semantic class under this map's semantics (-1 if absent).
  int label_for(LabelClass c) const;
  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

}  // namespace medpeft
