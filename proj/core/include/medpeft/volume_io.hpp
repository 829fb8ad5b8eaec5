#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <utility>
#include <vector>

#include "medpeft/volume.hpp"

namespace medpeft {

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

/// A single-file NIfTI-1 image: scalar (3D) or multi-component (4D, dim[4] = C).
struct NiftiImage {
  Tensor<float> data;  // (C, X, Y, Z); C == 1 for a 3D file
  Affine affine;
  std::array<double, 3> pixdim{1.0, 1.0, 1.0};
};

/// Reads .nii or .nii.gz. Supports the common integer and float datatypes and
/// applies scl_slope/scl_inter. The affine comes from the sform when present,
/// otherwise the qform, otherwise pixdim.
NiftiImage read_nifti(const std::filesystem::path& path);
/// Writes float32 (or int16 when `as_labels`); the affine is stored as the sform.
void write_nifti(const std::filesystem::path& path, const Tensor<float>& data, const Affine& affine,
                 bool as_labels = false);
void write_nifti_labels(const std::filesystem::path& path, const LabelMap& labels, const Affine& affine);

/// Raw test format: `<stem>.rawvol` (float32, C-order, little-endian) plus a
/// `<stem>.json` manifest {format_version, kind, shape, channels, affine,
/// voxel_spacing, label_semantics}.
constexpr int kRawFormatVersion = 1;

void write_rawvol(const std::filesystem::path& stem, const Volume& v);
void write_rawvol(const std::filesystem::path& stem, const LabelMap& m, const Affine& affine);
Volume read_rawvol_volume(const std::filesystem::path& stem);
LabelMap read_rawvol_labels(const std::filesystem::path& stem);

// ---------------------------------------------------------------------------
// Ingestion and preprocessing
// ---------------------------------------------------------------------------

/// Loads one case. Each image path holds one modality (stacked in the given
/// order, which must follow `channel_names`); paths ending in .rawvol/.json
/// use the raw format, everything else NIfTI. Images are brought to RAS
/// before shapes are compared.
std::pair<Volume, std::optional<LabelMap>> load_case(
    const std::vector<std::filesystem::path>& image_paths, const std::optional<std::filesystem::path>& label_path,
    const std::vector<std::string>& channel_names = default_channel_names(),
    const LabelSemantics& semantics = default_label_semantics());

/// Voxel-axis permutation and flips that bring an affine to RAS.
struct Orientation {
  std::array<int, 3> source_axis{0, 1, 2};  // new axis i reads old axis source_axis[i]
  std::array<bool, 3> flip{false, false, false};

  bool is_identity() const {
    return source_axis == std::array<int, 3>{0, 1, 2} && flip == std::array<bool, 3>{false, false, false};
  }
};

Orientation ras_orientation(const Affine& affine);
Volume to_canonical(const Volume& v);
LabelMap to_canonical(const LabelMap& m, const Affine& affine);

/// Trilinear resampling (half-voxel-centred grid mapping); the affine is
/// updated so world positions of voxel centres are preserved.
Volume resize_volume(const Volume& v, const Dims3& target);
/// Nearest-neighbour resampling on the same grid mapping as resize_volume.
LabelMap resize_labels(const LabelMap& m, const Dims3& target);

enum class NormalizationMask { NonzeroVoxels, AllVoxels };

/// Per-channel z-score. With NonzeroVoxels statistics come from the channel's
/// nonzero voxels and the zero background is left at zero. Channels with zero
/// variance (or no foreground) become all zeros.
Volume z_normalize(const Volume& v, NormalizationMask mask = NormalizationMask::NonzeroVoxels);

struct PreprocessConfig {
  Dims3 target{128, 128, 128};
  NormalizationMask normalization = NormalizationMask::NonzeroVoxels;
};

/// canonical -> resize -> z-normalize.
std::pair<Volume, std::optional<LabelMap>> preprocess(const Volume& v, const std::optional<LabelMap>& m,
                                                      const PreprocessConfig& cfg);

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentConfig {
  double flip_probability = 0.5;    // left-right (axis 0 in RAS)
  double affine_probability = 0.5;
  double scale_min = 0.9;
  double scale_max = 1.1;
  double rotation_degrees = 10.0;   // uniform in [-r, r] per axis
  double translation_voxels = 5.0;  // uniform in [-t, t] per axis
  double noise_probability = 0.5;
  double noise_sigma_max = 0.1;     // sigma ~ U[0, max], image only

  static AugmentConfig none();
};

/// Applies the same random spatial transform to image (trilinear) and labels
/// (nearest). Deterministic for a given seed.
std::pair<Volume, LabelMap> augment(const Volume& v, const LabelMap& m, uint64_t rng_seed,
                                    const AugmentConfig& cfg);

}  // namespace medpeft
