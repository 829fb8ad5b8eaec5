#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "medpeft/volume.hpp"

namespace medpeft {

enum class Domain { Source, Shifted };

const char* to_string(Domain d) noexcept;
Domain domain_from_string(const std::string& s);

/// Degradation applied to SHIFTED images, in this order: gamma, Rician noise, blur.
struct ShiftConfig {
  double gamma = 0.6;         // < 1 compresses tissue contrast
  double noise_sigma = 12.0;  // absolute, in image units (brain tissue ~100)
  double blur_sigma = 1.0;    // voxels
};

struct CohortSpec {
  int n_cases = 20;
  Dims3 spatial_shape{32, 32, 32};
  int n_channels = 4;
  Domain domain = Domain::Source;
  uint64_t rng_seed = 0;
  int tumor_min = 1;
  int tumor_max = 3;
  ShiftConfig shift;

  /// InvalidConfig for bad counts; LesionDoesNotFit for any extent below 16.
  void validate() const;
};

struct Case {
  std::string id;
  Volume image;
  LabelMap labels;
};

/// Nested ellipsoidal lesions inside an ellipsoidal brain. Anatomy and base
/// appearance depend only on (rng_seed, case_index), so SOURCE and SHIFTED
/// share labels exactly.
Case generate_case(const CohortSpec& spec, int case_index);

std::string case_id(int index);

inline constexpr int kCohortSchemaVersion = 1;

struct CohortEntry {
  std::string id;
  std::string image;  // raw-format stem, relative to the cohort directory
  std::string label;
};

struct CohortManifest {
  int schema_version = kCohortSchemaVersion;
  CohortSpec spec;
  std::vector<CohortEntry> cases;

  std::string to_json() const;
  static CohortManifest from_json(const std::string& text);
};

/// Writes every case in the raw test format plus cohort.json.
CohortManifest generate_cohort(const CohortSpec& spec, const std::filesystem::path& out_dir);

struct Cohort {
  std::filesystem::path dir;
  CohortManifest manifest;

  int size() const { return static_cast<int>(manifest.cases.size()); }
  Case load(int index) const;
  std::vector<Case> load_all() const;
};

/// Reads <dir>/cohort.json. EmptyCohort if it lists no cases.
Cohort open_cohort(const std::filesystem::path& dir);

/// Mean squared 6-neighbour Laplacian over interior voxels, averaged over channels.
double laplacian_energy(const Tensor<float>& image);

/// 1-Wasserstein distance between two empirical distributions.
double wasserstein1(std::vector<double> a, std::vector<double> b);

/// Values of one channel at the brain (nonzero) voxels, z-scored.
std::vector<double> normalized_foreground(const Volume& v, int channel);

}  // namespace medpeft
