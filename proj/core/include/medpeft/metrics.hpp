#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "medpeft/volume.hpp"

namespace medpeft {

enum class Region { ET, TC, WT };
inline constexpr std::array<Region, 3> kRegions{Region::ET, Region::TC, Region::WT};
const char* to_string(Region r) noexcept;
Region region_from_string(const std::string& s);

struct RegionMask {
  Region region = Region::WT;
  Dims3 dims;
  std::vector<uint8_t> data;

  RegionMask() = default;
  RegionMask(Region r, Dims3 d) : region(r), dims(d), data(static_cast<size_t>(d.voxels()), 0) {}
  int64_t count() const;
  bool empty() const { return count() == 0; }
  uint8_t& at(int64_t x, int64_t y, int64_t z) { return data[static_cast<size_t>(dims.index(x, y, z))]; }
  uint8_t at(int64_t x, int64_t y, int64_t z) const { return data[static_cast<size_t>(dims.index(x, y, z))]; }
};

using Spacing = std::array<double, 3>;

struct MetricConfig {
  double hd_penalty = 374.0;
  double hd_percentile = 95.0;
  int min_lesion_size = 10;  // GT components smaller than this are ignored
  int dilation = 1;          // matching zone radius in voxels (26-neighbourhood)
};

/// ET = ET; TC = ET u NETC; WT = ET u NETC u SNFH, under the map's semantics.
RegionMask extract_region(const LabelMap& m, Region r);

/// 2|P n G| / (|P| + |G|); both empty -> 1, one empty -> 0.
double dice(const RegionMask& pred, const RegionMask& gt);

/// Mask voxels with a 6-neighbour outside the mask; the grid border counts as outside.
RegionMask surface(const RegionMask& m);

/// Percentile (linear interpolation) of pooled symmetric surface distances in mm.
/// Both empty -> 0; exactly one empty -> cfg.hd_penalty.
double hd95(const RegionMask& pred, const RegionMask& gt, const Spacing& spacing, const MetricConfig& cfg = {});

/// Exact Euclidean distance (mm) from every voxel to the nearest set voxel of
/// `seeds`. Infinite everywhere when `seeds` is empty.
std::vector<double> distance_transform(const RegionMask& seeds, const Spacing& spacing);

/// 26-connected components. labels[i] in 1..count, 0 for background.
struct Components {
  std::vector<int32_t> labels;
  int32_t count = 0;
  std::vector<int64_t> sizes;  // index k-1 for component k
};
Components connected_components(const RegionMask& m);

struct LesionEntry {
  int32_t gt_component = 0;  // 0 for a false-positive entry
  double dice = 0.0;
  double hd95 = 0.0;
};

struct LesionwiseResult {
  double lw_dice = 1.0;
  double lw_hd95 = 0.0;
  std::vector<LesionEntry> entries;
  int gt_lesions = 0;
  int false_positives = 0;
};

/// Per-lesion protocol: GT components (>= min_lesion_size) each get a matching
/// zone dilated by cfg.dilation voxels; predicted components intersecting a zone
/// are matched to that lesion. Missed lesions and unmatched predicted components
/// score dice 0 / hd95 penalty. No lesions and no predictions -> (1, 0).
LesionwiseResult lesionwise(const RegionMask& pred, const RegionMask& gt, const Spacing& spacing,
                            const MetricConfig& cfg = {});

struct SensSpec {
  double sensitivity = 1.0;
  double specificity = 1.0;
};
/// Empty GT -> sensitivity 1; no GT negatives -> specificity 1.
SensSpec sensitivity_specificity(const RegionMask& pred, const RegionMask& gt);

struct PermutationConfig {
  int exhaustive_max = 20;
  int64_t mc_samples = 100000;
  uint64_t seed = 0x9e3779b97f4a7c15ULL;
  bool force_monte_carlo = false;
};

struct PermutationResult {
  double p_value = 1.0;
  bool exhaustive = true;
  int64_t permutations = 0;
  double standard_error = 0.0;  // Monte Carlo only
};

/// Two-sided paired sign-flip test on b - a using |sum of differences|.
/// Exhaustive for n <= exhaustive_max, otherwise Monte Carlo with
/// p = (hits + 1) / (samples + 1).
PermutationResult paired_significance(const std::vector<double>& a, const std::vector<double>& b,
                                      const PermutationConfig& cfg = {});

// ---------------------------------------------------------------------------
// Reports

inline constexpr int kMetricsSchemaVersion = 1;
inline constexpr std::array<const char*, 6> kMetricNames{"dice",      "hd95",        "lw_dice",
                                                         "lw_hd95",   "sensitivity", "specificity"};

struct MetricsRow {
  std::string case_id;
  Region region = Region::WT;
  double dice = 0, hd95 = 0, lw_dice = 0, lw_hd95 = 0, sensitivity = 0, specificity = 0;

  double metric(const std::string& name) const;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population
};

struct MetricsAggregate {
  std::map<std::string, std::map<std::string, MeanStd>> by_region;  // region -> metric -> stats
  std::map<std::string, double> region_mean;                        // metric -> mean of the region means
};

struct MetricsReport {
  std::string label;
  std::vector<MetricsRow> rows;

  MetricsAggregate aggregate() const;
  /// Per-case mean over regions for one metric, in first-seen case order.
  std::vector<std::pair<std::string, double>> case_means(const std::string& metric) const;

  std::string to_csv() const;
  std::string to_json() const;
  static MetricsReport from_json(const std::string& text);

  void write(const std::filesystem::path& dir) const;  // metrics.csv + metrics.json
  static MetricsReport read(const std::filesystem::path& json_path);
};

/// Three rows (ET, TC, WT) for one predicted/ground-truth pair.
std::vector<MetricsRow> evaluate_case(const std::string& case_id, const LabelMap& pred, const LabelMap& gt,
                                      const Spacing& spacing, const MetricConfig& cfg = {});

}  // namespace medpeft
