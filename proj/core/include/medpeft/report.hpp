#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "medpeft/metrics.hpp"
#include "medpeft/volume.hpp"

namespace medpeft {

struct RunMetrics {
  std::string label;
  std::filesystem::path path;  // the metrics.json it came from
  MetricsReport report;
};

/// Every metrics.json below runs_dir, ordered no_ft, scratch, full_ft, peft, then by label.
/// Throws NoRunsFound when there is none and SchemaMismatch when schema versions differ.
std::vector<RunMetrics> collect_runs(const std::filesystem::path& runs_dir);

/// Tukey box: quartiles by linear interpolation, whiskers at the furthest
/// points within 1.5 IQR of the box.
struct BoxStats {
  double q1 = 0, median = 0, q3 = 0;
  double whisker_low = 0, whisker_high = 0;
  std::vector<double> outliers;
  size_t n = 0;
};
BoxStats box_stats(std::vector<double> values);

/// One box per series. Each box is an SVG <g class="box"> element.
std::string boxplot_svg(const std::string& title, const std::string& y_label,
                        const std::vector<std::pair<std::string, std::vector<double>>>& series);

inline constexpr const char* kTableMetrics[] = {"dice", "hd95", "lw_dice", "lw_hd95"};

/// Long-form table: schema_version,run,metric,region,mean,std (region "avg" is the mean of region means).
std::string comparison_csv(const std::vector<RunMetrics>& runs);
/// One "mean (std)" table per metric plus paired permutation p-values on per-case
/// average Dice against the first run.
std::string comparison_markdown(const std::vector<RunMetrics>& runs);

struct ReportFiles {
  std::filesystem::path dice_boxplot;
  std::filesystem::path hd95_boxplot;
  std::filesystem::path table_csv;
  std::filesystem::path table_md;
};

/// boxplot_dice.svg, boxplot_hd95.svg, comparison.csv, comparison.md under out_dir.
ReportFiles write_report(const std::vector<RunMetrics>& runs, const std::filesystem::path& out_dir);

/// RGB raster, row-major, 3 bytes per pixel.
struct Rgb8Image {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> pixels;
};

/// Mid-axial slice of one channel, ground truth on the left and prediction on
/// the right, labels blended at 50% (NETC red, SNFH green, ET yellow).
Rgb8Image render_overlay(const Volume& image, const LabelMap& gt, const LabelMap& pred, int channel = 2,
                         int scale = 4);
void write_png(const Rgb8Image& img, const std::filesystem::path& path);
Rgb8Image read_png(const std::filesystem::path& path);

}  // namespace medpeft
