#include "medpeft/report.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json_util.hpp"

namespace medpeft {

namespace fs = std::filesystem;

namespace {

int label_rank(const std::string& label) {
  static const std::map<std::string, int> order{{"no_ft", 0}, {"scratch", 1}, {"full_ft", 2}, {"peft", 3}};
  const auto it = order.find(label);
  return it == order.end() ? 100 : it->second;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) fail(ErrorKind::IoError, "cannot open " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) fail(ErrorKind::IoError, "cannot write " + p.string());
  out << text;
}

std::string num(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

double quantile_sorted(const std::vector<double>& v, double q) {
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<size_t>(std::floor(pos));
  const size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

MeanStd mean_std(const std::vector<double>& v) {
  MeanStd s;
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(ss / static_cast<double>(v.size()));
  return s;
}

std::vector<double> values_of(const std::vector<std::pair<std::string, double>>& kv) {
  std::vector<double> out;
  out.reserve(kv.size());
  for (const auto& [k, v] : kv) out.push_back(v);
  return out;
}

}  // namespace

std::vector<RunMetrics> collect_runs(const fs::path& runs_dir) {
  std::error_code ec;
  if (!fs::is_directory(runs_dir, ec)) fail(ErrorKind::NoRunsFound, runs_dir.string() + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(runs_dir)) {
    if (e.is_regular_file() && e.path().filename() == "metrics.json") files.push_back(e.path());
  }
  if (files.empty()) fail(ErrorKind::NoRunsFound, "no metrics.json under " + runs_dir.string());
  std::sort(files.begin(), files.end());

  std::set<int> versions;
  std::vector<std::string> texts;
  for (const auto& f : files) {
    texts.push_back(read_text(f));
    try {
      versions.insert(detail::json::parse(texts.back()).at("schema_version").get<int>());
    } catch (const detail::json::exception& e) {
      fail(ErrorKind::SchemaMismatch, f.string() + ": " + e.what());
    }
  }
  if (versions.size() > 1) {
    std::string list;
    for (int v : versions) list += (list.empty() ? "" : ", ") + std::to_string(v);
    fail(ErrorKind::SchemaMismatch, "runs mix metrics schema versions {" + list + "}");
  }

  std::vector<RunMetrics> runs;
  for (size_t i = 0; i < files.size(); ++i) {
    RunMetrics r;
    r.path = files[i];
    r.report = MetricsReport::from_json(texts[i]);
    r.label = r.report.label.empty() ? files[i].parent_path().filename().string() : r.report.label;
    runs.push_back(std::move(r));
  }
  std::stable_sort(runs.begin(), runs.end(), [](const RunMetrics& a, const RunMetrics& b) {
    const int ra = label_rank(a.label), rb = label_rank(b.label);
    return ra != rb ? ra < rb : a.label < b.label;
  });
  return runs;
}

BoxStats box_stats(std::vector<double> v) {
  BoxStats b;
  b.n = v.size();
  if (v.empty()) return b;
  std::sort(v.begin(), v.end());
  b.q1 = quantile_sorted(v, 0.25);
  b.median = quantile_sorted(v, 0.5);
  b.q3 = quantile_sorted(v, 0.75);
  const double iqr = b.q3 - b.q1;
  const double lo = b.q1 - 1.5 * iqr, hi = b.q3 + 1.5 * iqr;
  b.whisker_low = b.q1;
  b.whisker_high = b.q3;
  for (double x : v) {
    if (x < lo || x > hi) {
      b.outliers.push_back(x);
      continue;
    }
    b.whisker_low = std::min(b.whisker_low, x);
    b.whisker_high = std::max(b.whisker_high, x);
  }
  return b;
}

std::string boxplot_svg(const std::string& title, const std::string& y_label,
                        const std::vector<std::pair<std::string, std::vector<double>>>& series) {
  constexpr double kBoxSpacing = 110, kLeft = 70, kTop = 40, kPlotH = 300, kBottom = 50;
  const double width = kLeft + kBoxSpacing * static_cast<double>(std::max<size_t>(series.size(), 1)) + 20;
  const double height = kTop + kPlotH + kBottom;

  double lo = 0, hi = 0;
  bool first = true;
  for (const auto& [name, v] : series) {
    for (double x : v) {
      lo = first ? x : std::min(lo, x);
      hi = first ? x : std::max(hi, x);
      first = false;
    }
  }
  if (first) hi = 1;
  if (hi - lo < 1e-12) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double pad = 0.05 * (hi - lo);
  lo -= pad;
  hi += pad;
  auto y_of = [&](double v) { return kTop + kPlotH * (hi - v) / (hi - lo); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(width, 0) << "\" height=\"" << num(height, 0)
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << num(width / 2, 1) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
     << xml_escape(title) << "</text>\n";
  os << "<text transform=\"translate(16," << num(kTop + kPlotH / 2, 1)
     << ") rotate(-90)\" text-anchor=\"middle\">" << xml_escape(y_label) << "</text>\n";

  // axis with 5 ticks
  os << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kTop + kPlotH
     << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = lo + (hi - lo) * t / 4.0;
    const double y = y_of(v);
    os << "<line x1=\"" << kLeft - 4 << "\" y1=\"" << num(y, 1) << "\" x2=\"" << kLeft << "\" y2=\"" << num(y, 1)
       << "\" stroke=\"black\"/>";
    os << "<text x=\"" << kLeft - 7 << "\" y=\"" << num(y + 4, 1) << "\" text-anchor=\"end\">" << num(v, 3)
       << "</text>\n";
  }

  static const char* kFill[] = {"#9ecae1", "#fdae6b", "#a1d99b", "#bcbddc", "#fc9272", "#d9d9d9"};
  for (size_t i = 0; i < series.size(); ++i) {
    const auto& [name, v] = series[i];
    const BoxStats b = box_stats(v);
    const double cx = kLeft + kBoxSpacing * (static_cast<double>(i) + 0.5);
    const double half = 28;
    os << "<g class=\"box\" data-label=\"" << xml_escape(name) << "\" data-n=\"" << b.n << "\">\n";
    if (b.n > 0) {
      os << "  <line x1=\"" << num(cx, 1) << "\" y1=\"" << num(y_of(b.whisker_high), 1) << "\" x2=\"" << num(cx, 1)
         << "\" y2=\"" << num(y_of(b.q3), 1) << "\" stroke=\"black\"/>\n";
      os << "  <line x1=\"" << num(cx, 1) << "\" y1=\"" << num(y_of(b.q1), 1) << "\" x2=\"" << num(cx, 1)
         << "\" y2=\"" << num(y_of(b.whisker_low), 1) << "\" stroke=\"black\"/>\n";
      for (double w : {b.whisker_low, b.whisker_high}) {
        os << "  <line x1=\"" << num(cx - half / 2, 1) << "\" y1=\"" << num(y_of(w), 1) << "\" x2=\""
           << num(cx + half / 2, 1) << "\" y2=\"" << num(y_of(w), 1) << "\" stroke=\"black\"/>\n";
      }
      os << "  <rect x=\"" << num(cx - half, 1) << "\" y=\"" << num(y_of(b.q3), 1) << "\" width=\"" << num(2 * half, 1)
         << "\" height=\"" << num(std::max(y_of(b.q1) - y_of(b.q3), 0.5), 1) << "\" fill=\""
         << kFill[i % std::size(kFill)] << "\" stroke=\"black\"/>\n";
      os << "  <line x1=\"" << num(cx - half, 1) << "\" y1=\"" << num(y_of(b.median), 1) << "\" x2=\""
         << num(cx + half, 1) << "\" y2=\"" << num(y_of(b.median), 1) << "\" stroke=\"black\" stroke-width=\"2\"/>\n";
      for (double o : b.outliers) {
        os << "  <circle cx=\"" << num(cx, 1) << "\" cy=\"" << num(y_of(o), 1)
           << "\" r=\"3\" fill=\"none\" stroke=\"black\"/>\n";
      }
    }
    os << "  <text x=\"" << num(cx, 1) << "\" y=\"" << num(kTop + kPlotH + 20, 1) << "\" text-anchor=\"middle\">"
       << xml_escape(name) << "</text>\n";
    os << "</g>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string comparison_csv(const std::vector<RunMetrics>& runs) {
  std::ostringstream os;
  os << "schema_version,run,metric,region,mean,std\n";
  for (const auto& run : runs) {
    const auto agg = run.report.aggregate();
    for (const char* m : kTableMetrics) {
      for (Region r : kRegions) {
        const MeanStd& s = agg.by_region.at(to_string(r)).at(m);
        os << kMetricsSchemaVersion << ',' << run.label << ',' << m << ',' << to_string(r) << ','
           << num(s.mean, 6) << ',' << num(s.std, 6) << '\n';
      }
      const MeanStd avg{agg.region_mean.at(m), mean_std(values_of(run.report.case_means(m))).std};
      os << kMetricsSchemaVersion << ',' << run.label << ',' << m << ",avg," << num(avg.mean, 6) << ','
         << num(avg.std, 6) << '\n';
    }
  }
  return os.str();
}

std::string comparison_markdown(const std::vector<RunMetrics>& runs) {
  static const std::map<std::string, std::string> kTitle{
      {"dice", "Dice"}, {"hd95", "HD95"}, {"lw_dice", "Lesion-wise Dice"}, {"lw_hd95", "Lesion-wise HD95"}};
  std::ostringstream os;
  os << "# Segmentation comparison\n\n";
  os << "Mean (std) over cases. Avg is the mean of the three region means.\n";
  for (const char* m : kTableMetrics) {
    os << "\n## " << kTitle.at(m) << "\n\n| Run | ET | TC | WT | Avg |\n|---|---|---|---|---|\n";
    for (const auto& run : runs) {
      const auto agg = run.report.aggregate();
      os << "| " << run.label;
      for (Region r : kRegions) {
        const MeanStd& s = agg.by_region.at(to_string(r)).at(m);
        os << " | " << num(s.mean) << " (" << num(s.std) << ")";
      }
      os << " | " << num(agg.region_mean.at(m)) << " (" << num(mean_std(values_of(run.report.case_means(m))).std)
         << ") |\n";
    }
  }

  if (runs.size() >= 2) {
    const auto& ref = runs.front();
    const auto ref_cases = ref.report.case_means("dice");
    std::map<std::string, double> ref_by_id(ref_cases.begin(), ref_cases.end());
    os << "\n## Paired permutation test, per-case average Dice vs " << ref.label << "\n\n"
       << "| Run | n | mean diff | p |\n|---|---|---|---|\n";
    for (size_t i = 1; i < runs.size(); ++i) {
      std::vector<double> a, b;
      for (const auto& [id, v] : runs[i].report.case_means("dice")) {
        const auto it = ref_by_id.find(id);
        if (it == ref_by_id.end()) continue;
        a.push_back(it->second);
        b.push_back(v);
      }
      os << "| " << runs[i].label << " | " << a.size() << " | ";
      if (a.size() < 2) {
        os << "- | - |\n";
        continue;
      }
      double diff = 0;
      for (size_t k = 0; k < a.size(); ++k) diff += b[k] - a[k];
      const auto p = paired_significance(a, b);
      os << num(diff / static_cast<double>(a.size())) << " | " << num(p.p_value) << " |\n";
    }
  }
  return os.str();
}

ReportFiles write_report(const std::vector<RunMetrics>& runs, const fs::path& out_dir) {
  if (runs.empty()) fail(ErrorKind::NoRunsFound, "nothing to report");
  fs::create_directories(out_dir);
  std::vector<std::pair<std::string, std::vector<double>>> dice, hd;
  for (const auto& r : runs) {
    dice.emplace_back(r.label, values_of(r.report.case_means("dice")));
    hd.emplace_back(r.label, values_of(r.report.case_means("hd95")));
  }
  ReportFiles f{out_dir / "boxplot_dice.svg", out_dir / "boxplot_hd95.svg", out_dir / "comparison.csv",
                out_dir / "comparison.md"};
  write_text(f.dice_boxplot, boxplot_svg("Per-case average Dice", "Dice (mean of ET, TC, WT)", dice));
  write_text(f.hd95_boxplot, boxplot_svg("Per-case average HD95", "HD95 in mm (mean of ET, TC, WT)", hd));
  write_text(f.table_csv, comparison_csv(runs));
  write_text(f.table_md, comparison_markdown(runs));
  return f;
}

// ---------------------------------------------------------------------------
// Overlays

Rgb8Image render_overlay(const Volume& image, const LabelMap& gt, const LabelMap& pred, int channel, int scale) {
  const Dims3 d = image.spatial();
  if (!(gt.dims == d) || !(pred.dims == d)) fail(ErrorKind::ShapeMismatch, "overlay label maps must match the image");
  if (channel < 0 || channel >= image.channels()) fail(ErrorKind::InvalidConfig, "overlay channel out of range");
  if (scale < 1) fail(ErrorKind::InvalidConfig, "overlay scale must be >= 1");
  const int64_t z = d.z / 2;

  float lo = 0, hi = 0;
  bool first = true;
  for (int64_t y = 0; y < d.y; ++y)
    for (int64_t x = 0; x < d.x; ++x) {
      const float v = image.data.at(channel, x, y, z);
      lo = first ? v : std::min(lo, v);
      hi = first ? v : std::max(hi, v);
      first = false;
    }
  const float range = hi - lo > 1e-12f ? hi - lo : 1.0f;

  auto colour = [](const LabelMap& m, int label, std::array<double, 3>& c) {
    const auto it = m.label_semantics.find(label);
    if (it == m.label_semantics.end()) return false;
    switch (it->second) {
      case LabelClass::NETC: c = {230, 40, 40}; return true;
      case LabelClass::SNFH: c = {40, 200, 60}; return true;
      case LabelClass::ET: c = {250, 220, 30}; return true;
      default: return false;
    }
  };

  Rgb8Image img;
  img.width = static_cast<int>(2 * d.x) * scale;
  img.height = static_cast<int>(d.y) * scale;
  img.pixels.assign(static_cast<size_t>(img.width) * img.height * 3, 0);
  for (int panel = 0; panel < 2; ++panel) {
    const LabelMap& m = panel == 0 ? gt : pred;
    for (int64_t y = 0; y < d.y; ++y)
      for (int64_t x = 0; x < d.x; ++x) {
        const double g = 255.0 * (image.data.at(channel, x, y, z) - lo) / range;
        std::array<double, 3> px{g, g, g}, c{};
        if (colour(m, m.at(x, y, z), c))
          for (int k = 0; k < 3; ++k) px[k] = 0.5 * px[k] + 0.5 * c[k];
        // radiological display: y runs top to bottom
        for (int sy = 0; sy < scale; ++sy)
          for (int sx = 0; sx < scale; ++sx) {
            const size_t row = static_cast<size_t>(d.y - 1 - y) * scale + sy;
            const size_t col = static_cast<size_t>(panel * d.x + x) * scale + sx;
            uint8_t* p = &img.pixels[(row * img.width + col) * 3];
            for (int k = 0; k < 3; ++k) p[k] = static_cast<uint8_t>(std::clamp(std::lround(px[k]), 0L, 255L));
          }
      }
  }
  return img;
}

void write_png(const Rgb8Image& img, const fs::path& path) {
  if (img.pixels.size() != static_cast<size_t>(img.width) * img.height * 3)
    fail(ErrorKind::ShapeMismatch, "image buffer does not match its size");
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(img.width);
  pi.height = static_cast<png_uint_32>(img.height);
  pi.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&pi, path.string().c_str(), 0, img.pixels.data(), 0, nullptr)) {
    const std::string msg = pi.message;
    png_image_free(&pi);
    fail(ErrorKind::IoError, "cannot write " + path.string() + ": " + msg);
  }
}

Rgb8Image read_png(const fs::path& path) {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, path.string().c_str()))
    fail(ErrorKind::IoError, "cannot read " + path.string() + ": " + pi.message);
  pi.format = PNG_FORMAT_RGB;
  Rgb8Image img;
  img.width = static_cast<int>(pi.width);
  img.height = static_cast<int>(pi.height);
  img.pixels.resize(PNG_IMAGE_SIZE(pi));
  if (!png_image_finish_read(&pi, nullptr, img.pixels.data(), 0, nullptr)) {
    const std::string msg = pi.message;
    png_image_free(&pi);
    fail(ErrorKind::IoError, "cannot decode " + path.string() + ": " + msg);
  }
  return img;
}

}  // namespace medpeft
