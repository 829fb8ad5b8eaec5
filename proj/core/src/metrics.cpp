#include "medpeft/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <limits>
#include <random>
#include <set>
#include <sstream>

#include "json_util.hpp"

namespace medpeft {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_same(const RegionMask& a, const RegionMask& b) {
  if (!(a.dims == b.dims) || a.data.size() != b.data.size()) {
    fail(ErrorKind::ShapeMismatch, "masks " + to_string(a.dims) + " and " + to_string(b.dims) + " differ in shape");
  }
}

// Lower envelope of parabolas; f holds squared distances (inf = no seed).
void edt_1d(const double* f, double* d, int64_t n, double s, std::vector<int64_t>& v, std::vector<double>& z) {
  v.resize(static_cast<size_t>(n));
  z.resize(static_cast<size_t>(n) + 1);
  int64_t k = -1;
  for (int64_t q = 0; q < n; ++q) {
    if (!std::isfinite(f[q])) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    const double xq = q * s;
    while (true) {
      const double xv = v[k] * s;
      const double sect = ((f[q] + xq * xq) - (f[v[k]] + xv * xv)) / (2.0 * (xq - xv));
      if (sect <= z[k]) {
        --k;
        continue;
      }
      ++k;
      v[k] = q;
      z[k] = sect;
      z[k + 1] = kInf;
      break;
    }
  }
  if (k < 0) {
    std::fill(d, d + n, kInf);
    return;
  }
  k = 0;
  for (int64_t p = 0; p < n; ++p) {
    const double x = p * s;
    while (z[k + 1] < x) ++k;
    const double dx = x - v[k] * s;
    d[p] = dx * dx + f[v[k]];
  }
}

double percentile_linear(std::vector<double>& v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<size_t>(std::floor(pos));
  const size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

struct Box {
  int64_t lo[3] = {0, 0, 0};
  int64_t hi[3] = {-1, -1, -1};  // inclusive
};

Box bounding_box(const RegionMask& a, const RegionMask& b, int64_t pad) {
  Box box;
  bool any = false;
  const Dims3 d = a.dims;
  for (int64_t x = 0; x < d.x; ++x)
    for (int64_t y = 0; y < d.y; ++y)
      for (int64_t z = 0; z < d.z; ++z) {
        const auto i = static_cast<size_t>(d.index(x, y, z));
        if (!a.data[i] && !b.data[i]) continue;
        const int64_t p[3] = {x, y, z};
        for (int k = 0; k < 3; ++k) {
          box.lo[k] = any ? std::min(box.lo[k], p[k]) : p[k];
          box.hi[k] = any ? std::max(box.hi[k], p[k]) : p[k];
        }
        any = true;
      }
  if (!any) return Box{};
  for (int k = 0; k < 3; ++k) {
    box.lo[k] = std::max<int64_t>(0, box.lo[k] - pad);
    box.hi[k] = std::min<int64_t>(d[k] - 1, box.hi[k] + pad);
  }
  return box;
}

// Surface of a cropped mask must match the surface on the full grid: a crop
// edge is only "outside" where it coincides with the real grid edge.
RegionMask surface_in_box(const RegionMask& full, const Box& b) {
  RegionMask s(full.region, {b.hi[0] - b.lo[0] + 1, b.hi[1] - b.lo[1] + 1, b.hi[2] - b.lo[2] + 1});
  const Dims3 d = full.dims;
  static const int off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  for (int64_t x = b.lo[0]; x <= b.hi[0]; ++x)
    for (int64_t y = b.lo[1]; y <= b.hi[1]; ++y)
      for (int64_t z = b.lo[2]; z <= b.hi[2]; ++z) {
        if (!full.at(x, y, z)) continue;
        bool edge = false;
        for (const auto& o : off) {
          const int64_t nx = x + o[0], ny = y + o[1], nz = z + o[2];
          if (nx < 0 || ny < 0 || nz < 0 || nx >= d.x || ny >= d.y || nz >= d.z || !full.at(nx, ny, nz)) {
            edge = true;
            break;
          }
        }
        if (edge) s.at(x - b.lo[0], y - b.lo[1], z - b.lo[2]) = 1;
      }
  return s;
}

MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  if (v.empty()) return r;
  double s = 0.0;
  for (double x : v) s += x;
  r.mean = s / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(ss / static_cast<double>(v.size()));
  return r;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

}  // namespace

const char* to_string(Region r) noexcept {
  switch (r) {
    case Region::ET: return "ET";
    case Region::TC: return "TC";
    case Region::WT: return "WT";
  }
  return "WT";
}

Region region_from_string(const std::string& s) {
  if (s == "ET") return Region::ET;
  if (s == "TC") return Region::TC;
  if (s == "WT") return Region::WT;
  fail(ErrorKind::SchemaMismatch, "unknown region '" + s + "'");
}

int64_t RegionMask::count() const {
  int64_t n = 0;
  for (auto v : data) n += v != 0;
  return n;
}

RegionMask extract_region(const LabelMap& m, Region r) {
  RegionMask out(r, m.dims);
  std::set<int> keep;
  for (const auto& [value, cls] : m.label_semantics) {
    const bool in = cls == LabelClass::ET || (r != Region::ET && cls == LabelClass::NETC) ||
                    (r == Region::WT && cls == LabelClass::SNFH);
    if (in) keep.insert(value);
  }
  for (size_t i = 0; i < m.data.size(); ++i) out.data[i] = keep.count(m.data[i]) ? 1 : 0;
  return out;
}

double dice(const RegionMask& pred, const RegionMask& gt) {
  check_same(pred, gt);
  int64_t inter = 0, p = 0, g = 0;
  for (size_t i = 0; i < pred.data.size(); ++i) {
    const bool a = pred.data[i] != 0;
    const bool b = gt.data[i] != 0;
    p += a;
    g += b;
    inter += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(p + g);
}

RegionMask surface(const RegionMask& m) {
  Box all;
  for (int k = 0; k < 3; ++k) {
    all.lo[k] = 0;
    all.hi[k] = m.dims[k] - 1;
  }
  if (m.dims.voxels() == 0) return RegionMask(m.region, m.dims);
  return surface_in_box(m, all);
}

std::vector<double> distance_transform(const RegionMask& seeds, const Spacing& spacing) {
  const Dims3 d = seeds.dims;
  std::vector<double> f(static_cast<size_t>(d.voxels()));
  for (size_t i = 0; i < f.size(); ++i) f[i] = seeds.data[i] ? 0.0 : kInf;
  std::vector<int64_t> v;
  std::vector<double> z;
  const int64_t nmax = std::max({d.x, d.y, d.z});
  std::vector<double> line(static_cast<size_t>(nmax)), out(static_cast<size_t>(nmax));
  // z axis (contiguous)
  for (int64_t x = 0; x < d.x; ++x)
    for (int64_t y = 0; y < d.y; ++y) {
      double* p = f.data() + d.index(x, y, 0);
      edt_1d(p, out.data(), d.z, spacing[2], v, z);
      std::copy(out.begin(), out.begin() + d.z, p);
    }
  // y axis
  for (int64_t x = 0; x < d.x; ++x)
    for (int64_t k = 0; k < d.z; ++k) {
      for (int64_t y = 0; y < d.y; ++y) line[y] = f[d.index(x, y, k)];
      edt_1d(line.data(), out.data(), d.y, spacing[1], v, z);
      for (int64_t y = 0; y < d.y; ++y) f[d.index(x, y, k)] = out[y];
    }
  // x axis
  for (int64_t y = 0; y < d.y; ++y)
    for (int64_t k = 0; k < d.z; ++k) {
      for (int64_t x = 0; x < d.x; ++x) line[x] = f[d.index(x, y, k)];
      edt_1d(line.data(), out.data(), d.x, spacing[0], v, z);
      for (int64_t x = 0; x < d.x; ++x) f[d.index(x, y, k)] = out[x];
    }
  for (auto& x : f) x = std::sqrt(x);
  return f;
}

double hd95(const RegionMask& pred, const RegionMask& gt, const Spacing& spacing, const MetricConfig& cfg) {
  check_same(pred, gt);
  const bool pe = pred.empty();
  const bool ge = gt.empty();
  if (pe && ge) return 0.0;
  if (pe || ge) return cfg.hd_penalty;
  const Box box = bounding_box(pred, gt, 1);
  const RegionMask sp = surface_in_box(pred, box);
  const RegionMask sg = surface_in_box(gt, box);
  const auto dp = distance_transform(sp, spacing);
  const auto dg = distance_transform(sg, spacing);
  std::vector<double> pooled;
  for (size_t i = 0; i < sp.data.size(); ++i) {
    if (sp.data[i]) pooled.push_back(dg[i]);
    if (sg.data[i]) pooled.push_back(dp[i]);
  }
  return percentile_linear(pooled, cfg.hd_percentile);
}

Components connected_components(const RegionMask& m) {
  Components c;
  const Dims3 d = m.dims;
  c.labels.assign(m.data.size(), 0);
  std::deque<int64_t> queue;
  for (int64_t start = 0; start < static_cast<int64_t>(m.data.size()); ++start) {
    if (!m.data[start] || c.labels[start]) continue;
    const int32_t id = ++c.count;
    int64_t size = 0;
    c.labels[start] = id;
    queue.push_back(start);
    while (!queue.empty()) {
      const int64_t cur = queue.front();
      queue.pop_front();
      ++size;
      const int64_t x = cur / (d.y * d.z);
      const int64_t y = (cur / d.z) % d.y;
      const int64_t z = cur % d.z;
      for (int dx = -1; dx <= 1; ++dx)
        for (int dy = -1; dy <= 1; ++dy)
          for (int dz = -1; dz <= 1; ++dz) {
            const int64_t nx = x + dx, ny = y + dy, nz = z + dz;
            if (nx < 0 || ny < 0 || nz < 0 || nx >= d.x || ny >= d.y || nz >= d.z) continue;
            const int64_t n = d.index(nx, ny, nz);
            if (m.data[n] && !c.labels[n]) {
              c.labels[n] = id;
              queue.push_back(n);
            }
          }
    }
    c.sizes.push_back(size);
  }
  return c;
}

LesionwiseResult lesionwise(const RegionMask& pred, const RegionMask& gt, const Spacing& spacing,
                            const MetricConfig& cfg) {
  check_same(pred, gt);
  const Dims3 d = gt.dims;
  const Components gc = connected_components(gt);
  const Components pc = connected_components(pred);

  // Retained GT lesions, renumbered 1..n.
  std::vector<int32_t> keep(static_cast<size_t>(gc.count) + 1, 0);
  int32_t n_gt = 0;
  for (int32_t k = 1; k <= gc.count; ++k) {
    if (gc.sizes[k - 1] >= cfg.min_lesion_size) keep[k] = ++n_gt;
  }

  // matches[p] = set of GT lesions whose dilated zone predicted component p touches.
  std::vector<std::set<int32_t>> matches(static_cast<size_t>(pc.count) + 1);
  const int r = cfg.dilation;
  for (int64_t x = 0; x < d.x; ++x)
    for (int64_t y = 0; y < d.y; ++y)
      for (int64_t z = 0; z < d.z; ++z) {
        const int32_t p = pc.labels[d.index(x, y, z)];
        if (!p) continue;
        for (int64_t ax = std::max<int64_t>(0, x - r); ax <= std::min(d.x - 1, x + r); ++ax)
          for (int64_t ay = std::max<int64_t>(0, y - r); ay <= std::min(d.y - 1, y + r); ++ay)
            for (int64_t az = std::max<int64_t>(0, z - r); az <= std::min(d.z - 1, z + r); ++az) {
              const int32_t g = keep[gc.labels[d.index(ax, ay, az)]];
              if (g) matches[p].insert(g);
            }
      }

  LesionwiseResult res;
  res.gt_lesions = n_gt;
  for (int32_t k = 1; k <= gc.count; ++k) {
    const int32_t g = keep[k];
    if (!g) continue;
    RegionMask lesion(gt.region, d);
    RegionMask matched(gt.region, d);
    for (size_t i = 0; i < gt.data.size(); ++i) {
      lesion.data[i] = gc.labels[i] == k;
      const int32_t p = pc.labels[i];
      matched.data[i] = p != 0 && matches[p].count(g) > 0;
    }
    LesionEntry e;
    e.gt_component = g;
    e.dice = dice(matched, lesion);
    e.hd95 = hd95(matched, lesion, spacing, cfg);
    res.entries.push_back(e);
  }
  for (int32_t p = 1; p <= pc.count; ++p) {
    if (matches[p].empty()) {
      res.entries.push_back({0, 0.0, cfg.hd_penalty});
      ++res.false_positives;
    }
  }
  if (res.entries.empty()) return res;
  double sd = 0.0, sh = 0.0;
  for (const auto& e : res.entries) {
    sd += e.dice;
    sh += e.hd95;
  }
  res.lw_dice = sd / static_cast<double>(res.entries.size());
  res.lw_hd95 = sh / static_cast<double>(res.entries.size());
  return res;
}

SensSpec sensitivity_specificity(const RegionMask& pred, const RegionMask& gt) {
  check_same(pred, gt);
  int64_t tp = 0, fn = 0, tn = 0, fp = 0;
  for (size_t i = 0; i < pred.data.size(); ++i) {
    const bool p = pred.data[i] != 0;
    const bool g = gt.data[i] != 0;
    tp += p && g;
    fn += !p && g;
    tn += !p && !g;
    fp += p && !g;
  }
  SensSpec s;
  s.sensitivity = tp + fn == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
  s.specificity = tn + fp == 0 ? 1.0 : static_cast<double>(tn) / static_cast<double>(tn + fp);
  return s;
}

PermutationResult paired_significance(const std::vector<double>& a, const std::vector<double>& b,
                                      const PermutationConfig& cfg) {
  if (a.size() != b.size()) {
    fail(ErrorKind::LengthMismatch, std::to_string(a.size()) + " vs " + std::to_string(b.size()) + " scores");
  }
  if (a.size() < 5) fail(ErrorKind::TooFewCases, "paired test needs at least 5 cases");
  const size_t n = a.size();
  std::vector<double> diff(n);
  double observed = 0.0, scale = 0.0;
  for (size_t i = 0; i < n; ++i) {
    diff[i] = b[i] - a[i];
    observed += diff[i];
    scale += std::fabs(diff[i]);
  }
  observed = std::fabs(observed);
  // Sums equal to the observed one up to rounding count as ties.
  const double tol = 1e-12 * std::max(scale, 1e-300);
  PermutationResult r;
  if (!cfg.force_monte_carlo && static_cast<int>(n) <= cfg.exhaustive_max) {
    const uint64_t total = uint64_t{1} << n;
    uint64_t hits = 0;
    for (uint64_t mask = 0; mask < total; ++mask) {
      double s = 0.0;
      for (size_t i = 0; i < n; ++i) s += (mask >> i) & 1 ? -diff[i] : diff[i];
      if (std::fabs(s) >= observed - tol) ++hits;
    }
    r.exhaustive = true;
    r.permutations = static_cast<int64_t>(total);
    r.p_value = static_cast<double>(hits) / static_cast<double>(total);
    return r;
  }
  std::mt19937_64 rng(cfg.seed);
  int64_t hits = 0;
  for (int64_t m = 0; m < cfg.mc_samples; ++m) {
    double s = 0.0;
    uint64_t bits = 0;
    for (size_t i = 0; i < n; ++i) {
      if (i % 64 == 0) bits = rng();
      s += (bits >> (i % 64)) & 1 ? -diff[i] : diff[i];
    }
    if (std::fabs(s) >= observed - tol) ++hits;
  }
  r.exhaustive = false;
  r.permutations = cfg.mc_samples;
  r.p_value = static_cast<double>(hits + 1) / static_cast<double>(cfg.mc_samples + 1);
  r.standard_error = std::sqrt(r.p_value * (1.0 - r.p_value) / static_cast<double>(cfg.mc_samples));
  return r;
}

// ---------------------------------------------------------------------------
// Reports

double MetricsRow::metric(const std::string& name) const {
  if (name == "dice") return dice;
  if (name == "hd95") return hd95;
  if (name == "lw_dice") return lw_dice;
  if (name == "lw_hd95") return lw_hd95;
  if (name == "sensitivity") return sensitivity;
  if (name == "specificity") return specificity;
  fail(ErrorKind::InvalidConfig, "unknown metric '" + name + "'");
}

MetricsAggregate MetricsReport::aggregate() const {
  MetricsAggregate agg;
  for (Region r : kRegions) {
    for (const char* m : kMetricNames) {
      std::vector<double> v;
      for (const auto& row : rows) {
        if (row.region == r) v.push_back(row.metric(m));
      }
      if (!v.empty()) agg.by_region[to_string(r)][m] = mean_std(v);
    }
  }
  for (const char* m : kMetricNames) {
    double s = 0.0;
    int n = 0;
    for (const auto& [region, stats] : agg.by_region) {
      s += stats.at(m).mean;
      ++n;
    }
    agg.region_mean[m] = n ? s / n : 0.0;
  }
  return agg;
}

std::vector<std::pair<std::string, double>> MetricsReport::case_means(const std::string& metric) const {
  std::vector<std::pair<std::string, double>> out;
  std::map<std::string, std::pair<double, int>> acc;
  for (const auto& row : rows) {
    if (!acc.count(row.case_id)) out.emplace_back(row.case_id, 0.0);
    auto& a = acc[row.case_id];
    a.first += row.metric(metric);
    a.second += 1;
  }
  for (auto& [id, v] : out) v = acc[id].first / acc[id].second;
  return out;
}

std::string MetricsReport::to_csv() const {
  std::ostringstream os;
  os << "schema_version,case_id,region";
  for (const char* m : kMetricNames) os << ',' << m;
  os << '\n';
  for (const auto& r : rows) {
    os << kMetricsSchemaVersion << ',' << r.case_id << ',' << to_string(r.region);
    for (const char* m : kMetricNames) os << ',' << fmt(r.metric(m));
    os << '\n';
  }
  return os.str();
}

std::string MetricsReport::to_json() const {
  using detail::json;
  json j;
  j["schema_version"] = kMetricsSchemaVersion;
  j["kind"] = "metrics_report";
  j["label"] = label;
  json rj = json::array();
  for (const auto& r : rows) {
    json x{{"case_id", r.case_id}, {"region", to_string(r.region)}};
    for (const char* m : kMetricNames) x[m] = r.metric(m);
    rj.push_back(x);
  }
  j["rows"] = rj;
  const auto agg = aggregate();
  json a = json::object();
  for (const auto& [region, stats] : agg.by_region) {
    for (const auto& [m, s] : stats) a["by_region"][region][m] = {{"mean", s.mean}, {"std", s.std}};
  }
  a["region_mean"] = agg.region_mean;
  j["aggregate"] = a;
  return j.dump(2);
}

MetricsReport MetricsReport::from_json(const std::string& text) {
  using detail::json;
  MetricsReport rep;
  try {
    const json j = json::parse(text);
    if (j.at("kind").get<std::string>() != "metrics_report") fail(ErrorKind::SchemaMismatch, "not a metrics report");
    const int v = j.at("schema_version").get<int>();
    if (v != kMetricsSchemaVersion) {
      fail(ErrorKind::SchemaMismatch, "metrics schema_version " + std::to_string(v) + " is not supported");
    }
    rep.label = j.value("label", "");
    for (const auto& x : j.at("rows")) {
      MetricsRow r;
      r.case_id = x.at("case_id").get<std::string>();
      r.region = region_from_string(x.at("region").get<std::string>());
      r.dice = x.at("dice").get<double>();
      r.hd95 = x.at("hd95").get<double>();
      r.lw_dice = x.at("lw_dice").get<double>();
      r.lw_hd95 = x.at("lw_hd95").get<double>();
      r.sensitivity = x.at("sensitivity").get<double>();
      r.specificity = x.at("specificity").get<double>();
      rep.rows.push_back(r);
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::SchemaMismatch, std::string("metrics report: ") + e.what());
  }
  return rep;
}

void MetricsReport::write(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "metrics.csv", std::ios::binary);
    if (!out) fail(ErrorKind::IoError, "cannot write " + (dir / "metrics.csv").string());
    out << to_csv();
  }
  std::ofstream out(dir / "metrics.json", std::ios::binary);
  if (!out) fail(ErrorKind::IoError, "cannot write " + (dir / "metrics.json").string());
  out << to_json() << '\n';
}

MetricsReport MetricsReport::read(const std::filesystem::path& json_path) {
  std::ifstream in(json_path, std::ios::binary);
  if (!in) fail(ErrorKind::IoError, "cannot open " + json_path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

std::vector<MetricsRow> evaluate_case(const std::string& case_id, const LabelMap& pred, const LabelMap& gt,
                                      const Spacing& spacing, const MetricConfig& cfg) {
  if (!(pred.dims == gt.dims)) fail(ErrorKind::ShapeMismatch, "prediction and ground truth differ in shape");
  std::vector<MetricsRow> rows;
  for (Region r : kRegions) {
    const RegionMask p = extract_region(pred, r);
    const RegionMask g = extract_region(gt, r);
    MetricsRow row;
    row.case_id = case_id;
    row.region = r;
    row.dice = dice(p, g);
    row.hd95 = hd95(p, g, spacing, cfg);
    const auto lw = lesionwise(p, g, spacing, cfg);
    row.lw_dice = lw.lw_dice;
    row.lw_hd95 = lw.lw_hd95;
    const auto ss = sensitivity_specificity(p, g);
    row.sensitivity = ss.sensitivity;
    row.specificity = ss.specificity;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace medpeft
