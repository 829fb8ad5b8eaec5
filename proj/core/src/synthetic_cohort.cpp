#include "medpeft/synthetic_cohort.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "json_util.hpp"
#include "medpeft/volume_io.hpp"

namespace medpeft {

namespace {

uint64_t splitmix(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t stream_seed(uint64_t seed, int index, uint64_t stream) {
  return splitmix(splitmix(seed) ^ splitmix(static_cast<uint64_t>(index) * 0x632be59bd9b4e019ULL + stream));
}

constexpr uint64_t kAnatomyStream = 1;
constexpr uint64_t kAppearanceStream = 2;
constexpr uint64_t kShiftStream = 3;

struct Ellipsoid {
  std::array<double, 3> centre;
  std::array<double, 3> radii;

  bool contains(double x, double y, double z, double scale) const {
    const double a = (x - centre[0]) / (radii[0] * scale);
    const double b = (y - centre[1]) / (radii[1] * scale);
    const double c = (z - centre[2]) / (radii[2] * scale);
    return a * a + b * b + c * c <= 1.0;
  }
};

constexpr double kTcScale = 0.65;
constexpr double kEtScale = 0.4;
constexpr double kMinRadius = 3.2;

// Intensity multipliers per tissue, rows: brain, SNFH, NETC, ET; columns
// follow the default channel order t1c, t1w, flair, t2w.
constexpr double kContrast[4][4] = {
    {1.00, 1.00, 1.00, 1.00},
    {1.05, 0.85, 1.80, 1.70},
    {0.70, 0.75, 1.30, 1.55},
    {2.10, 1.00, 1.40, 1.30},
};

struct Anatomy {
  Ellipsoid brain;
  std::vector<Ellipsoid> lesions;
};

Anatomy sample_anatomy(const CohortSpec& spec, std::mt19937_64& rng) {
  const Dims3 d = spec.spatial_shape;
  const double ext[3] = {double(d.x), double(d.y), double(d.z)};
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  Anatomy a;
  for (int i = 0; i < 3; ++i) {
    a.brain.centre[i] = (ext[i] - 1.0) / 2.0 + (u01(rng) - 0.5);
    a.brain.radii[i] = ext[i] * (0.40 + 0.05 * u01(rng));
  }
  std::uniform_int_distribution<int> count(spec.tumor_min, spec.tumor_max);
  const int n = count(rng);
  const double min_ext = std::min({ext[0], ext[1], ext[2]});
  for (int l = 0; l < n; ++l) {
    const double lo = l == 0 ? 0.20 : 0.12, hi = l == 0 ? 0.30 : 0.20;
    const double r = std::max(kMinRadius, (lo + (hi - lo) * u01(rng)) * min_ext);
    Ellipsoid e;
    for (int i = 0; i < 3; ++i) {
      e.radii[i] = std::max(kMinRadius, r * (0.85 + 0.3 * u01(rng)));
      const double margin = e.radii[i] + 1.0;
      if (2.0 * margin > ext[i] - 1.0) fail(ErrorKind::LesionDoesNotFit, "lesion radius does not fit the volume");
      e.centre[i] = margin + (ext[i] - 1.0 - 2.0 * margin) * u01(rng);
    }
    a.lesions.push_back(e);
  }
  return a;
}

LabelMap render_labels(const Anatomy& a, Dims3 d) {
  LabelMap m(d);
  const auto sem = m.label_semantics;
  const int netc = m.label_for(LabelClass::NETC), snfh = m.label_for(LabelClass::SNFH),
            et = m.label_for(LabelClass::ET);
  for (int64_t x = 0; x < d.x; ++x)
    for (int64_t y = 0; y < d.y; ++y)
      for (int64_t z = 0; z < d.z; ++z) {
        int32_t v = 0;
        for (const auto& e : a.lesions) {
          if (e.contains(double(x), double(y), double(z), kEtScale)) {
            v = et;
            break;
          }
          if (e.contains(double(x), double(y), double(z), kTcScale)) v = netc;
          else if (v == 0 && e.contains(double(x), double(y), double(z), 1.0)) v = snfh;
        }
        m.at(x, y, z) = v;
      }
  return m;
}

bool prevalence_ok(const LabelMap& m) {
  const int64_t need = static_cast<int64_t>(std::ceil(0.001 * static_cast<double>(m.data.size())));
  int64_t counts[4] = {0, 0, 0, 0};
  for (int32_t v : m.data) ++counts[v];
  return counts[1] >= need && counts[2] >= need && counts[3] >= need;
}

int tissue_row(LabelClass c) {
  switch (c) {
    case LabelClass::SNFH: return 1;
    case LabelClass::NETC: return 2;
    case LabelClass::ET: return 3;
    default: return 0;
  }
}

void gaussian_blur_axis(std::vector<float>& img, Dims3 d, int axis, const std::vector<double>& k) {
  const int r = static_cast<int>(k.size() / 2);
  const int64_t n[3] = {d.x, d.y, d.z};
  std::vector<float> out(img.size());
  for (int64_t x = 0; x < d.x; ++x)
    for (int64_t y = 0; y < d.y; ++y)
      for (int64_t z = 0; z < d.z; ++z) {
        int64_t p[3] = {x, y, z};
        const int64_t c = p[axis];
        double s = 0.0;
        for (int t = -r; t <= r; ++t) {
          p[axis] = std::clamp<int64_t>(c + t, 0, n[axis] - 1);
          s += k[static_cast<size_t>(t + r)] * img[static_cast<size_t>(d.index(p[0], p[1], p[2]))];
        }
        out[static_cast<size_t>(d.index(x, y, z))] = static_cast<float>(s);
      }
  img.swap(out);
}

void apply_shift(Volume& v, const std::vector<uint8_t>& brain, const ShiftConfig& cfg, std::mt19937_64& rng) {
  const Dims3 d = v.spatial();
  const int64_t n = d.voxels();
  constexpr double kRef = 250.0;
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<double> kernel;
  if (cfg.blur_sigma > 0) {
    const int r = static_cast<int>(std::ceil(3.0 * cfg.blur_sigma));
    double total = 0.0;
    for (int t = -r; t <= r; ++t) {
      kernel.push_back(std::exp(-0.5 * t * t / (cfg.blur_sigma * cfg.blur_sigma)));
      total += kernel.back();
    }
    for (auto& w : kernel) w /= total;
  }
  for (int64_t c = 0; c < v.channels(); ++c) {
    auto ch = v.data.channel(c);
    std::vector<float> img(ch.begin(), ch.end());
    for (int64_t i = 0; i < n; ++i) {
      if (!brain[static_cast<size_t>(i)]) continue;
      const double g = kRef * std::pow(std::max(0.0, double(img[static_cast<size_t>(i)])) / kRef, cfg.gamma);
      const double re = g + cfg.noise_sigma * noise(rng);
      const double im = cfg.noise_sigma * noise(rng);
      img[static_cast<size_t>(i)] = static_cast<float>(std::sqrt(re * re + im * im));
    }
    if (!kernel.empty())
      for (int axis = 0; axis < 3; ++axis) gaussian_blur_axis(img, d, axis, kernel);
    for (int64_t i = 0; i < n; ++i) ch[static_cast<size_t>(i)] = brain[static_cast<size_t>(i)] ? img[static_cast<size_t>(i)] : 0.0f;
  }
}

}  // namespace

const char* to_string(Domain d) noexcept { return d == Domain::Source ? "source" : "shifted"; }

Domain domain_from_string(const std::string& s) {
  if (s == "source") return Domain::Source;
  if (s == "shifted") return Domain::Shifted;
  fail(ErrorKind::InvalidConfig, "unknown domain '" + s + "'");
}

void CohortSpec::validate() const {
  if (n_cases < 1) fail(ErrorKind::InvalidConfig, "n_cases must be at least 1");
  if (n_channels < 1) fail(ErrorKind::InvalidConfig, "n_channels must be at least 1");
  if (tumor_min < 1 || tumor_max < tumor_min) fail(ErrorKind::InvalidConfig, "tumor count range must satisfy 1 <= min <= max");
  if (shift.gamma <= 0 || shift.noise_sigma < 0 || shift.blur_sigma < 0)
    fail(ErrorKind::InvalidConfig, "shift parameters out of range");
  if (spatial_shape.x < 16 || spatial_shape.y < 16 || spatial_shape.z < 16)
    fail(ErrorKind::LesionDoesNotFit, "spatial shape " + to_string(spatial_shape) + " is below 16 voxels along an axis");
}

std::string case_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "case_%04d", index);
  return buf;
}

Case generate_case(const CohortSpec& spec, int case_index) {
  spec.validate();
  if (case_index < 0 || case_index >= spec.n_cases)
    fail(ErrorKind::InvalidConfig, "case index " + std::to_string(case_index) + " outside the cohort");
  const Dims3 d = spec.spatial_shape;

  std::mt19937_64 anat_rng(stream_seed(spec.rng_seed, case_index, kAnatomyStream));
  Anatomy anatomy;
  LabelMap labels;
  bool ok = false;
  for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
    anatomy = sample_anatomy(spec, anat_rng);
    labels = render_labels(anatomy, d);
    ok = prevalence_ok(labels);
  }
  if (!ok) fail(ErrorKind::LesionDoesNotFit, "no lesion layout reaches the minimum label prevalence");

  std::mt19937_64 app_rng(stream_seed(spec.rng_seed, case_index, kAppearanceStream));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);

  Case out;
  out.id = case_id(case_index);
  out.labels = labels;
  Volume& v = out.image;
  v.data = Tensor<float>::feature_map(spec.n_channels, d);
  if (spec.n_channels == 4) {
    v.channel_names = default_channel_names();
  } else {
    v.channel_names.clear();
    for (int c = 0; c < spec.n_channels; ++c) v.channel_names.push_back("ch" + std::to_string(c));
  }

  std::vector<uint8_t> brain(static_cast<size_t>(d.voxels()), 0);
  for (int64_t x = 0; x < d.x; ++x)
    for (int64_t y = 0; y < d.y; ++y)
      for (int64_t z = 0; z < d.z; ++z)
        brain[static_cast<size_t>(d.index(x, y, z))] =
            anatomy.brain.contains(double(x), double(y), double(z), 1.0) || labels.at(x, y, z) != 0;

  const double two_pi = 2.0 * std::numbers::pi;
  for (int c = 0; c < spec.n_channels; ++c) {
    const double base = 100.0 * (0.9 + 0.2 * u01(app_rng));
    const double jitter = spec.n_channels == 4 ? 0.0 : 0.1;
    double contrast[4];
    for (int t = 0; t < 4; ++t) contrast[t] = kContrast[t][c % 4] * (1.0 + jitter * (u01(app_rng) - 0.5));
    // Smooth texture: a few low-frequency plane waves.
    struct Wave {
      double kx, ky, kz, phase, amp;
    };
    std::vector<Wave> waves;
    for (int w = 0; w < 3; ++w) {
      waves.push_back({two_pi * (0.5 + u01(app_rng)) / double(d.x), two_pi * (0.5 + u01(app_rng)) / double(d.y),
                       two_pi * (0.5 + u01(app_rng)) / double(d.z), two_pi * u01(app_rng), 0.04 + 0.04 * u01(app_rng)});
    }
    auto ch = v.data.channel(c);
    for (int64_t x = 0; x < d.x; ++x)
      for (int64_t y = 0; y < d.y; ++y)
        for (int64_t z = 0; z < d.z; ++z) {
          const size_t i = static_cast<size_t>(d.index(x, y, z));
          const double n0 = noise(app_rng);
          if (!brain[i]) continue;
          double tex = 1.0;
          for (const auto& w : waves) tex += w.amp * std::cos(w.kx * x + w.ky * y + w.kz * z + w.phase);
          const LabelClass cls = labels.label_semantics.at(labels.at(x, y, z));
          const double val = base * contrast[tissue_row(cls)] * tex + 3.0 * n0;
          ch[i] = static_cast<float>(std::max(1.0, val));
        }
  }

  if (spec.domain == Domain::Shifted) {
    std::mt19937_64 shift_rng(stream_seed(spec.rng_seed, case_index, kShiftStream));
    apply_shift(v, brain, spec.shift, shift_rng);
    for (size_t i = 0; i < brain.size(); ++i) {
      if (!brain[i]) continue;
      for (int c = 0; c < spec.n_channels; ++c) {
        auto ch = v.data.channel(c);
        ch[i] = std::max(ch[i], 1e-3f);  // keep brain voxels nonzero for foreground statistics
      }
    }
  }
  return out;
}

std::string CohortManifest::to_json() const {
  detail::json j;
  j["schema_version"] = schema_version;
  j["kind"] = "cohort";
  j["domain"] = medpeft::to_string(spec.domain);
  j["seed"] = spec.rng_seed;
  j["n_cases"] = spec.n_cases;
  j["spatial_shape"] = {spec.spatial_shape.x, spec.spatial_shape.y, spec.spatial_shape.z};
  j["n_channels"] = spec.n_channels;
  j["tumor_count_range"] = {spec.tumor_min, spec.tumor_max};
  j["shift"] = {{"gamma", spec.shift.gamma}, {"noise_sigma", spec.shift.noise_sigma}, {"blur_sigma", spec.shift.blur_sigma}};
  detail::json list = detail::json::array();
  for (const auto& c : cases) list.push_back({{"id", c.id}, {"image", c.image}, {"label", c.label}});
  j["cases"] = list;
  return j.dump(2);
}

CohortManifest CohortManifest::from_json(const std::string& text) {
  CohortManifest m;
  try {
    const auto j = detail::json::parse(text);
    if (j.value("kind", "") != "cohort") fail(ErrorKind::SchemaMismatch, "not a cohort manifest");
    m.schema_version = j.at("schema_version").get<int>();
    if (m.schema_version != kCohortSchemaVersion)
      fail(ErrorKind::SchemaMismatch, "cohort schema_version " + std::to_string(m.schema_version) + " unsupported");
    m.spec.domain = domain_from_string(j.at("domain").get<std::string>());
    m.spec.rng_seed = j.at("seed").get<uint64_t>();
    m.spec.n_cases = j.at("n_cases").get<int>();
    const auto& s = j.at("spatial_shape");
    m.spec.spatial_shape = {s.at(0).get<int64_t>(), s.at(1).get<int64_t>(), s.at(2).get<int64_t>()};
    m.spec.n_channels = j.at("n_channels").get<int>();
    m.spec.tumor_min = j.at("tumor_count_range").at(0).get<int>();
    m.spec.tumor_max = j.at("tumor_count_range").at(1).get<int>();
    const auto& sh = j.at("shift");
    m.spec.shift = {sh.at("gamma").get<double>(), sh.at("noise_sigma").get<double>(), sh.at("blur_sigma").get<double>()};
    for (const auto& c : j.at("cases"))
      m.cases.push_back({c.at("id").get<std::string>(), c.at("image").get<std::string>(), c.at("label").get<std::string>()});
  } catch (const detail::json::exception& e) {
    fail(ErrorKind::SchemaMismatch, std::string("cohort manifest: ") + e.what());
  }
  return m;
}

CohortManifest generate_cohort(const CohortSpec& spec, const std::filesystem::path& out_dir) {
  spec.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) fail(ErrorKind::IoError, "cannot create " + out_dir.string() + ": " + ec.message());
  CohortManifest m;
  m.spec = spec;
  for (int i = 0; i < spec.n_cases; ++i) {
    Case c = generate_case(spec, i);
    CohortEntry e{c.id, c.id + "_image", c.id + "_label"};
    write_rawvol(out_dir / e.image, c.image);
    write_rawvol(out_dir / e.label, c.labels, c.image.affine);
    m.cases.push_back(e);
  }
  std::ofstream f(out_dir / "cohort.json");
  f << m.to_json() << "\n";
  if (!f) fail(ErrorKind::IoError, "cannot write " + (out_dir / "cohort.json").string());
  return m;
}

Case Cohort::load(int index) const {
  if (index < 0 || index >= size()) fail(ErrorKind::InvalidConfig, "case index out of range");
  const auto& e = manifest.cases[static_cast<size_t>(index)];
  return {e.id, read_rawvol_volume(dir / e.image), read_rawvol_labels(dir / e.label)};
}

std::vector<Case> Cohort::load_all() const {
  std::vector<Case> out;
  out.reserve(static_cast<size_t>(size()));
  for (int i = 0; i < size(); ++i) out.push_back(load(i));
  return out;
}

Cohort open_cohort(const std::filesystem::path& dir) {
  std::ifstream f(dir / "cohort.json");
  if (!f) fail(ErrorKind::IoError, "no cohort.json in " + dir.string());
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Cohort c{dir, CohortManifest::from_json(text)};
  if (c.manifest.cases.empty()) fail(ErrorKind::EmptyCohort, "cohort " + dir.string() + " lists no cases");
  return c;
}

double laplacian_energy(const Tensor<float>& image) {
  const Dims3 d = image.spatial();
  double total = 0.0;
  int64_t n = 0;
  for (int64_t c = 0; c < image.channels(); ++c)
    for (int64_t x = 1; x + 1 < d.x; ++x)
      for (int64_t y = 1; y + 1 < d.y; ++y)
        for (int64_t z = 1; z + 1 < d.z; ++z) {
          const double l = double(image.at(c, x + 1, y, z)) + image.at(c, x - 1, y, z) + image.at(c, x, y + 1, z) +
                           image.at(c, x, y - 1, z) + image.at(c, x, y, z + 1) + image.at(c, x, y, z - 1) -
                           6.0 * image.at(c, x, y, z);
          total += l * l;
          ++n;
        }
  return n == 0 ? 0.0 : total / static_cast<double>(n);
}

double wasserstein1(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) fail(ErrorKind::InvalidConfig, "wasserstein1 needs two non-empty samples");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  // Integrate |F_a^-1(u) - F_b^-1(u)| over u in [0, 1] by walking both step functions.
  const double wa = 1.0 / static_cast<double>(a.size()), wb = 1.0 / static_cast<double>(b.size());
  size_t i = 0, j = 0;
  double ua = wa, ub = wb, u = 0.0, total = 0.0;
  while (i < a.size() && j < b.size()) {
    const double next = std::min(ua, ub);
    total += (next - u) * std::fabs(a[i] - b[j]);
    u = next;
    if (ua <= next + 1e-15) {
      ++i;
      ua += wa;
    }
    if (ub <= next + 1e-15) {
      ++j;
      ub += wb;
    }
  }
  return total;
}

std::vector<double> normalized_foreground(const Volume& v, int channel) {
  std::vector<double> out;
  auto ch = v.data.channel(channel);
  for (float x : ch)
    if (x != 0.0f) out.push_back(x);
  if (out.empty()) return out;
  double mean = 0.0, var = 0.0;
  for (double x : out) mean += x;
  mean /= static_cast<double>(out.size());
  for (double x : out) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / static_cast<double>(out.size()));
  for (double& x : out) x = sd > 0 ? (x - mean) / sd : 0.0;
  return out;
}

}  // namespace medpeft
