#include "medpeft/volume_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "json_util.hpp"

namespace medpeft {

using detail::json;

namespace {

std::filesystem::path with_ext(std::filesystem::path stem, const char* ext) {
  const auto e = stem.extension();
  if (e == ".rawvol" || e == ".json") stem.replace_extension();
  stem += ext;
  return stem;
}

void write_floats(const std::filesystem::path& path, std::span<const float> values) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (float f : values) {
      auto u = std::bit_cast<uint32_t>(f);
      u = (u >> 24) | ((u >> 8) & 0xff00u) | ((u << 8) & 0xff0000u) | (u << 24);
      out.write(reinterpret_cast<const char*>(&u), 4);
    }
  }
  if (!out) fail(ErrorKind::IoError, "short write to " + path.string());
}

std::vector<float> read_floats(const std::filesystem::path& path, int64_t count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::IoError, "cannot open " + path.string());
  std::vector<float> v(static_cast<size_t>(count));
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
  if (in.gcount() != static_cast<std::streamsize>(v.size() * sizeof(float))) {
    fail(ErrorKind::IoError, path.string() + " is shorter than its manifest shape");
  }
  if constexpr (std::endian::native != std::endian::little) {
    for (float& f : v) {
      auto u = std::bit_cast<uint32_t>(f);
      u = (u >> 24) | ((u >> 8) & 0xff00u) | ((u << 8) & 0xff0000u) | (u << 24);
      f = std::bit_cast<float>(u);
    }
  }
  return v;
}

json read_manifest(const std::filesystem::path& stem, const char* kind) {
  json m = detail::read_json_file(with_ext(stem, ".json"));
  if (!m.contains("format_version") || m["format_version"].get<int>() != kRawFormatVersion) {
    fail(ErrorKind::SchemaMismatch, "unsupported rawvol format_version in " + with_ext(stem, ".json").string());
  }
  if (m.value("kind", std::string()) != kind) {
    fail(ErrorKind::SchemaMismatch, with_ext(stem, ".json").string() + " is not a " + kind + " manifest");
  }
  return m;
}

bool is_raw_path(const std::filesystem::path& p) {
  const auto e = p.extension();
  return e == ".rawvol" || e == ".json";
}

LabelMap labels_from_tensor(const Tensor<float>& t, const LabelSemantics& semantics) {
  LabelMap m(t.spatial());
  m.label_semantics = semantics;
  for (int64_t i = 0; i < m.dims.voxels(); ++i) {
    const float v = t[i];
    const long r = std::lround(v);
    if (std::abs(v - static_cast<float>(r)) > 1e-3f) {
      fail(ErrorKind::UnknownLabelValue, "non-integer label value " + std::to_string(v));
    }
    m[i] = static_cast<int32_t>(r);
  }
  return m;
}

// Permutes/flips a (C, X, Y, Z) tensor: new axis i reads old axis src[i].
template <typename T>
void reorient(const T* in, T* out, int64_t channels, const Dims3& old_d, const Orientation& o, Dims3& new_d) {
  for (int i = 0; i < 3; ++i) new_d[i] = old_d[o.source_axis[static_cast<size_t>(i)]];
  std::array<int64_t, 3> old_stride{old_d.y * old_d.z, old_d.z, 1};
  // Stride in the old buffer for a unit step along each new axis, and start offset.
  std::array<int64_t, 3> step{};
  int64_t base = 0;
  for (int i = 0; i < 3; ++i) {
    const auto ax = static_cast<size_t>(o.source_axis[static_cast<size_t>(i)]);
    if (o.flip[static_cast<size_t>(i)]) {
      step[static_cast<size_t>(i)] = -old_stride[ax];
      base += (old_d[static_cast<int>(ax)] - 1) * old_stride[ax];
    } else {
      step[static_cast<size_t>(i)] = old_stride[ax];
    }
  }
  const int64_t nvox = old_d.voxels();
  for (int64_t c = 0; c < channels; ++c) {
    const T* src = in + c * nvox;
    T* dst = out + c * nvox;
    int64_t w = 0;
    for (int64_t a = 0; a < new_d.x; ++a)
      for (int64_t b = 0; b < new_d.y; ++b) {
        int64_t r = base + a * step[0] + b * step[1];
        for (int64_t k = 0; k < new_d.z; ++k, r += step[2]) dst[w++] = src[r];
      }
  }
}

Affine reoriented_affine(const Affine& a, const Dims3& old_d, const Orientation& o) {
  // M maps new voxel index -> old voxel index.
  Affine m;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) m(r, c) = (r == 3 && c == 3) ? 1.0 : 0.0;
  for (int i = 0; i < 3; ++i) {
    const int j = o.source_axis[static_cast<size_t>(i)];
    if (o.flip[static_cast<size_t>(i)]) {
      m(j, i) = -1.0;
      m(j, 3) = static_cast<double>(old_d[j] - 1);
    } else {
      m(j, i) = 1.0;
    }
  }
  return a * m;
}

struct AxisSample {
  std::vector<int64_t> i0, i1;
  std::vector<double> w;  // weight of i1
};

AxisSample linear_axis(int64_t in, int64_t out) {
  AxisSample s;
  s.i0.resize(static_cast<size_t>(out));
  s.i1.resize(static_cast<size_t>(out));
  s.w.resize(static_cast<size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (int64_t o = 0; o < out; ++o) {
    double p = (static_cast<double>(o) + 0.5) * scale - 0.5;
    p = std::clamp(p, 0.0, static_cast<double>(in - 1));
    const auto f = static_cast<int64_t>(std::floor(p));
    const int64_t n = std::min(f + 1, in - 1);
    s.i0[static_cast<size_t>(o)] = f;
    s.i1[static_cast<size_t>(o)] = n;
    s.w[static_cast<size_t>(o)] = p - static_cast<double>(f);
  }
  return s;
}

std::vector<int64_t> nearest_axis(int64_t in, int64_t out) {
  std::vector<int64_t> idx(static_cast<size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (int64_t o = 0; o < out; ++o) {
    const double p = (static_cast<double>(o) + 0.5) * scale - 0.5;
    idx[static_cast<size_t>(o)] = std::clamp<int64_t>(static_cast<int64_t>(std::floor(p + 0.5)), 0, in - 1);
  }
  return idx;
}

Affine resized_affine(const Affine& a, const Dims3& in, const Dims3& out) {
  Affine m;
  for (int i = 0; i < 3; ++i) {
    const double s = static_cast<double>(in[i]) / static_cast<double>(out[i]);
    m(i, i) = s;
    m(i, 3) = 0.5 * s - 0.5;
  }
  return a * m;
}

void check_target(const Dims3& t) {
  if (t.x < 1 || t.y < 1 || t.z < 1) fail(ErrorKind::InvalidTarget, "resize target must be positive, got " + to_string(t));
}

}  // namespace

// ---------------------------------------------------------------------------
// Raw format
// ---------------------------------------------------------------------------

void write_rawvol(const std::filesystem::path& stem, const Volume& v) {
  v.validate();
  json m;
  m["format_version"] = kRawFormatVersion;
  m["kind"] = "volume";
  m["shape"] = v.data.shape();
  m["channels"] = v.channel_names;
  m["affine"] = detail::affine_to_json(v.affine);
  m["voxel_spacing"] = v.voxel_spacing;
  m["dtype"] = "float32";
  m["byte_order"] = "little";
  write_floats(with_ext(stem, ".rawvol"), v.data.values());
  detail::write_json_file(with_ext(stem, ".json"), m);
}

void write_rawvol(const std::filesystem::path& stem, const LabelMap& lm, const Affine& affine) {
  json m;
  m["format_version"] = kRawFormatVersion;
  m["kind"] = "labels";
  m["shape"] = std::vector<int64_t>{lm.dims.x, lm.dims.y, lm.dims.z};
  m["affine"] = detail::affine_to_json(affine);
  m["label_semantics"] = detail::semantics_to_json(lm.label_semantics);
  m["dtype"] = "float32";
  m["byte_order"] = "little";
  std::vector<float> values(lm.data.begin(), lm.data.end());
  write_floats(with_ext(stem, ".rawvol"), values);
  detail::write_json_file(with_ext(stem, ".json"), m);
}

Volume read_rawvol_volume(const std::filesystem::path& stem) {
  const json m = read_manifest(stem, "volume");
  Volume v;
  try {
    const auto shape = m.at("shape").get<std::vector<int64_t>>();
    if (shape.size() != 4) fail(ErrorKind::SchemaMismatch, "volume shape must have 4 entries");
    v.data = Tensor<float>(shape, read_floats(with_ext(stem, ".rawvol"), Tensor<float>::product(shape)));
    v.channel_names = m.at("channels").get<std::vector<std::string>>();
    v.affine = detail::affine_from_json(m.at("affine"));
    if (m.contains("voxel_spacing")) {
      v.voxel_spacing = m["voxel_spacing"].get<std::array<double, 3>>();
    } else {
      v.voxel_spacing = v.affine.column_norms();
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::SchemaMismatch, with_ext(stem, ".json").string() + ": " + e.what());
  }
  v.validate();
  return v;
}

LabelMap read_rawvol_labels(const std::filesystem::path& stem) {
  const json m = read_manifest(stem, "labels");
  try {
    const auto shape = m.at("shape").get<std::vector<int64_t>>();
    if (shape.size() != 3) fail(ErrorKind::SchemaMismatch, "label shape must have 3 entries");
    const Tensor<float> t({1, shape[0], shape[1], shape[2]},
                          read_floats(with_ext(stem, ".rawvol"), Tensor<float>::product(shape)));
    const LabelSemantics sem =
        m.contains("label_semantics") ? detail::semantics_from_json(m["label_semantics"]) : default_label_semantics();
    LabelMap lm = labels_from_tensor(t, sem);
    lm.validate();
    return lm;
  } catch (const json::exception& e) {
    fail(ErrorKind::SchemaMismatch, with_ext(stem, ".json").string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Orientation
// ---------------------------------------------------------------------------

Orientation ras_orientation(const Affine& a) {
  if (!a.invertible()) fail(ErrorKind::NonInvertibleAffine, "cannot orient a singular affine");
  const auto norms = a.column_norms();
  double dir[3][3];  // dir[world][voxel]
  for (int w = 0; w < 3; ++w)
    for (int v = 0; v < 3; ++v) dir[w][v] = a(w, v) / norms[static_cast<size_t>(v)];

  // Greedy assignment by largest absolute direction cosine.
  Orientation o;
  std::array<bool, 3> world_used{}, voxel_used{};
  for (int round = 0; round < 3; ++round) {
    int bw = -1, bv = -1;
    double best = -1.0;
    for (int w = 0; w < 3; ++w) {
      if (world_used[static_cast<size_t>(w)]) continue;
      for (int v = 0; v < 3; ++v) {
        if (voxel_used[static_cast<size_t>(v)]) continue;
        if (std::abs(dir[w][v]) > best) {
          best = std::abs(dir[w][v]);
          bw = w;
          bv = v;
        }
      }
    }
    world_used[static_cast<size_t>(bw)] = true;
    voxel_used[static_cast<size_t>(bv)] = true;
    o.source_axis[static_cast<size_t>(bw)] = bv;
    o.flip[static_cast<size_t>(bw)] = dir[bw][bv] < 0.0;
  }
  return o;
}

Volume to_canonical(const Volume& v) {
  const Orientation o = ras_orientation(v.affine);
  if (o.is_identity()) return v;
  Volume out;
  out.channel_names = v.channel_names;
  const Dims3 old_d = v.spatial();
  Dims3 new_d;
  for (int i = 0; i < 3; ++i) new_d[i] = old_d[o.source_axis[static_cast<size_t>(i)]];
  out.data = Tensor<float>::feature_map(v.channels(), new_d);
  reorient(v.data.data(), out.data.data(), v.channels(), old_d, o, new_d);
  out.affine = reoriented_affine(v.affine, old_d, o);
  for (int i = 0; i < 3; ++i) {
    out.voxel_spacing[static_cast<size_t>(i)] = v.voxel_spacing[static_cast<size_t>(o.source_axis[static_cast<size_t>(i)])];
  }
  return out;
}

LabelMap to_canonical(const LabelMap& m, const Affine& affine) {
  const Orientation o = ras_orientation(affine);
  if (o.is_identity()) return m;
  LabelMap out;
  out.label_semantics = m.label_semantics;
  out.data.resize(m.data.size());
  reorient(m.data.data(), out.data.data(), 1, m.dims, o, out.dims);
  return out;
}

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

std::pair<Volume, std::optional<LabelMap>> load_case(const std::vector<std::filesystem::path>& image_paths,
                                                     const std::optional<std::filesystem::path>& label_path,
                                                     const std::vector<std::string>& channel_names,
                                                     const LabelSemantics& semantics) {
  const auto wanted = static_cast<int64_t>(channel_names.size());
  std::vector<Volume> parts;
  int64_t have = 0;
  for (const auto& p : image_paths) {
    if (!std::filesystem::exists(p) && !(is_raw_path(p) && std::filesystem::exists(with_ext(p, ".json")))) {
      fail(ErrorKind::IoError, "missing image " + p.string());
    }
    Volume part;
    if (is_raw_path(p)) {
      part = read_rawvol_volume(p);
    } else {
      NiftiImage img = read_nifti(p);
      part.data = std::move(img.data);
      part.affine = img.affine;
      part.voxel_spacing = img.affine.column_norms();
      part.channel_names.clear();
      for (int64_t c = 0; c < part.data.channels(); ++c) part.channel_names.push_back(p.filename().string());
    }
    part = to_canonical(part);
    have += part.channels();
    parts.push_back(std::move(part));
  }
  if (have < wanted) {
    fail(ErrorKind::MissingModality,
         "need " + std::to_string(wanted) + " modalities, got " + std::to_string(have));
  }
  if (have > wanted) {
    fail(ErrorKind::ShapeMismatch, "got " + std::to_string(have) + " channels for " + std::to_string(wanted) + " names");
  }
  const Dims3 d = parts.front().spatial();
  for (const auto& p : parts) {
    if (p.spatial() != d) {
      fail(ErrorKind::ShapeMismatch, "modalities disagree on shape: " + to_string(d) + " vs " + to_string(p.spatial()));
    }
  }

  Volume v;
  v.channel_names = channel_names;
  v.affine = parts.front().affine;
  v.voxel_spacing = parts.front().voxel_spacing;
  v.data = Tensor<float>::feature_map(wanted, d);
  int64_t c = 0;
  for (const auto& p : parts) {
    for (int64_t pc = 0; pc < p.channels(); ++pc, ++c) {
      std::copy(p.data.channel(pc).begin(), p.data.channel(pc).end(), v.data.channel(c).begin());
    }
  }

  std::optional<LabelMap> labels;
  if (label_path) {
    LabelMap lm;
    if (is_raw_path(*label_path)) {
      const json m = read_manifest(*label_path, "labels");
      lm = read_rawvol_labels(*label_path);
      lm = to_canonical(lm, detail::affine_from_json(m.at("affine")));
    } else {
      NiftiImage img = read_nifti(*label_path);
      lm = labels_from_tensor(img.data, semantics);
      lm = to_canonical(lm, img.affine);
    }
    lm.label_semantics = semantics;
    lm.validate();
    if (lm.dims != d) fail(ErrorKind::ShapeMismatch, "label map " + to_string(lm.dims) + " vs image " + to_string(d));
    labels = std::move(lm);
  }
  return {std::move(v), std::move(labels)};
}

// ---------------------------------------------------------------------------
// Resampling and normalisation
// ---------------------------------------------------------------------------

Volume resize_volume(const Volume& v, const Dims3& target) {
  check_target(target);
  const Dims3 in = v.spatial();
  Volume out;
  out.channel_names = v.channel_names;
  out.affine = resized_affine(v.affine, in, target);
  for (int i = 0; i < 3; ++i) {
    out.voxel_spacing[static_cast<size_t>(i)] =
        v.voxel_spacing[static_cast<size_t>(i)] * static_cast<double>(in[i]) / static_cast<double>(target[i]);
  }
  out.data = Tensor<float>::feature_map(v.channels(), target);
  if (in == target) {
    out.data = v.data;
    return out;
  }
  const AxisSample ax = linear_axis(in.x, target.x), ay = linear_axis(in.y, target.y), az = linear_axis(in.z, target.z);
  for (int64_t c = 0; c < v.channels(); ++c) {
    const float* src = v.data.channel(c).data();
    float* dst = out.data.channel(c).data();
    int64_t w = 0;
    for (int64_t i = 0; i < target.x; ++i) {
      const auto si = static_cast<size_t>(i);
      for (int64_t j = 0; j < target.y; ++j) {
        const auto sj = static_cast<size_t>(j);
        const float* p00 = src + (ax.i0[si] * in.y + ay.i0[sj]) * in.z;
        const float* p01 = src + (ax.i0[si] * in.y + ay.i1[sj]) * in.z;
        const float* p10 = src + (ax.i1[si] * in.y + ay.i0[sj]) * in.z;
        const float* p11 = src + (ax.i1[si] * in.y + ay.i1[sj]) * in.z;
        const double wx = ax.w[si], wy = ay.w[sj];
        for (int64_t k = 0; k < target.z; ++k) {
          const auto sk = static_cast<size_t>(k);
          const int64_t k0 = az.i0[sk], k1 = az.i1[sk];
          const double wz = az.w[sk];
          const double c00 = p00[k0] * (1 - wz) + p00[k1] * wz;
          const double c01 = p01[k0] * (1 - wz) + p01[k1] * wz;
          const double c10 = p10[k0] * (1 - wz) + p10[k1] * wz;
          const double c11 = p11[k0] * (1 - wz) + p11[k1] * wz;
          const double c0 = c00 * (1 - wy) + c01 * wy;
          const double c1 = c10 * (1 - wy) + c11 * wy;
          dst[w++] = static_cast<float>(c0 * (1 - wx) + c1 * wx);
        }
      }
    }
  }
  return out;
}

LabelMap resize_labels(const LabelMap& m, const Dims3& target) {
  check_target(target);
  if (m.dims == target) return m;
  LabelMap out(target);
  out.label_semantics = m.label_semantics;
  const auto ix = nearest_axis(m.dims.x, target.x), iy = nearest_axis(m.dims.y, target.y),
             iz = nearest_axis(m.dims.z, target.z);
  int64_t w = 0;
  for (int64_t i = 0; i < target.x; ++i)
    for (int64_t j = 0; j < target.y; ++j)
      for (int64_t k = 0; k < target.z; ++k) {
        out[w++] = m.at(ix[static_cast<size_t>(i)], iy[static_cast<size_t>(j)], iz[static_cast<size_t>(k)]);
      }
  return out;
}

Volume z_normalize(const Volume& v, NormalizationMask mask) {
  Volume out = v;
  for (int64_t c = 0; c < v.channels(); ++c) {
    auto ch = out.data.channel(c);
    double sum = 0.0, sq = 0.0;
    int64_t n = 0;
    for (float x : ch) {
      if (mask == NormalizationMask::NonzeroVoxels && x == 0.0f) continue;
      sum += x;
      ++n;
    }
    if (n == 0) {
      std::fill(ch.begin(), ch.end(), 0.0f);
      continue;
    }
    const double mean = sum / static_cast<double>(n);
    for (float x : ch) {
      if (mask == NormalizationMask::NonzeroVoxels && x == 0.0f) continue;
      sq += (x - mean) * (x - mean);
    }
    const double sd = std::sqrt(sq / static_cast<double>(n));
    if (!(sd > 1e-12 * std::max(1.0, std::abs(mean)))) {
      std::fill(ch.begin(), ch.end(), 0.0f);
      continue;
    }
    for (float& x : ch) {
      if (mask == NormalizationMask::NonzeroVoxels && x == 0.0f) continue;
      x = static_cast<float>((x - mean) / sd);
    }
  }
  return out;
}

std::pair<Volume, std::optional<LabelMap>> preprocess(const Volume& v, const std::optional<LabelMap>& m,
                                                      const PreprocessConfig& cfg) {
  Volume out = z_normalize(resize_volume(to_canonical(v), cfg.target), cfg.normalization);
  std::optional<LabelMap> labels;
  if (m) labels = resize_labels(to_canonical(*m, v.affine), cfg.target);
  return {std::move(out), std::move(labels)};
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

AugmentConfig AugmentConfig::none() {
  AugmentConfig c;
  c.flip_probability = 0.0;
  c.affine_probability = 0.0;
  c.noise_probability = 0.0;
  return c;
}

std::pair<Volume, LabelMap> augment(const Volume& v, const LabelMap& m, uint64_t rng_seed, const AugmentConfig& cfg) {
  const Dims3 d = v.spatial();
  if (m.dims != d) fail(ErrorKind::ShapeMismatch, "image and labels are not aligned");

  // Every draw is made unconditionally so the stream layout does not depend on the probabilities.
  std::mt19937_64 rng(rng_seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const bool flip = unit(rng) < cfg.flip_probability;
  const bool do_affine = unit(rng) < cfg.affine_probability;
  const double scale = cfg.scale_min + (cfg.scale_max - cfg.scale_min) * unit(rng);
  std::array<double, 3> rot{}, shift{};
  for (auto& r : rot) r = (2.0 * unit(rng) - 1.0) * cfg.rotation_degrees * std::numbers::pi / 180.0;
  for (auto& t : shift) t = (2.0 * unit(rng) - 1.0) * cfg.translation_voxels;
  const bool do_noise = unit(rng) < cfg.noise_probability;
  const double sigma = cfg.noise_sigma_max * unit(rng);
  const uint64_t noise_seed = rng();

  Volume out_v = v;
  LabelMap out_m = m;

  if (flip || do_affine) {
    // Output voxel -> input voxel: p = R^T (o - c - t) / s + c, then optional LR flip of o.
    const double cx = std::cos(rot[0]), sx = std::sin(rot[0]);
    const double cy = std::cos(rot[1]), sy = std::sin(rot[1]);
    const double cz = std::cos(rot[2]), sz = std::sin(rot[2]);
    // R = Rz * Ry * Rx
    const double r[3][3] = {{cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx},
                            {sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx},
                            {-sy, cy * sx, cy * cx}};
    const std::array<double, 3> centre{(static_cast<double>(d.x) - 1) / 2, (static_cast<double>(d.y) - 1) / 2,
                                       (static_cast<double>(d.z) - 1) / 2};
    const int bg = std::max(0, m.label_for(LabelClass::Background));

    for (int64_t i = 0; i < d.x; ++i)
      for (int64_t j = 0; j < d.y; ++j)
        for (int64_t k = 0; k < d.z; ++k) {
          std::array<double, 3> o{static_cast<double>(flip ? d.x - 1 - i : i), static_cast<double>(j),
                                  static_cast<double>(k)};
          std::array<double, 3> p = o;
          if (do_affine) {
            const std::array<double, 3> q{o[0] - centre[0] - shift[0], o[1] - centre[1] - shift[1],
                                          o[2] - centre[2] - shift[2]};
            for (int a = 0; a < 3; ++a) {
              p[static_cast<size_t>(a)] =
                  (r[0][a] * q[0] + r[1][a] * q[1] + r[2][a] * q[2]) / scale + centre[static_cast<size_t>(a)];
            }
          }
          const int64_t w = d.index(i, j, k);
          // Labels: nearest neighbour, background outside.
          const auto ni = static_cast<int64_t>(std::floor(p[0] + 0.5));
          const auto nj = static_cast<int64_t>(std::floor(p[1] + 0.5));
          const auto nk = static_cast<int64_t>(std::floor(p[2] + 0.5));
          const bool inside = ni >= 0 && nj >= 0 && nk >= 0 && ni < d.x && nj < d.y && nk < d.z;
          out_m[w] = inside ? m.at(ni, nj, nk) : bg;
          // Image: trilinear, zero outside.
          const auto fi = static_cast<int64_t>(std::floor(p[0]));
          const auto fj = static_cast<int64_t>(std::floor(p[1]));
          const auto fk = static_cast<int64_t>(std::floor(p[2]));
          const double wx = p[0] - static_cast<double>(fi), wy = p[1] - static_cast<double>(fj),
                       wz = p[2] - static_cast<double>(fk);
          for (int64_t c = 0; c < v.channels(); ++c) {
            double acc = 0.0;
            for (int dx = 0; dx < 2; ++dx)
              for (int dy = 0; dy < 2; ++dy)
                for (int dz = 0; dz < 2; ++dz) {
                  const int64_t a = fi + dx, b = fj + dy, e = fk + dz;
                  if (a < 0 || b < 0 || e < 0 || a >= d.x || b >= d.y || e >= d.z) continue;
                  const double wt = (dx ? wx : 1 - wx) * (dy ? wy : 1 - wy) * (dz ? wz : 1 - wz);
                  if (wt == 0.0) continue;
                  acc += wt * v.data.at(c, a, b, e);
                }
            out_v.data.at(c, i, j, k) = static_cast<float>(acc);
          }
        }
  }

  if (do_noise && sigma > 0.0) {
    std::mt19937_64 noise_rng(noise_seed);
    std::normal_distribution<double> gauss(0.0, sigma);
    for (float& x : out_v.data.values()) x = static_cast<float>(x + gauss(noise_rng));
  }
  return {std::move(out_v), std::move(out_m)};
}

}  // namespace medpeft
