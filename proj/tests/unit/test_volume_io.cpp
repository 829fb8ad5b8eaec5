#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <set>

#include <unistd.h>

#include "medpeft/error.hpp"
#include "medpeft/volume_io.hpp"
#include "support.hpp"

using namespace medpeft;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("medpeft_vio_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Volume random_volume(Dims3 d, uint64_t seed, int channels = 4) {
  Volume v;
  v.data = testutil::random_tensor<float>({channels, d.x, d.y, d.z}, seed, 0.5, 3.0);
  v.channel_names.resize(static_cast<size_t>(channels));
  for (int c = 0; c < channels; ++c) v.channel_names[static_cast<size_t>(c)] = "c" + std::to_string(c);
  return v;
}

LabelMap random_labels(Dims3 d, uint64_t seed) {
  LabelMap m(d);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> u(0, 3);
  for (auto& x : m.data) x = u(rng);
  return m;
}

template <typename E>
ErrorKind kind_of(E&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("no error raised");
  return ErrorKind::IoError;
}

// Minimal NIfTI-1 writer: int16 data with scaling and an sform.
void write_int16_nifti(const fs::path& p, Dims3 d, const std::vector<int16_t>& fortran_order, float slope,
                       float inter, const std::array<float, 12>& srow) {
  std::vector<char> hdr(352, 0);
  auto put32 = [&](size_t off, int32_t v) { std::memcpy(&hdr[off], &v, 4); };
  auto put16 = [&](size_t off, int16_t v) { std::memcpy(&hdr[off], &v, 2); };
  auto putf = [&](size_t off, float v) { std::memcpy(&hdr[off], &v, 4); };
  put32(0, 348);
  put16(40, 3);
  put16(42, static_cast<int16_t>(d.x));
  put16(44, static_cast<int16_t>(d.y));
  put16(46, static_cast<int16_t>(d.z));
  put16(48, 1);
  put16(70, 4);   // DT_INT16
  put16(72, 16);  // bitpix
  putf(76, 1.0f);
  putf(80, std::fabs(srow[0]));
  putf(84, std::fabs(srow[5]));
  putf(88, std::fabs(srow[10]));
  putf(108, 352.0f);
  putf(112, slope);
  putf(116, inter);
  put16(254, 1);  // sform_code
  for (int i = 0; i < 12; ++i) putf(280 + 4 * static_cast<size_t>(i), srow[static_cast<size_t>(i)]);
  std::memcpy(&hdr[344], "n+1\0", 4);
  std::ofstream f(p, std::ios::binary);
  f.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
  f.write(reinterpret_cast<const char*>(fortran_order.data()),
          static_cast<std::streamsize>(fortran_order.size() * sizeof(int16_t)));
}

}  // namespace

TEST_CASE("hand-written NIfTI header is decoded") {
  const auto dir = scratch_dir("nifti_hand");
  const Dims3 d{3, 4, 2};
  std::vector<int16_t> raw(static_cast<size_t>(d.voxels()));
  for (size_t i = 0; i < raw.size(); ++i) raw[i] = static_cast<int16_t>(i * 3 - 20);
  const std::array<float, 12> srow{-2, 0, 0, 10, 0, 1.5f, 0, -4, 0, 0, 3, 7};
  write_int16_nifti(dir / "a.nii", d, raw, 0.5f, 1.0f, srow);
  const auto img = read_nifti(dir / "a.nii");
  REQUIRE(img.data.shape() == std::vector<int64_t>{1, 3, 4, 2});
  for (int64_t z = 0; z < d.z; ++z)
    for (int64_t y = 0; y < d.y; ++y)
      for (int64_t x = 0; x < d.x; ++x) {
        const size_t fi = static_cast<size_t>(x + d.x * (y + d.y * z));
        CHECK(img.data.at(0, x, y, z) == doctest::Approx(raw[fi] * 0.5 + 1.0));
      }
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) CHECK(img.affine(r, c) == srow[static_cast<size_t>(r * 4 + c)]);
  fs::remove_all(dir);
}

TEST_CASE("NIfTI and raw round trips") {
  const auto dir = scratch_dir("roundtrip");
  Volume v = random_volume({5, 6, 7}, 1);
  v.affine = Affine::diagonal(1.5, 2.0, 0.5);
  v.affine(0, 3) = 3.0;
  v.voxel_spacing = {1.5, 2.0, 0.5};
  for (const char* ext : {".nii", ".nii.gz"}) {
    write_nifti(dir / (std::string("img") + ext), v.data, v.affine);
    const auto back = read_nifti(dir / (std::string("img") + ext));
    CHECK(back.data == v.data);
    CHECK(back.affine == v.affine);
  }
  LabelMap m = random_labels({5, 6, 7}, 2);
  write_nifti_labels(dir / "seg.nii.gz", m, v.affine);
  const auto seg = read_nifti(dir / "seg.nii.gz");
  for (int64_t i = 0; i < seg.data.size(); ++i) CHECK(static_cast<int32_t>(seg.data[i]) == m.data[static_cast<size_t>(i)]);

  write_rawvol(dir / "case", v);
  const Volume rv = read_rawvol_volume(dir / "case");
  CHECK(rv.data == v.data);
  CHECK(rv.affine == v.affine);
  CHECK(rv.channel_names == v.channel_names);
  CHECK(rv.voxel_spacing == v.voxel_spacing);
  write_rawvol(dir / "seg", m, v.affine);
  CHECK(read_rawvol_labels(dir / "seg") == m);
  CHECK(kind_of([&] { read_rawvol_volume(dir / "nothing"); }) == ErrorKind::IoError);
  fs::remove_all(dir);
}

TEST_CASE("load_case stacks modalities and checks preconditions") {
  const auto dir = scratch_dir("load");
  const Dims3 d{4, 5, 6};
  std::vector<fs::path> paths;
  Volume full = random_volume(d, 3);
  for (int c = 0; c < 4; ++c) {
    Tensor<float> one = Tensor<float>::feature_map(1, d);
    auto src = full.data.channel(c);
    std::copy(src.begin(), src.end(), one.values().begin());
    auto p = dir / ("mod" + std::to_string(c) + ".nii.gz");
    write_nifti(p, one, Affine::identity());
    paths.push_back(p);
  }
  LabelMap m = random_labels(d, 4);
  write_nifti_labels(dir / "seg.nii.gz", m, Affine::identity());
  auto [v, lab] = load_case(paths, dir / "seg.nii.gz");
  CHECK(v.data == full.data);
  CHECK(v.channel_names == default_channel_names());
  REQUIRE(lab.has_value());
  CHECK(lab->data == m.data);

  CHECK(kind_of([&] { load_case({paths[0], paths[1], paths[2]}, std::nullopt); }) == ErrorKind::MissingModality);

  LabelMap bad = m;
  bad.data[7] = 7;
  write_nifti_labels(dir / "bad.nii.gz", bad, Affine::identity());
  CHECK(kind_of([&] { load_case(paths, dir / "bad.nii.gz"); }) == ErrorKind::UnknownLabelValue);

  auto odd = dir / "odd.nii.gz";
  write_nifti(odd, Tensor<float>::feature_map(1, {4, 5, 7}), Affine::identity());
  CHECK(kind_of([&] { load_case({paths[0], paths[1], paths[2], odd}, std::nullopt); }) == ErrorKind::ShapeMismatch);
  fs::remove_all(dir);
}

TEST_CASE("to_canonical preserves world positions") {
  Volume ras = random_volume({4, 5, 6}, 5, 2);
  ras.affine = Affine::diagonal(1.0, 2.0, 3.0);
  CHECK(to_canonical(ras).data == ras.data);
  CHECK(to_canonical(ras).affine == ras.affine);

  Volume lps = ras;
  lps.affine = Affine::diagonal(-1.0, -2.0, 3.0);
  lps.affine(0, 3) = 5;
  lps.affine(1, 3) = -7;
  const Volume out = to_canonical(lps);
  CHECK(out.affine(0, 0) > 0);
  CHECK(out.affine(1, 1) > 0);
  std::mt19937_64 rng(6);
  const Dims3 d = lps.spatial();
  for (int n = 0; n < 10; ++n) {
    const int64_t i = static_cast<int64_t>(rng() % 4), j = static_cast<int64_t>(rng() % 5),
                  k = static_cast<int64_t>(rng() % 6);
    const auto w = lps.affine.apply(double(i), double(j), double(k));
    // Locate the same world point in the output grid.
    const auto idx = out.affine.inverse().apply(w[0], w[1], w[2]);
    const int64_t a = std::llround(idx[0]), b = std::llround(idx[1]), c = std::llround(idx[2]);
    const auto w2 = out.affine.apply(double(a), double(b), double(c));
    for (int q = 0; q < 3; ++q) CHECK(std::fabs(w[static_cast<size_t>(q)] - w2[static_cast<size_t>(q)]) < 1e-6);
    CHECK(a == d.x - 1 - i);
    CHECK(b == d.y - 1 - j);
    CHECK(c == k);
    for (int ch = 0; ch < 2; ++ch) CHECK(out.data.at(ch, a, b, c) == lps.data.at(ch, i, j, k));
  }

  // An axis permutation as well.
  Volume perm = ras;
  perm.affine = Affine{};
  perm.affine.m = {0, 0, 2, 1, 1, 0, 0, 2, 0, -1, 0, 3, 0, 0, 0, 1};
  const Volume po = to_canonical(perm);
  CHECK(po.spatial() == Dims3{6, 4, 5});
  for (int n = 0; n < 10; ++n) {
    const int64_t i = static_cast<int64_t>(rng() % 4), j = static_cast<int64_t>(rng() % 5),
                  k = static_cast<int64_t>(rng() % 6);
    const auto w = perm.affine.apply(double(i), double(j), double(k));
    const auto idx = po.affine.inverse().apply(w[0], w[1], w[2]);
    const int64_t a = std::llround(idx[0]), b = std::llround(idx[1]), c = std::llround(idx[2]);
    for (int q = 0; q < 3; ++q) CHECK(std::fabs(idx[static_cast<size_t>(q)] - std::round(idx[static_cast<size_t>(q)])) < 1e-6);
    CHECK(po.data.at(0, a, b, c) == perm.data.at(0, i, j, k));
  }

  Volume sing = ras;
  sing.affine = Affine::diagonal(1.0, 0.0, 1.0);
  CHECK(kind_of([&] { to_canonical(sing); }) == ErrorKind::NonInvertibleAffine);
}

TEST_CASE("resize against a direct trilinear evaluation") {
  Volume v = random_volume({5, 7, 4}, 7, 1);
  const Dims3 t{9, 3, 6};
  const Volume out = resize_volume(v, t);
  CHECK(out.spatial() == t);
  const Dims3 in = v.spatial();
  auto coord = [](int64_t o, int64_t n_in, int64_t n_out) {
    const double p = (o + 0.5) * double(n_in) / double(n_out) - 0.5;
    return std::min(std::max(p, 0.0), double(n_in - 1));
  };
  auto sample = [&](double x, double y, double z) {
    const int64_t x0 = int64_t(std::floor(x)), y0 = int64_t(std::floor(y)), z0 = int64_t(std::floor(z));
    double s = 0;
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b)
        for (int c = 0; c < 2; ++c) {
          const int64_t xi = std::min(x0 + a, in.x - 1), yi = std::min(y0 + b, in.y - 1), zi = std::min(z0 + c, in.z - 1);
          const double w = (a ? x - x0 : 1 - (x - x0)) * (b ? y - y0 : 1 - (y - y0)) * (c ? z - z0 : 1 - (z - z0));
          s += w * v.data.at(0, xi, yi, zi);
        }
    return s;
  };
  double worst = 0;
  for (int64_t x = 0; x < t.x; ++x)
    for (int64_t y = 0; y < t.y; ++y)
      for (int64_t z = 0; z < t.z; ++z)
        worst = std::max(worst, std::fabs(out.data.at(0, x, y, z) -
                                          sample(coord(x, in.x, t.x), coord(y, in.y, t.y), coord(z, in.z, t.z))));
  CHECK(worst < 1e-5);
  CHECK(out.voxel_spacing[0] == doctest::Approx(5.0 / 9.0));
  CHECK(out.voxel_spacing[1] == doctest::Approx(7.0 / 3.0));

  CHECK(testutil::max_abs_diff(resize_volume(v, in).data, v.data) <= 1e-6);
  CHECK(kind_of([&] { resize_volume(v, {0, 3, 3}); }) == ErrorKind::InvalidTarget);

  LabelMap m(in);
  for (size_t i = 0; i < m.data.size(); ++i) m.data[i] = (i % 3 == 0) ? 3 : 0;
  const LabelMap rm = resize_labels(m, t);
  std::set<int32_t> seen(rm.data.begin(), rm.data.end());
  for (int32_t s : seen) CHECK((s == 0 || s == 3));
  CHECK(resize_labels(m, in) == m);
}

TEST_CASE("resize a 255 cube to 128") {
  Volume v;
  v.data = Tensor<float>::feature_map(4, {255, 255, 255}, 1.0f);
  const Volume out = resize_volume(v, {128, 128, 128});
  CHECK(out.data.shape() == std::vector<int64_t>{4, 128, 128, 128});
  CHECK(out.data.at(3, 127, 64, 0) == doctest::Approx(1.0f));
}

TEST_CASE("z normalization") {
  Volume two;
  two.data = Tensor<float>::feature_map(2, {2, 2, 1});
  two.channel_names = {"a", "b"};
  two.data.at(0, 0, 0, 0) = 2;
  two.data.at(0, 1, 0, 0) = 4;
  for (int64_t i = 0; i < 4; ++i) two.data[4 + i] = 5.0f;
  const Volume z = z_normalize(two);
  CHECK(z.data.at(0, 0, 0, 0) == doctest::Approx(-1.0));
  CHECK(z.data.at(0, 1, 0, 0) == doctest::Approx(1.0));
  CHECK(z.data.at(0, 0, 1, 0) == 0.0f);
  for (int64_t i = 0; i < 4; ++i) CHECK(z.data[4 + i] == 0.0f);

  Volume r = random_volume({9, 8, 7}, 8, 3);
  for (int64_t i = 0; i < r.data.size(); i += 5) r.data[i] = 0.0f;
  for (NormalizationMask mode : {NormalizationMask::NonzeroVoxels, NormalizationMask::AllVoxels}) {
    const Volume n = z_normalize(r, mode);
    for (int64_t c = 0; c < 3; ++c) {
      double s = 0, ss = 0;
      int64_t cnt = 0;
      for (int64_t i = 0; i < r.data.voxels(); ++i) {
        const int64_t at = c * r.data.voxels() + i;
        if (mode == NormalizationMask::NonzeroVoxels && r.data[at] == 0.0f) {
          CHECK(n.data[at] == 0.0f);
          continue;
        }
        s += n.data[at];
        ss += double(n.data[at]) * n.data[at];
        ++cnt;
      }
      const double mean = s / cnt;
      CHECK(std::fabs(mean) < 1e-5);
      CHECK(std::fabs(std::sqrt(ss / cnt - mean * mean) - 1.0) < 1e-5);
    }
  }
}

TEST_CASE("preprocessing is idempotent at a fixed target") {
  Volume v = random_volume({10, 12, 9}, 9);
  v.affine = Affine::diagonal(-1.0, -1.0, 1.0);
  for (int64_t i = 0; i < v.data.size(); i += 4) v.data[i] = 0.0f;
  const LabelMap m = random_labels({10, 12, 9}, 10);
  PreprocessConfig cfg;
  cfg.target = {8, 8, 8};
  auto [v1, m1] = preprocess(v, m, cfg);
  auto [v2, m2] = preprocess(v1, m1, cfg);
  CHECK(testutil::max_abs_diff(v1.data, v2.data) <= 1e-5);
  CHECK(*m1 == *m2);
}

TEST_CASE("augmentation") {
  const Dims3 d{10, 9, 8};
  Volume v = random_volume(d, 11);
  const LabelMap m = random_labels(d, 12);

  auto [vi, mi] = augment(v, m, 5, AugmentConfig::none());
  CHECK(vi.data == v.data);
  CHECK(mi == m);

  AugmentConfig all;
  all.flip_probability = all.affine_probability = all.noise_probability = 1.0;
  auto [a1, l1] = augment(v, m, 42, all);
  auto [a2, l2] = augment(v, m, 42, all);
  CHECK(a1.data == a2.data);
  CHECK(l1 == l2);
  CHECK_FALSE(a1.data == v.data);

  AugmentConfig flip = AugmentConfig::none();
  flip.flip_probability = 1.0;
  auto [vf, lf] = augment(v, m, 1, flip);
  for (int64_t x = 0; x < d.x; ++x)
    for (int64_t y = 0; y < d.y; ++y)
      for (int64_t z = 0; z < d.z; ++z) {
        CHECK(lf.at(x, y, z) == m.at(d.x - 1 - x, y, z));
        CHECK(vf.data.at(2, x, y, z) == v.data.at(2, d.x - 1 - x, y, z));
      }

  // Labels stay within the original label set under a full affine.
  std::set<int32_t> seen(l1.data.begin(), l1.data.end());
  for (int32_t s : seen) CHECK(m.label_semantics.count(s) == 1);
}
