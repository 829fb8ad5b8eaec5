#include <doctest.h>

#include <fstream>
#include <iterator>
#include <random>

#include <unistd.h>

#include "medpeft/metrics.hpp"
#include "medpeft/synthetic_cohort.hpp"

using namespace medpeft;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("medpeft_syn_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

CohortSpec spec_of(int n, Domain d, uint64_t seed, Dims3 shape = {32, 32, 32}) {
  CohortSpec s;
  s.n_cases = n;
  s.domain = d;
  s.rng_seed = seed;
  s.spatial_shape = shape;
  return s;
}

// Area between the two empirical CDFs.
double cdf_area(std::vector<double> a, std::vector<double> b) {
  std::vector<double> pts = a;
  pts.insert(pts.end(), b.begin(), b.end());
  std::sort(pts.begin(), pts.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double area = 0;
  for (size_t i = 0; i + 1 < pts.size(); ++i) {
    const double fa = double(std::upper_bound(a.begin(), a.end(), pts[i]) - a.begin()) / a.size();
    const double fb = double(std::upper_bound(b.begin(), b.end(), pts[i]) - b.begin()) / b.size();
    area += std::fabs(fa - fb) * (pts[i + 1] - pts[i]);
  }
  return area;
}

}  // namespace

TEST_CASE("wasserstein-1 against the CDF area") {
  CHECK(wasserstein1({0, 1, 2}, {0, 1, 2}) == 0.0);
  CHECK(wasserstein1({0, 0}, {3, 3}) == doctest::Approx(3.0));
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 1);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> a(3 + rng() % 40), b(3 + rng() % 40);
    for (auto& x : a) x = n(rng);
    for (auto& x : b) x = 0.5 * n(rng) + 0.3;
    CHECK(wasserstein1(a, b) == doctest::Approx(cdf_area(a, b)).epsilon(1e-9));
  }
}

TEST_CASE("generated cases are nested and learnable") {
  for (Dims3 shape : {Dims3{16, 16, 16}, Dims3{32, 32, 32}, Dims3{24, 32, 20}}) {
    const auto spec = spec_of(12, Domain::Source, 7, shape);
    for (int i = 0; i < spec.n_cases; ++i) {
      const Case c = generate_case(spec, i);
      CHECK(c.image.data.shape() == std::vector<int64_t>{4, shape.x, shape.y, shape.z});
      CHECK(c.labels.dims == shape);
      CHECK_NOTHROW(c.labels.validate());
      const auto et = extract_region(c.labels, Region::ET);
      const auto tc = extract_region(c.labels, Region::TC);
      const auto wt = extract_region(c.labels, Region::WT);
      bool nested = true;
      for (size_t v = 0; v < et.data.size(); ++v) nested = nested && (et.data[v] <= tc.data[v]) && (tc.data[v] <= wt.data[v]);
      CHECK(nested);
      int64_t counts[4] = {0, 0, 0, 0};
      for (int32_t v : c.labels.data) ++counts[v];
      const double n = static_cast<double>(c.labels.data.size());
      for (int l = 1; l <= 3; ++l) CHECK(counts[l] >= 0.001 * n);
      // Brain-extracted: tumour voxels lie on nonzero image voxels.
      for (size_t v = 0; v < c.labels.data.size(); ++v)
        if (c.labels.data[v] != 0) CHECK(c.image.data.channel(0)[v] > 0.0f);
    }
  }
}

TEST_CASE("domains share anatomy and differ in appearance") {
  const auto src = spec_of(20, Domain::Source, 11);
  const auto sft = spec_of(20, Domain::Shifted, 11);
  int sharper = 0;
  for (int i = 0; i < 20; ++i) {
    const Case a = generate_case(src, i);
    const Case b = generate_case(sft, i);
    CHECK(a.labels == b.labels);
    CHECK_FALSE(a.image.data == b.image.data);
    sharper += laplacian_energy(b.image.data) < laplacian_energy(a.image.data);
  }
  CHECK(sharper >= 19);

  CHECK(generate_case(src, 3).image.data == generate_case(src, 3).image.data);
  CHECK_FALSE(generate_case(src, 3).labels == generate_case(src, 4).labels);
}

TEST_CASE("cross-domain histogram distance exceeds within-domain distance") {
  const auto src = spec_of(10, Domain::Source, 21);
  const auto sft = spec_of(10, Domain::Shifted, 21);
  std::vector<Case> a, b;
  for (int i = 0; i < 10; ++i) {
    a.push_back(generate_case(src, i));
    b.push_back(generate_case(sft, i));
  }
  double cross = 0, within = 0;
  int nc = 0, nw = 0;
  for (int ch = 0; ch < 4; ++ch) {
    for (int i = 0; i < 10; ++i) {
      cross += wasserstein1(normalized_foreground(a[i].image, ch), normalized_foreground(b[i].image, ch));
      ++nc;
      const int j = (i + 1) % 10;
      within += wasserstein1(normalized_foreground(a[i].image, ch), normalized_foreground(a[j].image, ch));
      ++nw;
    }
  }
  MESSAGE("cross " << cross / nc << " within " << within / nw);
  CHECK(cross / nc > within / nw);
}

TEST_CASE("cohort files are complete and deterministic") {
  const auto dir = scratch_dir("cohort");
  const auto spec = spec_of(5, Domain::Shifted, 3, {16, 16, 16});
  const auto m = generate_cohort(spec, dir / "a");
  CHECK(m.cases.size() == 5);
  int rawvol = 0;
  for (const auto& e : fs::directory_iterator(dir / "a")) rawvol += e.path().extension() == ".rawvol";
  CHECK(rawvol == 10);
  generate_cohort(spec, dir / "b");
  for (const auto& e : fs::directory_iterator(dir / "a"))
    CHECK(slurp(e.path()) == slurp(dir / "b" / e.path().filename()));

  const Cohort c = open_cohort(dir / "a");
  CHECK(c.size() == 5);
  CHECK(c.manifest.spec.domain == Domain::Shifted);
  CHECK(c.manifest.spec.spatial_shape == Dims3{16, 16, 16});
  const Case first = c.load(0);
  const Case direct = generate_case(spec, 0);
  CHECK(first.image.data == direct.image.data);
  CHECK(first.labels == direct.labels);
  CHECK(CohortManifest::from_json(m.to_json()).to_json() == m.to_json());

  auto empty = m;
  empty.cases.clear();
  fs::create_directories(dir / "empty");
  std::ofstream(dir / "empty" / "cohort.json") << empty.to_json();
  try {
    open_cohort(dir / "empty");
    FAIL("expected EmptyCohort");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::EmptyCohort);
  }
  fs::remove_all(dir);
}

TEST_CASE("volumes too small for a lesion are rejected") {
  try {
    generate_cohort(spec_of(2, Domain::Source, 1, {8, 8, 8}), scratch_dir("small"));
    FAIL("expected LesionDoesNotFit");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::LesionDoesNotFit);
  }
  CHECK_THROWS_AS(generate_case(spec_of(2, Domain::Source, 1), 2), Error);
  auto bad = spec_of(0, Domain::Source, 1);
  CHECK_THROWS_AS(bad.validate(), Error);
}
