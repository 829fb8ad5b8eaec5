#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <tuple>

#include "medpeft/metrics.hpp"
#include "metric_oracles.hpp"

using namespace medpeft;
using namespace oracle;

TEST_CASE("region extraction") {
  LabelMap m({4, 4, 4});
  m.at(0, 0, 0) = 2;
  CHECK(extract_region(m, Region::ET).empty());
  CHECK(extract_region(m, Region::TC).empty());
  CHECK(extract_region(m, Region::WT).count() == 1);
  LabelMap e({4, 4, 4});
  e.at(1, 1, 1) = 3;
  CHECK(extract_region(e, Region::ET).data == extract_region(e, Region::WT).data);
  CHECK(extract_region(e, Region::TC).data == extract_region(e, Region::WT).data);
  LabelMap mixed({4, 4, 4});
  mixed.at(0, 0, 0) = 1;
  mixed.at(0, 0, 1) = 2;
  mixed.at(0, 0, 2) = 3;
  CHECK(extract_region(mixed, Region::ET).count() == 1);
  CHECK(extract_region(mixed, Region::TC).count() == 2);
  CHECK(extract_region(mixed, Region::WT).count() == 3);
}

TEST_CASE("dice closed forms") {
  const Dims3 d{4, 4, 4};
  RegionMask p(Region::WT, d), g(Region::WT, d);
  CHECK(dice(p, g) == 1.0);
  p.at(0, 0, 0) = p.at(0, 0, 1) = 1;
  CHECK(dice(p, g) == 0.0);
  g.at(0, 0, 1) = g.at(0, 0, 2) = 1;
  CHECK(dice(p, g) == 0.5);
  CHECK(dice(p, p) == 1.0);
  CHECK_THROWS_AS(dice(p, RegionMask(Region::WT, {4, 4, 5})), Error);
}

TEST_CASE("hd95 closed forms") {
  const Dims3 d{8, 8, 8};
  RegionMask p(Region::WT, d), g(Region::WT, d);
  CHECK(hd95(p, g, {1, 1, 1}) == 0.0);
  p.at(1, 2, 2) = 1;
  CHECK(hd95(p, g, {1, 1, 1}) == 374.0);
  g.at(4, 2, 2) = 1;
  CHECK(hd95(p, g, {1, 1, 1}) == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(hd95(p, g, {2, 1, 1}) == doctest::Approx(6.0).epsilon(1e-12));
  CHECK(hd95(g, g, {1, 1, 1}) == 0.0);
}

TEST_CASE("sensitivity and specificity closed forms") {
  const Dims3 d{3, 3, 3};
  RegionMask g = box(d, {0, 0, 0}, {0, 0, 1});
  auto perfect = sensitivity_specificity(g, g);
  CHECK(perfect.sensitivity == 1.0);
  CHECK(perfect.specificity == 1.0);
  auto none = sensitivity_specificity(RegionMask(Region::WT, d), g);
  CHECK(none.sensitivity == 0.0);
  CHECK(none.specificity == 1.0);
  RegionMask over = box(d, {0, 0, 0}, {0, 1, 2});  // 6 voxels, GT has 2
  auto o = sensitivity_specificity(over, g);
  CHECK(o.sensitivity == 1.0);
  CHECK(o.specificity == doctest::Approx(21.0 / 25.0).epsilon(1e-15));
  CHECK(sensitivity_specificity(over, RegionMask(Region::WT, d)).sensitivity == 1.0);
}

TEST_CASE("hand-built lesion-wise cases") {
  const Dims3 d{16, 16, 16};
  const Spacing s{1, 1, 1};
  RegionMask a = box(d, {2, 2, 2}, {4, 4, 4});
  RegionMask b = box(d, {10, 10, 10}, {12, 12, 12});

  auto one = lesionwise(a, a, s);
  CHECK(one.lw_dice == 1.0);
  CHECK(one.lw_hd95 == 0.0);
  CHECK(dice(a, a) == 1.0);

  auto missed = lesionwise(a, unite(a, b), s);
  CHECK(missed.gt_lesions == 2);
  CHECK(missed.lw_dice == 0.5);
  CHECK(missed.lw_hd95 == 187.0);

  auto fp = lesionwise(unite(a, b), a, s);
  CHECK(fp.false_positives == 1);
  CHECK(fp.lw_dice == 0.5);
  CHECK(fp.lw_hd95 == 187.0);

  auto both_empty = lesionwise(RegionMask(Region::WT, d), RegionMask(Region::WT, d), s);
  CHECK(both_empty.lw_dice == 1.0);
  CHECK(both_empty.lw_hd95 == 0.0);

  // Lesions under the size floor are ignored on the GT side.
  RegionMask tiny = box(d, {8, 1, 1}, {8, 1, 2});
  auto small = lesionwise(a, unite(a, tiny), s);
  CHECK(small.gt_lesions == 1);
  CHECK(small.lw_dice == 1.0);
}

TEST_CASE("spurious far component never helps") {
  const Dims3 d{16, 16, 16};
  std::mt19937_64 rng(3);
  for (int t = 0; t < 20; ++t) {
    RegionMask g = random_mask(rng, {12, 12, 12});
    RegionMask p = random_mask(rng, {12, 12, 12});
    RegionMask G(Region::WT, d), P(Region::WT, d);
    for (int64_t x = 0; x < 12; ++x)
      for (int64_t y = 0; y < 12; ++y)
        for (int64_t z = 0; z < 12; ++z) {
          G.at(x, y, z) = g.at(x, y, z);
          P.at(x, y, z) = p.at(x, y, z);
        }
    const auto before = lesionwise(P, G, {1, 1, 1});
    P.at(15, 15, 15) = 1;
    const auto after = lesionwise(P, G, {1, 1, 1});
    CHECK(after.lw_dice <= before.lw_dice);
    CHECK(after.lw_hd95 >= before.lw_hd95);
  }
}

TEST_CASE("metrics match brute-force oracles on 200 random pairs") {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int64_t> side(3, 12);
  std::uniform_real_distribution<double> sp(0.5, 2.0);
  int nontrivial_lw = 0;
  for (int t = 0; t < 200; ++t) {
    const Dims3 d{side(rng), side(rng), side(rng)};
    const Spacing s{sp(rng), sp(rng), sp(rng)};
    RegionMask p = random_mask(rng, d);
    RegionMask g = random_mask(rng, d);
    if (t % 7 == 0) g = p;
    const VoxSet ps = to_set(p), gs = to_set(g);

    CHECK(dice(p, g) == doctest::Approx(oracle_dice(ps, gs)).epsilon(1e-12));
    CHECK(dice(p, g) == dice(g, p));
    CHECK(to_set(surface(p)) == oracle_surface(ps));

    const double h = hd95(p, g, s);
    CHECK(std::fabs(h - oracle_hd95(ps, gs, s)) < 1e-9);
    CHECK(std::fabs(h - hd95(g, p, s)) < 1e-9);

    const auto comps = connected_components(g);
    const auto oc = oracle_components(gs);
    CHECK(comps.count == static_cast<int32_t>(oc.size()));

    const auto lw = lesionwise(p, g, s);
    const auto [od, oh] = oracle_lesionwise(ps, gs, s);
    CHECK(std::fabs(lw.lw_dice - od) < 1e-9);
    CHECK(std::fabs(lw.lw_hd95 - oh) < 1e-9);
    if (lw.gt_lesions > 0 && lw.entries.size() > 1) ++nontrivial_lw;

    int64_t tp = 0, fn = 0, tn = 0, fp = 0;
    for (int64_t x = 0; x < d.x; ++x)
      for (int64_t y = 0; y < d.y; ++y)
        for (int64_t z = 0; z < d.z; ++z) {
          const bool in_p = ps.count({x, y, z}), in_g = gs.count({x, y, z});
          tp += in_p && in_g;
          fn += !in_p && in_g;
          tn += !in_p && !in_g;
          fp += in_p && !in_g;
        }
    const auto ss = sensitivity_specificity(p, g);
    CHECK(std::fabs(ss.sensitivity - (tp + fn ? double(tp) / (tp + fn) : 1.0)) < 1e-9);
    CHECK(std::fabs(ss.specificity - (tn + fp ? double(tn) / (tn + fp) : 1.0)) < 1e-9);
    CHECK(ss.sensitivity >= 0.0);
    CHECK(ss.specificity <= 1.0);
  }
  CHECK(nontrivial_lw > 20);
}

TEST_CASE("distance transform against brute force") {
  std::mt19937_64 rng(9);
  RegionMask seeds(Region::WT, {7, 5, 9});
  std::bernoulli_distribution b(0.05);
  for (auto& v : seeds.data) v = b(rng);
  seeds.at(3, 2, 4) = 1;
  const Spacing s{1.3, 0.7, 2.1};
  const auto dt = distance_transform(seeds, s);
  const auto set = to_set(seeds);
  double worst = 0.0;
  for (int64_t x = 0; x < 7; ++x)
    for (int64_t y = 0; y < 5; ++y)
      for (int64_t z = 0; z < 9; ++z) {
        double best = INFINITY;
        for (auto [a, bb, c] : set)
          best = std::min(best, std::hypot((x - a) * s[0], (y - bb) * s[1], (z - c) * s[2]));
        worst = std::max(worst, std::fabs(best - dt[seeds.dims.index(x, y, z)]));
      }
  CHECK(worst < 1e-9);
}

TEST_CASE("paired permutation test") {
  std::vector<double> a{0.1, 0.5, 0.3, 0.9, 0.7, 0.2, 0.4, 0.6};
  CHECK(paired_significance(a, a).p_value == 1.0);
  std::vector<double> b = a;
  for (auto& v : b) v += 0.2;
  const auto r = paired_significance(a, b);
  CHECK(r.exhaustive);
  CHECK(r.p_value == 2.0 / 256.0);
  CHECK(r.p_value == 0.0078125);

  CHECK_THROWS_AS(paired_significance({1, 2, 3, 4, 5}, {1, 2, 3, 4}), Error);
  try {
    paired_significance({1, 2, 3, 4}, {1, 2, 3, 4});
    FAIL("expected TooFewCases");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::TooFewCases);
  }

  std::mt19937_64 rng(77);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> x(12), y(12);
  for (int i = 0; i < 12; ++i) {
    x[i] = nd(rng);
    y[i] = x[i] + 0.35 + 0.8 * nd(rng);
  }
  const auto ex = paired_significance(x, y);
  CHECK(ex.exhaustive);
  CHECK(ex.permutations == 4096);
  CHECK(std::fabs(ex.p_value - oracle_exhaustive_p(x, y)) < 1e-15);
  PermutationConfig mc;
  mc.force_monte_carlo = true;
  const auto m = paired_significance(x, y, mc);
  CHECK_FALSE(m.exhaustive);
  const double se = std::sqrt(ex.p_value * (1 - ex.p_value) / mc.mc_samples);
  CHECK(std::fabs(m.p_value - ex.p_value) <= 3 * se);
  CHECK(m.p_value > 0.0);
  CHECK(m.p_value <= 1.0);
}

TEST_CASE("report aggregates equal recomputation from rows") {
  MetricsReport rep;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  for (int c = 0; c < 6; ++c)
    for (Region r : kRegions) {
      MetricsRow row;
      row.case_id = "case_" + std::to_string(c);
      row.region = r;
      row.dice = u(rng);
      row.hd95 = 10 * u(rng);
      row.lw_dice = u(rng);
      row.lw_hd95 = 100 * u(rng);
      row.sensitivity = u(rng);
      row.specificity = u(rng);
      rep.rows.push_back(row);
    }
  const auto agg = rep.aggregate();
  for (Region r : kRegions) {
    for (const char* m : kMetricNames) {
      double s = 0, ss = 0;
      int n = 0;
      for (const auto& row : rep.rows)
        if (row.region == r) {
          s += row.metric(m);
          ++n;
        }
      const double mean = s / n;
      for (const auto& row : rep.rows)
        if (row.region == r) ss += (row.metric(m) - mean) * (row.metric(m) - mean);
      CHECK(std::fabs(agg.by_region.at(to_string(r)).at(m).mean - mean) < 1e-9);
      CHECK(std::fabs(agg.by_region.at(to_string(r)).at(m).std - std::sqrt(ss / n)) < 1e-9);
    }
  }
  const auto back = MetricsReport::from_json(rep.to_json());
  CHECK(back.rows.size() == rep.rows.size());
  CHECK(back.aggregate().region_mean.at("dice") == agg.region_mean.at("dice"));
  CHECK(rep.to_csv().rfind("schema_version,case_id,region,dice,hd95,lw_dice,lw_hd95,sensitivity,specificity\n", 0) == 0);
  const auto means = rep.case_means("dice");
  CHECK(means.size() == 6);
}

TEST_CASE("evaluate_case emits one row per region") {
  LabelMap gt({8, 8, 8}), pred({8, 8, 8});
  for (int64_t x = 2; x < 6; ++x)
    for (int64_t y = 2; y < 6; ++y)
      for (int64_t z = 2; z < 6; ++z) gt.at(x, y, z) = pred.at(x, y, z) = 2;
  gt.at(3, 3, 3) = pred.at(3, 3, 3) = 3;
  const auto rows = evaluate_case("c0", pred, gt, {1, 1, 1});
  REQUIRE(rows.size() == 3);
  for (const auto& r : rows) {
    CHECK(r.dice == 1.0);
    CHECK(r.hd95 == 0.0);
  }
}
