// Acceptance checks, one line per criterion:
//   criterion <n> <name>: PASS|FAIL  <measurements>  (<seconds>s, budget <seconds>s)
// Exit status is 0 only when every selected criterion passes.

#include <CLI11.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <json.hpp>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "medpeft/checkpoint.hpp"
#include "medpeft/conv_adapter.hpp"
#include "medpeft/experiment.hpp"
#include "medpeft/metrics.hpp"
#include "medpeft/peft.hpp"
#include "medpeft/trainer.hpp"
#include "metric_oracles.hpp"
#include "support.hpp"

using namespace medpeft;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

fs::path fresh_dir(const fs::path& root, const std::string& name) {
  const fs::path p = root / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// 1 ------------------------------------------------------------------------

Outcome parameter_overhead() {
  constexpr double kTotal = 34.99e6;
  const ModelConfig s = ModelConfig::mednext_s();
  auto m = attach_adapters(MedNeXt<float>(s), AdapterConfig{});
  const auto pc = count_parameters(m.backbone());
  const double total = static_cast<double>(pc.total);
  const double ratio = static_cast<double>(pc.adapters()) / static_cast<double>(pc.backbone());
  const bool total_ok = std::fabs(total - kTotal) <= 0.10 * kTotal;
  const bool ratio_ok = ratio >= 0.07 && ratio <= 0.15;
  return {total_ok && ratio_ok, "backbone " + std::to_string(pc.backbone()) + ", adapters " +
                                    std::to_string(pc.adapters()) + ", total " + std::to_string(pc.total) +
                                    " (target 34.99M +-10%: " + (total_ok ? "ok" : "out of band") +
                                    "), overhead " + fmt("%.4f", ratio) + " (in [0.07,0.15]: " +
                                    (ratio_ok ? "ok" : "no") + ")"};
}

// 2 ------------------------------------------------------------------------

Outcome identity_at_init() {
  const ModelConfig mc = ModelConfig::tiny();
  MedNeXt<float> ref(mc);
  double worst = 0.0;
  int compared = 0;
  for (AdapterVariant v : {AdapterVariant::Linear, AdapterVariant::ConvDw, AdapterVariant::ConvNext}) {
    for (Placement p : {Placement::Sequential, Placement::Parallel}) {
      AdapterConfig ac;
      ac.variant = v;
      ac.placement = p;
      auto m = attach_adapters(MedNeXt<float>(mc), ac, SiteSelector::all_basic());
      for (int i = 0; i < 10; ++i) {
        const auto x = testutil::random_tensor<float>({mc.in_channels, 16, 16, 16}, 100 + i);
        worst = std::max(worst, testutil::max_abs_diff(m.forward(x, false), ref.forward(x, false)));
        ++compared;
      }
    }
  }
  return {worst <= 1e-6 && compared == 60,
          std::to_string(compared) + " forwards (3 variants x 2 placements x 10 inputs), max |diff| " +
              fmt("%.3g", worst) + " (<= 1e-6)"};
}

// 3 ------------------------------------------------------------------------

Outcome frozen_immutability() {
  CohortSpec cs;
  cs.spatial_shape = {16, 16, 16};
  cs.rng_seed = 31;
  std::vector<Case> cases;
  for (int i = 0; i < 5; ++i) cases.push_back(generate_case(cs, i));
  cases = prepare_cases(std::move(cases));

  auto m = attach_adapters(MedNeXt<float>(ModelConfig::tiny()), AdapterConfig{});
  const StateDict before = state_dict(m);
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 1;
  cfg.validation_fraction = 0.0;
  const auto r = train(m, cases, cfg, FreezePolicy::peft());
  const auto rep = verify_frozen(r.partition, before, state_dict(m));
  double worst = 0.0;
  for (const auto& row : rep.frozen) worst = std::max(worst, row.max_abs_change);
  int adapters_changed = 0;
  for (const auto& n : rep.changed_trainable) adapters_changed += n.rfind("adapter.", 0) == 0;
  return {r.record.steps == 25 && rep.passed && worst == 0.0 && adapters_changed >= 1,
          std::to_string(r.record.steps) + " steps, " + std::to_string(rep.frozen.size()) +
              " frozen tensors, max change " + fmt("%.3g", worst) + ", " + std::to_string(adapters_changed) +
              " adapter tensors changed"};
}

// 4 ------------------------------------------------------------------------

Outcome gradient_correctness() {
  ModelConfig c;
  c.in_channels = 2;
  c.n_classes = 3;
  c.base_channels = 4;
  c.n_levels = 3;
  MedNeXt<double> net(c);
  const auto x = testutil::random_tensor<double>({2, 8, 8, 8}, 41);
  const auto r = testutil::random_tensor<double>({3, 8, 8, 8}, 42);
  net.forward(x, true);
  net.zero_grad();
  net.backward(r);
  auto params = net.named_parameters();
  const auto a = testutil::finite_difference_check(
      params, [&] { return testutil::dot(net.forward(x, false), r); }, 20, 43);

  std::mt19937_64 rng(44);
  AdapterConfig ac;
  ac.zero_init_projection = false;
  Adapter<double> ad(ac, 8, rng);
  const auto f = testutil::random_tensor<double>({8, 6, 6, 6}, 45);
  const auto g = testutil::random_tensor<double>({8, 6, 6, 6}, 46);
  nn::ParameterList<double> ap;
  ad.collect("", ap);
  for (auto& p : ap) p.param->zero_grad();
  ad.forward(f, true);
  ad.backward(g, false);
  const auto b = testutil::finite_difference_check(
      ap, [&] { return testutil::dot(ad.forward(f, false), g); }, 20, 47);

  return {a.checked == 20 && b.checked == 20 && a.worst_rel < 1e-4 && b.worst_rel < 1e-4,
          "backbone worst rel " + fmt("%.3g", a.worst_rel) + ", convnext adapter worst rel " +
              fmt("%.3g", b.worst_rel) + " (20 parameters each, double, < 1e-4)"};
}

// 5 ------------------------------------------------------------------------

Outcome metric_oracles() {
  using namespace oracle;
  std::mt19937_64 rng(5150);
  std::uniform_int_distribution<int64_t> side(2, 12);
  std::uniform_real_distribution<double> sp(0.5, 2.0);
  double worst = 0.0;
  for (int t = 0; t < 200; ++t) {
    const Dims3 d{side(rng), side(rng), side(rng)};
    const Spacing s{sp(rng), sp(rng), sp(rng)};
    const RegionMask p = random_mask(rng, d);
    const RegionMask g = t % 9 == 0 ? p : random_mask(rng, d);
    const VoxSet ps = to_set(p), gs = to_set(g);
    int64_t tp = 0, fn = 0, tn = 0, fp = 0;
    for (int64_t i = 0; i < d.voxels(); ++i) {
      tp += p.data[i] && g.data[i];
      fn += !p.data[i] && g.data[i];
      tn += !p.data[i] && !g.data[i];
      fp += p.data[i] && !g.data[i];
    }
    const auto ss = sensitivity_specificity(p, g);
    const auto lw = lesionwise(p, g, s);
    const auto [od, oh] = oracle_lesionwise(ps, gs, s);
    for (double e : {dice(p, g) - oracle_dice(ps, gs), hd95(p, g, s) - oracle_hd95(ps, gs, s),
                     ss.sensitivity - (tp + fn ? double(tp) / double(tp + fn) : 1.0),
                     ss.specificity - (tn + fp ? double(tn) / double(tn + fp) : 1.0), lw.lw_dice - od,
                     lw.lw_hd95 - oh})
      worst = std::max(worst, std::fabs(e));
  }

  const Dims3 d{16, 16, 16};
  const RegionMask a = box(d, {2, 2, 2}, {4, 4, 4});
  const RegionMask b = box(d, {10, 10, 10}, {12, 12, 12});
  const auto one = lesionwise(a, a, {1, 1, 1});
  const auto missed = lesionwise(a, unite(a, b), {1, 1, 1});
  const auto extra = lesionwise(unite(a, b), a, {1, 1, 1});
  const bool hand = one.lw_dice == 1.0 && missed.lw_dice == 0.5 && missed.lw_hd95 == 187.0 &&
                    extra.lw_dice == 0.5 && extra.lw_hd95 == 187.0;
  return {worst < 1e-9 && hand, "200 random pairs, max |metric - oracle| " + fmt("%.3g", worst) +
                                    "; hand cases lw_dice " + fmt("%.3g", one.lw_dice) + " / " +
                                    fmt("%.3g", missed.lw_dice) + "," + fmt("%.4g", missed.lw_hd95) + " / " +
                                    fmt("%.3g", extra.lw_dice) + "," + fmt("%.4g", extra.lw_hd95)};
}

// 6 ------------------------------------------------------------------------

Outcome domain_shift(const fs::path& work) {
  const fs::path dir = fresh_dir(work, "experiment");
  const ExperimentSpec spec = ExperimentSpec::desk();
  const ExperimentResult r = run_experiment(spec, dir, [](const std::string& line) {
    std::fprintf(stderr, "  %s\n", line.c_str());
  });
  const double full = r.finetuned_dice.at(run_label(TrainMode::FullFt));
  const double peft = r.finetuned_dice.at(run_label(TrainMode::Peft));
  const double frac_peft = r.trainable_fraction.at(run_label(TrainMode::Peft));
  const double frac_full = r.trainable_fraction.at(run_label(TrainMode::FullFt));
  const bool a = r.source_dice - r.zero_shot_dice >= 0.05;
  const bool b = peft - r.zero_shot_dice >= 0.05;
  const bool c = std::fabs(full - peft) <= 0.08;
  const bool d = frac_peft < 0.15 && frac_full == 1.0;
  auto tag = [](bool ok) { return ok ? " ok" : " FAILED"; };
  return {a && b && c && d,
          "source " + fmt("%.4f", r.source_dice) + ", zero-shot " + fmt("%.4f", r.zero_shot_dice) + ", full " +
              fmt("%.4f", full) + ", peft " + fmt("%.4f", peft) + " | (a) drop " +
              fmt("%.4f", r.source_dice - r.zero_shot_dice) + tag(a) + " (b) gain " +
              fmt("%.4f", peft - r.zero_shot_dice) + tag(b) + " (c) gap " + fmt("%.4f", std::fabs(full - peft)) +
              tag(c) + " (d) fractions " + fmt("%.4f", frac_peft) + "/" + fmt("%.1f", frac_full) + tag(d)};
}

// 7 ------------------------------------------------------------------------

Outcome significance() {
  const std::vector<double> a{0.1, 0.5, 0.3, 0.9, 0.7, 0.2, 0.4, 0.6};
  std::vector<double> b = a;
  for (auto& v : b) v += 0.25;
  const double p_closed = paired_significance(a, b).p_value;
  const double p_same = paired_significance(a, a).p_value;

  std::mt19937_64 rng(7);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> x(12), y(12);
  for (int i = 0; i < 12; ++i) {
    x[i] = nd(rng);
    y[i] = x[i] + 0.3 + 0.9 * nd(rng);
  }
  const auto ex = paired_significance(x, y);
  PermutationConfig mc;
  mc.force_monte_carlo = true;
  const auto m = paired_significance(x, y, mc);
  const double se = std::sqrt(ex.p_value * (1.0 - ex.p_value) / static_cast<double>(mc.mc_samples));
  const double oracle_p = oracle::oracle_exhaustive_p(x, y);
  const bool ok = p_closed == 2.0 / 256.0 && p_same == 1.0 && ex.exhaustive && ex.p_value == oracle_p &&
                  !m.exhaustive && std::fabs(m.p_value - ex.p_value) <= 3.0 * se;
  return {ok, "p(all shifted, n=8) " + fmt("%.7f", p_closed) + " (2/256), p(identical) " + fmt("%.1f", p_same) +
                  ", n=12 exhaustive " + fmt("%.5f", ex.p_value) + " vs MC " + fmt("%.5f", m.p_value) + " (" +
                  fmt("%.2f", std::fabs(m.p_value - ex.p_value) / se) + " SE)"};
}

// 8 ------------------------------------------------------------------------

int run_cli(const std::string& cli, const fs::path& cwd, const std::string& args, const fs::path& log) {
  const std::string cmd = "cd '" + cwd.string() + "' && '" + cli + "' " + args + " >> '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome cli_smoke(const std::string& cli, const fs::path& work) {
  if (cli.empty()) return {false, "no --cli given"};
  const fs::path dir = fresh_dir(work, "cli");
  const fs::path log = dir / "log.txt";
  const std::vector<std::string> steps{
      "cohort gen --domain source --n 8 --shape 16 --seed 1 --out source",
      "cohort gen --domain shifted --n 6 --shape 16 --seed 2 --out shifted",
      "train --mode scratch --cohort source --out pretrain --epochs 10",
      "finetune --mode peft --adapter convnext --placement sequential --checkpoint pretrain/best.ckpt "
      "--cohort shifted --out peft --epochs 6",
      "evaluate --checkpoint pretrain/best.ckpt --cohort shifted --out runs/no_ft --label no_ft",
      "evaluate --checkpoint peft/best.ckpt --cohort shifted --out runs/peft --label peft --overlays 2",
      "report --runs runs --out figures"};
  for (const auto& s : steps) {
    const int code = run_cli(cli, dir, s, log);
    if (code != 0) return {false, "'" + s.substr(0, s.find(" --")) + "' exited " + std::to_string(code)};
  }

  std::string problems;
  try {
    for (const char* run : {"no_ft", "peft"}) {
      const auto rep = MetricsReport::read(dir / "runs" / run / "metrics.json");
      if (rep.rows.size() != 6 * 3) problems += std::string(" ") + run + " rows";
      const std::string csv = slurp(dir / "runs" / run / "metrics.csv");
      std::istringstream lines(csv);
      std::string line;
      std::getline(lines, line);
      if (line != "schema_version,case_id,region,dice,hd95,lw_dice,lw_hd95,sensitivity,specificity")
        problems += " csv header";
      int n = 0;
      while (std::getline(lines, line)) {
        std::vector<std::string> f;
        std::stringstream ls(line);
        for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
        if (f.size() != 9 || f[0] != std::to_string(kMetricsSchemaVersion)) problems += " csv row";
        for (size_t k = 3; k < f.size(); ++k) std::stod(f[k]);
        ++n;
      }
      if (n != 18) problems += " csv rows";
    }
    const auto rec = RunRecord::from_json(slurp(dir / "peft" / "run_record.json"));
    if (rec.mode != TrainMode::Peft || rec.trainable_fraction >= 0.15) problems += " run_record";
    const auto part = nlohmann::json::parse(slurp(dir / "peft" / "partition.json"));
    if (part.at("schema_version") != 1 || part.at("trainable_fraction").get<double>() >= 0.15)
      problems += " partition";
  } catch (const std::exception& e) {
    problems += std::string(" ") + e.what();
  }
  int boxes = 0, figures = 0;
  for (const char* f : {"boxplot_dice.svg", "boxplot_hd95.svg"}) {
    const std::string svg = slurp(dir / "figures" / f);
    figures += svg.find("</svg>") != std::string::npos;
    for (size_t p = svg.find("<g class=\"box\""); p != std::string::npos; p = svg.find("<g class=\"box\"", p + 1))
      ++boxes;
  }
  if (figures != 2 || boxes != 4) problems += " figures";
  return {problems.empty(), std::to_string(steps.size()) + " commands exit 0, " + std::to_string(figures) +
                                " boxplots with " + std::to_string(boxes) + " boxes" +
                                (problems.empty() ? "" : ", problems:" + problems)};
}

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::vector<int> selected;
  std::string cli;
  std::string work = (fs::temp_directory_path() / ("medpeft_acceptance_" + std::to_string(::getpid()))).string();
  app.add_option("--criterion", selected, "criteria to run (default: all)")->check(CLI::Range(1, 8));
  app.add_option("--cli", cli, "medpeft executable, for criterion 8");
  app.add_option("--work", work, "scratch directory");
  CLI11_PARSE(app, argc, argv);

  if (!cli.empty()) cli = fs::absolute(cli).string();
  const fs::path root(work);
  fs::create_directories(root);
  const std::vector<Criterion> all{
      {1, "parameter overhead", 60, parameter_overhead},
      {2, "identity at init", 60, identity_at_init},
      {3, "frozen immutability", 120, frozen_immutability},
      {4, "gradient correctness", 120, gradient_correctness},
      {5, "metric oracles", 120, metric_oracles},
      {6, "desk domain shift", 1800, [&] { return domain_shift(root); }},
      {7, "significance", 60, significance},
      {8, "cli smoke", 300, [&] { return cli_smoke(cli, root); }},
  };

  bool all_pass = true;
  for (const auto& c : all) {
    if (!selected.empty() && std::find(selected.begin(), selected.end(), c.id) == selected.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_budget = secs <= c.budget_seconds;
    const bool pass = o.pass && in_budget;
    all_pass = all_pass && pass;
    std::printf("criterion %d %s: %s  %s  (%.1fs, budget %.0fs%s)\n", c.id, c.name, pass ? "PASS" : "FAIL",
                o.detail.c_str(), secs, c.budget_seconds, in_budget ? "" : ", exceeded");
    std::fflush(stdout);
  }
  fs::remove_all(root);
  return all_pass ? 0 : 1;
}
