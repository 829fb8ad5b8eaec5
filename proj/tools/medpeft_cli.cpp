// medpeft: cohort generation, training, fine-tuning, evaluation and reporting.
//
// Exit codes: 0 ok, 2 usage / config / schema / incompatible inputs, 3 runtime failure.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "medpeft/checkpoint.hpp"
#include "medpeft/config_io.hpp"
#include "medpeft/experiment.hpp"
#include "medpeft/report.hpp"
#include "medpeft/synthetic_cohort.hpp"
#include "medpeft/trainer.hpp"

using namespace medpeft;
namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::InvalidConfig:
    case ErrorKind::SchemaMismatch:
    case ErrorKind::NoRunsFound:
    case ErrorKind::LesionDoesNotFit:
    case ErrorKind::ArchitectureMismatch:
    case ErrorKind::IncompatibleSite:
    case ErrorKind::NoAdaptersAttached:
    case ErrorKind::EmptyCohort:
      return kExitUsage;
    default:
      return kExitRuntime;
  }
}

/// "16" -> 16^3; "24x32x20" or "24,32,20" -> per axis.
Dims3 parse_shape(std::string s) {
  std::replace(s.begin(), s.end(), ',', 'x');
  std::vector<int64_t> v;
  std::stringstream ss(s);
  for (std::string part; std::getline(ss, part, 'x');) {
    try {
      size_t used = 0;
      v.push_back(std::stoll(part, &used));
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw UsageError("bad --shape '" + s + "'");
    }
  }
  if (v.size() == 1) return {v[0], v[0], v[0]};
  if (v.size() == 3) return {v[0], v[1], v[2]};
  throw UsageError("--shape takes N or XxYxZ");
}

struct CohortArgs {
  std::string domain = "source";
  int n = 20;
  std::string shape = "32";
  uint64_t seed = 0;
  std::string out;
  std::optional<double> gamma, noise, blur;
};

int cmd_cohort_gen(const CohortArgs& a) {
  CohortSpec spec;
  spec.domain = domain_from_string(a.domain);
  spec.n_cases = a.n;
  spec.spatial_shape = parse_shape(a.shape);
  spec.rng_seed = a.seed;
  if (a.gamma) spec.shift.gamma = *a.gamma;
  if (a.noise) spec.shift.noise_sigma = *a.noise;
  if (a.blur) spec.shift.blur_sigma = *a.blur;
  const CohortManifest m = generate_cohort(spec, a.out);
  std::printf("wrote %zu %s cases to %s\n", m.cases.size(), to_string(spec.domain), a.out.c_str());
  return kExitOk;
}

struct RunArgs {
  std::string config;
  std::string mode;
  std::string adapter;
  std::string placement;
  std::string checkpoint;
  std::string adapter_checkpoint;
  std::string cohort;
  std::string out;
  std::string label;
  std::optional<int> epochs, batch_size;
  std::optional<double> lr;
  std::optional<uint64_t> seed;
  int overlays = 0;
};

RunConfig load_run_config(const RunArgs& a, bool finetuning) {
  RunConfig cfg;
  if (!a.config.empty()) {
    cfg = RunConfig::load(a.config);
  } else if (finetuning) {
    cfg.train = TrainConfig::finetune();
  } else {
    cfg.train = TrainConfig::pretrain();
  }
  if (!a.adapter.empty()) cfg.adapter.variant = adapter_variant_from_string(a.adapter);
  if (!a.placement.empty()) cfg.adapter.placement = placement_from_string(a.placement);
  if (a.epochs) cfg.train.epochs = *a.epochs;
  if (a.batch_size) cfg.train.batch_size = *a.batch_size;
  if (a.lr) cfg.train.learning_rate = *a.lr;
  if (a.seed) cfg.train.seed = *a.seed;
  cfg.train.validate();
  cfg.adapter.validate();
  return cfg;
}

PeftModel<float> load_model(const RunArgs& a) {
  PeftModel<float> m = build_model(load_checkpoint(a.checkpoint));
  if (!a.adapter_checkpoint.empty()) apply_checkpoint(m, load_checkpoint(a.adapter_checkpoint));
  return m;
}

std::vector<Case> load_cases(const std::string& dir) { return prepare_cases(open_cohort(dir).load_all()); }

int cmd_train(const RunArgs& a, bool finetuning) {
  const TrainMode mode = train_mode_from_string(a.mode.empty() ? (finetuning ? "peft" : "scratch") : a.mode);
  if (mode == TrainMode::Scratch && !a.checkpoint.empty())
    throw UsageError("--mode scratch starts from random weights; drop --checkpoint");
  if (mode != TrainMode::Scratch && a.checkpoint.empty())
    throw UsageError(std::string("--mode ") + to_string(mode) + " needs --checkpoint with pretrained weights");
  const RunConfig cfg = load_run_config(a, finetuning);

  PeftModel<float> model = mode == TrainMode::Scratch ? PeftModel<float>(MedNeXt<float>(cfg.model)) : load_model(a);
  if (mode == TrainMode::Peft && !model.has_adapters()) model = attach_adapters(std::move(model), cfg.adapter, cfg.sites);

  const auto cases = load_cases(a.cohort);
  fs::create_directories(a.out);
  TrainOptions opts;
  opts.run_id = a.label.empty() ? std::string(to_string(mode)) : a.label;
  opts.out_dir = fs::path(a.out);
  opts.on_epoch = [](const EpochLog& e) {
    std::printf("epoch %3d  loss %.4f  val_dice %.4f  lr %.2e  %.1fs\n", e.epoch, e.train_loss, e.val_dice, e.lr,
                e.seconds);
    std::fflush(stdout);
  };
  const TrainResult r = train(model, cases, cfg.train, cfg.policy(mode), opts);
  {
    std::ofstream out(fs::path(a.out) / "config.json");
    out << cfg.to_json() << '\n';
  }

  // validation metrics for the best checkpoint
  const Split split = split_by_index(static_cast<int>(cases.size()), cfg.train.validation_fraction);
  std::vector<Case> held;
  for (int i : split.validation.empty() ? split.train : split.validation) held.push_back(cases[static_cast<size_t>(i)]);
  PeftModel<float> best = build_model(r.best);
  evaluate(best, held, cfg.metrics, opts.run_id).write(a.out);

  std::cout << r.partition.to_json() << '\n';
  std::printf("best epoch %d, val dice %.4f, %lld steps in %.1fs\n", r.record.best_epoch, r.record.best_val_dice,
              static_cast<long long>(r.record.steps), r.record.wall_seconds);
  return kExitOk;
}

int cmd_evaluate(const RunArgs& a) {
  if (a.checkpoint.empty()) throw UsageError("evaluate needs --checkpoint");
  MetricConfig metrics;
  if (!a.config.empty()) metrics = RunConfig::load(a.config).metrics;
  PeftModel<float> model = load_model(a);
  const auto cases = load_cases(a.cohort);
  const std::string label = a.label.empty() ? fs::path(a.out).filename().string() : a.label;
  const MetricsReport rep = evaluate(model, cases, metrics, label);
  rep.write(a.out);

  if (a.overlays > 0) {
    const fs::path dir = fs::path(a.out) / "overlays";
    fs::create_directories(dir);
    const int n = std::min<int>(a.overlays, static_cast<int>(cases.size()));
    for (int i = 0; i < n; ++i) {
      const Case& c = cases[static_cast<size_t>(i)];
      write_png(render_overlay(c.image, c.labels, predict(model, c.image)), dir / (c.id + ".png"));
    }
  }
  const auto agg = rep.aggregate();
  std::printf("%s: %zu cases, mean dice %.4f, mean hd95 %.2f\n", label.c_str(), cases.size(),
              agg.region_mean.at("dice"), agg.region_mean.at("hd95"));
  return kExitOk;
}

int cmd_report(const std::string& runs_dir, const std::string& out) {
  const auto runs = collect_runs(runs_dir);
  const ReportFiles f = write_report(runs, out);
  std::printf("%zu runs -> %s, %s, %s, %s\n", runs.size(), f.dice_boxplot.c_str(), f.hd95_boxplot.c_str(),
              f.table_csv.c_str(), f.table_md.c_str());
  return kExitOk;
}

int cmd_experiment(const std::string& spec_file, const std::string& preset, std::optional<uint64_t> seed,
                   const std::string& out) {
  ExperimentSpec spec;
  if (!spec_file.empty()) {
    std::ifstream in(spec_file);
    if (!in) throw Error(ErrorKind::IoError, "cannot open " + spec_file);
    std::stringstream ss;
    ss << in.rdbuf();
    spec = ExperimentSpec::from_json(ss.str());
  } else if (preset == "smoke") {
    spec = ExperimentSpec::smoke();
  } else if (preset == "desk") {
    spec = ExperimentSpec::desk();
  } else {
    throw UsageError("unknown --preset '" + preset + "' (desk or smoke)");
  }
  if (seed) spec.seed = *seed;
  const ExperimentResult r = run_experiment(spec, out, [](const std::string& line) {
    std::puts(line.c_str());
    std::fflush(stdout);
  });
  write_report(collect_runs(fs::path(out) / "runs"), fs::path(out) / "report");
  std::cout << r.to_json() << '\n';
  return kExitOk;
}

void add_run_options(CLI::App* cmd, RunArgs& a, bool needs_mode) {
  cmd->add_option("--config", a.config, "run configuration JSON")->check(CLI::ExistingFile);
  if (needs_mode) {
    cmd->add_option("--mode", a.mode, "scratch | full | peft")->check(CLI::IsMember({"scratch", "full", "full_ft", "peft"}));
    cmd->add_option("--adapter", a.adapter, "linear | convdw | convnext")->check(CLI::IsMember({"linear", "convdw", "convnext"}));
    cmd->add_option("--placement", a.placement, "sequential | parallel")->check(CLI::IsMember({"sequential", "parallel"}));
    cmd->add_option("--epochs", a.epochs);
    cmd->add_option("--batch-size", a.batch_size);
    cmd->add_option("--lr", a.lr);
    cmd->add_option("--seed", a.seed);
  }
  cmd->add_option("--checkpoint", a.checkpoint, "model checkpoint");
  cmd->add_option("--adapter-checkpoint", a.adapter_checkpoint, "adapter-only checkpoint layered on --checkpoint");
  cmd->add_option("--cohort", a.cohort, "cohort directory")->required();
  cmd->add_option("--out", a.out, "output directory")->required();
  cmd->add_option("--label", a.label, "run label");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"medpeft: adapters for 3D brain tumour segmentation"};
  app.require_subcommand(1);

  CohortArgs cohort;
  auto* cohort_cmd = app.add_subcommand("cohort", "synthetic cohorts");
  cohort_cmd->require_subcommand(1);
  auto* gen = cohort_cmd->add_subcommand("gen", "generate a synthetic cohort");
  gen->add_option("--domain", cohort.domain)->check(CLI::IsMember({"source", "shifted"}));
  gen->add_option("--n", cohort.n, "number of cases");
  gen->add_option("--shape", cohort.shape, "N or XxYxZ");
  gen->add_option("--seed", cohort.seed);
  gen->add_option("--gamma", cohort.gamma, "shifted domain gamma");
  gen->add_option("--noise", cohort.noise, "shifted domain Rician sigma");
  gen->add_option("--blur", cohort.blur, "shifted domain blur sigma (voxels)");
  gen->add_option("--out", cohort.out)->required();

  RunArgs train_args, finetune_args, eval_args;
  auto* train_cmd = app.add_subcommand("train", "train on a cohort (default --mode scratch)");
  add_run_options(train_cmd, train_args, true);
  auto* finetune_cmd = app.add_subcommand("finetune", "fine-tune a pretrained checkpoint (default --mode peft)");
  add_run_options(finetune_cmd, finetune_args, true);
  auto* eval_cmd = app.add_subcommand("evaluate", "metrics for a checkpoint on a cohort");
  add_run_options(eval_cmd, eval_args, false);
  eval_cmd->add_option("--overlays", eval_args.overlays, "write mid-axial PNG overlays for the first N cases");

  std::string runs_dir, fig_dir;
  auto* report_cmd = app.add_subcommand("report", "boxplots and comparison tables across runs");
  report_cmd->add_option("--runs", runs_dir)->required();
  report_cmd->add_option("--out", fig_dir)->required();

  std::string spec_file, preset = "desk", exp_out;
  std::optional<uint64_t> exp_seed;
  auto* exp_cmd = app.add_subcommand("experiment", "pretrain, zero-shot, fine-tune and compare");
  exp_cmd->add_option("--spec", spec_file, "experiment spec JSON")->check(CLI::ExistingFile);
  exp_cmd->add_option("--preset", preset, "desk | smoke");
  exp_cmd->add_option("--seed", exp_seed);
  exp_cmd->add_option("--out", exp_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_cohort_gen(cohort);
    if (train_cmd->parsed()) return cmd_train(train_args, false);
    if (finetune_cmd->parsed()) return cmd_train(finetune_args, true);
    if (eval_cmd->parsed()) return cmd_evaluate(eval_args);
    if (report_cmd->parsed()) return cmd_report(runs_dir, fig_dir);
    if (exp_cmd->parsed()) return cmd_experiment(spec_file, preset, exp_seed, exp_out);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
