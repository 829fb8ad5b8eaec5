#include "medpeft/experiment.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>

#include "config_json.hpp"

namespace medpeft {

namespace fs = std::filesystem;
using detail::json;

uint64_t fnv1a64(const std::string& bytes) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string run_label(TrainMode m) {
  switch (m) {
    case TrainMode::Scratch: return "scratch";
    case TrainMode::FullFt: return "full_ft";
    case TrainMode::Peft: return "peft";
  }
  return "peft";
}

ExperimentSpec ExperimentSpec::desk() {
  ExperimentSpec s;
  s.pretrain.epochs = 30;
  s.pretrain.learning_rate = 1e-3;
  s.finetune.epochs = 100;
  s.finetune.learning_rate = 3e-3;
  return s;
}

ExperimentSpec ExperimentSpec::smoke() {
  ExperimentSpec s;
  s.shape = {16, 16, 16};
  s.n_source = 6;
  s.n_shifted = 4;
  s.n_source_test = 2;
  s.n_shifted_test = 2;
  s.pretrain.epochs = 2;
  s.finetune.epochs = 2;
  s.finetune.learning_rate = 3e-3;
  return s;
}

void ExperimentSpec::validate() const {
  if (n_source < 1 || n_shifted < 1 || n_source_test < 1 || n_shifted_test < 1)
    fail(ErrorKind::InvalidConfig, "every experiment cohort needs at least one case");
  if (finetune_modes.empty()) fail(ErrorKind::InvalidConfig, "no fine-tuning modes requested");
  model.validate();
  adapter.validate();
  pretrain.validate();
  finetune.validate();
  const int64_t m = model.spatial_multiple();
  if (shape.x % m || shape.y % m || shape.z % m)
    fail(ErrorKind::InvalidConfig, "experiment shape must be a multiple of " + std::to_string(m));
}

namespace {

json shift_to_json(const ShiftConfig& s) {
  return {{"gamma", s.gamma}, {"noise_sigma", s.noise_sigma}, {"blur_sigma", s.blur_sigma}};
}

ShiftConfig shift_from_json(const json& j) {
  detail::reject_unknown_keys(j, {"gamma", "noise_sigma", "blur_sigma"}, "shift");
  ShiftConfig s;
  detail::read_if(j, "gamma", s.gamma);
  detail::read_if(j, "noise_sigma", s.noise_sigma);
  detail::read_if(j, "blur_sigma", s.blur_sigma);
  return s;
}

json spec_json(const ExperimentSpec& s) {
  json modes = json::array();
  for (TrainMode m : s.finetune_modes) modes.push_back(to_string(m));
  return {{"schema_version", kConfigSchemaVersion},
          {"kind", "experiment"},
          {"seed", s.seed},
          {"shape", {s.shape.x, s.shape.y, s.shape.z}},
          {"n_source", s.n_source},
          {"n_shifted", s.n_shifted},
          {"n_source_test", s.n_source_test},
          {"n_shifted_test", s.n_shifted_test},
          {"shift", shift_to_json(s.shift)},
          {"model", detail::model_config_to_json(s.model)},
          {"adapter", detail::adapter_config_to_json(s.adapter)},
          {"sites", detail::sites_to_json(s.sites)},
          {"peft", {{"train_head", s.train_head}, {"train_norms", s.train_norms}}},
          {"pretrain", detail::train_config_to_json(s.pretrain)},
          {"finetune", detail::train_config_to_json(s.finetune)},
          {"finetune_modes", modes},
          {"metrics", detail::metric_config_to_json(s.metrics)}};
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

class Stages {
 public:
  Stages(fs::path root, ExperimentResult& result, const std::function<void(const std::string&)>& log)
      : root_(std::move(root)), result_(result), log_(log) {}

  /// Returns the stage directory, running `body` only when no matching marker exists.
  StageRecord run(const std::string& group, const std::string& name, const json& inputs,
                  const std::function<void(const fs::path&)>& body) {
    StageRecord rec;
    rec.name = name;
    rec.key = hex64(fnv1a64(name + "\n" + inputs.dump()));
    rec.dir = root_ / group / (name + "-" + rec.key);
    const fs::path marker = rec.dir / "stage.json";
    if (fs::exists(marker)) {
      try {
        if (detail::read_json_file(marker).value("key", "") == rec.key) rec.cached = true;
      } catch (const Error&) {
      }
    }
    if (rec.cached) {
      say("[cached] " + name + " " + rec.key);
    } else {
      say("[run]    " + name + " " + rec.key);
      const auto t0 = std::chrono::steady_clock::now();
      fs::remove_all(rec.dir);
      fs::create_directories(rec.dir);
      body(rec.dir);
      rec.seconds = seconds_since(t0);
      detail::write_json_file(marker, {{"schema_version", kConfigSchemaVersion},
                                       {"stage", name},
                                       {"key", rec.key},
                                       {"inputs", inputs},
                                       {"seconds", rec.seconds}});
    }
    result_.stages.push_back(rec);
    return rec;
  }

  void say(const std::string& s) const {
    if (log_) log_(s);
  }

 private:
  fs::path root_;
  ExperimentResult& result_;
  const std::function<void(const std::string&)>& log_;
};

double report_mean_dice(const fs::path& dir) {
  return MetricsReport::read(dir / "metrics.json").aggregate().region_mean.at("dice");
}

void publish_run(const fs::path& eval_dir, const fs::path& run_dir, const fs::path& train_dir) {
  fs::create_directories(run_dir);
  for (const char* f : {"metrics.csv", "metrics.json"})
    fs::copy_file(eval_dir / f, run_dir / f, fs::copy_options::overwrite_existing);
  if (!train_dir.empty()) {
    for (const char* f : {"run_record.json", "partition.json"})
      if (fs::exists(train_dir / f)) fs::copy_file(train_dir / f, run_dir / f, fs::copy_options::overwrite_existing);
  }
}

}  // namespace

std::string ExperimentSpec::to_json() const { return spec_json(*this).dump(2); }

ExperimentSpec ExperimentSpec::from_json(const std::string& text) {
  const json j = detail::parse_json_text(text, "experiment spec");
  detail::reject_unknown_keys(j,
                              {"schema_version", "kind", "seed", "shape", "n_source", "n_shifted", "n_source_test",
                               "n_shifted_test", "shift", "model", "adapter", "sites", "peft", "pretrain", "finetune",
                               "finetune_modes", "metrics", "preset"},
                              "experiment spec");
  int version = kConfigSchemaVersion;
  detail::read_if(j, "schema_version", version);
  if (version != kConfigSchemaVersion) fail(ErrorKind::SchemaMismatch, "unsupported experiment schema_version");
  ExperimentSpec s = desk();
  if (j.contains("preset")) {
    const auto p = j.at("preset").get<std::string>();
    if (p == "smoke") s = smoke();
    else if (p != "desk") fail(ErrorKind::SchemaMismatch, "unknown experiment preset '" + p + "'");
  }
  detail::read_if(j, "seed", s.seed);
  if (j.contains("shape")) {
    std::vector<int64_t> v;
    detail::read_if(j, "shape", v);
    if (v.size() == 1) v = {v[0], v[0], v[0]};
    if (v.size() != 3) fail(ErrorKind::SchemaMismatch, "shape needs 1 or 3 entries");
    s.shape = {v[0], v[1], v[2]};
  }
  detail::read_if(j, "n_source", s.n_source);
  detail::read_if(j, "n_shifted", s.n_shifted);
  detail::read_if(j, "n_source_test", s.n_source_test);
  detail::read_if(j, "n_shifted_test", s.n_shifted_test);
  if (j.contains("shift")) s.shift = shift_from_json(j.at("shift"));
  if (j.contains("model")) s.model = detail::model_config_from_json(j.at("model"), s.model);
  if (j.contains("adapter")) s.adapter = detail::adapter_config_from_json(j.at("adapter"), s.adapter);
  if (j.contains("sites")) s.sites = detail::sites_from_json(j.at("sites"));
  if (j.contains("peft")) {
    detail::reject_unknown_keys(j.at("peft"), {"train_head", "train_norms"}, "peft");
    detail::read_if(j.at("peft"), "train_head", s.train_head);
    detail::read_if(j.at("peft"), "train_norms", s.train_norms);
  }
  if (j.contains("pretrain")) s.pretrain = detail::train_config_from_json(j.at("pretrain"), s.pretrain);
  if (j.contains("finetune")) s.finetune = detail::train_config_from_json(j.at("finetune"), s.finetune);
  if (j.contains("finetune_modes")) {
    std::vector<std::string> modes;
    detail::read_if(j, "finetune_modes", modes);
    s.finetune_modes.clear();
    for (const auto& m : modes) s.finetune_modes.push_back(train_mode_from_string(m));
  }
  if (j.contains("metrics")) s.metrics = detail::metric_config_from_json(j.at("metrics"));
  s.validate();
  return s;
}

std::string ExperimentResult::to_json() const {
  json j;
  j["schema_version"] = kConfigSchemaVersion;
  j["kind"] = "experiment_result";
  j["source_dice"] = source_dice;
  j["zero_shot_dice"] = zero_shot_dice;
  j["finetuned_dice"] = finetuned_dice;
  j["trainable_fraction"] = trainable_fraction;
  j["seconds_per_step"] = seconds_per_step;
  json st = json::array();
  for (const auto& s : stages)
    st.push_back({{"name", s.name}, {"key", s.key}, {"dir", s.dir.string()}, {"cached", s.cached}, {"seconds", s.seconds}});
  j["stages"] = st;
  return j.dump(2);
}

ExperimentResult run_experiment(const ExperimentSpec& spec, const fs::path& out_dir,
                                const std::function<void(const std::string&)>& log) {
  spec.validate();
  ExperimentResult result;
  Stages stages(out_dir, result, log);

  // Cohorts. Each gets its own seed so test cases never repeat training anatomy.
  struct CohortStage {
    std::string name;
    Domain domain;
    int n;
    uint64_t stream;
    StageRecord rec;
  };
  std::vector<CohortStage> cohorts{{"source_train", Domain::Source, spec.n_source, 0, {}},
                                   {"shifted_train", Domain::Shifted, spec.n_shifted, 1, {}},
                                   {"source_test", Domain::Source, spec.n_source_test, 2, {}},
                                   {"shifted_test", Domain::Shifted, spec.n_shifted_test, 3, {}}};
  std::map<std::string, std::vector<Case>> data;
  for (auto& c : cohorts) {
    CohortSpec cs;
    cs.n_cases = c.n;
    cs.spatial_shape = spec.shape;
    cs.n_channels = static_cast<int>(spec.model.in_channels);
    cs.domain = c.domain;
    cs.rng_seed = spec.seed * 4 + c.stream;
    cs.shift = spec.shift;
    CohortManifest shell;
    shell.spec = cs;
    c.rec = stages.run("cohorts", c.name, json::parse(shell.to_json()),
                       [&](const fs::path& dir) { generate_cohort(cs, dir); });
    data[c.name] = prepare_cases(open_cohort(c.rec.dir).load_all());
  }
  auto cohort_key = [&](const std::string& n) {
    for (const auto& c : cohorts)
      if (c.name == n) return c.rec.key;
    return std::string();
  };

  auto eval_stage = [&](const std::string& name, const StageRecord& model_stage, const std::string& cohort) {
    const json inputs{{"model_stage", model_stage.key}, {"checkpoint", "best.ckpt"}, {"cohort", cohort_key(cohort)},
                      {"metrics", detail::metric_config_to_json(spec.metrics)}};
    return stages.run("stages", name, inputs, [&](const fs::path& dir) {
      PeftModel<float> m = build_model(load_checkpoint(model_stage.dir / "best.ckpt"));
      evaluate(m, data[cohort], spec.metrics, name).write(dir);
    });
  };

  // Pretraining on the source domain.
  TrainConfig pre = spec.pretrain;
  pre.seed = spec.seed;
  const StageRecord pretrain =
      stages.run("stages", "pretrain",
                 {{"model", detail::model_config_to_json(spec.model)},
                  {"train", detail::train_config_to_json(pre)},
                  {"cohort", cohort_key("source_train")}},
                 [&](const fs::path& dir) {
                   PeftModel<float> m{MedNeXt<float>(spec.model)};
                   TrainOptions o;
                   o.run_id = "pretrain";
                   o.out_dir = dir;
                   train(m, data["source_train"], pre, FreezePolicy::scratch(), o);
                 });

  const StageRecord src_eval = eval_stage("eval-source", pretrain, "source_test");
  const StageRecord zero_eval = eval_stage("eval-zero_shot", pretrain, "shifted_test");
  result.source_dice = report_mean_dice(src_eval.dir);
  result.zero_shot_dice = report_mean_dice(zero_eval.dir);
  publish_run(zero_eval.dir, out_dir / "runs" / kZeroShotLabel, {});

  for (TrainMode mode : spec.finetune_modes) {
    const std::string label = run_label(mode);
    TrainConfig ft = spec.finetune;
    ft.seed = spec.seed;
    if (mode == TrainMode::Scratch) ft.learning_rate = spec.pretrain.learning_rate;
    const FreezePolicy policy =
        mode == TrainMode::Peft ? FreezePolicy::peft(spec.train_head, spec.train_norms)
                                : (mode == TrainMode::FullFt ? FreezePolicy::full_ft() : FreezePolicy::scratch());
    json inputs{{"mode", to_string(mode)},
                {"train", detail::train_config_to_json(ft)},
                {"cohort", cohort_key("shifted_train")}};
    if (mode != TrainMode::Scratch) inputs["pretrain"] = pretrain.key;
    else inputs["model"] = detail::model_config_to_json(spec.model);
    if (mode == TrainMode::Peft) {
      inputs["adapter"] = detail::adapter_config_to_json(spec.adapter);
      inputs["sites"] = detail::sites_to_json(spec.sites);
      inputs["peft"] = {{"train_head", spec.train_head}, {"train_norms", spec.train_norms}};
    }
    const StageRecord ft_stage = stages.run("stages", "finetune-" + label, inputs, [&](const fs::path& dir) {
      PeftModel<float> m = mode == TrainMode::Scratch
                               ? PeftModel<float>(MedNeXt<float>(spec.model))
                               : build_model(load_checkpoint(pretrain.dir / "best.ckpt"));
      if (mode == TrainMode::Peft) m = attach_adapters(std::move(m), spec.adapter, spec.sites);
      TrainOptions o;
      o.run_id = label;
      o.out_dir = dir;
      train(m, data["shifted_train"], ft, policy, o);
    });
    const StageRecord ev = eval_stage("eval-" + label, ft_stage, "shifted_test");
    result.finetuned_dice[label] = report_mean_dice(ev.dir);
    const RunRecord rr = RunRecord::from_json(detail::read_json_file(ft_stage.dir / "run_record.json").dump());
    result.trainable_fraction[label] = rr.trainable_fraction;
    result.seconds_per_step[label] = rr.seconds_per_step();
    publish_run(ev.dir, out_dir / "runs" / label, ft_stage.dir);
  }

  std::ofstream(out_dir / "experiment.json") << result.to_json() << "\n";
  std::ofstream(out_dir / "spec.json") << spec.to_json() << "\n";
  return result;
}

}  // namespace medpeft
