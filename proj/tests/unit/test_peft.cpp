#include <doctest.h>

#include <unistd.h>

#include <fstream>
#include <json.hpp>

#include "medpeft/peft.hpp"
#include "medpeft/trainer.hpp"
#include "support.hpp"

using namespace medpeft;
namespace fs = std::filesystem;

namespace {

std::vector<Case> tiny_cases(int n, uint64_t seed) {
  CohortSpec s;
  s.n_cases = n;
  s.rng_seed = seed;
  s.spatial_shape = {16, 16, 16};
  std::vector<Case> out;
  for (int i = 0; i < n; ++i) out.push_back(generate_case(s, i));
  return prepare_cases(std::move(out));
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("medpeft_peft_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int64_t count_named(PeftModel<float>& m, const std::vector<std::string>& names) {
  int64_t n = 0;
  for (auto& p : m.named_parameters())
    if (std::find(names.begin(), names.end(), p.name) != names.end()) n += p.param->count();
  return n;
}

}  // namespace

TEST_CASE("policy partitions") {
  const ModelConfig mc = ModelConfig::tiny();
  auto m = attach_adapters(MedNeXt<float>(mc), AdapterConfig{});
  const int64_t total = count_parameters(m.backbone()).total;

  const auto full = apply_policy(m, FreezePolicy::full_ft());
  CHECK(full.frozen == 0);
  CHECK(full.trainable == total);
  CHECK(full.trainable_fraction() == 1.0);

  const auto bare = apply_policy(m, FreezePolicy::peft(false, false));
  CHECK(bare.trainable == adapter_parameter_count(mc, AdapterConfig{}));
  CHECK(bare.trainable == 4144);
  CHECK(bare.trainable + bare.frozen == total);
  for (const auto& n : bare.trainable_names) CHECK(n.rfind("adapter.", 0) == 0);

  const auto head = apply_policy(m, FreezePolicy::peft(true, false));
  // head: 1x1x1 conv from 8 channels to 4 classes.
  CHECK(head.trainable == 4144 + 8 * 4 + 4);
  CHECK(head.trainable + head.frozen == total);

  const auto norms = apply_policy(m, FreezePolicy::peft(true, true));
  int64_t norm_params = 0;
  for (auto& p : m.named_parameters())
    if (p.name.rfind("backbone.", 0) == 0 && p.name.find(".norm.") != std::string::npos) norm_params += p.param->count();
  CHECK(norms.trainable == head.trainable + norm_params);
  CHECK(count_named(m, norms.trainable_names) == norms.trainable);
  CHECK(count_named(m, norms.frozen_names) == norms.frozen);

  PeftModel<float> plain{MedNeXt<float>(mc)};
  try {
    apply_policy(plain, FreezePolicy::peft());
    FAIL("expected NoAdaptersAttached");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::NoAdaptersAttached);
  }
  CHECK(apply_policy(plain, FreezePolicy::scratch()).frozen == 0);

  const auto j = nlohmann::json::parse(head.to_json());
  CHECK(j.at("schema_version") == 1);
  CHECK(j.at("mode") == "peft");
  CHECK(j.at("trainable").get<int64_t>() + j.at("frozen").get<int64_t>() == j.at("total").get<int64_t>());
  CHECK(j.at("trainable_fraction").get<double>() < 0.15);
}

TEST_CASE("frozen tensors stay bit-identical under PEFT training") {
  const auto cases = tiny_cases(6, 1);
  auto m = attach_adapters(MedNeXt<float>(ModelConfig::tiny()), AdapterConfig{});
  const StateDict before = state_dict(m);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 1;
  cfg.validation_fraction = 0.0;
  cfg.adamw.weight_decay = 0.1;  // decay must never reach frozen tensors
  const auto r = train(m, {cases.begin(), cases.begin() + 5}, cfg, FreezePolicy::peft());
  CHECK(r.record.steps == 5);
  const auto report = verify_frozen(r.partition, before, state_dict(m));
  CHECK(report.passed);
  CHECK(report.frozen.size() == r.partition.frozen_names.size());
  for (const auto& row : report.frozen) CHECK(row.max_abs_change == 0.0);
  CHECK(!report.changed_trainable.empty());
  bool adapter_changed = false;
  for (const auto& n : report.changed_trainable) adapter_changed |= n.rfind("adapter.", 0) == 0;
  CHECK(adapter_changed);

  const auto none = verify_frozen(r.partition, before, before);
  CHECK(none.passed);
  CHECK(none.changed_trainable.empty());
}

TEST_CASE("full fine-tuning changes backbone tensors") {
  const auto cases = tiny_cases(2, 2);
  PeftModel<float> m{MedNeXt<float>(ModelConfig::tiny())};
  const StateDict before = state_dict(m);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 1;
  cfg.validation_fraction = 0.0;
  const auto r = train(m, {cases.begin(), cases.begin() + 1}, cfg, FreezePolicy::full_ft());
  CHECK(r.record.steps == 1);
  const auto rep = verify_frozen(r.partition, before, state_dict(m));
  CHECK(rep.frozen.empty());
  int backbone_changed = 0;
  for (const auto& n : rep.changed_trainable) backbone_changed += n.rfind("backbone.", 0) == 0;
  CHECK(backbone_changed > 10);
}

TEST_CASE("verify_frozen rejects different architectures") {
  PeftModel<float> a{MedNeXt<float>(ModelConfig::tiny())};
  auto b = attach_adapters(MedNeXt<float>(ModelConfig::tiny()), AdapterConfig{});
  const auto part = apply_policy(a, FreezePolicy::full_ft());
  try {
    verify_frozen(part, state_dict(a), state_dict(b));
    FAIL("expected ArchitectureMismatch");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ArchitectureMismatch);
  }
}

TEST_CASE("checkpoint round trips") {
  const auto dir = scratch("ckpt");
  const auto x = testutil::random_tensor<float>({4, 8, 8, 8}, 3);
  AdapterConfig ac;
  ac.zero_init_projection = false;
  auto m = attach_adapters(MedNeXt<float>(ModelConfig::tiny()), ac);
  const auto y = m.forward(x, false);

  save_checkpoint(make_checkpoint(m), dir / "full.ckpt");
  const Checkpoint full = load_checkpoint(dir / "full.ckpt");
  CHECK(full.manifest.has_adapters);
  CHECK(full.manifest.format_version == kCheckpointFormatVersion);
  auto rebuilt = build_model(full);
  CHECK(rebuilt.forward(x, false) == y);
  CHECK(rebuilt.sites() == m.sites());

  // Adapter-only file layered on a backbone checkpoint.
  save_checkpoint(make_checkpoint(m, CheckpointContents::AdapterOnly), dir / "adapter.ckpt");
  PeftModel<float> backbone_only{MedNeXt<float>(ModelConfig::tiny())};
  const Checkpoint a = load_checkpoint(dir / "adapter.ckpt");
  CHECK(a.manifest.contents == CheckpointContents::AdapterOnly);
  for (const auto& [name, t] : a.tensors) CHECK(name.rfind("adapter.", 0) == 0);
  CHECK(fs::file_size(dir / "adapter.ckpt") < fs::file_size(dir / "full.ckpt"));
  apply_checkpoint(backbone_only, a);
  CHECK(backbone_only.forward(x, false) == y);

  ModelConfig other = ModelConfig::tiny();
  other.base_channels = 4;
  PeftModel<float> wrong{MedNeXt<float>(other)};
  try {
    apply_checkpoint(wrong, full);
    FAIL("expected ArchitectureMismatch");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ArchitectureMismatch);
  }

  std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
  CHECK_THROWS_AS(load_checkpoint(dir / "junk.ckpt"), Error);
  fs::remove_all(dir);
}
