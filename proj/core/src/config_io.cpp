#include "medpeft/config_io.hpp"

#include "config_json.hpp"

namespace medpeft {

using detail::json;

FreezePolicy RunConfig::policy(TrainMode mode) const {
  switch (mode) {
    case TrainMode::Scratch: return FreezePolicy::scratch();
    case TrainMode::FullFt: return FreezePolicy::full_ft();
    case TrainMode::Peft: return FreezePolicy::peft(train_head, train_norms);
  }
  return FreezePolicy::peft(train_head, train_norms);
}

std::string RunConfig::to_json() const {
  json j;
  j["schema_version"] = kConfigSchemaVersion;
  j["model"] = detail::model_config_to_json(model);
  j["adapter"] = detail::adapter_config_to_json(adapter);
  j["sites"] = detail::sites_to_json(sites);
  j["train"] = detail::train_config_to_json(train);
  j["peft"] = {{"train_head", train_head}, {"train_norms", train_norms}};
  j["metrics"] = detail::metric_config_to_json(metrics);
  return j.dump(2);
}

RunConfig RunConfig::from_json(const std::string& text) {
  const json j = detail::parse_json_text(text, "run config");
  detail::reject_unknown_keys(j, {"schema_version", "model", "adapter", "sites", "train", "peft", "metrics"},
                              "run config");
  int version = kConfigSchemaVersion;
  detail::read_if(j, "schema_version", version);
  if (version != kConfigSchemaVersion)
    fail(ErrorKind::SchemaMismatch, "config schema_version " + std::to_string(version) + " is not supported");
  RunConfig c;
  if (j.contains("model")) c.model = detail::model_config_from_json(j.at("model"), c.model);
  if (j.contains("adapter")) c.adapter = detail::adapter_config_from_json(j.at("adapter"));
  if (j.contains("sites")) c.sites = detail::sites_from_json(j.at("sites"));
  if (j.contains("train")) c.train = detail::train_config_from_json(j.at("train"));
  if (j.contains("peft")) {
    detail::reject_unknown_keys(j.at("peft"), {"train_head", "train_norms"}, "peft");
    detail::read_if(j.at("peft"), "train_head", c.train_head);
    detail::read_if(j.at("peft"), "train_norms", c.train_norms);
  }
  if (j.contains("metrics")) c.metrics = detail::metric_config_from_json(j.at("metrics"));
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) { return from_json(detail::read_json_file(path).dump()); }

std::string model_config_to_json(const ModelConfig& c) { return detail::model_config_to_json(c).dump(2); }

ModelConfig model_config_from_json(const std::string& text) {
  return detail::model_config_from_json(detail::parse_json_text(text, "model config"));
}

std::string adapter_config_to_json(const AdapterConfig& c) { return detail::adapter_config_to_json(c).dump(2); }

AdapterConfig adapter_config_from_json(const std::string& text) {
  return detail::adapter_config_from_json(detail::parse_json_text(text, "adapter config"));
}

std::string train_config_to_json(const TrainConfig& c) { return detail::train_config_to_json(c).dump(2); }

TrainConfig train_config_from_json(const std::string& text) {
  return detail::train_config_from_json(detail::parse_json_text(text, "train config"));
}

}  // namespace medpeft
