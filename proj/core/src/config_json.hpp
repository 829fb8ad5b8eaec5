#pragma once

#include <set>
#include <string>

#include "json_util.hpp"
#include "medpeft/adapter.hpp"
#include "medpeft/conv_adapter.hpp"
#include "medpeft/mednext.hpp"
#include "medpeft/metrics.hpp"
#include "medpeft/trainer.hpp"

namespace medpeft::detail {

inline void reject_unknown_keys(const json& j, const std::set<std::string>& known, const char* what) {
  if (!j.is_object()) fail(ErrorKind::SchemaMismatch, std::string(what) + " must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) fail(ErrorKind::SchemaMismatch, std::string("unknown key '") + k + "' in " + what);
  }
}

template <typename V>
void read_if(const json& j, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception& e) {
    fail(ErrorKind::SchemaMismatch, std::string("bad value for '") + key + "': " + e.what());
  }
}

inline json model_config_to_json(const ModelConfig& c) {
  return {{"in_channels", c.in_channels},   {"n_classes", c.n_classes},
          {"base_channels", c.base_channels}, {"kernel_size", c.kernel_size},
          {"expansion_ratio", c.expansion_ratio}, {"blocks_per_stage", c.blocks_per_stage},
          {"n_levels", c.n_levels},         {"deep_supervision", c.deep_supervision},
          {"norm_groups", c.norm_groups},   {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const json& j, ModelConfig c = {}) {
  reject_unknown_keys(j,
                      {"in_channels", "n_classes", "base_channels", "kernel_size", "expansion_ratio",
                       "blocks_per_stage", "n_levels", "deep_supervision", "norm_groups", "seed", "preset"},
                      "model config");
  if (j.contains("preset")) {
    const auto p = j.at("preset").get<std::string>();
    if (p == "mednext_s") {
      c = ModelConfig::mednext_s();
    } else if (p == "tiny") {
      c = ModelConfig::tiny();
    } else {
      fail(ErrorKind::SchemaMismatch, "unknown model preset '" + p + "'");
    }
  }
  read_if(j, "in_channels", c.in_channels);
  read_if(j, "n_classes", c.n_classes);
  read_if(j, "base_channels", c.base_channels);
  read_if(j, "kernel_size", c.kernel_size);
  read_if(j, "expansion_ratio", c.expansion_ratio);
  read_if(j, "blocks_per_stage", c.blocks_per_stage);
  read_if(j, "n_levels", c.n_levels);
  read_if(j, "deep_supervision", c.deep_supervision);
  read_if(j, "norm_groups", c.norm_groups);
  read_if(j, "seed", c.seed);
  c.validate();
  return c;
}

inline json adapter_config_to_json(const AdapterConfig& c) {
  return {{"variant", to_string(c.variant)},
          {"placement", to_string(c.placement)},
          {"bottleneck_ratio", c.bottleneck_ratio},
          {"expansion_ratio", c.expansion_ratio},
          {"kernel_size", c.kernel_size},
          {"activation", nn::to_string(c.activation)},
          {"zero_init_projection", c.zero_init_projection},
          {"seed", c.seed}};
}

inline AdapterConfig adapter_config_from_json(const json& j, AdapterConfig c = {}) {
  reject_unknown_keys(j,
                      {"variant", "placement", "bottleneck_ratio", "expansion_ratio", "kernel_size", "activation",
                       "zero_init_projection", "seed"},
                      "adapter config");
  try {
    if (j.contains("variant")) c.variant = adapter_variant_from_string(j.at("variant").get<std::string>());
    if (j.contains("placement")) c.placement = placement_from_string(j.at("placement").get<std::string>());
    if (j.contains("activation")) c.activation = nn::activation_from_string(j.at("activation").get<std::string>());
  } catch (const json::exception& e) {
    fail(ErrorKind::SchemaMismatch, std::string("adapter config: ") + e.what());
  }
  read_if(j, "bottleneck_ratio", c.bottleneck_ratio);
  read_if(j, "expansion_ratio", c.expansion_ratio);
  read_if(j, "kernel_size", c.kernel_size);
  read_if(j, "zero_init_projection", c.zero_init_projection);
  read_if(j, "seed", c.seed);
  c.validate();
  return c;
}

inline json train_config_to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"weight_decay", c.adamw.weight_decay},
          {"beta1", c.adamw.beta1},
          {"beta2", c.adamw.beta2},
          {"eps", c.adamw.eps},
          {"lr_schedule", to_string(c.schedule)},
          {"seed", c.seed},
          {"amp", c.amp},
          {"augment", c.augment},
          {"validation_fraction", c.validation_fraction},
          {"deep_supervision_weight", c.deep_supervision_weight}};
}

inline TrainConfig train_config_from_json(const json& j, TrainConfig c = {}) {
  reject_unknown_keys(j,
                      {"epochs", "batch_size", "learning_rate", "weight_decay", "beta1", "beta2", "eps", "lr_schedule",
                       "seed", "amp", "augment", "validation_fraction", "deep_supervision_weight"},
                      "train config");
  read_if(j, "epochs", c.epochs);
  read_if(j, "batch_size", c.batch_size);
  read_if(j, "learning_rate", c.learning_rate);
  read_if(j, "weight_decay", c.adamw.weight_decay);
  read_if(j, "beta1", c.adamw.beta1);
  read_if(j, "beta2", c.adamw.beta2);
  read_if(j, "eps", c.adamw.eps);
  if (j.contains("lr_schedule")) {
    std::string s;
    read_if(j, "lr_schedule", s);
    c.schedule = lr_schedule_from_string(s);
  }
  read_if(j, "seed", c.seed);
  read_if(j, "amp", c.amp);
  read_if(j, "augment", c.augment);
  read_if(j, "validation_fraction", c.validation_fraction);
  read_if(j, "deep_supervision_weight", c.deep_supervision_weight);
  c.validate();
  return c;
}

inline json sites_to_json(const SiteSelector& s) {
  return {{"kind", to_string(s.kind)}, {"include_bottleneck", s.include_bottleneck}, {"paths", s.paths}};
}

inline SiteSelector sites_from_json(const json& j) {
  reject_unknown_keys(j, {"kind", "include_bottleneck", "paths"}, "sites");
  SiteSelector s;
  if (j.contains("kind")) {
    std::string k;
    read_if(j, "kind", k);
    s.kind = site_kind_from_string(k);
    if (s.kind == SiteSelector::Kind::AllBasic) s.include_bottleneck = true;
  }
  read_if(j, "include_bottleneck", s.include_bottleneck);
  read_if(j, "paths", s.paths);
  return s;
}

inline json metric_config_to_json(const MetricConfig& c) {
  return {{"hd_penalty", c.hd_penalty},
          {"hd_percentile", c.hd_percentile},
          {"min_lesion_size", c.min_lesion_size},
          {"dilation", c.dilation}};
}

inline MetricConfig metric_config_from_json(const json& j) {
  reject_unknown_keys(j, {"hd_penalty", "hd_percentile", "min_lesion_size", "dilation"}, "metrics");
  MetricConfig c;
  read_if(j, "hd_penalty", c.hd_penalty);
  read_if(j, "hd_percentile", c.hd_percentile);
  read_if(j, "min_lesion_size", c.min_lesion_size);
  read_if(j, "dilation", c.dilation);
  if (c.hd_percentile <= 0 || c.hd_percentile > 100 || c.min_lesion_size < 1 || c.dilation < 0)
    fail(ErrorKind::InvalidConfig, "metric configuration out of range");
  return c;
}

inline json parse_json_text(const std::string& text, const char* what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::SchemaMismatch, std::string(what) + ": " + e.what());
  }
}

}  // namespace medpeft::detail
