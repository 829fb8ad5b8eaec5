#pragma once

#include <string>
#include <vector>

#include "medpeft/adapter.hpp"
#include "medpeft/mednext.hpp"

namespace medpeft {

/// Which blocks receive an adapter.
struct SiteSelector {
  enum class Kind {
    StageOutputs,  // last BASIC block of every encoder and decoder stage
    AllBasic,      // every BASIC block
    Explicit,      // the listed block paths
  };
  Kind kind = Kind::StageOutputs;
  bool include_bottleneck = false;
  std::vector<std::string> paths;

  static SiteSelector stage_outputs(bool bottleneck = false) { return {Kind::StageOutputs, bottleneck, {}}; }
  static SiteSelector all_basic(bool bottleneck = true) { return {Kind::AllBasic, bottleneck, {}}; }
  static SiteSelector explicit_paths(std::vector<std::string> p) { return {Kind::Explicit, false, std::move(p)}; }

  /// Resolved block paths, in forward order.
  std::vector<std::string> resolve(const ModelConfig& cfg) const;
};

const char* to_string(SiteSelector::Kind k) noexcept;
SiteSelector::Kind site_kind_from_string(const std::string& s);

template <typename T>
class PeftModel;

/// Attaches one adapter per selected site. Adapter weights are drawn from
/// cfg.seed, so attaching to identical backbones gives identical adapters.
/// Throws IncompatibleSite for parallel placement on DOWN/UP blocks and
/// InvalidConfig if adapters are already present.
template <typename T>
PeftModel<T> attach_adapters(PeftModel<T> m, const AdapterConfig& cfg, const SiteSelector& sites = {});

template <typename T>
MedNeXt<T> detach_adapters(PeftModel<T> m);

/// A backbone plus the record of where adapters were attached.
template <typename T>
class PeftModel {
 public:
  explicit PeftModel(MedNeXt<T> model) : model_(std::move(model)) {}

  Tensor<T> forward(const Tensor<T>& x, bool training) { return model_.forward(x, training); }
  void backward(const Tensor<T>& g, const std::vector<Tensor<T>>* aux = nullptr) { model_.backward(g, aux); }

  MedNeXt<T>& backbone() { return model_; }
  const MedNeXt<T>& backbone() const { return model_; }
  const ModelConfig& config() const { return model_.config(); }
  nn::ParameterList<T> named_parameters() { return model_.named_parameters(); }
  void zero_grad() { model_.zero_grad(); }

  bool has_adapters() const { return !sites_.empty(); }
  const AdapterConfig& adapter_config() const { return adapter_cfg_; }
  const std::vector<std::string>& sites() const { return sites_; }

 private:
  friend PeftModel attach_adapters<T>(PeftModel m, const AdapterConfig& cfg, const SiteSelector& sites);
  friend MedNeXt<T> detach_adapters<T>(PeftModel m);

  MedNeXt<T> model_;
  AdapterConfig adapter_cfg_;
  std::vector<std::string> sites_;
};

template <typename T>
PeftModel<T> attach_adapters(MedNeXt<T> m, const AdapterConfig& cfg, const SiteSelector& sites = {}) {
  return attach_adapters(PeftModel<T>(std::move(m)), cfg, sites);
}

/// Closed-form adapter parameter total for a config and site selection.
int64_t adapter_parameter_count(const ModelConfig& model, const AdapterConfig& cfg, const SiteSelector& sites = {});

}  // namespace medpeft
