#include "medpeft/conv_adapter.hpp"

#include <algorithm>

namespace medpeft {

const char* to_string(SiteSelector::Kind k) noexcept {
  switch (k) {
    case SiteSelector::Kind::StageOutputs: return "stage_outputs";
    case SiteSelector::Kind::AllBasic: return "all_basic";
    case SiteSelector::Kind::Explicit: return "explicit";
  }
  return "stage_outputs";
}

SiteSelector::Kind site_kind_from_string(const std::string& s) {
  if (s == "stage_outputs") return SiteSelector::Kind::StageOutputs;
  if (s == "all_basic") return SiteSelector::Kind::AllBasic;
  if (s == "explicit") return SiteSelector::Kind::Explicit;
  fail(ErrorKind::InvalidConfig, "unknown site selector '" + s + "'");
}

std::vector<std::string> SiteSelector::resolve(const ModelConfig& cfg) const {
  cfg.validate();
  const int L = cfg.n_levels;
  const int B = cfg.blocks_per_stage;
  std::vector<std::string> out;
  auto add_stage = [&](const std::string& kind, int l) {
    const std::string base = kind + "." + std::to_string(l) + ".";
    if (this->kind == Kind::AllBasic) {
      for (int i = 0; i < B; ++i) out.push_back(base + std::to_string(i));
    } else {
      out.push_back(base + std::to_string(B - 1));
    }
  };
  switch (kind) {
    case Kind::Explicit:
      out = paths;
      break;
    case Kind::StageOutputs:
    case Kind::AllBasic:
      for (int l = 0; l < L; ++l) {
        if (l + 1 == L && !include_bottleneck) continue;
        add_stage("enc", l);
      }
      for (int l = L - 2; l >= 0; --l) add_stage("dec", l);
      break;
  }
  return out;
}

template <typename T>
PeftModel<T> attach_adapters(PeftModel<T> m, const AdapterConfig& cfg, const SiteSelector& sites) {
  cfg.validate();
  if (m.has_adapters()) fail(ErrorKind::InvalidConfig, "model already carries adapters");
  const auto paths = sites.resolve(m.config());
  if (paths.empty()) fail(ErrorKind::InvalidConfig, "site selector resolved to no blocks");
  for (const auto& p : paths) {
    if (!m.model_.has_block(p)) fail(ErrorKind::InvalidConfig, "no block at path '" + p + "'");
    if (std::count(paths.begin(), paths.end(), p) > 1) fail(ErrorKind::InvalidConfig, "duplicate site '" + p + "'");
    if (cfg.placement == Placement::Parallel && m.model_.block(p).spec().kind != BlockKind::Basic) {
      fail(ErrorKind::IncompatibleSite, "parallel adapter requested on channel-changing block '" + p + "'");
    }
  }
  std::mt19937_64 rng(cfg.seed);
  for (const auto& p : paths) m.model_.block(p).attach(cfg, rng);
  m.adapter_cfg_ = cfg;
  m.sites_ = paths;
  return m;
}

template <typename T>
MedNeXt<T> detach_adapters(PeftModel<T> m) {
  for (const auto& p : m.sites_) m.model_.block(p).detach();
  return std::move(m.model_);
}

int64_t adapter_parameter_count(const ModelConfig& model, const AdapterConfig& cfg, const SiteSelector& sites) {
  int64_t n = 0;
  for (const auto& p : sites.resolve(model)) {
    // Path grammar: (enc|dec).<level>.<i>, down.<level>, up.<level>.
    const auto first = p.find('.');
    const std::string kind = p.substr(0, first);
    const int level = std::stoi(p.substr(first + 1));
    int64_t channels = model.width(level);
    if (kind == "down") channels *= 2;
    n += Adapter<float>::closed_form_parameter_count(cfg, channels);
  }
  return n;
}

template PeftModel<float> attach_adapters(PeftModel<float>, const AdapterConfig&, const SiteSelector&);
template PeftModel<double> attach_adapters(PeftModel<double>, const AdapterConfig&, const SiteSelector&);
template MedNeXt<float> detach_adapters(PeftModel<float>);
template MedNeXt<double> detach_adapters(PeftModel<double>);

}  // namespace medpeft
