#include "medpeft/peft.hpp"

#include <cmath>
#include <cstring>

#include "json_util.hpp"

namespace medpeft {

const char* to_string(TrainMode m) noexcept {
  switch (m) {
    case TrainMode::Scratch: return "scratch";
    case TrainMode::FullFt: return "full";
    case TrainMode::Peft: return "peft";
  }
  return "peft";
}

TrainMode train_mode_from_string(const std::string& s) {
  if (s == "scratch") return TrainMode::Scratch;
  if (s == "full" || s == "full_ft") return TrainMode::FullFt;
  if (s == "peft") return TrainMode::Peft;
  if (s == "none" || s == "noft") fail(ErrorKind::InvalidConfig, "mode '" + s + "' trains nothing");
  fail(ErrorKind::InvalidConfig, "unknown training mode '" + s + "'");
}

bool FreezePolicy::trainable(const std::string& name) const {
  if (mode != TrainMode::Peft) return true;
  if (name.rfind("adapter.", 0) == 0) return true;
  const bool head = name.rfind("backbone.head.", 0) == 0 || name.rfind("backbone.ds.", 0) == 0;
  if (head) return train_head;
  if (train_norms && name.find(".norm.") != std::string::npos) return true;
  return false;
}

std::string TrainablePartition::to_json() const {
  detail::json j;
  j["schema_version"] = 1;
  j["mode"] = medpeft::to_string(mode);
  j["trainable"] = trainable;
  j["frozen"] = frozen;
  j["total"] = total;
  j["trainable_fraction"] = trainable_fraction();
  return j.dump(2);
}

template <typename T>
TrainablePartition apply_policy(PeftModel<T>& model, const FreezePolicy& policy) {
  if (policy.mode == TrainMode::Peft && !model.has_adapters()) {
    fail(ErrorKind::NoAdaptersAttached, "PEFT needs adapters attached to the backbone");
  }
  TrainablePartition part;
  part.mode = policy.mode;
  for (auto& p : model.named_parameters()) {
    const bool t = policy.trainable(p.name);
    p.param->trainable = t;
    const int64_t n = p.param->count();
    part.total += n;
    if (t) {
      part.trainable += n;
      part.trainable_names.push_back(p.name);
    } else {
      part.frozen += n;
      part.frozen_names.push_back(p.name);
    }
  }
  return part;
}

FrozenCheckReport verify_frozen(const TrainablePartition& partition, const StateDict& before, const StateDict& after) {
  if (before.size() != after.size()) fail(ErrorKind::ArchitectureMismatch, "state dicts hold different tensor sets");
  for (const auto& [name, t] : before) {
    auto it = after.find(name);
    if (it == after.end()) fail(ErrorKind::ArchitectureMismatch, "tensor '" + name + "' missing after training");
    if (it->second.shape() != t.shape()) fail(ErrorKind::ArchitectureMismatch, "tensor '" + name + "' changed shape");
  }
  FrozenCheckReport report;
  for (const auto& name : partition.frozen_names) {
    auto b = before.find(name);
    if (b == before.end()) fail(ErrorKind::ArchitectureMismatch, "partition names unknown tensor '" + name + "'");
    const auto& x = b->second;
    const auto& y = after.at(name);
    FrozenTensorChange row{name, 0.0, true};
    for (int64_t i = 0; i < x.size(); ++i) {
      if (std::memcmp(&x[i], &y[i], sizeof(float)) != 0) row.identical = false;
      row.max_abs_change = std::max(row.max_abs_change, std::fabs(static_cast<double>(x[i]) - y[i]));
    }
    report.passed = report.passed && row.identical;
    report.frozen.push_back(row);
  }
  for (const auto& name : partition.trainable_names) {
    if (!(before.at(name) == after.at(name))) report.changed_trainable.push_back(name);
  }
  return report;
}

template TrainablePartition apply_policy(PeftModel<float>&, const FreezePolicy&);
template TrainablePartition apply_policy(PeftModel<double>&, const FreezePolicy&);

}  // namespace medpeft
