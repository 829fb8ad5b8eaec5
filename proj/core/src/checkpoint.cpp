#include "medpeft/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "config_json.hpp"

namespace medpeft {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', 'E', 'D', 'P', 'E', 'F', 'T', '\0'};

using detail::json;

json manifest_to_json(const CheckpointManifest& m) {
  json j;
  j["format_version"] = m.format_version;
  j["model"] = detail::model_config_to_json(m.model);
  j["has_adapters"] = m.has_adapters;
  if (m.has_adapters) {
    j["adapter"] = detail::adapter_config_to_json(m.adapter);
    j["sites"] = m.sites;
  }
  j["contents"] = to_string(m.contents);
  j["parameter_count"] = m.parameter_count;
  j["dtype"] = m.dtype;
  return j;
}

CheckpointManifest manifest_from_json(const json& j) {
  CheckpointManifest m;
  try {
    m.format_version = j.at("format_version").get<int>();
    if (m.format_version != kCheckpointFormatVersion) {
      fail(ErrorKind::SchemaMismatch, "unsupported checkpoint format_version " + std::to_string(m.format_version));
    }
    m.model = detail::model_config_from_json(j.at("model"));
    m.has_adapters = j.at("has_adapters").get<bool>();
    if (m.has_adapters) {
      m.adapter = detail::adapter_config_from_json(j.at("adapter"));
      m.sites = j.at("sites").get<std::vector<std::string>>();
    }
    const auto contents = j.at("contents").get<std::string>();
    if (contents == "full") {
      m.contents = CheckpointContents::Full;
    } else if (contents == "adapter_only") {
      m.contents = CheckpointContents::AdapterOnly;
    } else {
      fail(ErrorKind::SchemaMismatch, "unknown checkpoint contents '" + contents + "'");
    }
    m.parameter_count = j.at("parameter_count").get<int64_t>();
    m.dtype = j.at("dtype").get<std::string>();
  } catch (const json::exception& e) {
    fail(ErrorKind::SchemaMismatch, std::string("checkpoint manifest: ") + e.what());
  }
  if (m.dtype != "float32") fail(ErrorKind::SchemaMismatch, "unsupported checkpoint dtype " + m.dtype);
  return m;
}

template <typename V>
void put(std::ostream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::istream& in, const std::filesystem::path& path) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!in) fail(ErrorKind::IoError, "truncated checkpoint " + path.string());
  return v;
}

bool is_adapter_name(const std::string& n) { return n.rfind("adapter.", 0) == 0; }

SiteSelector explicit_sites(const std::vector<std::string>& sites) { return SiteSelector::explicit_paths(sites); }

}  // namespace

const char* to_string(CheckpointContents c) noexcept {
  return c == CheckpointContents::Full ? "full" : "adapter_only";
}

template <typename T>
StateDict state_dict(PeftModel<T>& model) {
  StateDict sd;
  for (const auto& p : model.named_parameters()) sd.emplace(p.name, p.param->value.template cast<float>());
  return sd;
}

template <typename T>
void load_state_dict(PeftModel<T>& model, const StateDict& sd, bool complete) {
  auto params = model.named_parameters();
  std::map<std::string, nn::Parameter<T>*> by_name;
  for (const auto& p : params) by_name.emplace(p.name, p.param);
  for (const auto& [name, t] : sd) {
    auto it = by_name.find(name);
    if (it == by_name.end()) fail(ErrorKind::ArchitectureMismatch, "model has no parameter '" + name + "'");
    if (it->second->value.shape() != t.shape()) {
      fail(ErrorKind::ArchitectureMismatch, "shape of '" + name + "' is " + shape_string(t.shape()) + ", model expects " +
                                                shape_string(it->second->value.shape()));
    }
  }
  if (complete) {
    for (const auto& p : params) {
      if (!sd.count(p.name)) fail(ErrorKind::ArchitectureMismatch, "checkpoint lacks parameter '" + p.name + "'");
    }
  }
  for (const auto& [name, t] : sd) by_name.at(name)->value = t.template cast<T>();
}

template <typename T>
Checkpoint make_checkpoint(PeftModel<T>& model, CheckpointContents contents) {
  Checkpoint c;
  c.manifest.model = model.config();
  c.manifest.has_adapters = model.has_adapters();
  if (model.has_adapters()) {
    c.manifest.adapter = model.adapter_config();
    c.manifest.sites = model.sites();
  } else if (contents == CheckpointContents::AdapterOnly) {
    fail(ErrorKind::NoAdaptersAttached, "adapter-only checkpoint of a model without adapters");
  }
  c.manifest.contents = contents;
  for (auto& [name, t] : state_dict(model)) {
    if (contents == CheckpointContents::AdapterOnly && !is_adapter_name(name)) continue;
    c.manifest.parameter_count += t.size();
    c.tensors.emplace(name, std::move(t));
  }
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
  const std::string manifest = manifest_to_json(ckpt.manifest).dump();
  out.write(kMagic, sizeof(kMagic));
  put<uint32_t>(out, static_cast<uint32_t>(ckpt.manifest.format_version));
  put<uint64_t>(out, manifest.size());
  out.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
  put<uint64_t>(out, ckpt.tensors.size());
  for (const auto& [name, t] : ckpt.tensors) {
    put<uint32_t>(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<uint32_t>(out, static_cast<uint32_t>(t.rank()));
    for (auto d : t.shape()) put<int64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
  }
  if (!out) fail(ErrorKind::IoError, "short write to " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::IoError, "cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    fail(ErrorKind::SchemaMismatch, path.string() + " is not a medpeft checkpoint");
  }
  const auto version = get<uint32_t>(in, path);
  if (version != kCheckpointFormatVersion) {
    fail(ErrorKind::SchemaMismatch, "unsupported checkpoint version " + std::to_string(version));
  }
  const auto mlen = get<uint64_t>(in, path);
  std::string mtext(mlen, '\0');
  in.read(mtext.data(), static_cast<std::streamsize>(mlen));
  if (!in) fail(ErrorKind::IoError, "truncated checkpoint " + path.string());
  Checkpoint c;
  try {
    c.manifest = manifest_from_json(json::parse(mtext));
  } catch (const json::exception& e) {
    fail(ErrorKind::SchemaMismatch, path.string() + ": " + e.what());
  }
  const auto count = get<uint64_t>(in, path);
  int64_t total = 0;
  for (uint64_t i = 0; i < count; ++i) {
    const auto nlen = get<uint32_t>(in, path);
    std::string name(nlen, '\0');
    in.read(name.data(), nlen);
    const auto rank = get<uint32_t>(in, path);
    if (rank > 8) fail(ErrorKind::SchemaMismatch, "implausible tensor rank in " + path.string());
    std::vector<int64_t> shape(rank);
    for (auto& d : shape) d = get<int64_t>(in, path);
    Tensor<float> t(shape);
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!in) fail(ErrorKind::IoError, "truncated checkpoint " + path.string());
    total += t.size();
    c.tensors.emplace(std::move(name), std::move(t));
  }
  if (total != c.manifest.parameter_count) {
    fail(ErrorKind::SchemaMismatch, "checkpoint parameter_count disagrees with stored tensors");
  }
  return c;
}

PeftModel<float> build_model(const Checkpoint& ckpt) {
  if (ckpt.manifest.contents != CheckpointContents::Full) {
    fail(ErrorKind::ArchitectureMismatch, "an adapter-only checkpoint needs a backbone checkpoint underneath");
  }
  PeftModel<float> m{MedNeXt<float>(ckpt.manifest.model)};
  if (ckpt.manifest.has_adapters) m = attach_adapters(std::move(m), ckpt.manifest.adapter, explicit_sites(ckpt.manifest.sites));
  load_state_dict(m, ckpt.tensors, true);
  return m;
}

void apply_checkpoint(PeftModel<float>& model, const Checkpoint& ckpt) {
  if (!(model.config() == ckpt.manifest.model)) {
    // Seeds only affect initialisation and may differ.
    ModelConfig a = model.config();
    ModelConfig b = ckpt.manifest.model;
    a.seed = b.seed = 0;
    if (!(a == b)) fail(ErrorKind::ArchitectureMismatch, "checkpoint was saved from a different model config");
  }
  if (ckpt.manifest.has_adapters) {
    if (!model.has_adapters()) {
      model = attach_adapters(std::move(model), ckpt.manifest.adapter, explicit_sites(ckpt.manifest.sites));
    } else if (model.sites() != ckpt.manifest.sites ||
               model.adapter_config().variant != ckpt.manifest.adapter.variant ||
               model.adapter_config().placement != ckpt.manifest.adapter.placement) {
      fail(ErrorKind::ArchitectureMismatch, "checkpoint adapters differ from the model's adapters");
    }
  }
  load_state_dict(model, ckpt.tensors, ckpt.manifest.contents == CheckpointContents::Full);
}

template StateDict state_dict(PeftModel<float>&);
template StateDict state_dict(PeftModel<double>&);
template void load_state_dict(PeftModel<float>&, const StateDict&, bool);
template void load_state_dict(PeftModel<double>&, const StateDict&, bool);
template Checkpoint make_checkpoint(PeftModel<float>&, CheckpointContents);
template Checkpoint make_checkpoint(PeftModel<double>&, CheckpointContents);

}  // namespace medpeft
