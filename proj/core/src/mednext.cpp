#include "medpeft/mednext.hpp"

#include <algorithm>
#include <unordered_map>

namespace medpeft {

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.base_channels = 8;
  c.n_levels = 3;
  return c;
}

void ModelConfig::validate() const {
  auto bad = [](const std::string& m) { fail(ErrorKind::InvalidConfig, m); };
  if (in_channels < 1) bad("in_channels must be >= 1");
  if (n_classes < 1) bad("n_classes must be >= 1");
  if (base_channels < 1) bad("base_channels must be >= 1");
  if (kernel_size < 1 || kernel_size % 2 == 0) bad("kernel_size must be odd");
  if (expansion_ratio < 1) bad("expansion_ratio must be >= 1");
  if (blocks_per_stage < 1) bad("blocks_per_stage must be >= 1");
  if (n_levels < 1 || n_levels > 8) bad("n_levels must lie in [1, 8]");
  if (norm_groups < 0) bad("norm_groups must be >= 0");
  for (int l = 0; l < n_levels; ++l) {
    const int64_t c = width(l);
    if (norm_groups > 0 && c % norm_groups != 0) bad("norm_groups must divide every stage width");
    if (l > 0 && norm_groups > 0 && (c / 2) % norm_groups != 0) bad("norm_groups must divide every stage width");
  }
}

int64_t ModelConfig::groups_for(int64_t channels) const { return norm_groups == 0 ? channels : norm_groups; }

const char* to_string(BlockKind k) noexcept {
  switch (k) {
    case BlockKind::Basic: return "basic";
    case BlockKind::Down: return "down";
    case BlockKind::Up: return "up";
  }
  return "basic";
}

void BlockSpec::validate() const {
  if (channels_in < 1 || channels_out < 1) fail(ErrorKind::InvalidConfig, "block widths must be >= 1");
  const bool ok = (kind == BlockKind::Basic && channels_out == channels_in) ||
                  (kind == BlockKind::Down && channels_out == 2 * channels_in) ||
                  (kind == BlockKind::Up && 2 * channels_out == channels_in);
  if (!ok) {
    fail(ErrorKind::InvalidConfig, std::string(to_string(kind)) + " block cannot map " + std::to_string(channels_in) +
                                       " -> " + std::to_string(channels_out) + " channels");
  }
}

int64_t BlockSpec::parameter_count() const {
  const int64_t c = channels_in;
  const int64_t k3 = static_cast<int64_t>(kernel_size) * kernel_size * kernel_size;
  const int64_t wide = expansion_ratio * c;
  int64_t n = (c * k3 + c) + 2 * c + (c * wide + wide) + (wide * channels_out + channels_out);
  if (kind != BlockKind::Basic) n += c * channels_out + channels_out;
  return n;
}

// ---------------------------------------------------------------------------
// MedNeXtBlock

template <typename T>
MedNeXtBlock<T>::MedNeXtBlock(const BlockSpec& spec, std::mt19937_64& rng) : spec_(spec) {
  spec_.validate();
  const int64_t c = spec.channels_in;
  const int64_t wide = spec.expansion_ratio * c;
  const int64_t groups = spec.norm_groups == 0 ? c : spec.norm_groups;
  if (spec.kind == BlockKind::Up) {
    dw_up_ = nn::DepthwiseConvTranspose3d<T>(c, spec.kernel_size);
    dw_up_.init(rng);
  } else {
    dw_ = nn::DepthwiseConv3d<T>(c, spec.kernel_size, spec.kind == BlockKind::Down ? 2 : 1);
    dw_.init(rng);
  }
  norm_ = nn::GroupNorm<T>(c, groups);
  expand_ = nn::PointwiseConv3d<T>(c, wide);
  compress_ = nn::PointwiseConv3d<T>(wide, spec.channels_out);
  expand_.init(rng);
  compress_.init(rng);
  if (spec.kind == BlockKind::Down) {
    res_down_ = nn::PointwiseConv3d<T>(c, spec.channels_out, 2);
    res_down_.init(rng);
  } else if (spec.kind == BlockKind::Up) {
    res_up_ = nn::PointwiseConvTranspose3d<T>(c, spec.channels_out);
    res_up_.init(rng);
  }
}

template <typename T>
void MedNeXtBlock<T>::attach(const AdapterConfig& cfg, std::mt19937_64& rng) {
  if (cfg.placement == Placement::Parallel && spec_.kind != BlockKind::Basic) {
    fail(ErrorKind::IncompatibleSite,
         std::string("parallel adapters need equal input/output widths; got a ") + to_string(spec_.kind) + " block");
  }
  adapter_ = std::make_unique<Adapter<T>>(cfg, spec_.channels_out, rng);
  placement_ = cfg.placement;
}

template <typename T>
void MedNeXtBlock<T>::zero_inner() {
  expand_.zero_init();
  compress_.zero_init();
}

template <typename T>
Tensor<T> MedNeXtBlock<T>::body_forward(const Tensor<T>& x, bool training) {
  if (x.rank() != 4 || x.channels() != spec_.channels_in) {
    fail(ErrorKind::ChannelMismatch, std::string(to_string(spec_.kind)) + " block expects " +
                                         std::to_string(spec_.channels_in) + " channels, got " + shape_string(x.shape()));
  }
  Tensor<T> h = spec_.kind == BlockKind::Up ? dw_up_.forward(x, training) : dw_.forward(x, training);
  h = norm_.forward(h, training);
  h = expand_.forward(h, training);
  h = act_.forward(h, training);
  h = compress_.forward(h, training);
  switch (spec_.kind) {
    case BlockKind::Basic: h += x; break;
    case BlockKind::Down: h += res_down_.forward(x, training); break;
    case BlockKind::Up: h += res_up_.forward(x, training); break;
  }
  return h;
}

template <typename T>
Tensor<T> MedNeXtBlock<T>::body_backward(const Tensor<T>& gy, bool need_input_grad) {
  nn::ParameterList<T> main;
  if (spec_.kind == BlockKind::Up) {
    dw_up_.collect("", main);
  } else {
    dw_.collect("", main);
  }
  norm_.collect("", main);
  expand_.collect("", main);
  compress_.collect("", main);
  bool main_trainable = false;
  for (auto& p : main) main_trainable = main_trainable || p.param->trainable;

  Tensor<T> gx;
  if (main_trainable || need_input_grad) {
    Tensor<T> g = compress_.backward(gy, true);
    g = act_.backward(g, true);
    g = expand_.backward(g, true);
    g = norm_.backward(g, true);
    gx = spec_.kind == BlockKind::Up ? dw_up_.backward(g, need_input_grad) : dw_.backward(g, need_input_grad);
  }
  switch (spec_.kind) {
    case BlockKind::Basic:
      if (need_input_grad) gx += gy;
      break;
    case BlockKind::Down: {
      Tensor<T> gr = res_down_.backward(gy, need_input_grad);
      if (need_input_grad) gx += gr;
      break;
    }
    case BlockKind::Up: {
      Tensor<T> gr = res_up_.backward(gy, need_input_grad);
      if (need_input_grad) gx += gr;
      break;
    }
  }
  return gx;
}

template <typename T>
Tensor<T> MedNeXtBlock<T>::forward(const Tensor<T>& x, bool training) {
  if (!adapter_) return body_forward(x, training);
  if (placement_ == Placement::Parallel) {
    Tensor<T> g = body_forward(x, training);
    g += adapter_->forward(x, training);
    return g;
  }
  Tensor<T> g = body_forward(x, training);
  Tensor<T> a = adapter_->forward(g, training);
  a += g;
  return a;
}

template <typename T>
Tensor<T> MedNeXtBlock<T>::backward(const Tensor<T>& gy, bool need_input_grad) {
  if (!adapter_) return body_backward(gy, need_input_grad);
  nn::ParameterList<T> own;
  collect("", "", own);
  bool body_trainable = false;
  for (auto& p : own) {
    if (p.name.rfind("b.", 0) == 0) body_trainable = body_trainable || p.param->trainable;
  }
  if (placement_ == Placement::Parallel) {
    Tensor<T> gx = body_backward(gy, need_input_grad);
    Tensor<T> ga = adapter_->backward(gy, need_input_grad);
    if (need_input_grad) gx += ga;
    return gx;
  }
  const bool need_g = need_input_grad || body_trainable;
  Tensor<T> gg = adapter_->backward(gy, need_g);
  if (!need_g) return {};
  gg += gy;
  return body_backward(gg, need_input_grad);
}

template <typename T>
void MedNeXtBlock<T>::collect(const std::string& backbone_prefix, const std::string& adapter_prefix,
                              nn::ParameterList<T>& out) {
  // Empty prefixes are used internally to split body from adapter.
  const std::string bp = backbone_prefix.empty() ? "b." : backbone_prefix;
  const std::string ap = adapter_prefix.empty() ? "a." : adapter_prefix;
  if (spec_.kind == BlockKind::Up) {
    dw_up_.collect(bp + "dw.", out);
  } else {
    dw_.collect(bp + "dw.", out);
  }
  norm_.collect(bp + "norm.", out);
  expand_.collect(bp + "expand.", out);
  compress_.collect(bp + "compress.", out);
  if (spec_.kind == BlockKind::Down) res_down_.collect(bp + "res.", out);
  if (spec_.kind == BlockKind::Up) res_up_.collect(bp + "res.", out);
  if (adapter_) adapter_->collect(ap, out);
}

template <typename T>
bool MedNeXtBlock<T>::any_trainable() {
  nn::ParameterList<T> own;
  collect("", "", own);
  for (auto& p : own) {
    if (p.param->trainable) return true;
  }
  return false;
}

// ---------------------------------------------------------------------------
// MedNeXt

namespace {

std::string enc_path(int l, int i) { return "enc." + std::to_string(l) + "." + std::to_string(i); }
std::string dec_path(int l, int i) { return "dec." + std::to_string(l) + "." + std::to_string(i); }

}  // namespace

template <typename T>
MedNeXt<T>::MedNeXt(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(cfg.seed);
  const int L = cfg.n_levels;
  stem_ = nn::PointwiseConv3d<T>(cfg.in_channels, cfg.base_channels);
  stem_.init(rng);
  auto spec = [&](int64_t cin, int64_t cout, BlockKind kind) {
    return BlockSpec{cin, cout, kind, cfg.expansion_ratio, cfg.kernel_size, cfg.norm_groups};
  };
  enc_.resize(static_cast<size_t>(L));
  for (int l = 0; l < L; ++l) {
    const int64_t c = cfg.width(l);
    for (int i = 0; i < cfg.blocks_per_stage; ++i) enc_[l].emplace_back(spec(c, c, BlockKind::Basic), rng);
    if (l + 1 < L) down_.emplace_back(spec(c, 2 * c, BlockKind::Down), rng);
  }
  dec_.resize(static_cast<size_t>(std::max(L - 1, 0)));
  up_.reserve(static_cast<size_t>(std::max(L - 1, 0)));
  for (int l = 0; l + 1 < L; ++l) up_.emplace_back(spec(cfg.width(l + 1), cfg.width(l), BlockKind::Up), rng);
  for (int l = L - 2; l >= 0; --l) {
    const int64_t c = cfg.width(l);
    for (int i = 0; i < cfg.blocks_per_stage; ++i) dec_[l].emplace_back(spec(c, c, BlockKind::Basic), rng);
  }
  head_ = nn::PointwiseConv3d<T>(cfg.base_channels, cfg.n_classes);
  head_.init(rng);
  if (cfg.deep_supervision) {
    for (int l = 1; l + 1 < L; ++l) {
      ds_heads_.emplace_back(cfg.width(l), cfg.n_classes);
      ds_heads_.back().init(rng);
    }
  }
}

template <typename T>
Tensor<T> MedNeXt<T>::forward(const Tensor<T>& input, bool training) {
  if (input.rank() != 4 || input.channels() != cfg_.in_channels) {
    fail(ErrorKind::ChannelMismatch, "model expects " + std::to_string(cfg_.in_channels) + " input channels, got " +
                                         shape_string(input.shape()));
  }
  const Dims3 d = input.spatial();
  const int64_t m = cfg_.spatial_multiple();
  if (d.x % m != 0 || d.y % m != 0 || d.z % m != 0) {
    fail(ErrorKind::ShapeMismatch,
         "spatial dims " + to_string(d) + " must be multiples of " + std::to_string(m) + " for this model");
  }
  const int L = cfg_.n_levels;
  aux_.clear();
  std::vector<Tensor<T>> skips(static_cast<size_t>(std::max(L - 1, 0)));
  Tensor<T> x = stem_.forward(input, training);
  for (int l = 0; l < L; ++l) {
    for (auto& b : enc_[l]) x = b.forward(x, training);
    if (l + 1 < L) {
      skips[l] = x;
      x = down_[l].forward(x, training);
    }
  }
  if (cfg_.deep_supervision && training) aux_.resize(ds_heads_.size());
  for (int l = L - 2; l >= 0; --l) {
    x = up_[l].forward(x, training);
    x += skips[l];
    skips[l] = Tensor<T>();
    for (auto& b : dec_[l]) x = b.forward(x, training);
    if (cfg_.deep_supervision && training && l >= 1) aux_[l - 1] = ds_heads_[l - 1].forward(x, training);
  }
  return head_.forward(x, training);
}

template <typename T>
void MedNeXt<T>::backward(const Tensor<T>& grad_logits, const std::vector<Tensor<T>>* aux_grads) {
  const int L = cfg_.n_levels;
  // need[m]: some module earlier in forward order has trainable parameters,
  // so the input gradient of m is required. Walk in forward order.
  std::unordered_map<const void*, bool> need;
  bool any = false;
  auto visit = [&](const void* m, bool trainable) {
    need[m] = any;
    any = any || trainable;
  };
  auto conv_trainable = [](nn::PointwiseConv3d<T>& c) { return c.weight.trainable || c.bias.trainable; };
  visit(&stem_, conv_trainable(stem_));
  for (int l = 0; l < L; ++l) {
    for (auto& b : enc_[l]) visit(&b, b.any_trainable());
    if (l + 1 < L) visit(&down_[l], down_[l].any_trainable());
  }
  for (int l = L - 2; l >= 0; --l) {
    visit(&up_[l], up_[l].any_trainable());
    for (auto& b : dec_[l]) visit(&b, b.any_trainable());
    if (l >= 1 && !ds_heads_.empty()) visit(&ds_heads_[l - 1], conv_trainable(ds_heads_[l - 1]));
  }
  visit(&head_, conv_trainable(head_));

  const bool with_aux = aux_grads != nullptr && !aux_grads->empty();
  if (with_aux && aux_grads->size() != ds_heads_.size()) {
    fail(ErrorKind::ShapeMismatch, "auxiliary gradient count does not match deep supervision heads");
  }

  Tensor<T> g = head_.backward(grad_logits, need[&head_]);
  if (!need[&head_]) return;
  std::vector<Tensor<T>> skip_grad(static_cast<size_t>(std::max(L - 1, 0)));
  for (int l = 0; l + 1 < L; ++l) {
    if (l >= 1 && with_aux) {
      auto& h = ds_heads_[l - 1];
      Tensor<T> ga = h.backward((*aux_grads)[l - 1], need[&h]);
      if (need[&h]) g += ga;
    }
    for (auto it = dec_[l].rbegin(); it != dec_[l].rend(); ++it) {
      g = it->backward(g, need[&*it]);
      if (!need[&*it]) return;
    }
    skip_grad[l] = g;
    g = up_[l].backward(g, need[&up_[l]]);
    if (!need[&up_[l]]) return;
  }
  for (int l = L - 1; l >= 0; --l) {
    if (l + 1 < L) g += skip_grad[l];
    for (auto it = enc_[l].rbegin(); it != enc_[l].rend(); ++it) {
      g = it->backward(g, need[&*it]);
      if (!need[&*it]) return;
    }
    if (l > 0) {
      g = down_[l - 1].backward(g, need[&down_[l - 1]]);
      if (!need[&down_[l - 1]]) return;
    }
  }
  stem_.backward(g, false);
}

template <typename T>
nn::ParameterList<T> MedNeXt<T>::named_parameters() {
  nn::ParameterList<T> out;
  const int L = cfg_.n_levels;
  auto block = [&](MedNeXtBlock<T>& b, const std::string& path) {
    b.collect("backbone." + path + ".", "adapter." + path + ".", out);
  };
  stem_.collect("backbone.stem.conv.", out);
  for (int l = 0; l < L; ++l) {
    for (int i = 0; i < static_cast<int>(enc_[l].size()); ++i) block(enc_[l][i], enc_path(l, i));
    if (l + 1 < L) block(down_[l], "down." + std::to_string(l));
  }
  for (int l = L - 2; l >= 0; --l) {
    block(up_[l], "up." + std::to_string(l));
    for (int i = 0; i < static_cast<int>(dec_[l].size()); ++i) block(dec_[l][i], dec_path(l, i));
  }
  head_.collect("backbone.head.conv.", out);
  for (size_t i = 0; i < ds_heads_.size(); ++i) {
    ds_heads_[i].collect("backbone.ds." + std::to_string(i + 1) + ".conv.", out);
  }
  return out;
}

template <typename T>
void MedNeXt<T>::zero_grad() {
  for (auto& p : named_parameters()) p.param->zero_grad();
}

template <typename T>
std::vector<std::string> MedNeXt<T>::block_paths() const {
  std::vector<std::string> out;
  const int L = cfg_.n_levels;
  for (int l = 0; l < L; ++l) {
    for (int i = 0; i < cfg_.blocks_per_stage; ++i) out.push_back(enc_path(l, i));
    if (l + 1 < L) out.push_back("down." + std::to_string(l));
  }
  for (int l = L - 2; l >= 0; --l) {
    out.push_back("up." + std::to_string(l));
    for (int i = 0; i < cfg_.blocks_per_stage; ++i) out.push_back(dec_path(l, i));
  }
  return out;
}

template <typename T>
bool MedNeXt<T>::has_block(const std::string& path) const {
  const auto paths = block_paths();
  return std::find(paths.begin(), paths.end(), path) != paths.end();
}

template <typename T>
MedNeXtBlock<T>& MedNeXt<T>::block(const std::string& path) {
  const int L = cfg_.n_levels;
  for (int l = 0; l < L; ++l) {
    for (int i = 0; i < static_cast<int>(enc_[l].size()); ++i) {
      if (path == enc_path(l, i)) return enc_[l][i];
    }
    if (l + 1 < L) {
      if (path == "down." + std::to_string(l)) return down_[l];
      if (path == "up." + std::to_string(l)) return up_[l];
      for (int i = 0; i < static_cast<int>(dec_[l].size()); ++i) {
        if (path == dec_path(l, i)) return dec_[l][i];
      }
    }
  }
  fail(ErrorKind::InvalidConfig, "no block at path '" + path + "'");
}

// ---------------------------------------------------------------------------
// Counting

std::string submodule_of(const std::string& name) {
  auto last = name.rfind('.');
  if (last == std::string::npos || last == 0) return name;
  auto prev = name.rfind('.', last - 1);
  if (prev == std::string::npos) return name.substr(0, last);
  return name.substr(0, prev);
}

int64_t ParameterCount::backbone() const {
  int64_t n = 0;
  for (const auto& [k, v] : by_submodule) {
    if (k.rfind("backbone.", 0) == 0) n += v;
  }
  return n;
}

int64_t ParameterCount::adapters() const {
  int64_t n = 0;
  for (const auto& [k, v] : by_submodule) {
    if (k.rfind("adapter.", 0) == 0) n += v;
  }
  return n;
}

template <typename T>
ParameterCount count_parameters(MedNeXt<T>& model) {
  ParameterCount pc;
  for (const auto& p : model.named_parameters()) {
    const int64_t n = p.param->count();
    pc.total += n;
    pc.by_submodule[submodule_of(p.name)] += n;
  }
  return pc;
}

int64_t backbone_parameter_count(const ModelConfig& cfg) {
  cfg.validate();
  const int L = cfg.n_levels;
  auto spec = [&](int64_t cin, int64_t cout, BlockKind kind) {
    return BlockSpec{cin, cout, kind, cfg.expansion_ratio, cfg.kernel_size, cfg.norm_groups}.parameter_count();
  };
  int64_t n = cfg.in_channels * cfg.base_channels + cfg.base_channels;
  for (int l = 0; l < L; ++l) {
    const int64_t c = cfg.width(l);
    const int64_t stages = l + 1 < L ? 2 : 1;
    n += stages * cfg.blocks_per_stage * spec(c, c, BlockKind::Basic);
    if (l + 1 < L) n += spec(c, 2 * c, BlockKind::Down) + spec(2 * c, c, BlockKind::Up);
  }
  n += cfg.base_channels * cfg.n_classes + cfg.n_classes;
  if (cfg.deep_supervision) {
    for (int l = 1; l + 1 < L; ++l) n += cfg.width(l) * cfg.n_classes + cfg.n_classes;
  }
  return n;
}

template class MedNeXtBlock<float>;
template class MedNeXtBlock<double>;
template class MedNeXt<float>;
template class MedNeXt<double>;
template ParameterCount count_parameters(MedNeXt<float>&);
template ParameterCount count_parameters(MedNeXt<double>&);

}  // namespace medpeft
