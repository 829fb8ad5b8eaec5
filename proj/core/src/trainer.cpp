#include "medpeft/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "json_util.hpp"

namespace medpeft {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<int> target_channels(const LabelMap& target, int64_t k) {
  std::vector<int> out(target.data.size());
  for (size_t i = 0; i < target.data.size(); ++i) {
    auto it = target.label_semantics.find(target.data[i]);
    if (it == target.label_semantics.end())
      fail(ErrorKind::UnknownLabelValue, "label " + std::to_string(target.data[i]) + " has no semantics");
    const int c = class_channel(it->second);
    if (c >= k) fail(ErrorKind::ShapeMismatch, "target class outside the logit channels");
    out[i] = c;
  }
  return out;
}

uint64_t mix(uint64_t a, uint64_t b) {
  uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Loss and logit gradients for one case, deep supervision folded in.
LossValue case_loss(PeftModel<float>& model, const Tensor<float>& logits, const LabelMap& target,
                    double ds_weight, Tensor<float>& grad, std::vector<Tensor<float>>& aux_grads) {
  LossValue main = composite_loss(logits, target, &grad);
  const auto& aux = model.backbone().aux_logits();
  aux_grads.clear();
  if (aux.empty()) return main;
  double norm = 1.0, w = 1.0;
  std::vector<double> weights;
  for (size_t l = 0; l < aux.size(); ++l) {
    w *= ds_weight;
    weights.push_back(w);
    norm += w;
  }
  LossValue total{main.total / norm, main.ce / norm, main.dice / norm};
  for (int64_t i = 0; i < grad.size(); ++i) grad[i] = static_cast<float>(grad[i] / norm);
  for (size_t l = 0; l < aux.size(); ++l) {
    const LabelMap small = resize_labels(target, aux[l].spatial());
    Tensor<float> g;
    const LossValue a = composite_loss(aux[l], small, &g);
    const double s = weights[l] / norm;
    total.total += s * a.total;
    total.ce += s * a.ce;
    total.dice += s * a.dice;
    for (int64_t i = 0; i < g.size(); ++i) g[i] = static_cast<float>(g[i] * s);
    aux_grads.push_back(std::move(g));
  }
  return total;
}

}  // namespace

int class_channel(LabelClass c) {
  switch (c) {
    case LabelClass::Background: return 0;
    case LabelClass::NETC: return 1;
    case LabelClass::SNFH: return 2;
    case LabelClass::ET: return 3;
  }
  return 0;
}

template <typename T>
LossValue composite_loss(const Tensor<T>& logits, const LabelMap& target, Tensor<T>* grad) {
  if (logits.rank() != 4 || logits.spatial() != target.dims)
    fail(ErrorKind::ShapeMismatch, "logits " + shape_string(logits.shape()) + " vs target " + to_string(target.dims));
  const int64_t k = logits.channels();
  const int64_t n = logits.voxels();
  if (k < 2) fail(ErrorKind::ShapeMismatch, "need at least two classes");
  const std::vector<int> cls = target_channels(target, k);

  std::vector<double> prob(static_cast<size_t>(k * n));
  double ce = 0.0;
  for (int64_t v = 0; v < n; ++v) {
    double mx = -INFINITY;
    for (int64_t c = 0; c < k; ++c) mx = std::max(mx, static_cast<double>(logits[c * n + v]));
    double s = 0.0;
    for (int64_t c = 0; c < k; ++c) s += std::exp(static_cast<double>(logits[c * n + v]) - mx);
    const double lse = mx + std::log(s);
    for (int64_t c = 0; c < k; ++c)
      prob[static_cast<size_t>(c * n + v)] = std::exp(static_cast<double>(logits[c * n + v]) - lse);
    ce += lse - static_cast<double>(logits[cls[static_cast<size_t>(v)] * n + v]);
  }
  ce /= static_cast<double>(n);

  const int64_t fg = k - 1;
  std::vector<double> inter(static_cast<size_t>(k), 0.0), denom(static_cast<size_t>(k), 0.0);
  for (int64_t c = 1; c < k; ++c) {
    double i = 0.0, d = 0.0;
    for (int64_t v = 0; v < n; ++v) {
      const double p = prob[static_cast<size_t>(c * n + v)];
      const double g = cls[static_cast<size_t>(v)] == c ? 1.0 : 0.0;
      i += p * g;
      d += p + g;
    }
    inter[static_cast<size_t>(c)] = i;
    denom[static_cast<size_t>(c)] = d + kDiceSmooth;
  }
  double dice_mean = 0.0;
  for (int64_t c = 1; c < k; ++c)
    dice_mean += (2.0 * inter[static_cast<size_t>(c)] + kDiceSmooth) / denom[static_cast<size_t>(c)];
  dice_mean /= static_cast<double>(fg);
  LossValue out{0.0, ce, 1.0 - dice_mean};
  out.total = out.ce + out.dice;

  if (grad) {
    *grad = Tensor<T>(logits.shape());
    std::vector<double> dp(static_cast<size_t>(k));
    for (int64_t v = 0; v < n; ++v) {
      const int t = cls[static_cast<size_t>(v)];
      // d(dice loss)/d(prob) per class
      double dot = 0.0;
      for (int64_t c = 0; c < k; ++c) {
        double g = 0.0;
        if (c >= 1) {
          const double gt = t == c ? 1.0 : 0.0;
          const double den = denom[static_cast<size_t>(c)];
          const double num = 2.0 * inter[static_cast<size_t>(c)] + kDiceSmooth;
          g = -(2.0 * gt * den - num) / (den * den) / static_cast<double>(fg);
        }
        dp[static_cast<size_t>(c)] = g;
        dot += prob[static_cast<size_t>(c * n + v)] * g;
      }
      for (int64_t c = 0; c < k; ++c) {
        const double p = prob[static_cast<size_t>(c * n + v)];
        const double dce = (p - (t == c ? 1.0 : 0.0)) / static_cast<double>(n);
        (*grad)[c * n + v] = static_cast<T>(dce + p * (dp[static_cast<size_t>(c)] - dot));
      }
    }
  }
  return out;
}

template <typename T>
LabelMap argmax_labels(const Tensor<T>& logits, const LabelSemantics& semantics) {
  const Dims3 d = logits.spatial();
  const int64_t k = logits.channels(), n = logits.voxels();
  std::vector<int32_t> value_of(static_cast<size_t>(k), 0);
  std::vector<bool> known(static_cast<size_t>(k), false);
  for (const auto& [label, cls] : semantics) {
    const int c = class_channel(cls);
    if (c < k && !known[static_cast<size_t>(c)]) {
      value_of[static_cast<size_t>(c)] = label;
      known[static_cast<size_t>(c)] = true;
    }
  }
  LabelMap out(d);
  out.label_semantics = semantics;
  for (int64_t v = 0; v < n; ++v) {
    int64_t best = 0;
    for (int64_t c = 1; c < k; ++c)
      if (logits[c * n + v] > logits[best * n + v]) best = c;
    out.data[static_cast<size_t>(v)] = value_of[static_cast<size_t>(best)];
  }
  return out;
}

const char* to_string(LrSchedule s) noexcept { return s == LrSchedule::Cosine ? "cosine" : "constant"; }

LrSchedule lr_schedule_from_string(const std::string& s) {
  if (s == "cosine") return LrSchedule::Cosine;
  if (s == "constant") return LrSchedule::Constant;
  fail(ErrorKind::InvalidConfig, "unknown lr schedule '" + s + "'");
}

double scheduled_lr(LrSchedule s, double base, int64_t step, int64_t total) {
  if (s == LrSchedule::Constant || total <= 1) return base;
  const double f = static_cast<double>(std::clamp<int64_t>(step, 0, total - 1)) / static_cast<double>(total);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * f));
}

AdamW::AdamW(nn::ParameterList<float> params, const AdamWConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<size_t>(p.param->count()), 0.0);
    v_.emplace_back(static_cast<size_t>(p.param->count()), 0.0);
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t k = 0; k < params_.size(); ++k) {
    auto& p = *params_[k].param;
    auto& m = m_[k];
    auto& v = v_[k];
    for (int64_t i = 0; i < p.count(); ++i) {
      const double g = p.grad[i];
      const size_t j = static_cast<size_t>(i);
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
      double w = p.value[i];
      w -= lr * cfg_.weight_decay * w;
      w -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
      p.value[i] = static_cast<float>(w);
    }
  }
}

TrainConfig TrainConfig::pretrain() { return {}; }

TrainConfig TrainConfig::finetune() {
  TrainConfig c;
  c.learning_rate = 1e-4;
  return c;
}

void TrainConfig::validate() const {
  if (epochs < 1) fail(ErrorKind::InvalidConfig, "epochs must be at least 1");
  if (batch_size < 1) fail(ErrorKind::InvalidConfig, "batch_size must be at least 1");
  if (!(learning_rate > 0)) fail(ErrorKind::InvalidConfig, "learning_rate must be positive");
  if (validation_fraction < 0 || validation_fraction >= 1)
    fail(ErrorKind::InvalidConfig, "validation_fraction must lie in [0, 1)");
  if (adamw.weight_decay < 0 || adamw.eps <= 0 || adamw.beta1 < 0 || adamw.beta1 >= 1 || adamw.beta2 < 0 ||
      adamw.beta2 >= 1)
    fail(ErrorKind::InvalidConfig, "AdamW hyperparameters out of range");
}

Split split_by_index(int n, double fraction) {
  Split s;
  int n_val = n > 1 ? static_cast<int>(std::ceil(fraction * n - 1e-9)) : 0;
  n_val = std::min(n_val, n - 1);
  for (int i = 0; i < n - n_val; ++i) s.train.push_back(i);
  for (int i = n - n_val; i < n; ++i) s.validation.push_back(i);
  return s;
}

std::vector<double> RunRecord::train_losses() const {
  std::vector<double> out;
  for (const auto& e : epochs) out.push_back(e.train_loss);
  return out;
}

std::string RunRecord::to_json() const {
  detail::json j;
  j["schema_version"] = schema_version;
  j["kind"] = "run_record";
  j["run_id"] = run_id;
  j["mode"] = medpeft::to_string(mode);
  j["trainable_fraction"] = trainable_fraction;
  j["trainable_parameters"] = trainable_parameters;
  j["total_parameters"] = total_parameters;
  j["steps"] = steps;
  j["wall_seconds"] = wall_seconds;
  j["seconds_per_step"] = seconds_per_step();
  j["best_epoch"] = best_epoch;
  j["best_val_dice"] = best_val_dice;
  j["seed"] = seed;
  detail::json list = detail::json::array();
  for (const auto& e : epochs)
    list.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_dice", e.val_dice}, {"lr", e.lr},
                    {"seconds", e.seconds}});
  j["epochs"] = list;
  return j.dump(2);
}

RunRecord RunRecord::from_json(const std::string& text) {
  RunRecord r;
  try {
    const auto j = detail::json::parse(text);
    if (j.value("kind", "") != "run_record") fail(ErrorKind::SchemaMismatch, "not a run record");
    r.schema_version = j.at("schema_version").get<int>();
    if (r.schema_version != kRunRecordSchemaVersion) fail(ErrorKind::SchemaMismatch, "unsupported run record version");
    r.run_id = j.at("run_id").get<std::string>();
    r.mode = train_mode_from_string(j.at("mode").get<std::string>());
    r.trainable_fraction = j.at("trainable_fraction").get<double>();
    r.trainable_parameters = j.at("trainable_parameters").get<int64_t>();
    r.total_parameters = j.at("total_parameters").get<int64_t>();
    r.steps = j.at("steps").get<int64_t>();
    r.wall_seconds = j.at("wall_seconds").get<double>();
    r.best_epoch = j.at("best_epoch").get<int>();
    r.best_val_dice = j.at("best_val_dice").get<double>();
    r.seed = j.at("seed").get<uint64_t>();
    for (const auto& e : j.at("epochs"))
      r.epochs.push_back({e.at("epoch").get<int>(), e.at("train_loss").get<double>(), e.at("val_dice").get<double>(),
                          e.at("lr").get<double>(), e.at("seconds").get<double>()});
  } catch (const detail::json::exception& e) {
    fail(ErrorKind::SchemaMismatch, std::string("run record: ") + e.what());
  }
  return r;
}

std::vector<Case> prepare_cases(std::vector<Case> cases) {
  for (auto& c : cases) {
    c.labels.validate();
    if (c.labels.dims != c.image.spatial())
      fail(ErrorKind::ShapeMismatch, c.id + ": label shape differs from image shape");
    c.image = z_normalize(c.image);
  }
  return cases;
}

TrainResult train(PeftModel<float>& model, const std::vector<Case>& cases, const TrainConfig& cfg,
                  const FreezePolicy& policy, const TrainOptions& opts) {
  if (cases.empty()) fail(ErrorKind::EmptyCohort, "no training cases");
  cfg.validate();
  const auto t_start = Clock::now();

  TrainResult result;
  result.partition = apply_policy(model, policy);
  nn::ParameterList<float> trainable;
  for (auto& p : model.named_parameters())
    if (p.param->trainable) trainable.push_back(p);
  AdamW opt(trainable, cfg.adamw);

  const Split split = split_by_index(static_cast<int>(cases.size()), cfg.validation_fraction);
  const std::vector<int>& monitor = split.validation.empty() ? split.train : split.validation;
  const int bs = cfg.batch_size;
  const int64_t per_epoch = (static_cast<int64_t>(split.train.size()) + bs - 1) / bs;
  const int64_t total_steps = per_epoch * cfg.epochs;

  RunRecord& rec = result.record;
  rec.run_id = opts.run_id;
  rec.mode = policy.mode;
  rec.trainable_parameters = result.partition.trainable;
  rec.total_parameters = result.partition.total;
  rec.trainable_fraction = result.partition.trainable_fraction();
  rec.seed = cfg.seed;
  rec.best_val_dice = -1.0;

  std::mt19937_64 rng(cfg.seed);
  std::vector<int> order = split.train;
  Tensor<float> grad;
  std::vector<Tensor<float>> aux_grads;
  const float inv_bs = 1.0f / static_cast<float>(bs);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t_epoch = Clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    int loss_n = 0;
    double lr = cfg.learning_rate;
    for (int64_t b = 0; b < per_epoch; ++b) {
      model.zero_grad();
      const size_t lo = static_cast<size_t>(b * bs);
      const size_t hi = std::min(order.size(), lo + static_cast<size_t>(bs));
      for (size_t s = lo; s < hi; ++s) {
        const Case& c = cases[static_cast<size_t>(order[s])];
        const Tensor<float>* x = &c.image.data;
        const LabelMap* y = &c.labels;
        std::pair<Volume, LabelMap> aug;
        if (cfg.augment) {
          aug = augment(c.image, c.labels, mix(mix(cfg.seed, static_cast<uint64_t>(epoch)), static_cast<uint64_t>(order[s])),
                        cfg.augmentation);
          x = &aug.first.data;
          y = &aug.second;
        }
        const Tensor<float> logits = model.forward(*x, true);
        const LossValue lv = case_loss(model, logits, *y, cfg.deep_supervision_weight, grad, aux_grads);
        if (!std::isfinite(lv.total)) {
          fail(ErrorKind::NonFiniteLoss, "loss " + std::to_string(lv.total) + " (ce " + std::to_string(lv.ce) + ", dice " +
                                             std::to_string(lv.dice) + ") at epoch " + std::to_string(epoch) +
                                             ", step " + std::to_string(opt.steps()) + ", case " + c.id);
        }
        loss_sum += lv.total;
        ++loss_n;
        // Mini-batch mean: each sample contributes 1/bs of its gradient.
        for (int64_t i = 0; i < grad.size(); ++i) grad[i] *= inv_bs;
        for (auto& g : aux_grads)
          for (int64_t i = 0; i < g.size(); ++i) g[i] *= inv_bs;
        model.backward(grad, aux_grads.empty() ? nullptr : &aux_grads);
      }
      lr = scheduled_lr(cfg.schedule, cfg.learning_rate, opt.steps(), total_steps);
      opt.step(lr);
    }
    EpochLog log;
    log.epoch = epoch + 1;
    log.train_loss = loss_sum / std::max(1, loss_n);
    log.val_dice = mean_dice(model, cases, monitor);
    log.lr = lr;
    log.seconds = seconds_since(t_epoch);
    rec.epochs.push_back(log);
    if (log.val_dice > rec.best_val_dice) {
      rec.best_val_dice = log.val_dice;
      rec.best_epoch = log.epoch;
      result.best = make_checkpoint(model, CheckpointContents::Full);
    }
    if (opts.on_epoch) opts.on_epoch(log);
  }
  rec.steps = opt.steps();
  result.final = make_checkpoint(model, CheckpointContents::Full);
  rec.wall_seconds = seconds_since(t_start);

  if (opts.out_dir) {
    const auto& dir = *opts.out_dir;
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) fail(ErrorKind::IoError, "cannot create " + dir.string());
    save_checkpoint(result.best, dir / "best.ckpt");
    save_checkpoint(result.final, dir / "final.ckpt");
    if (policy.mode == TrainMode::Peft) save_checkpoint(make_checkpoint(model, CheckpointContents::AdapterOnly), dir / "adapter.ckpt");
    std::ofstream(dir / "run_record.json") << rec.to_json() << "\n";
    std::ofstream(dir / "partition.json") << result.partition.to_json() << "\n";
    std::ofstream lines(dir / "epochs.jsonl");
    for (const auto& e : rec.epochs) {
      detail::json j{{"schema_version", kRunRecordSchemaVersion}, {"run_id", rec.run_id}, {"epoch", e.epoch},
                     {"train_loss", e.train_loss}, {"val_dice", e.val_dice}, {"lr", e.lr}, {"seconds", e.seconds}};
      lines << j.dump() << "\n";
    }
    if (!lines) fail(ErrorKind::IoError, "cannot write " + (dir / "epochs.jsonl").string());
  }
  return result;
}

double measure_step_seconds(PeftModel<float>& model, const std::vector<Case>& cases, const FreezePolicy& policy,
                            int batch_size, int steps) {
  if (cases.empty()) fail(ErrorKind::EmptyCohort, "no cases to time");
  const StateDict snapshot = state_dict(model);
  apply_policy(model, policy);
  nn::ParameterList<float> trainable;
  for (auto& p : model.named_parameters())
    if (p.param->trainable) trainable.push_back(p);
  AdamW opt(trainable);
  Tensor<float> grad;
  std::vector<Tensor<float>> aux_grads;
  size_t next = 0;
  auto one_step = [&] {
    model.zero_grad();
    for (int s = 0; s < batch_size; ++s) {
      const Case& c = cases[next++ % cases.size()];
      const Tensor<float> logits = model.forward(c.image.data, true);
      case_loss(model, logits, c.labels, 0.5, grad, aux_grads);
      model.backward(grad, aux_grads.empty() ? nullptr : &aux_grads);
    }
    opt.step(1e-4);
  };
  one_step();
  const auto t0 = Clock::now();
  for (int i = 0; i < steps; ++i) one_step();
  const double per = seconds_since(t0) / std::max(1, steps);
  load_state_dict(model, snapshot);
  return per;
}

LabelMap predict(PeftModel<float>& model, const Volume& image) {
  if (image.channels() != model.config().in_channels)
    fail(ErrorKind::ArchitectureMismatch, "model expects " + std::to_string(model.config().in_channels) +
                                              " channels, image has " + std::to_string(image.channels()));
  return argmax_labels(model.forward(image.data, false));
}

MetricsReport evaluate(PeftModel<float>& model, const std::vector<Case>& cases, const MetricConfig& cfg,
                       const std::string& label) {
  if (cases.empty()) fail(ErrorKind::EmptyCohort, "no cases to evaluate");
  MetricsReport report;
  report.label = label;
  for (const auto& c : cases) {
    LabelMap pred = argmax_labels(
        [&] {
          if (c.image.channels() != model.config().in_channels)
            fail(ErrorKind::ArchitectureMismatch, c.id + ": channel count differs from the model");
          return model.forward(c.image.data, false);
        }(),
        c.labels.label_semantics);
    for (auto& row : evaluate_case(c.id, pred, c.labels, c.image.voxel_spacing, cfg)) report.rows.push_back(row);
  }
  return report;
}

double mean_dice(PeftModel<float>& model, const std::vector<Case>& cases, const std::vector<int>& indices) {
  if (indices.empty()) return 0.0;
  double total = 0.0;
  for (int i : indices) {
    const Case& c = cases[static_cast<size_t>(i)];
    const LabelMap pred = argmax_labels(model.forward(c.image.data, false), c.labels.label_semantics);
    for (Region r : kRegions) total += dice(extract_region(pred, r), extract_region(c.labels, r));
  }
  return total / (3.0 * static_cast<double>(indices.size()));
}

template LossValue composite_loss(const Tensor<float>&, const LabelMap&, Tensor<float>*);
template LossValue composite_loss(const Tensor<double>&, const LabelMap&, Tensor<double>*);
template LabelMap argmax_labels(const Tensor<float>&, const LabelSemantics&);
template LabelMap argmax_labels(const Tensor<double>&, const LabelSemantics&);

}  // namespace medpeft
