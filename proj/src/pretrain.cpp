#include "moment/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "moment/data.hpp"
#include "moment/hashing.hpp"

namespace moment {

void PretrainConfig::validate() const {
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ConfigError("mask_ratio must lie in (0, 1)");
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (max_steps <= 0) throw ConfigError("max_steps must be positive");
  if (!(schedule.lr_init > 0.0 && schedule.lr_final > 0.0)) throw ConfigError("learning rates must be positive");
  if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
}

void TrainLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << "step,lr,loss\n";
  out.precision(9);
  for (const auto& e : entries) out << e.step << ',' << e.lr << ',' << e.loss << '\n';
}

std::size_t mask_count(std::size_t n_patches, double ratio) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ContractError("mask ratio must lie in (0, 1)");
  const auto k = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n_patches)));
  return std::max<std::size_t>(k, 1);
}

PatchMaskPlan sample_patch_mask(std::size_t n_patches, double ratio, std::mt19937_64& rng) {
  const std::size_t k = mask_count(n_patches, ratio);
  std::vector<std::size_t> idx(n_patches);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  // Partial Fisher-Yates: the first k slots are a uniform k-subset.
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n_patches - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  PatchMaskPlan plan = PatchMaskPlan::all_observed(n_patches);
  for (std::size_t i = 0; i < k; ++i) plan.observed[idx[i]] = 0;
  return plan;
}

double masked_mse_loss(std::span<const float> x_norm, std::span<const float> x_hat, const PatchMaskPlan& plan,
                       std::span<const std::uint8_t> observed, int patch_len) {
  if (x_norm.size() != x_hat.size() || x_norm.size() != observed.size()) {
    throw DimensionError("masked_mse_loss: input lengths differ");
  }
  if (plan.size() * static_cast<std::size_t>(patch_len) != x_norm.size()) {
    throw DimensionError("masked_mse_loss: plan does not cover the series");
  }
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t t = 0; t < x_norm.size(); ++t) {
    if (plan.observed[t / static_cast<std::size_t>(patch_len)] || !observed[t]) continue;
    const double d = static_cast<double>(x_norm[t]) - x_hat[t];
    s += d * d;
    ++n;
  }
  if (n == 0) throw ContractError("masked_mse_loss: no masked observed timesteps");
  return s / static_cast<double>(n);
}

LossTargets loss_targets(const Series& window, const PreparedWindow& prepared, int patch_len) {
  LossTargets lt;
  lt.target.resize(window.size());
  lt.weight.resize(window.size());
  for (std::size_t t = 0; t < window.size(); ++t) {
    const bool obs = window.observed[t] != 0;
    lt.target[t] = obs ? static_cast<float>((window.values[t] - prepared.stats.mean) / prepared.stats.stdev) : 0.0f;
    lt.weight[t] = (obs && !prepared.plan.observed[t / static_cast<std::size_t>(patch_len)]) ? 1.0f : 0.0f;
  }
  return lt;
}

namespace {

std::string digest_names(std::span<const Series> series) {
  std::set<std::string> names;
  for (const auto& s : series) names.insert(s.name);
  std::uint64_t h = fnv1a64("");
  for (const auto& n : names) {
    h = fnv1a64(n, h);
    h = fnv1a64(std::string_view("\n", 1), h);
  }
  return to_hex(h);
}

std::vector<Series> fit_all(std::span<const Series> dataset, const ModelConfig& cfg) {
  std::vector<Series> windows;
  windows.reserve(dataset.size());
  for (const auto& s : dataset) {
    Series w = data::fit_to_window(s, static_cast<std::size_t>(cfg.seq_len));
    const auto plan = PatchMaskPlan::from_observation(w.observed, cfg.patch_len);
    if (plan.size() - plan.masked_count() < 2) {
      throw ContractError("pretrain: series '" + s.name + "' has fewer than 2 fully observed patches");
    }
    windows.push_back(std::move(w));
  }
  return windows;
}

// Steps of an epoch-shuffled minibatch schedule.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, std::mt19937_64& rng) : order_(n), batch_(batch), rng_(rng) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
  }

  std::vector<std::size_t> next() {
    if (cursor_ >= order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      cursor_ = 0;
    }
    const std::size_t end = std::min(order_.size(), cursor_ + batch_);
    std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(end));
    cursor_ = end;
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t cursor_ = 0;
  std::mt19937_64& rng_;
};

}  // namespace

PretrainResult pretrain(ModelWeights<float> initial, std::span<const Series> dataset, const PretrainConfig& config,
                        const StepCallback& on_step) {
  config.validate();
  initial.validate();
  if (dataset.empty()) throw ContractError("pretrain: empty dataset");
  const ModelConfig& cfg = initial.config;
  const std::vector<Series> windows = fit_all(dataset, cfg);

  const auto batch = static_cast<std::size_t>(config.batch_size);
  const long steps_per_epoch = static_cast<long>((windows.size() + batch - 1) / batch);
  long total = config.max_steps;
  if (config.max_epochs > 0) total = std::min(total, steps_per_epoch * config.max_epochs);
  CosineSchedule sched = config.schedule;
  sched.total_steps = std::max<long>(total - 1, 1);

  PretrainResult result{std::move(initial), {}};
  result.log.consumed_digest = digest_names(dataset);
  std::mt19937_64 rng(config.seed);
  BatchSampler sampler(windows.size(), batch, rng);
  AdamW<float> optimizer(config.adam);
  const auto n_patches = static_cast<std::size_t>(cfg.n_patches());

  for (long step = 0; step < total; ++step) {
    const auto idx = sampler.next();
    std::vector<Series> batch_windows;
    std::vector<PatchMaskPlan> plans;
    for (auto i : idx) {
      batch_windows.push_back(windows[i]);
      plans.push_back(sample_patch_mask(n_patches, config.mask_ratio, rng));
    }
    const auto pb = make_pretrain_batch<float>(batch_windows, plans, cfg);

    Tape<float> tape;
    BoundParameters<float> params(tape, result.weights.params);
    auto loss = pretraining_loss(params, pb, cfg);
    const double value = loss.value()(0, 0);
    const double lr = cosine_lr(std::min(step, sched.total_steps), sched);
    if (!std::isfinite(value)) throw TrainingError("non-finite loss at step " + std::to_string(step));
    result.log.entries.push_back({step, lr, value});
    if (on_step) on_step(result.log.entries.back());

    tape.backward(loss);
    auto grads = params.gradients();
    for (const auto& [name, g] : grads) {
      if (!g.allFinite()) {
        throw TrainingError("non-finite gradient in '" + name + "' at step " + std::to_string(step));
      }
    }
    clip_global_norm(grads, config.clip_norm);
    optimizer.step(result.weights.params, grads, lr);
  }
  return result;
}

std::vector<ForecastExample> make_forecast_examples(std::span<const Series> series, int lookback, int horizon,
                                                    int stride) {
  if (lookback <= 0 || horizon <= 0 || stride <= 0) throw ContractError("forecast examples: sizes must be positive");
  const auto L = static_cast<std::size_t>(lookback), H = static_cast<std::size_t>(horizon);
  std::vector<ForecastExample> out;
  for (const auto& s : series) {
    if (s.size() < H + 1) continue;
    std::vector<std::size_t> origins;
    if (s.size() < L + H) {
      origins.push_back(s.size() - H);
    } else {
      for (std::size_t o = L; o + H <= s.size(); o += static_cast<std::size_t>(stride)) origins.push_back(o);
    }
    for (auto o : origins) {
      const std::size_t begin = o > L ? o - L : 0;
      Series hist;
      hist.name = s.name;
      hist.values.assign(s.values.begin() + static_cast<std::ptrdiff_t>(begin), s.values.begin() + static_cast<std::ptrdiff_t>(o));
      hist.observed.assign(s.observed.begin() + static_cast<std::ptrdiff_t>(begin), s.observed.begin() + static_cast<std::ptrdiff_t>(o));
      ForecastExample ex;
      ex.history = data::left_pad(hist, L);
      ex.future.assign(s.values.begin() + static_cast<std::ptrdiff_t>(o), s.values.begin() + static_cast<std::ptrdiff_t>(o + H));
      out.push_back(std::move(ex));
    }
  }
  return out;
}

namespace {

struct ForecastBatchData {
  ModelInput<float> input;
  Matrix<float> target;  // B x H, normalized with history statistics
};

ForecastBatchData forecast_batch(const ModelConfig& cfg, std::span<const ForecastExample> examples,
                                 std::span<const std::size_t> idx, int horizon) {
  ForecastBatchData d;
  std::vector<PreparedWindow> prepared;
  d.target.resize(static_cast<Eigen::Index>(idx.size()), horizon);
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto& ex = examples[idx[b]];
    if (static_cast<int>(ex.future.size()) != horizon) throw ConfigError("forecast example horizon differs from head");
    prepared.push_back(prepare_window(ex.history, PatchMaskPlan::all_observed(static_cast<std::size_t>(cfg.n_patches())), cfg));
    const auto& st = prepared.back().stats;
    for (int h = 0; h < horizon; ++h) {
      d.target(static_cast<Eigen::Index>(b), h) = static_cast<float>((ex.future[static_cast<std::size_t>(h)] - st.mean) / st.stdev);
    }
  }
  d.input = assemble_input<float>(prepared, cfg);
  return d;
}

// Encoder features flattened per example: rows of N*D values.
Matrix<float> frozen_features(const ModelWeights<float>& model, std::span<const ForecastExample> examples,
                              Matrix<float>& targets) {
  const auto& cfg = model.config;
  const int horizon = model.horizon();
  const Eigen::Index width = static_cast<Eigen::Index>(cfg.n_patches()) * cfg.d_model;
  Matrix<float> features(static_cast<Eigen::Index>(examples.size()), width);
  targets.resize(static_cast<Eigen::Index>(examples.size()), horizon);
  constexpr std::size_t chunk = 64;
  for (std::size_t start = 0; start < examples.size(); start += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(examples.size(), start + chunk); ++i) idx.push_back(i);
    auto d = forecast_batch(cfg, examples, idx, horizon);
    Tape<float> tape;
    BoundParameters<float> p(tape, model.params, [](const std::string&) { return false; });
    auto h = encode(p, d.input, cfg);
    const auto rows = static_cast<Eigen::Index>(idx.size());
    features.middleRows(static_cast<Eigen::Index>(start), rows) =
        Eigen::Map<const Matrix<float>>(h.value().data(), rows, width);
    targets.middleRows(static_cast<Eigen::Index>(start), rows) = d.target;
  }
  return features;
}

}  // namespace

ModelWeights<float> linear_probe(const ModelWeights<float>& model, HeadKind head, std::span<const Series> windows,
                                 std::span<const ForecastExample> examples, const ProbeConfig& config) {
  model.validate();
  if (head == HeadKind::forecasting && !model.has_forecasting_head()) {
    throw ConfigError("forecasting head not attached");
  }
  ModelWeights<float> out = model;
  if (config.epochs <= 0) return out;
  if (config.batch_size <= 0) throw ConfigError("probe batch size must be positive");
  const auto& cfg = model.config;
  const auto trainable = [&](const std::string& name) {
    if (!config.freeze_encoder) {
      return head == HeadKind::forecasting ? !param::is_reconstruction_head(name) : !param::is_forecast_head(name);
    }
    return head == HeadKind::forecasting ? param::is_forecast_head(name) : param::is_reconstruction_head(name);
  };

  const std::size_t n = head == HeadKind::forecasting ? examples.size() : windows.size();
  if (n == 0) throw ContractError("linear_probe: empty training set");
  const auto batch = static_cast<std::size_t>(config.batch_size);
  const long total = static_cast<long>((n + batch - 1) / batch) * config.epochs;
  const CosineSchedule sched{config.lr_init, config.lr_final, std::max<long>(total - 1, 1)};
  std::mt19937_64 rng(config.seed);
  BatchSampler sampler(n, batch, rng);
  AdamW<float> optimizer(config.adam);

  Matrix<float> features, targets;
  const bool cached = head == HeadKind::forecasting && config.freeze_encoder;
  if (cached) features = frozen_features(model, examples, targets);
  std::vector<Series> fitted;
  if (head == HeadKind::reconstruction) fitted = fit_all(windows, cfg);

  for (long step = 0; step < total; ++step) {
    const auto idx = sampler.next();
    Tape<float> tape;
    Tensor<float> loss;
    std::optional<BoundParameters<float>> params;
    if (cached) {
      ParameterMap<float> head_params{{std::string(param::forecast_weight), out.at(param::forecast_weight)},
                                      {std::string(param::forecast_bias), out.at(param::forecast_bias)}};
      params.emplace(tape, head_params);
      Matrix<float> x(static_cast<Eigen::Index>(idx.size()), features.cols());
      Matrix<float> y(static_cast<Eigen::Index>(idx.size()), targets.cols());
      for (std::size_t b = 0; b < idx.size(); ++b) {
        x.row(static_cast<Eigen::Index>(b)) = features.row(static_cast<Eigen::Index>(idx[b]));
        y.row(static_cast<Eigen::Index>(b)) = targets.row(static_cast<Eigen::Index>(idx[b]));
      }
      auto pred = add_row(matmul(tape.constant(std::move(x)), (*params)[param::forecast_weight]),
                          (*params)[param::forecast_bias]);
      loss = mean(square(sub(pred, tape.constant(std::move(y)))));
    } else if (head == HeadKind::forecasting) {
      params.emplace(tape, out.params, trainable);
      auto d = forecast_batch(cfg, examples, idx, out.horizon());
      auto h = encode(*params, d.input, cfg);
      auto pred = forecasting_head(*params, h, cfg);
      loss = mean(square(sub(pred, tape.constant(std::move(d.target)))));
    } else {
      params.emplace(tape, out.params, trainable);
      std::vector<Series> bw;
      std::vector<PatchMaskPlan> plans;
      for (auto i : idx) {
        bw.push_back(fitted[i]);
        plans.push_back(sample_patch_mask(static_cast<std::size_t>(cfg.n_patches()), config.mask_ratio, rng));
      }
      loss = pretraining_loss(*params, make_pretrain_batch<float>(bw, plans, cfg), cfg);
    }
    if (!std::isfinite(loss.value()(0, 0))) throw TrainingError("non-finite probe loss at step " + std::to_string(step));
    tape.backward(loss);
    auto grads = params->gradients();
    clip_global_norm(grads, config.clip_norm);
    optimizer.step(out.params, grads, cosine_lr(step, sched));
  }
  return out;
}

double forecast_head_mse(const ModelWeights<float>& model, std::span<const ForecastExample> examples) {
  if (!model.has_forecasting_head()) throw ConfigError("forecasting head not attached");
  if (examples.empty()) throw ContractError("forecast_head_mse: no examples");
  Matrix<float> targets;
  const Matrix<float> features = frozen_features(model, examples, targets);
  const Matrix<float> pred =
      (features * model.at(param::forecast_weight)).rowwise() + model.at(param::forecast_bias).row(0);
  return static_cast<double>((pred - targets).squaredNorm()) / static_cast<double>(targets.size());
}

}  // namespace moment
