#include "moment/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "moment/baselines.hpp"
#include "moment/data.hpp"
#include "moment/errors.hpp"

namespace moment::tasks {
namespace {

constexpr std::size_t kChunk = 64;

std::vector<Reconstruction> reconstruct_chunked(const ModelWeights<float>& model, std::span<const Series> windows,
                                                std::span<const PatchMaskPlan> plans) {
  std::vector<Reconstruction> out;
  out.reserve(windows.size());
  for (std::size_t b = 0; b < windows.size(); b += kChunk) {
    const std::size_t n = std::min(kChunk, windows.size() - b);
    auto part = reconstruct(model, windows.subspan(b, n), plans.subspan(b, n));
    for (auto& r : part) out.push_back(std::move(r));
  }
  return out;
}

// Offset of the first real sample inside window w of split_windows(x, T).
std::size_t window_pad(std::size_t length, std::size_t window, std::size_t w) {
  const std::size_t begin = w * window;
  const std::size_t real = std::min(window, length - begin);
  return window - real;
}

}  // namespace

std::vector<Series> split_windows(const Series& x, std::size_t window) {
  if (window == 0) throw ContractError("split_windows: window must be positive");
  if (x.size() == 0) throw EmptySeriesError("split_windows: empty series '" + x.name + "'");
  std::vector<Series> out;
  for (std::size_t begin = 0; begin < x.size(); begin += window) {
    const std::size_t end = std::min(x.size(), begin + window);
    out.push_back(data::left_pad(data::slice(x, begin, end), window));
  }
  return out;
}

Series recent_window(const Series& history, std::size_t window) {
  if (history.size() == 0) throw EmptySeriesError("recent_window: empty history '" + history.name + "'");
  const std::size_t begin = history.size() > window ? history.size() - window : 0;
  return data::left_pad(data::slice(history, begin, history.size()), window);
}

// ---------------------------------------------------------------------------
// Imputation

void ImputationSpec::validate() const {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("imputation ratio must lie in (0, 1)");
  if (block_len <= 0) throw ConfigError("imputation block length must be positive");
}

std::vector<double> imputation_ratios() { return {0.125, 0.25, 0.375, 0.5}; }

MaskedSeries mask_blocks(const Series& x, const ImputationSpec& spec, std::size_t window) {
  spec.validate();
  x.validate();
  const auto block = static_cast<std::size_t>(spec.block_len);
  if (window % block != 0) throw ConfigError("window length must be a multiple of the block length");
  // Candidate blocks as global [begin, end) ranges.
  std::vector<std::size_t> starts;
  const std::size_t n_windows = (x.size() + window - 1) / window;
  for (std::size_t w = 0; w < n_windows; ++w) {
    const std::size_t pad = window_pad(x.size(), window, w);
    for (std::size_t slot = 0; slot < window; slot += block) {
      if (slot < pad) continue;
      const std::size_t begin = w * window + slot - pad;
      bool ok = true;
      for (std::size_t t = begin; t < begin + block; ++t) ok = ok && x.observed[t];
      if (ok) starts.push_back(begin);
    }
  }
  const auto k = static_cast<std::size_t>(std::floor(spec.ratio * static_cast<double>(starts.size())));
  std::mt19937_64 rng(spec.seed);
  std::shuffle(starts.begin(), starts.end(), rng);
  MaskedSeries out{x, std::vector<std::uint8_t>(x.size(), 0)};
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t t = starts[i]; t < starts[i] + block; ++t) {
      out.hidden[t] = 1;
      out.masked.observed[t] = 0;
      out.masked.values[t] = 0.0f;
    }
  }
  return out;
}

Series zero_shot_impute(const ModelWeights<float>& model, const Series& x) {
  x.validate();
  const auto T = static_cast<std::size_t>(model.config.seq_len);
  const auto windows = split_windows(x, T);
  const std::vector<PatchMaskPlan> plans(windows.size(),
                                         PatchMaskPlan::all_observed(static_cast<std::size_t>(model.config.n_patches())));
  const auto recon = reconstruct_chunked(model, windows, plans);
  Series out = x;
  for (std::size_t w = 0; w < windows.size(); ++w) {
    const std::size_t pad = window_pad(x.size(), T, w);
    for (std::size_t local = pad; local < T; ++local) {
      const std::size_t t = w * T + local - pad;
      if (x.observed[t]) continue;
      out.values[t] = recon[w].denormalized[local];
      out.observed[t] = 1;
    }
  }
  return out;
}

ImputationScores score_imputation(const Series& truth, const MaskedSeries& masked, const Series& filled,
                                  std::size_t window) {
  if (truth.size() != filled.size() || truth.size() != masked.hidden.size()) {
    throw DimensionError("score_imputation: lengths differ");
  }
  ImputationScores s;
  for (std::size_t begin = 0; begin < truth.size(); begin += window) {
    const std::size_t end = std::min(truth.size(), begin + window);
    const auto vals = std::span<const float>(truth.values).subspan(begin, end - begin);
    const auto obs = std::span<const std::uint8_t>(truth.observed).subspan(begin, end - begin);
    bool any_hidden = false;
    for (std::size_t t = begin; t < end; ++t) any_hidden = any_hidden || masked.hidden[t];
    if (!any_hidden) continue;
    const RevinStats st = revin_stats(vals, obs);
    for (std::size_t t = begin; t < end; ++t) {
      if (!masked.hidden[t]) continue;
      const double e = (static_cast<double>(truth.values[t]) - filled.values[t]) / st.stdev;
      s.mse += e * e;
      s.mae += std::abs(e);
      ++s.count;
    }
  }
  if (s.count == 0) throw ContractError("score_imputation: nothing was hidden");
  s.mse /= static_cast<double>(s.count);
  s.mae /= static_cast<double>(s.count);
  return s;
}

// ---------------------------------------------------------------------------
// Anomaly detection

void AnomalySpec::validate(const ModelConfig& config) const {
  if (window != config.seq_len) {
    throw ConfigError("anomaly window " + std::to_string(window) + " must equal the model length " +
                      std::to_string(config.seq_len));
  }
  if (!(sweep_ratio > 0.0 && sweep_ratio <= 1.0)) throw ConfigError("sweep ratio must lie in (0, 1]");
  if (downsample_factor == 0) throw ConfigError("downsample factor must be positive");
}

int sweep_rounds(double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ContractError("sweep ratio must lie in (0, 1]");
  return static_cast<int>(std::ceil(1.0 / ratio - 1e-12));
}

std::vector<PatchMaskPlan> sweep_plans(int n_patches, double ratio) {
  const int rounds = sweep_rounds(ratio);
  std::vector<PatchMaskPlan> plans;
  for (int k = 0; k < rounds; ++k) {
    auto plan = PatchMaskPlan::all_observed(static_cast<std::size_t>(n_patches));
    for (int i = k; i < n_patches; i += rounds) plan.observed[static_cast<std::size_t>(i)] = 0;
    plans.push_back(std::move(plan));
  }
  return plans;
}

AnomalyResult detect_anomalies(const ModelWeights<float>& model, const Series& x, const AnomalySpec& spec) {
  const auto& cfg = model.config;
  spec.validate(cfg);
  x.validate();
  AnomalyResult res;
  res.processed = data::downsample(x, spec.downsample_threshold, spec.downsample_factor);
  const auto& xs = res.processed;
  const auto T = static_cast<std::size_t>(cfg.seq_len);
  const auto P = static_cast<std::size_t>(cfg.patch_len);
  const auto windows = split_windows(xs, T);
  const auto rounds = sweep_plans(cfg.n_patches(), spec.sweep_ratio);

  std::vector<Series> batch;
  std::vector<PatchMaskPlan> plans;
  for (const auto& w : windows) {
    for (const auto& r : rounds) {
      batch.push_back(w);
      plans.push_back(r);
    }
  }
  const auto recon = reconstruct_chunked(model, batch, plans);

  res.reconstruction.assign(xs.size(), 0.0);
  res.scores.assign(xs.size(), 0.0);
  const std::size_t n_rounds = rounds.size();
  for (std::size_t w = 0; w < windows.size(); ++w) {
    const std::size_t pad = window_pad(xs.size(), T, w);
    for (std::size_t local = pad; local < T; ++local) {
      const std::size_t t = w * T + local - pad;
      const std::size_t round = (local / P) % n_rounds;
      const double xhat = recon[w * n_rounds + round].denormalized[local];
      res.reconstruction[t] = xhat;
      if (xs.observed[t]) {
        const double d = static_cast<double>(xs.values[t]) - xhat;
        res.scores[t] = d * d;
      }
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Forecasting

std::vector<ForecastExample> forecast_examples_in_range(const Series& x, std::size_t begin, std::size_t end,
                                                        int lookback, int horizon, int stride) {
  if (lookback <= 0 || horizon <= 0 || stride <= 0) throw ContractError("forecast examples: sizes must be positive");
  if (end > x.size() || begin > end) throw DimensionError("forecast examples: range outside the series");
  const auto L = static_cast<std::size_t>(lookback), H = static_cast<std::size_t>(horizon);
  std::vector<ForecastExample> out;
  for (std::size_t o = std::max(begin, L); o + H <= end; o += static_cast<std::size_t>(stride)) {
    ForecastExample ex;
    ex.history = data::left_pad(data::slice(x, o > L ? o - L : 0, o), L);
    ex.history.anomaly_labels.clear();
    ex.future.assign(x.values.begin() + static_cast<std::ptrdiff_t>(o), x.values.begin() + static_cast<std::ptrdiff_t>(o + H));
    out.push_back(std::move(ex));
  }
  return out;
}

int forecast_tail_patches(int horizon, int patch_len) {
  if (horizon <= 0) throw ContractError("forecast horizon must be positive");
  return (horizon + patch_len - 1) / patch_len;
}

std::vector<std::vector<double>> zero_shot_short_forecast(const ModelWeights<float>& model,
                                                          std::span<const Series> histories, int horizon) {
  const auto& cfg = model.config;
  if (horizon <= 0) throw ContractError("forecast horizon must be positive");
  if (2 * horizon > cfg.seq_len) {
    throw HorizonError("zero-shot horizon " + std::to_string(horizon) + " exceeds half the window (" +
                       std::to_string(cfg.seq_len / 2) + ")");
  }
  const auto T = static_cast<std::size_t>(cfg.seq_len);
  const auto tail = static_cast<std::size_t>(forecast_tail_patches(horizon, cfg.patch_len) * cfg.patch_len);
  const std::size_t context = T - tail;
  std::vector<Series> windows;
  for (const auto& h : histories) {
    h.validate();
    Series w = recent_window(h, context);
    w.anomaly_labels.clear();
    w.values.insert(w.values.end(), tail, 0.0f);
    w.observed.insert(w.observed.end(), tail, 0);
    windows.push_back(std::move(w));
  }
  const std::vector<PatchMaskPlan> plans(windows.size(),
                                         PatchMaskPlan::all_observed(static_cast<std::size_t>(cfg.n_patches())));
  const auto recon = reconstruct_chunked(model, windows, plans);
  std::vector<std::vector<double>> out;
  for (const auto& r : recon) {
    out.emplace_back(r.denormalized.begin() + static_cast<std::ptrdiff_t>(context),
                     r.denormalized.begin() + static_cast<std::ptrdiff_t>(context) + horizon);
  }
  return out;
}

std::vector<double> zero_shot_short_forecast(const ModelWeights<float>& model, const Series& history, int horizon) {
  return zero_shot_short_forecast(model, std::span<const Series>(&history, 1), horizon).front();
}

std::vector<std::vector<double>> long_forecast(const ModelWeights<float>& model, std::span<const Series> histories,
                                               int horizon) {
  if (!model.has_forecasting_head()) throw ConfigError("forecasting head not attached");
  if (model.horizon() != horizon) {
    throw ConfigError("forecasting head predicts " + std::to_string(model.horizon()) + " steps, " +
                      std::to_string(horizon) + " requested");
  }
  const auto& cfg = model.config;
  const auto all = PatchMaskPlan::all_observed(static_cast<std::size_t>(cfg.n_patches()));
  std::vector<std::vector<double>> out;
  for (std::size_t b = 0; b < histories.size(); b += kChunk) {
    const std::size_t n = std::min(kChunk, histories.size() - b);
    std::vector<PreparedWindow> prepared;
    for (std::size_t i = 0; i < n; ++i) {
      histories[b + i].validate();
      prepared.push_back(prepare_window(recent_window(histories[b + i], static_cast<std::size_t>(cfg.seq_len)), all, cfg));
    }
    Tape<float> tape;
    BoundParameters<float> p(tape, model.params, [](const std::string&) { return false; });
    auto y = forecasting_head(p, encode(p, assemble_input<float>(prepared, cfg), cfg), cfg);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& st = prepared[i].stats;
      std::vector<double> f(static_cast<std::size_t>(horizon));
      for (int h = 0; h < horizon; ++h) {
        f[static_cast<std::size_t>(h)] = static_cast<double>(y.value()(static_cast<Eigen::Index>(i), h)) * st.stdev + st.mean;
      }
      out.push_back(std::move(f));
    }
  }
  return out;
}

std::vector<double> long_forecast(const ModelWeights<float>& model, const Series& history, int horizon) {
  return long_forecast(model, std::span<const Series>(&history, 1), horizon).front();
}

// ---------------------------------------------------------------------------
// Classification

Eigen::MatrixXd representations(const ModelWeights<float>& model, std::span<const Series> series) {
  const auto& cfg = model.config;
  std::vector<Series> windows;
  windows.reserve(series.size());
  for (const auto& s : series) {
    Series w = data::fit_to_window(s, static_cast<std::size_t>(cfg.seq_len));
    w.class_label.reset();
    windows.push_back(std::move(w));
  }
  const std::vector<PatchMaskPlan> plans(windows.size(),
                                         PatchMaskPlan::all_observed(static_cast<std::size_t>(cfg.n_patches())));
  const auto recon = reconstruct_chunked(model, windows, plans);
  Eigen::MatrixXd out(static_cast<Eigen::Index>(series.size()), cfg.d_model);
  for (std::size_t i = 0; i < recon.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) =
        sequence_representation<float>(recon[i].hidden, recon[i].window.plan.observed).cast<double>();
  }
  return out;
}

namespace {

Eigen::MatrixXd take_rows(const Eigen::MatrixXd& X, std::span<const std::size_t> idx) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), X.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = X.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

double accuracy_of(std::span<const int> pred, std::span<const int> truth) {
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == truth[i];
  return truth.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(truth.size());
}

}  // namespace

SvmSelection select_and_predict(const Eigen::MatrixXd& train_x, std::span<const int> train_y,
                                const Eigen::MatrixXd& test_x, const Eigen::MatrixXd& val_x,
                                std::span<const int> val_y, std::uint64_t seed) {
  if (static_cast<std::size_t>(train_x.rows()) != train_y.size()) {
    throw DimensionError("select_and_predict: one label per training row required");
  }
  if (static_cast<std::size_t>(val_x.rows()) != val_y.size()) {
    throw DimensionError("select_and_predict: one label per validation row required");
  }
  std::set<int> classes(train_y.begin(), train_y.end());
  if (classes.size() < 2) throw StratificationError("classification needs at least two training classes");

  Eigen::MatrixXd fit_x, sel_x;
  std::vector<int> fit_y, sel_y;
  if (val_x.rows() > 0) {
    fit_x = train_x;
    fit_y.assign(train_y.begin(), train_y.end());
    sel_x = val_x;
    sel_y.assign(val_y.begin(), val_y.end());
  } else {
    // Stratified holdout: 1/7 of each class (the validation share of a
    // 60/10 train/val split), at least one row, when a class has >= 2 rows.
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < train_y.size(); ++i) by_class[train_y[i]].push_back(i);
    bool can_split = true;
    for (const auto& [c, rows] : by_class) can_split = can_split && rows.size() >= 2;
    std::vector<std::size_t> fit_idx, sel_idx;
    std::mt19937_64 rng(seed);
    for (auto& [c, rows] : by_class) {
      std::shuffle(rows.begin(), rows.end(), rng);
      const std::size_t n_sel = can_split ? std::max<std::size_t>(1, rows.size() / 7) : 0;
      for (std::size_t i = 0; i < rows.size(); ++i) (i < n_sel ? sel_idx : fit_idx).push_back(rows[i]);
    }
    std::sort(fit_idx.begin(), fit_idx.end());
    std::sort(sel_idx.begin(), sel_idx.end());
    if (sel_idx.empty()) sel_idx = fit_idx;
    fit_x = take_rows(train_x, fit_idx);
    sel_x = take_rows(train_x, sel_idx);
    for (auto i : fit_idx) fit_y.push_back(train_y[i]);
    for (auto i : sel_idx) sel_y.push_back(train_y[i]);
  }

  // Ties on validation accuracy go to the better fit of the fitting rows,
  // then to the smaller C.
  SvmSelection best;
  best.validation_accuracy = -1.0;
  double best_fit = -1.0;
  for (double C : baselines::svm_c_grid()) {
    baselines::SvmOptions opt;
    opt.C = C;
    const auto model = baselines::svm_fit(fit_x, fit_y, opt);
    const double acc = accuracy_of(baselines::svm_predict(model, sel_x), sel_y);
    const double fit = accuracy_of(baselines::svm_predict(model, fit_x), fit_y);
    if (acc > best.validation_accuracy || (acc == best.validation_accuracy && fit > best_fit)) {
      best.validation_accuracy = acc;
      best.C = C;
      best_fit = fit;
    }
  }
  baselines::SvmOptions opt;
  opt.C = best.C;
  const auto model = baselines::svm_fit(train_x, train_y, opt);
  best.predictions = baselines::svm_predict(model, test_x);
  return best;
}

ClassificationResult classify_by_representation(const ModelWeights<float>& model, std::span<const Series> train,
                                                std::span<const int> train_labels, std::span<const Series> test,
                                                std::span<const int> test_labels, std::span<const Series> val,
                                                std::span<const int> val_labels) {
  if (train.size() != train_labels.size() || test.size() != test_labels.size() || val.size() != val_labels.size()) {
    throw DimensionError("classify_by_representation: one label per series required");
  }
  if (test.empty()) throw ContractError("classify_by_representation: empty test set");
  const auto train_x = representations(model, train);
  const auto val_x = val.empty() ? Eigen::MatrixXd() : representations(model, val);
  const auto test_x = representations(model, test);
  const auto sel = select_and_predict(train_x, train_labels, test_x, val_x, val_labels);

  const std::set<int> seen(train_labels.begin(), train_labels.end());
  for (int c : test_labels) {
    if (!seen.contains(c)) throw StratificationError("class " + std::to_string(c) + " is absent from the training split");
  }
  ClassificationResult res;
  res.predictions = sel.predictions;
  res.C = sel.C;
  res.accuracy = accuracy_of(res.predictions, test_labels);
  return res;
}

}  // namespace moment::tasks
