#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "moment/baselines.hpp"
#include "moment/checkpoint.hpp"
#include "moment/data.hpp"
#include "moment/errors.hpp"
#include "moment/metrics.hpp"
#include "moment/pretrain.hpp"
#include "moment/probes.hpp"
#include "moment/report.hpp"
#include "moment/tasks.hpp"

#ifndef MOMENT_VERSION
#define MOMENT_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using namespace moment;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flag values shared by the subcommands; each subcommand binds the subset it
// understands.
struct Options {
  std::string config = "tiny";
  std::string ckpt;
  std::string data;
  std::string labels;
  std::string classes;
  std::string scores;
  std::string out;
  std::string run_config;
  std::size_t synthetic = 0;
  long steps = 2000;
  int batch = 64;
  int epochs = 2;
  double lr_init = 1e-4;
  double lr_final = 1e-5;
  double mask_ratio = 0.30;
  std::uint64_t seed = 13;
  int workers = 1;
  int horizon = 96;
  std::string mode = "zero-shot";
  std::string head = "forecast";
  bool full = false;
  int stride = 0;
  double ratio = 0.25;
  bool baselines = false;
  int knn_window = 16;
  int buffer = 4;
  std::string probe = "all";
  std::string kind = "frequency";
  int points = 32;
  double noise = 0.1;
  int sample = 64;
};

std::vector<Series> load_series(const std::string& path) {
  if (path.empty()) throw UsageError("--data is required");
  const fs::path p(path);
  if (!fs::exists(p)) throw ConfigError("data path '" + path + "' does not exist");
  if (!fs::is_directory(p)) return data::load_csv(p);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(p)) {
    const std::string name = e.path().filename().string();
    if (e.path().extension() != ".csv") continue;
    if (name.ends_with(".labels.csv") || name.ends_with(".classes.csv")) continue;
    files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Series> all;
  for (const auto& f : files) {
    for (auto& s : data::load_csv(f)) {
      s.name = f.stem().string() + ":" + s.name;
      all.push_back(std::move(s));
    }
  }
  if (all.empty()) throw EmptySeriesError("no csv series found under '" + path + "'");
  return all;
}

std::vector<double> read_column(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read '" + path + "'");
  std::vector<double> v;
  std::string line;
  for (std::size_t li = 0; std::getline(in, line); ++li) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    try {
      std::size_t used = 0;
      const double x = std::stod(line, &used);
      if (used != line.size()) throw std::invalid_argument(line);
      v.push_back(x);
    } catch (const std::exception&) {
      if (li == 0) continue;
      throw ParseError(path + ":" + std::to_string(li + 1) + ": score is not numeric");
    }
  }
  return v;
}

std::vector<double> to_double(std::span<const float> v) { return {v.begin(), v.end()}; }

// Runs fn(i) for i in [0, n) on up to `workers` threads.
template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
  const auto k = static_cast<std::size_t>(std::max(1, workers));
  if (k == 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(k);
  for (std::size_t w = 0; w < k; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += k) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

struct Context {
  Options opt;
  CLI::App* sub = nullptr;
  bool seed_given = false;

  EvalReport report(const std::string& task, const std::string& dataset) const {
    EvalReport r;
    r.task = task;
    r.dataset = dataset;
    r.seed = opt.seed;
    r.version = MOMENT_VERSION;
    r.config = nlohmann::json::object();
    for (const CLI::Option* o : sub->get_options()) {
      const std::string name = o->get_single_name();
      if (name.empty() || name == "help" || name == "run-config" || name == "workers" || name == "seed") continue;
      if (o->count() > 0) {
        const auto& res = o->results();
        r.config[name] = res.size() == 1 ? res.front() : nlohmann::json(res).dump();
      } else {
        r.config[name] = o->get_default_str();
      }
    }
    r.config["seed"] = opt.seed;
    return r;
  }

  fs::path out_dir() const {
    if (opt.out.empty()) throw UsageError("--out is required");
    fs::create_directories(opt.out);
    return opt.out;
  }
};

std::string dataset_name(const Options& o) {
  return o.synthetic > 0 ? "synthetic:" + std::to_string(o.synthetic) : o.data;
}

std::vector<Series> training_partition(const std::vector<Series>& all) {
  if (all.size() >= 3) return data::split_by_series(all).train;
  std::vector<Series> train;
  for (const auto& s : all) train.push_back(data::split_horizontal(s).train);
  return train;
}

// ---------------------------------------------------------------------------

int run_pretrain(Context& ctx) {
  const auto& o = ctx.opt;
  const ModelConfig cfg = resolve_model_config(o.config);
  std::vector<Series> all;
  if (o.synthetic > 0) {
    data::CorpusSpec cs;
    cs.n_series = o.synthetic;
    cs.length = static_cast<std::size_t>(cfg.seq_len);
    cs.seed = o.seed;
    all = data::synth_corpus(cs);
  } else {
    all = load_series(o.data);
  }
  const auto train = training_partition(all);

  PretrainConfig pc;
  pc.mask_ratio = o.mask_ratio;
  pc.batch_size = o.batch;
  pc.max_steps = o.steps;
  pc.max_epochs = o.epochs;
  pc.seed = o.seed;
  pc.schedule.lr_init = o.lr_init;
  pc.schedule.lr_final = o.lr_final;
  const auto out = ctx.out_dir();
  auto result = pretrain(ModelWeights<float>::initialize(cfg, o.seed), train, pc);
  save_checkpoint(out, result.weights);
  result.log.write_csv(out / "train_log.csv");

  auto r = ctx.report("pretrain", dataset_name(o));
  const auto& log = result.log.entries;
  r.metrics["initial_loss"] = log.front().loss;
  r.metrics["final_loss"] = log.back().loss;
  r.metrics["steps"] = static_cast<double>(log.size());
  r.metrics["lr_first"] = log.front().lr;
  r.metrics["lr_last"] = log.back().lr;
  r.metrics["train_series"] = static_cast<double>(train.size());
  r.per_series = {{"consumed_digest", result.log.consumed_digest}};
  r.write(out / "report.json");
  return 0;
}

struct ForecastScores {
  double mse = 0, mae = 0, smape = 0, naive_mse = 0, naive_mae = 0;
  std::size_t n = 0;
};

// Errors in the RevIN scale of each history window; sMAPE on raw values.
ForecastScores score_forecasts(std::span<const ForecastExample> examples, const std::vector<std::vector<double>>& pred) {
  ForecastScores s;
  double smape_sum = 0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& ex = examples[i];
    const auto st = revin_stats(ex.history.values, ex.history.observed);
    double last = 0.0;
    for (std::size_t t = ex.history.size(); t-- > 0;) {
      if (ex.history.observed[t]) {
        last = ex.history.values[t];
        break;
      }
    }
    const auto future = to_double(ex.future);
    smape_sum += metrics::smape_m4(future, pred[i]);
    for (std::size_t h = 0; h < future.size(); ++h) {
      const double e = (future[h] - pred[i][h]) / st.stdev;
      const double en = (future[h] - last) / st.stdev;
      s.mse += e * e;
      s.mae += std::abs(e);
      s.naive_mse += en * en;
      s.naive_mae += std::abs(en);
      ++s.n;
    }
  }
  if (s.n == 0) throw ContractError("no forecast windows fit in the test split");
  const double n = static_cast<double>(s.n);
  s.mse /= n;
  s.mae /= n;
  s.naive_mse /= n;
  s.naive_mae /= n;
  s.smape = smape_sum / static_cast<double>(examples.size());
  return s;
}

void put_forecast_metrics(EvalReport& r, const ForecastScores& s, const std::string& prefix = {}) {
  r.metrics[prefix + "mse"] = s.mse;
  r.metrics[prefix + "mae"] = s.mae;
  r.metrics[prefix + "smape"] = s.smape;
  r.metrics[prefix + "naive_mse"] = s.naive_mse;
  r.metrics[prefix + "naive_mae"] = s.naive_mae;
}

// Train/test forecast examples from horizontal splits of every series.
std::pair<std::vector<ForecastExample>, std::vector<ForecastExample>> forecast_split(const std::vector<Series>& all,
                                                                                     int lookback, int horizon,
                                                                                     int stride) {
  std::vector<ForecastExample> train, test;
  for (const auto& s : all) {
    const auto parts = data::split_horizontal(s);
    const std::size_t train_end = parts.train.size();
    const std::size_t test_begin = train_end + parts.val.size();
    for (auto& ex : tasks::forecast_examples_in_range(s, 0, train_end, lookback, horizon, stride)) train.push_back(std::move(ex));
    for (auto& ex : tasks::forecast_examples_in_range(s, test_begin, s.size(), lookback, horizon, horizon)) test.push_back(std::move(ex));
  }
  return {std::move(train), std::move(test)};
}

std::vector<Series> histories_of(std::span<const ForecastExample> ex) {
  std::vector<Series> h;
  for (const auto& e : ex) h.push_back(e.history);
  return h;
}

std::vector<Series> load_or_synth(const Options& o, std::size_t length) {
  if (o.synthetic == 0) return load_series(o.data);
  data::CorpusSpec cs;
  cs.n_series = o.synthetic;
  cs.length = length;
  cs.seed = o.seed;
  return data::synth_corpus(cs);
}

int run_finetune(Context& ctx) {
  const auto& o = ctx.opt;
  if (o.ckpt.empty()) throw UsageError("--ckpt is required");
  auto model = load_checkpoint(o.ckpt);
  const auto& cfg = model.config;
  const auto all = load_or_synth(o, static_cast<std::size_t>(cfg.seq_len) * 2);
  const auto out = ctx.out_dir();
  ProbeConfig pc;
  pc.epochs = o.epochs;
  pc.batch_size = o.batch;
  pc.lr_init = o.lr_init;
  pc.lr_final = o.lr_final;
  pc.mask_ratio = o.mask_ratio;
  pc.seed = o.seed;
  pc.freeze_encoder = !o.full;
  auto r = ctx.report("finetune", dataset_name(o));

  if (o.head == "reconstruction") {
    const auto train = training_partition(all);
    model = linear_probe(model, HeadKind::reconstruction, train, {}, pc);
  } else if (o.head == "forecast") {
    const int stride = o.stride > 0 ? o.stride : o.horizon;
    const auto [train, test] = forecast_split(all, cfg.seq_len, o.horizon, stride);
    if (train.empty()) throw ContractError("no training forecast windows fit in the train split");
    if (model.horizon() != o.horizon) model.attach_forecasting_head(o.horizon, o.seed);
    r.metrics["train_mse_before"] = forecast_head_mse(model, train);
    model = linear_probe(model, HeadKind::forecasting, {}, train, pc);
    r.metrics["train_mse_after"] = forecast_head_mse(model, train);
    if (!test.empty()) {
      put_forecast_metrics(r, score_forecasts(test, tasks::long_forecast(model, histories_of(test), o.horizon)));
    } else {
      r.warnings.push_back("test split too short for one forecast window");
    }
  } else {
    throw UsageError("--head must be 'forecast' or 'reconstruction'");
  }
  save_checkpoint(out, model);
  r.write(out / "report.json");
  return 0;
}

int run_forecast(Context& ctx) {
  const auto& o = ctx.opt;
  if (o.ckpt.empty()) throw UsageError("--ckpt is required");
  const auto model = load_checkpoint(o.ckpt);
  const auto all = load_or_synth(o, static_cast<std::size_t>(model.config.seq_len) * 2);
  const auto [train, test] = forecast_split(all, model.config.seq_len, o.horizon, o.horizon);
  const auto hist = histories_of(test);
  std::vector<std::vector<double>> pred;
  if (o.mode == "zero-shot") {
    pred = tasks::zero_shot_short_forecast(model, hist, o.horizon);
  } else if (o.mode == "head") {
    pred = tasks::long_forecast(model, hist, o.horizon);
  } else {
    throw UsageError("--mode must be 'zero-shot' or 'head'");
  }
  auto r = ctx.report("forecast", dataset_name(o));
  put_forecast_metrics(r, score_forecasts(test, pred));
  r.metrics["windows"] = static_cast<double>(test.size());
  r.write(ctx.out_dir() / "report.json");
  return 0;
}

int run_impute(Context& ctx) {
  const auto& o = ctx.opt;
  if (o.ckpt.empty()) throw UsageError("--ckpt is required");
  const auto model = load_checkpoint(o.ckpt);
  const auto all = load_or_synth(o, static_cast<std::size_t>(model.config.seq_len));
  const auto T = static_cast<std::size_t>(model.config.seq_len);
  tasks::ImputationSpec spec;
  spec.ratio = o.ratio;
  spec.block_len = model.config.patch_len;
  spec.seed = o.seed;
  spec.validate();

  const std::vector<std::pair<std::string, Series (*)(const Series&)>> methods = {
      {"linear", &baselines::interp_linear},
      {"nearest", &baselines::interp_nearest},
      {"cubic", &baselines::interp_cubic},
      {"naive", &baselines::naive_fill}};
  std::vector<std::map<std::string, tasks::ImputationScores>> per(all.size());
  parallel_for(all.size(), o.workers, [&](std::size_t i) {
    const auto masked = tasks::mask_blocks(all[i], spec, T);
    if (std::none_of(masked.hidden.begin(), masked.hidden.end(), [](auto h) { return h != 0; })) return;
    per[i]["model"] = tasks::score_imputation(all[i], masked, tasks::zero_shot_impute(model, masked.masked), T);
    for (const auto& [name, fn] : methods) {
      per[i][name] = tasks::score_imputation(all[i], masked, fn(masked.masked), T);
    }
  });

  auto r = ctx.report("impute", dataset_name(o));
  std::map<std::string, tasks::ImputationScores> pooled;
  nlohmann::json rows = nlohmann::json::object();
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (per[i].empty()) {
      r.warnings.push_back("series '" + all[i].name + "' has no fully observed block to hide");
      continue;
    }
    for (const auto& [name, s] : per[i]) {
      auto& p = pooled[name];
      p.mse += s.mse * static_cast<double>(s.count);
      p.mae += s.mae * static_cast<double>(s.count);
      p.count += s.count;
    }
    rows[all[i].name] = {{"mse", per[i]["model"].mse}, {"mae", per[i]["model"].mae}};
  }
  if (pooled.empty()) throw ContractError("nothing could be hidden in any series");
  for (const auto& [name, p] : pooled) {
    const std::string prefix = name == "model" ? "" : name + "_";
    r.metrics[prefix + "mse"] = p.mse / static_cast<double>(p.count);
    r.metrics[prefix + "mae"] = p.mae / static_cast<double>(p.count);
  }
  r.metrics["hidden_points"] = static_cast<double>(pooled["model"].count);
  r.per_series = rows;
  r.write(ctx.out_dir() / "report.json");
  return 0;
}

void put_detection_metrics(EvalReport& r, std::span<const double> scores, std::span<const std::uint8_t> labels,
                           int buffer, const std::string& prefix) {
  if (std::none_of(labels.begin(), labels.end(), [](auto l) { return l != 0; })) {
    r.warnings.push_back(prefix + "adj_best_f1: no positive labels, reported as 0");
  }
  r.metrics[prefix + "adj_best_f1"] = metrics::adjusted_best_f1(scores, labels);
  r.metrics[prefix + "best_f1"] = metrics::best_f1(scores, labels);
  try {
    r.metrics[prefix + "roc_auc"] = metrics::roc_auc(scores, labels);
  } catch (const UndefinedMetricError& e) {
    r.errors[prefix + "roc_auc"] = e.what();
  }
  try {
    r.metrics[prefix + "vus_roc"] = metrics::vus_roc(scores, labels, buffer);
  } catch (const UndefinedMetricError& e) {
    r.errors[prefix + "vus_roc"] = e.what();
  }
}

int run_detect(Context& ctx) {
  const auto& o = ctx.opt;
  if (o.ckpt.empty()) throw UsageError("--ckpt is required");
  if (o.labels.empty()) throw UsageError("--labels is required");
  const auto model = load_checkpoint(o.ckpt);
  auto all = load_series(o.data);
  const auto labels = data::load_labels(o.labels);
  for (auto& s : all) {
    if (labels.size() != s.size()) {
      throw DimensionError("labels have " + std::to_string(labels.size()) + " rows, series '" + s.name + "' has " +
                           std::to_string(s.size()));
    }
    s.anomaly_labels = labels;
  }
  tasks::AnomalySpec spec;
  spec.window = model.config.seq_len;
  std::vector<tasks::AnomalyResult> res(all.size());
  parallel_for(all.size(), o.workers, [&](std::size_t i) { res[i] = tasks::detect_anomalies(model, all[i], spec); });

  auto r = ctx.report("detect", dataset_name(o));
  const auto out = ctx.out_dir();
  std::ofstream scores_csv(out / "scores.csv");
  scores_csv << "series,t,value,score,label\n";
  scores_csv.precision(9);
  std::vector<double> scores, knn;
  std::vector<std::uint8_t> lab;
  for (const auto& a : res) {
    const auto& p = a.processed;
    for (std::size_t t = 0; t < p.size(); ++t) {
      scores_csv << p.name << ',' << t << ',' << p.values[t] << ',' << a.scores[t] << ',' << int(p.anomaly_labels[t]) << '\n';
    }
    scores.insert(scores.end(), a.scores.begin(), a.scores.end());
    lab.insert(lab.end(), p.anomaly_labels.begin(), p.anomaly_labels.end());
    if (o.baselines) {
      const auto k = baselines::knn_anomaly(to_double(p.values), o.knn_window, 5);
      knn.insert(knn.end(), k.begin(), k.end());
    }
  }
  put_detection_metrics(r, scores, lab, o.buffer, "");
  if (o.baselines) put_detection_metrics(r, knn, lab, o.buffer, "knn_");
  r.metrics["processed_length"] = static_cast<double>(res.front().processed.size());
  r.write(out / "report.json");
  return 0;
}

int run_classify(Context& ctx) {
  const auto& o = ctx.opt;
  if (o.ckpt.empty()) throw UsageError("--ckpt is required");
  if (o.classes.empty()) throw UsageError("--classes is required");
  const auto model = load_checkpoint(o.ckpt);
  auto all = load_series(o.data);
  const auto classes = data::load_classes(o.classes);
  for (auto& s : all) {
    auto it = classes.find(s.name);
    if (it == classes.end()) {
      // Directory loads prefix names with the file stem.
      const auto colon = s.name.find(':');
      if (colon != std::string::npos) it = classes.find(s.name.substr(colon + 1));
    }
    if (it == classes.end()) throw ConfigError("no class for series '" + s.name + "'");
    s.class_label = it->second;
  }
  const auto split = data::split_by_series(all);
  const auto labels_of = [](const std::vector<Series>& v) {
    std::vector<int> y;
    for (const auto& s : v) y.push_back(*s.class_label);
    return y;
  };
  const auto res = tasks::classify_by_representation(model, split.train, labels_of(split.train), split.test,
                                                     labels_of(split.test), split.val, labels_of(split.val));
  auto r = ctx.report("classify", dataset_name(o));
  r.metrics["accuracy"] = res.accuracy;
  r.metrics["svm_c"] = res.C;
  r.metrics["test_series"] = static_cast<double>(split.test.size());
  nlohmann::json pred = nlohmann::json::object();
  for (std::size_t i = 0; i < split.test.size(); ++i) pred[split.test[i].name] = res.predictions[i];
  r.per_series = pred;
  r.write(ctx.out_dir() / "report.json");
  return 0;
}

int run_probe(Context& ctx) {
  const auto& o = ctx.opt;
  if (o.ckpt.empty()) throw UsageError("--ckpt is required");
  const auto model = load_checkpoint(o.ckpt);
  const auto out = ctx.out_dir();
  const auto want = [&](const char* name) { return o.probe == "all" || o.probe == name; };
  if (!(want("embedding") || want("frequency-error") || want("mask-stats") || want("zero-vs-mask"))) {
    throw UsageError("unknown probe '" + o.probe + "'");
  }
  auto r = ctx.report("probe", o.data.empty() ? "synthetic" : o.data);
  if (want("embedding")) {
    std::vector<data::SineKind> kinds;
    if (o.kind == "all") {
      kinds = {data::SineKind::trend, data::SineKind::amplitude, data::SineKind::frequency, data::SineKind::baseline,
               data::SineKind::phase};
    } else {
      kinds = {data::parse_sine_kind(o.kind)};
    }
    for (auto k : kinds) {
      const auto grid = probes::default_grid(k, o.points);
      const auto suite = probes::sinusoid_embedding_suite(model, k, grid, o.noise, o.seed);
      probes::write_suite(suite, out);
      const std::string key = "embedding_" + std::string(data::to_string(k));
      r.metrics[key + "_share_pc1"] = suite.explained_share.at(0);
      r.metrics[key + "_share_pc2"] = suite.explained_share.size() > 1 ? suite.explained_share[1] : 0.0;
    }
  }
  if (want("frequency-error")) {
    const auto grid = probes::default_grid(data::SineKind::frequency, o.points);
    const auto curve = probes::frequency_error_curve(model, grid, 0.0, o.seed, o.mask_ratio);
    probes::write_curve(curve, out);
    r.metrics["frequency_error_spearman"] = curve.spearman;
  }
  if (want("mask-stats")) {
    const auto st = probes::mask_embedding_stats(model);
    r.metrics["mask_mean"] = st.mean;
    r.metrics["mask_std"] = st.stdev;
    r.metrics["mask_ks"] = st.ks_statistic;
    r.metrics["mask_dimension"] = static_cast<double>(st.dimension);
  }
  if (want("zero-vs-mask")) {
    std::vector<Series> sample;
    if (o.data.empty()) {
      data::CorpusSpec cs;
      cs.n_series = static_cast<std::size_t>(o.sample);
      cs.length = static_cast<std::size_t>(model.config.seq_len);
      cs.seed = o.seed;
      sample = data::synth_corpus(cs);
    } else {
      sample = load_series(o.data);
    }
    const auto z = probes::zero_vs_mask_probe(model, sample, o.mask_ratio, o.seed);
    r.metrics["mask_token_mse"] = z.mean_mask_token;
    r.metrics["zero_fill_mse"] = z.mean_zero_fill;
    r.metrics["unmasked_input_gap"] = z.unmasked_input_gap;
  }
  r.write(out / "report.json");
  return 0;
}

int run_eval_metrics(Context& ctx) {
  const auto& o = ctx.opt;
  if (o.scores.empty() || o.labels.empty()) throw UsageError("--scores and --labels are required");
  const auto scores = read_column(o.scores);
  const auto labels = data::load_labels(o.labels);
  if (scores.size() != labels.size()) {
    throw DimensionError("scores have " + std::to_string(scores.size()) + " rows, labels " +
                         std::to_string(labels.size()));
  }
  auto r = ctx.report("eval-metrics", o.scores);
  put_detection_metrics(r, scores, labels, o.buffer, "");
  r.write(ctx.out_dir() / "report.json");
  return 0;
}

// ---------------------------------------------------------------------------

std::string to_flag_value(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number()) return v.dump();
  throw UsageError("run config values must be strings, numbers or booleans");
}

std::optional<std::string> scan_flag(int argc, char** argv, const std::string& flag) {
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == flag && i + 1 < argc) return std::string(argv[i + 1]);
    if (a.starts_with(flag + "=")) return a.substr(flag.size() + 1);
  }
  return std::nullopt;
}

int dispatch(int argc, char** argv) {
  Context ctx;
  Options& o = ctx.opt;
  CLI::App app{"moment-mini: masked time-series pre-training, task adapters, metrics and probes"};
  app.set_version_flag("--version", std::string(MOMENT_VERSION));
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  std::map<std::string, int (*)(Context&)> handlers;
  const auto add = [&](const std::string& name, const std::string& help, int (*fn)(Context&)) {
    CLI::App* s = app.add_subcommand(name, help);
    s->add_option("--out", o.out, "output directory");
    s->add_option("--seed", o.seed, "random seed (falls back to MOMENT_MINI_SEED, then 13)");
    s->add_option("--run-config", o.run_config, "JSON file of flag values; explicit flags take precedence");
    s->add_option("--workers", o.workers, "parallel workers across independent series")->check(CLI::PositiveNumber);
    handlers[name] = fn;
    return s;
  };

  auto* pre = add("pretrain", "masked-reconstruction pre-training", &run_pretrain);
  pre->add_option("--config", o.config, "model preset (tiny|small|base) or JSON file");
  pre->add_option("--data", o.data, "CSV file or directory of CSV files");
  pre->add_option("--synthetic", o.synthetic, "use a synthetic corpus of N series instead of --data");
  pre->add_option("--steps", o.steps, "maximum optimizer steps");
  pre->add_option("--batch", o.batch, "batch size");
  pre->add_option("--epochs", o.epochs, "maximum epochs (<= 0: no epoch bound)");
  pre->add_option("--lr-init", o.lr_init, "initial learning rate");
  pre->add_option("--lr-final", o.lr_final, "final learning rate");
  pre->add_option("--mask-ratio", o.mask_ratio, "fraction of patches masked");

  auto* fin = add("finetune", "linear probing or end-to-end fine-tuning of a head", &run_finetune);
  fin->add_option("--ckpt", o.ckpt, "checkpoint directory");
  fin->add_option("--data", o.data, "CSV file or directory");
  fin->add_option("--synthetic", o.synthetic, "use a synthetic corpus of N series");
  fin->add_option("--head", o.head, "forecast|reconstruction");
  fin->add_option("--horizon", o.horizon, "forecast horizon H");
  fin->add_option("--stride", o.stride, "training window stride (default H)");
  fin->add_option("--epochs", o.epochs, "probe epochs")->default_val(20);
  fin->add_option("--batch", o.batch, "batch size")->default_val(32);
  fin->add_option("--lr-init", o.lr_init, "initial learning rate")->default_val(1e-3);
  fin->add_option("--lr-final", o.lr_final, "final learning rate")->default_val(1e-4);
  fin->add_option("--mask-ratio", o.mask_ratio, "mask ratio for reconstruction probing");
  fin->add_flag("--full", o.full, "train every parameter instead of only the head");

  auto* fc = add("forecast", "forecast the test split", &run_forecast);
  fc->add_option("--ckpt", o.ckpt, "checkpoint directory");
  fc->add_option("--data", o.data, "CSV file or directory");
  fc->add_option("--synthetic", o.synthetic, "use a synthetic corpus of N series");
  fc->add_option("--horizon", o.horizon, "forecast horizon H");
  fc->add_option("--mode", o.mode, "zero-shot|head");

  auto* imp = add("impute", "zero-shot imputation of hidden blocks", &run_impute);
  imp->add_option("--ckpt", o.ckpt, "checkpoint directory");
  imp->add_option("--data", o.data, "CSV file or directory");
  imp->add_option("--synthetic", o.synthetic, "use a synthetic corpus of N series");
  imp->add_option("--ratio", o.ratio, "fraction of blocks hidden (0.125, 0.25, 0.375, 0.5)");

  auto* det = add("detect", "reconstruction-error anomaly detection", &run_detect);
  det->add_option("--ckpt", o.ckpt, "checkpoint directory");
  det->add_option("--data", o.data, "CSV file");
  det->add_option("--labels", o.labels, "one 0/1 label per row");
  det->add_flag("--baselines", o.baselines, "also score with k-NN (k=5)");
  det->add_option("--knn-window", o.knn_window, "k-NN window length");
  det->add_option("--buffer", o.buffer, "largest VUS buffer width");

  auto* cls = add("classify", "RBF-SVM on sequence representations", &run_classify);
  cls->add_option("--ckpt", o.ckpt, "checkpoint directory");
  cls->add_option("--data", o.data, "CSV file or directory, one series per column");
  cls->add_option("--classes", o.classes, "series_name,class rows");

  auto* pr = add("probe", "interpretability probes", &run_probe);
  pr->add_option("--ckpt", o.ckpt, "checkpoint directory");
  pr->add_option("--probe", o.probe, "all|embedding|frequency-error|mask-stats|zero-vs-mask");
  pr->add_option("--kind", o.kind, "synthetic family for the embedding suite, or 'all'");
  pr->add_option("--points", o.points, "grid points");
  pr->add_option("--noise", o.noise, "noise sigma of the embedding suite");
  pr->add_option("--mask-ratio", o.mask_ratio, "mask ratio");
  pr->add_option("--data", o.data, "series for the zero-vs-mask probe (default: synthetic corpus)");
  pr->add_option("--sample", o.sample, "synthetic sample size for zero-vs-mask");

  auto* em = add("eval-metrics", "grade an external score file", &run_eval_metrics);
  em->add_option("--scores", o.scores, "one score per row");
  em->add_option("--labels", o.labels, "one 0/1 label per row");
  em->add_option("--buffer", o.buffer, "largest VUS buffer width");

  // Run-config values become option defaults so explicit flags win.
  bool seed_in_config = false;
  if (argc > 1 && handlers.contains(argv[1])) {
    if (const auto path = scan_flag(argc, argv, "--run-config")) {
      std::ifstream in(*path);
      if (!in) throw UsageError("cannot read run config '" + *path + "'");
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(in);
      } catch (const nlohmann::json::exception& e) {
        throw UsageError("run config '" + *path + "': " + e.what());
      }
      if (!j.is_object()) throw UsageError("run config must be a JSON object");
      CLI::App* sub = app.get_subcommand(argv[1]);
      for (const auto& [key, value] : j.items()) {
        if (key == "command") {
          if (value != argv[1]) throw UsageError("run config is for command '" + to_flag_value(value) + "'");
          continue;
        }
        CLI::Option* opt = sub->get_option_no_throw("--" + key);
        if (opt == nullptr || key == "run-config") throw UsageError("unknown run config key '" + key + "'");
        opt->default_val(to_flag_value(value));
        seed_in_config = seed_in_config || key == "seed";
      }
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  CLI::App* sub = app.get_subcommands().front();
  ctx.sub = sub;
  // Several subcommands share fields with different defaults; restore this
  // subcommand's default wherever no flag was given.
  for (CLI::Option* opt : sub->get_options()) {
    if (opt->count() == 0 && !opt->get_default_str().empty()) opt->default_val(opt->get_default_str());
  }
  if (sub->get_option("--seed")->count() == 0 && !seed_in_config) {
    if (const char* env = std::getenv("MOMENT_MINI_SEED")) {
      try {
        o.seed = std::stoull(env);
      } catch (const std::exception&) {
        throw UsageError("MOMENT_MINI_SEED must be a non-negative integer");
      }
    }
  }
  return handlers.at(sub->get_name())(ctx);
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return dispatch(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const moment::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
