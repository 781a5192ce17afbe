#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include "moment/data.hpp"
#include "moment/pretrain.hpp"

using namespace moment;

namespace {

ModelConfig short_config() {
  ModelConfig c = ModelConfig::named("tiny");
  c.seq_len = 64;
  return c;
}

std::vector<Series> corpus(std::size_t n, std::size_t length, std::uint64_t seed) {
  data::CorpusSpec spec;
  spec.n_series = n;
  spec.length = length;
  spec.seed = seed;
  return data::synth_corpus(spec);
}

double tail_mean(const TrainLog& log, std::size_t k) {
  const auto& e = log.entries;
  double s = 0;
  for (std::size_t i = e.size() - k; i < e.size(); ++i) s += e[i].loss;
  return s / static_cast<double>(k);
}

bool non_head_identical(const ModelWeights<float>& a, const ModelWeights<float>& b) {
  for (const auto& [name, m] : a.params)
    if (!param::is_head(name) && !(b.params.at(name) == m)) return false;
  return true;
}

}  // namespace

TEST_CASE("mask counts") {
  CHECK(mask_count(64, 0.3) == 19);
  CHECK(mask_count(10, 0.3) == 3);
  CHECK(mask_count(2, 0.3) == 1);
  std::mt19937_64 rng(1);
  for (int t = 0; t < 200; ++t) {
    auto plan = sample_patch_mask(64, 0.3, rng);
    CHECK(plan.size() == 64);
    CHECK(plan.masked_count() == 19);
  }
  CHECK(sample_patch_mask(3, 0.1, rng).masked_count() == 1);
  CHECK_THROWS_AS(sample_patch_mask(64, 0.0, rng), ContractError);
  CHECK_THROWS_AS(sample_patch_mask(64, 1.0, rng), ContractError);
}

TEST_CASE("mask sampling is seeded and uniform") {
  std::mt19937_64 a(7), b(7);
  CHECK(sample_patch_mask(64, 0.3, a).observed == sample_patch_mask(64, 0.3, b).observed);
  std::mt19937_64 rng(9);
  std::vector<int> hits(64, 0);
  const int draws = 20000;
  for (int t = 0; t < draws; ++t) {
    auto plan = sample_patch_mask(64, 0.3, rng);
    for (int i = 0; i < 64; ++i) hits[i] += plan.observed[i] == 0;
  }
  // each patch masked with probability 19/64
  const double p = 19.0 / 64.0, sd = std::sqrt(p * (1 - p) / draws);
  for (int h : hits) CHECK(std::abs(h / double(draws) - p) < 5 * sd);
}

TEST_CASE("masked mse examples") {
  std::vector<float> x(16, 0.5f);
  std::vector<std::uint8_t> obs(16, 1);
  PatchMaskPlan plan = PatchMaskPlan::all_observed(2);
  plan.observed[1] = 0;
  CHECK(masked_mse_loss(x, x, plan, obs, 8) == 0.0);
  auto y = x;
  for (int t = 8; t < 16; ++t) y[t] += 1.0f;
  for (int t = 0; t < 8; ++t) y[t] -= 7.0f;  // unmasked, ignored
  CHECK(masked_mse_loss(x, y, plan, obs, 8) == doctest::Approx(1.0));
  CHECK_THROWS_AS(masked_mse_loss(x, y, PatchMaskPlan::all_observed(2), obs, 8), ContractError);
  std::vector<std::uint8_t> none(16, 0);
  CHECK_THROWS_AS(masked_mse_loss(x, y, plan, none, 8), ContractError);
}

TEST_CASE("masked mse equals a brute-force loop and ignores unmasked outputs") {
  std::mt19937_64 rng(3);
  std::normal_distribution<float> g(0.0f, 1.0f);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 8, p = 4, t_len = n * p;
    std::vector<float> x(t_len), y(t_len);
    std::vector<std::uint8_t> obs(t_len);
    for (int t = 0; t < t_len; ++t) {
      x[t] = g(rng);
      y[t] = g(rng);
      obs[t] = rng() % 5 != 0;
    }
    auto plan = sample_patch_mask(n, 0.4, rng);
    double s = 0;
    int cnt = 0;
    for (int t = 0; t < t_len; ++t) {
      if (plan.observed[t / p] == 0 && obs[t]) {
        s += (double(x[t]) - double(y[t])) * (double(x[t]) - double(y[t]));
        ++cnt;
      }
    }
    if (cnt == 0) continue;
    const double got = masked_mse_loss(x, y, plan, obs, p);
    CHECK(got == doctest::Approx(s / cnt).epsilon(1e-9));
    auto y2 = y;
    for (int t = 0; t < t_len; ++t)
      if (plan.observed[t / p]) y2[t] += 100.0f * g(rng);
    CHECK(masked_mse_loss(x, y2, plan, obs, p) == got);
  }
}

TEST_CASE("tape loss agrees with the scalar loss") {
  auto c = short_config();
  auto w = ModelWeights<float>::initialize(c, 5);
  auto windows = corpus(4, 64, 2);
  std::mt19937_64 rng(4);
  std::vector<PatchMaskPlan> plans;
  for (std::size_t i = 0; i < windows.size(); ++i) plans.push_back(sample_patch_mask(8, 0.3, rng));
  auto batch = make_pretrain_batch<float>(windows, plans, c);
  Tape<float> tape;
  BoundParameters<float> p(tape, w.params);
  const double tape_loss = pretraining_loss(p, batch, c).value()(0, 0);

  auto rec = reconstruct(w, windows, plans);
  double s = 0, n = 0;
  for (std::size_t b = 0; b < windows.size(); ++b) {
    auto lt = loss_targets(windows[b], rec[b].window, c.patch_len);
    const double m = masked_mse_loss(lt.target, rec[b].normalized, rec[b].window.plan, windows[b].observed, c.patch_len);
    const double k = std::accumulate(lt.weight.begin(), lt.weight.end(), 0.0);
    s += m * k;
    n += k;
  }
  CHECK(tape_loss == doctest::Approx(s / n).epsilon(1e-5));
}

TEST_CASE("smoke training lowers the loss on three seeds") {
  auto data = corpus(64, 512, 21);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    PretrainConfig cfg;
    cfg.batch_size = 8;
    cfg.max_steps = 500;
    cfg.max_epochs = 0;
    cfg.seed = seed;
    auto res = pretrain(ModelWeights<float>::initialize(ModelConfig::named("tiny"), seed), data, cfg);
    REQUIRE(res.log.entries.size() == 500);
    CHECK(tail_mean(res.log, 20) < res.log.entries.front().loss);
    CHECK(res.log.entries.front().lr == 1e-4);
    CHECK(res.log.entries.back().lr == doctest::Approx(1e-5).epsilon(1e-12));
    for (std::size_t i = 1; i < res.log.entries.size(); ++i)
      CHECK(res.log.entries[i].step == res.log.entries[i - 1].step + 1);
  }
}

TEST_CASE("training is reproducible and epoch bounded") {
  auto data = corpus(10, 100, 5);
  PretrainConfig cfg;
  cfg.batch_size = 4;
  cfg.max_steps = 50;
  cfg.max_epochs = 2;
  auto init = ModelWeights<float>::initialize(short_config(), 8);
  auto a = pretrain(init, data, cfg);
  auto b = pretrain(init, data, cfg);
  REQUIRE(a.log.entries.size() == 6);  // ceil(10/4) * 2
  for (std::size_t i = 0; i < a.log.entries.size(); ++i) {
    CHECK(a.log.entries[i].loss == b.log.entries[i].loss);
    CHECK(a.log.entries[i].lr == b.log.entries[i].lr);
  }
  CHECK(a.weights.params == b.weights.params);
  CHECK(a.log.consumed_digest == b.log.consumed_digest);
  CHECK(a.log.consumed_digest.size() == 16);

  auto fewer = pretrain(init, std::span<const Series>(data).first(9), cfg);
  CHECK(fewer.log.consumed_digest != a.log.consumed_digest);

  cfg.seed = 99;
  auto c = pretrain(init, data, cfg);
  CHECK(c.log.entries[0].loss != a.log.entries[0].loss);
}

TEST_CASE("training errors") {
  PretrainConfig cfg;
  auto init = ModelWeights<float>::initialize(short_config(), 8);
  CHECK_THROWS_AS(pretrain(init, std::span<const Series>(), cfg), ContractError);

  auto data = corpus(4, 64, 1);
  auto broken = init;
  broken.params.at("head.reconstruction.weight")(0, 0) = std::numeric_limits<float>::quiet_NaN();
  try {
    pretrain(broken, data, cfg);
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    CHECK(std::string(e.what()).find("step 0") != std::string::npos);
  }
  std::vector<Series> tiny{Series(std::vector<float>(5, 1.0f), "short")};
  CHECK_THROWS_AS(pretrain(init, tiny, cfg), ContractError);

  PretrainConfig bad;
  bad.mask_ratio = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("train log csv") {
  TrainLog log;
  log.entries = {{0, 1e-4, 1.5}, {1, 1e-5, 1.25}};
  const auto path = std::filesystem::temp_directory_path() / "moment_train_log.csv";
  log.write_csv(path);
  std::ifstream in(path);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "step,lr,loss");
  CHECK(row.rfind("0,", 0) == 0);
  std::filesystem::remove(path);
}

TEST_CASE("linear probing freezes the encoder") {
  auto c = short_config();
  auto model = ModelWeights<float>::initialize(c, 3);
  auto windows = corpus(16, 64, 3);
  ProbeConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 8;

  auto rec = linear_probe(model, HeadKind::reconstruction, windows, {}, cfg);
  CHECK(non_head_identical(model, rec));
  CHECK(!(rec.params.at("head.reconstruction.weight") == model.params.at("head.reconstruction.weight")));

  CHECK_THROWS_AS(linear_probe(model, HeadKind::forecasting, windows, {}, cfg), ConfigError);

  auto with_head = model;
  with_head.attach_forecasting_head(16, 4);
  auto series = corpus(8, 200, 4);
  auto examples = make_forecast_examples(series, 64, 16, 16);
  REQUIRE(!examples.empty());
  const double before = forecast_head_mse(with_head, examples);
  cfg.epochs = 10;
  auto fc = linear_probe(with_head, HeadKind::forecasting, {}, examples, cfg);
  CHECK(non_head_identical(with_head, fc));
  CHECK(fc.params.at("head.reconstruction.weight") == with_head.params.at("head.reconstruction.weight"));
  CHECK(forecast_head_mse(fc, examples) <= before);

  cfg.epochs = 0;
  auto same = linear_probe(with_head, HeadKind::forecasting, {}, examples, cfg);
  CHECK(same.params == with_head.params);

  cfg.epochs = 2;
  cfg.freeze_encoder = false;
  auto full = linear_probe(with_head, HeadKind::forecasting, {}, examples, cfg);
  CHECK(!non_head_identical(with_head, full));
}

TEST_CASE("forecast examples") {
  std::vector<float> v(100);
  std::iota(v.begin(), v.end(), 0.0f);
  std::vector<Series> s{Series(v, "ramp")};
  auto ex = make_forecast_examples(s, 32, 8, 10);
  REQUIRE(!ex.empty());
  for (const auto& e : ex) {
    CHECK(e.future.size() == 8);
    // the future continues the history
    const auto& h = e.history.values;
    CHECK(e.future[0] == h.back() + 1.0f);
  }
  CHECK_THROWS_AS(make_forecast_examples(s, 32, 0, 10), ContractError);
}
