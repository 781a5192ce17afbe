#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <limits>
#include <random>

#include "fd.hpp"
#include "moment/autodiff.hpp"
#include "moment/optim.hpp"

using namespace moment;
using fdcheck::Mat;
using fdcheck::random_matrix;
using T = Tensor<double>;
using Leaves = std::vector<T>;

namespace {

constexpr int kTrials = 100;
constexpr double kTol = 1e-3;

Mat m2(std::initializer_list<std::initializer_list<double>> rows) {
  Mat m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& r : rows) {
    Eigen::Index j = 0;
    for (double v : r) m(i, j++) = v;
    ++i;
  }
  return m;
}

// Scalar loss with a nontrivial gradient: <out, W> for a fixed random W.
T project(Tape<double>& tape, const T& out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(out, tape.constant(random_matrix(rng, out.rows(), out.cols()))));
}

// Runs `trials` randomized FD checks; inputs are regenerated per trial.
template <typename MakeInputs>
double worst_over_trials(const fdcheck::Build& build, MakeInputs make, int trials = kTrials) {
  std::mt19937_64 rng(2024);
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) worst = std::max(worst, fdcheck::max_relative_error(build, make(rng)));
  return worst;
}

}  // namespace

TEST_CASE("matmul examples") {
  Tape<double> tape;
  auto a = tape.constant(m2({{1, 2}, {3, 4}}));
  CHECK(matmul(tape.constant(Mat::Identity(2, 2)), a).value() == a.value());
  CHECK(matmul(a, tape.constant(Mat::Zero(2, 1))).value() == Mat::Zero(2, 1));
  CHECK(matmul(a, tape.constant(m2({{5, 6}, {7, 8}}))).value() == m2({{19, 22}, {43, 50}}));
  CHECK_THROWS_AS(matmul(a, tape.constant(Mat::Zero(3, 1))), DimensionError);
}

TEST_CASE("softmax examples") {
  Tape<double> tape;
  auto y = softmax_lastdim(tape.constant(m2({{0, 0}, {1000, 0}, {std::log(1.0), std::log(3.0)}})));
  CHECK(y.value()(0, 0) == doctest::Approx(0.5));
  CHECK(y.value()(1, 0) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(y.value()(1, 1) == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(y.value()(2, 0) == doctest::Approx(0.25));
  CHECK(y.value()(2, 1) == doctest::Approx(0.75));
  CHECK(y.value().allFinite());

  std::mt19937_64 rng(3);
  auto r = softmax_lastdim(tape.constant(random_matrix(rng, 20, 7, 10.0)));
  for (Eigen::Index i = 0; i < 20; ++i) CHECK(std::abs(r.value().row(i).sum() - 1.0) < 1e-6);
}

TEST_CASE("scale_norm examples") {
  Tape<double> tape;
  auto ones = tape.constant(Mat::Ones(1, 2));
  auto y = scale_norm(tape.constant(m2({{3, 4}})), ones, 0.0);
  CHECK(y.value()(0, 0) == doctest::Approx(0.84853).epsilon(1e-5));
  CHECK(y.value()(0, 1) == doctest::Approx(1.13137).epsilon(1e-5));

  auto c = scale_norm(tape.constant(m2({{-2.5, -2.5, -2.5}})), tape.constant(Mat::Ones(1, 3)), 0.0);
  for (int j = 0; j < 3; ++j) CHECK(c.value()(0, j) == doctest::Approx(-1.0));

  auto z = scale_norm(tape.constant(m2({{3, 4}})), tape.constant(Mat::Zero(1, 2)), 1e-6);
  CHECK(z.value() == Mat::Zero(1, 2));
  CHECK_THROWS_AS(scale_norm(tape.constant(m2({{3, 4}})), tape.constant(Mat::Ones(1, 3))), DimensionError);
}

TEST_CASE("backward examples and contract") {
  {
    Tape<double> tape;
    auto x = tape.variable(m2({{3}}));
    tape.backward(square(x));
    CHECK(x.grad()(0, 0) == doctest::Approx(6.0));
  }
  {
    std::mt19937_64 rng(5);
    Tape<double> tape;
    auto x = tape.variable(random_matrix(rng, 1, 6));
    tape.backward(sum(softmax_lastdim(x)));
    CHECK(x.grad().cwiseAbs().maxCoeff() < 1e-12);
  }
  {
    Tape<double> tape;
    auto x = tape.variable(Mat::Ones(2, 2));
    CHECK_THROWS_AS(tape.backward(x), ContractError);
    auto l = sum(x);
    tape.backward(l);
    CHECK_THROWS_AS(tape.backward(l), ContractError);
  }
  {
    // gradients accumulate over repeated use of one leaf
    Tape<double> tape;
    auto x = tape.variable(m2({{2}}));
    tape.backward(mul(x, x) + x);
    CHECK(x.grad()(0, 0) == doctest::Approx(5.0));
  }
}

TEST_CASE("finite differences: elementwise and reductions") {
  auto two = [](Eigen::Index r, Eigen::Index c) {
    return [r, c](std::mt19937_64& rng) { return std::vector<Mat>{random_matrix(rng, r, c), random_matrix(rng, r, c)}; };
  };
  auto one = [](Eigen::Index r, Eigen::Index c) {
    return [r, c](std::mt19937_64& rng) { return std::vector<Mat>{random_matrix(rng, r, c)}; };
  };
  CHECK(worst_over_trials([](Tape<double>& t, const Leaves& x) { return project(t, add(x[0], x[1]), 1); },
                          two(3, 4)) < kTol);
  CHECK(worst_over_trials([](Tape<double>& t, const Leaves& x) { return project(t, sub(x[0], x[1]), 2); },
                          two(3, 4)) < kTol);
  CHECK(worst_over_trials([](Tape<double>& t, const Leaves& x) { return project(t, mul(x[0], x[1]), 3); },
                          two(3, 4)) < kTol);
  CHECK(worst_over_trials([](Tape<double>& t, const Leaves& x) { return project(t, scale(x[0], -1.7), 4); },
                          one(3, 4)) < kTol);
  CHECK(worst_over_trials([](Tape<double>& t, const Leaves& x) { return project(t, square(x[0]), 5); },
                          one(3, 4)) < kTol);
  CHECK(worst_over_trials([](Tape<double>&, const Leaves& x) { return sum(square(x[0])); }, one(4, 3)) < kTol);
  CHECK(worst_over_trials([](Tape<double>&, const Leaves& x) { return mean(square(x[0])); }, one(4, 3)) < kTol);
  CHECK(worst_over_trials(
            [](Tape<double>& t, const Leaves& x) { return project(t, reshape(square(x[0]), 2, 6), 6); }, one(3, 4)) <
        kTol);
  CHECK(worst_over_trials(
            [](Tape<double>& t, const Leaves& x) { return project(t, add_row(x[0], x[1]), 7); },
            [](std::mt19937_64& rng) { return std::vector<Mat>{random_matrix(rng, 5, 3), random_matrix(rng, 1, 3)}; }) <
        kTol);
}

TEST_CASE("finite differences: relu away from the kink") {
  auto make = [](std::mt19937_64& rng) {
    Mat x = random_matrix(rng, 4, 5);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      double& v = x.data()[i];
      if (std::abs(v) < 0.01) v = v < 0 ? -0.01 : 0.01;
    }
    return std::vector<Mat>{x};
  };
  CHECK(worst_over_trials([](Tape<double>& t, const Leaves& x) { return project(t, relu(x[0]), 8); }, make) < kTol);
}

TEST_CASE("finite differences: matmul, softmax, scale_norm, substitute_rows") {
  CHECK(worst_over_trials([](Tape<double>& t, const Leaves& x) { return project(t, matmul(x[0], x[1]), 9); },
                          [](std::mt19937_64& rng) {
                            return std::vector<Mat>{random_matrix(rng, 3, 5), random_matrix(rng, 5, 2)};
                          }) < kTol);
  CHECK(worst_over_trials([](Tape<double>& t, const Leaves& x) { return project(t, softmax_lastdim(x[0]), 10); },
                          [](std::mt19937_64& rng) { return std::vector<Mat>{random_matrix(rng, 4, 6, 2.0)}; }) < kTol);
  CHECK(worst_over_trials([](Tape<double>& t, const Leaves& x) { return project(t, scale_norm(x[0], x[1]), 11); },
                          [](std::mt19937_64& rng) {
                            return std::vector<Mat>{random_matrix(rng, 4, 6), random_matrix(rng, 1, 6)};
                          }) < kTol);
  const std::vector<std::uint8_t> keep{1, 0, 1, 0, 0};
  CHECK(worst_over_trials(
            [&](Tape<double>& t, const Leaves& x) { return project(t, substitute_rows(x[0], x[1], keep), 12); },
            [](std::mt19937_64& rng) {
              return std::vector<Mat>{random_matrix(rng, 5, 3), random_matrix(rng, 1, 3)};
            }) < kTol);
}

TEST_CASE("finite differences: multi-head attention with relative bias") {
  const int block = 4, heads = 2, buckets = 5;
  Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> bucket_of(block, block);
  for (int i = 0; i < block; ++i)
    for (int j = 0; j < block; ++j) bucket_of(i, j) = std::min(std::abs(i - j) + (j > i ? 2 : 0), buckets - 1);
  auto build = [&](Tape<double>& t, const Leaves& x) {
    return project(t, multi_head_attention(x[0], x[1], x[2], x[3], bucket_of, heads, block), 13);
  };
  auto make = [&](std::mt19937_64& rng) {
    return std::vector<Mat>{random_matrix(rng, 2 * block, 6), random_matrix(rng, 2 * block, 6),
                            random_matrix(rng, 2 * block, 6), random_matrix(rng, buckets, heads)};
  };
  CHECK(worst_over_trials(build, make) < kTol);

  Tape<double> tape;
  std::mt19937_64 rng(1);
  AttentionCapture<double> cap;
  auto q = tape.constant(random_matrix(rng, 2 * block, 6));
  multi_head_attention(q, q, q, tape.constant(random_matrix(rng, buckets, heads)), bucket_of, heads, block, &cap);
  REQUIRE(cap.probabilities.size() == 4u);
  for (const auto& p : cap.probabilities)
    for (int i = 0; i < block; ++i) CHECK(std::abs(p.row(i).sum() - 1.0) < 1e-12);
  CHECK_THROWS_AS(multi_head_attention(q, q, q, tape.constant(random_matrix(rng, buckets, heads)), bucket_of, 4, block),
                  DimensionError);
}

TEST_CASE("finite differences: two-layer MLP") {
  auto build = [](Tape<double>& t, const Leaves& p) {
    auto h = relu(add_row(matmul(p[0], p[1]), p[2]));
    auto y = add_row(matmul(h, p[3]), p[4]);
    return mean(square(y - t.constant(Mat::Constant(y.rows(), y.cols(), 0.3))));
  };
  // central differences are meaningless within h of the relu kink
  auto make = [](std::mt19937_64& rng) {
    for (;;) {
      std::vector<Mat> p{random_matrix(rng, 6, 4), random_matrix(rng, 4, 8), random_matrix(rng, 1, 8),
                         random_matrix(rng, 8, 2), random_matrix(rng, 1, 2)};
      Mat pre = (p[0] * p[1]).rowwise() + p[2].row(0);
      if (pre.cwiseAbs().minCoeff() > 0.01) return p;
    }
  };
  CHECK(worst_over_trials(build, make) < kTol);
}

TEST_CASE("adamw examples") {
  AdamW<double> opt(AdamWHyper{0.0, 0.9, 0.999, 1e-8});
  ParameterMap<double> params{{"w", Mat::Zero(1, 1)}};
  ParameterMap<double> grads{{"w", Mat::Ones(1, 1)}};
  opt.step(params, grads, 0.1);
  CHECK(params["w"](0, 0) == doctest::Approx(-0.1).epsilon(1e-6));
  CHECK(opt.step_count() == 1);
  CHECK(opt.first_moment().at("w").rows() == 1);

  AdamW<double> zero(AdamWHyper{0.0, 0.9, 0.999, 1e-8});
  ParameterMap<double> p2{{"w", m2({{1.5, -2.0}})}};
  ParameterMap<double> g2{{"w", Mat::Zero(1, 2)}};
  for (int i = 0; i < 5; ++i) zero.step(p2, g2, 0.1);
  CHECK(p2["w"] == m2({{1.5, -2.0}}));
  CHECK(zero.step_count() == 5);

  AdamW<double> decay;  // lambda 0.05
  ParameterMap<double> p3{{"w", Mat::Ones(1, 1)}};
  ParameterMap<double> g3{{"w", Mat::Zero(1, 1)}};
  decay.step(p3, g3, 0.1);
  CHECK(p3["w"](0, 0) == doctest::Approx(0.995).epsilon(1e-12));
}

TEST_CASE("adamw errors") {
  AdamW<double> opt;
  ParameterMap<double> params{{"encoder.w", Mat::Zero(2, 2)}};
  ParameterMap<double> grads{{"encoder.w", Mat::Zero(2, 2)}};
  grads["encoder.w"](1, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    opt.step(params, grads, 0.1);
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    CHECK(std::string(e.what()).find("encoder.w") != std::string::npos);
  }
  CHECK(opt.step_count() == 0);
  ParameterMap<double> ok{{"encoder.w", Mat::Zero(2, 2)}};
  CHECK_THROWS_AS(opt.step(params, ok, 0.0), ContractError);
  ParameterMap<double> wrong{{"encoder.w", Mat::Zero(3, 2)}};
  CHECK_THROWS_AS(opt.step(params, wrong, 0.1), DimensionError);
  ParameterMap<double> unknown{{"other", Mat::Zero(2, 2)}};
  CHECK_THROWS_AS(opt.step(params, unknown, 0.1), ContractError);
}

TEST_CASE("clip_global_norm examples") {
  ParameterMap<double> g{{"a", m2({{3}})}, {"b", m2({{4}})}};
  CHECK(clip_global_norm(g, 5.0) == doctest::Approx(5.0));
  CHECK(g["a"](0, 0) == 3.0);
  CHECK(g["b"](0, 0) == 4.0);

  ParameterMap<double> h{{"a", m2({{6}})}, {"b", m2({{8}})}};
  clip_global_norm(h, 5.0);
  CHECK(h["a"](0, 0) == doctest::Approx(3.0));
  CHECK(h["b"](0, 0) == doctest::Approx(4.0));

  ParameterMap<double> z{{"a", Mat::Zero(2, 2)}};
  clip_global_norm(z);
  CHECK(z["a"] == Mat::Zero(2, 2));
  CHECK_THROWS_AS(clip_global_norm(z, 0.0), ContractError);
}

TEST_CASE("clip_global_norm never increases the norm") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> scale(0.01, 20.0);
  for (int t = 0; t < 200; ++t) {
    ParameterMap<float> g{{"a", random_matrix(rng, 3, 3, scale(rng)).cast<float>()},
                          {"b", random_matrix(rng, 1, 5, scale(rng)).cast<float>()}};
    const double before = global_norm(g);
    const double max_norm = scale(rng);
    clip_global_norm(g, max_norm);
    const double after = global_norm(g);
    CHECK(after <= before + 1e-6);
    CHECK(after <= max_norm + 1e-5 * std::max(1.0, max_norm));
  }
}

TEST_CASE("cosine schedule") {
  CosineSchedule s{1e-4, 1e-5, 1000};
  CHECK(cosine_lr(0, s) == 1e-4);
  CHECK(cosine_lr(1000, s) == 1e-5);
  CHECK(cosine_lr(500, s) == doctest::Approx(5.5e-5).epsilon(1e-12));
  double prev = cosine_lr(0, s);
  for (long k = 1; k <= 1000; ++k) {
    const double lr = cosine_lr(k, s);
    CHECK(lr <= prev);
    prev = lr;
  }
  CHECK_THROWS_AS(cosine_lr(-1, s), ContractError);
  CHECK_THROWS_AS(cosine_lr(1001, s), ContractError);
  CHECK_THROWS_AS(cosine_lr(0, CosineSchedule{1e-4, 1e-5, 0}), ContractError);
}

TEST_CASE("forward and backward are bit-identical across runs") {
  auto run = [] {
    std::mt19937_64 rng(99);
    Tape<float> tape;
    auto x = tape.variable(random_matrix(rng, 8, 6).cast<float>());
    auto w = tape.variable(random_matrix(rng, 6, 6).cast<float>());
    auto g = tape.variable(Matrix<float>::Ones(1, 6));
    auto y = softmax_lastdim(scale_norm(matmul(x, w), g));
    auto loss = mean(square(y));
    tape.backward(loss);
    return std::make_tuple(Matrix<float>(y.value()), Matrix<float>(x.grad()), Matrix<float>(w.grad()));
  };
  auto a = run();
  auto b = run();
  CHECK(std::get<0>(a) == std::get<0>(b));
  CHECK(std::get<1>(a) == std::get<1>(b));
  CHECK(std::get<2>(a) == std::get<2>(b));
}
