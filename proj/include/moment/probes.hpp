#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "moment/data.hpp"
#include "moment/model.hpp"

namespace moment::probes {

// Default c grids: frequency 1..32, trend log-spaced over [1/8, 8], amplitude
// log-spaced over [1/8, 32], baseline linear over [-8, 8], phase [0, 2pi).
std::vector<double> default_grid(data::SineKind kind, int points = 32);

struct EmbeddingSuite {
  data::SineKind kind{};
  std::vector<double> c;
  Eigen::MatrixXd coords;  // one row per grid point: pc1, pc2
  std::vector<double> explained_share;
};

// Synthesizes one series per c, takes its sequence representation and
// projects the suite onto its top two principal components.
EmbeddingSuite sinusoid_embedding_suite(const ModelWeights<float>& model, data::SineKind kind,
                                        std::span<const double> grid, double noise_sigma = 0.1,
                                        std::uint64_t seed = 13);

// `embedding_<kind>.csv` (c,pc1,pc2) and `embedding_<kind>.svg`.
void write_suite(const EmbeddingSuite& suite, const std::filesystem::path& out_dir);

// Minimal scatter plot; points colored along a blue-to-red ramp by `color`.
std::string scatter_svg(std::span<const double> x, std::span<const double> y, std::span<const double> color,
                        const std::string& title);

// Spearman rank correlation (average ranks for ties).
double spearman(std::span<const double> a, std::span<const double> b);

struct FrequencyCurve {
  std::vector<double> c;
  std::vector<double> mse;
  double spearman = 0.0;
};

// Masked-reconstruction MSE (normalized space) of sin(2 pi c t / T) under one
// seeded 30% patch mask shared by every grid point.
FrequencyCurve frequency_error_curve(const ModelWeights<float>& model, std::span<const double> grid,
                                     double noise_sigma = 0.0, std::uint64_t seed = 13, double mask_ratio = 0.30);

// `frequency_error_frequency.csv` (c,mse).
void write_curve(const FrequencyCurve& curve, const std::filesystem::path& out_dir);

struct MaskStats {
  double mean = 0.0;
  double stdev = 0.0;
  double ks_statistic = 0.0;  // sup |F_n - Phi|
  std::size_t dimension = 0;
};

double normal_cdf(double x);
double ks_statistic_normal(std::span<const double> sample);
MaskStats mask_embedding_stats(const ModelWeights<float>& model);

struct ZeroVsMask {
  std::vector<double> mask_token_mse;  // per series
  std::vector<double> zero_fill_mse;
  double mean_mask_token = 0.0;
  double mean_zero_fill = 0.0;
  // Largest |difference| between the two modes' inputs at unmasked timesteps.
  double unmasked_input_gap = 0.0;
};

// Each series is fitted to the window and masked with one seeded plan; the
// plan is reconstructed with the mask embedding and with zero filling.
ZeroVsMask zero_vs_mask_probe(const ModelWeights<float>& model, std::span<const Series> sample,
                              double mask_ratio = 0.30, std::uint64_t seed = 13);

}  // namespace moment::probes
