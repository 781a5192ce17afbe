#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "moment/model.hpp"
#include "moment/pretrain.hpp"
#include "moment/series.hpp"

namespace moment::tasks {

// Consecutive non-overlapping windows of length `window` from the start of the
// series; a short final chunk is left-padded.
std::vector<Series> split_windows(const Series& x, std::size_t window);

// The most recent `window` points, left-padded when shorter.
Series recent_window(const Series& history, std::size_t window);

// ---------------------------------------------------------------------------
// Imputation

struct ImputationSpec {
  double ratio = 0.25;  // 0.125, 0.25, 0.375 or 0.5 in the benchmark protocol
  int block_len = 8;
  std::uint64_t seed = 13;

  void validate() const;
};

// Standard masking ratios of the imputation protocol.
std::vector<double> imputation_ratios();

struct MaskedSeries {
  Series masked;                     // hidden timesteps set unobserved (value 0)
  std::vector<std::uint8_t> hidden;  // 1 where the block mask removed an observation
};

// Hides floor(ratio * eligible) blocks, chosen uniformly without replacement
// among the block-grid slots of every window that are fully observed. The grid
// is the patch grid of split_windows(x, window).
MaskedSeries mask_blocks(const Series& x, const ImputationSpec& spec, std::size_t window);

// Missing entries are filled from the denormalized reconstruction; observed
// entries are copied through unchanged.
Series zero_shot_impute(const ModelWeights<float>& model, const Series& x);

struct ImputationScores {
  double mse = 0.0;
  double mae = 0.0;
  std::size_t count = 0;
};

// Errors at the hidden timesteps of `masked` against `truth`, in the scale of
// the RevIN statistics of each truth window (so series of different scales
// are comparable).
ImputationScores score_imputation(const Series& truth, const MaskedSeries& masked, const Series& filled,
                                  std::size_t window);

// ---------------------------------------------------------------------------
// Anomaly detection

struct AnomalySpec {
  int window = 512;
  std::size_t downsample_threshold = 2560;
  std::size_t downsample_factor = 10;
  double sweep_ratio = 0.30;

  void validate(const ModelConfig& config) const;
};

// Number of masking rounds: ceil(1 / ratio). Round k masks patches i with
// i % rounds == k.
int sweep_rounds(double ratio);
std::vector<PatchMaskPlan> sweep_plans(int n_patches, double ratio);

struct AnomalyResult {
  Series processed;  // after downsampling (labels downsampled too)
  std::vector<double> reconstruction;
  std::vector<double> scores;  // (x - x_hat)^2; 0 at unobserved timesteps
};

AnomalyResult detect_anomalies(const ModelWeights<float>& model, const Series& x, const AnomalySpec& spec = {});

// ---------------------------------------------------------------------------
// Forecasting

enum class ForecastMode { zero_shot, probed_head };

struct ForecastSpec {
  int lookback = 512;
  int horizon = 96;
  ForecastMode mode = ForecastMode::zero_shot;
};

// Examples whose forecast origins o satisfy max(begin, lookback) <= o and
// o + H <= end, stepping by `stride`; history is the `lookback` points before o.
std::vector<ForecastExample> forecast_examples_in_range(const Series& x, std::size_t begin, std::size_t end,
                                                        int lookback, int horizon, int stride);

// Number of trailing masked patches used for a zero-shot horizon.
int forecast_tail_patches(int horizon, int patch_len);

// Trailing ceil(H/P) patches masked, the preceding region filled with the most
// recent history; the first H reconstructed tail values, denormalized with
// statistics of the history region. Throws HorizonError when H > T/2.
std::vector<double> zero_shot_short_forecast(const ModelWeights<float>& model, const Series& history, int horizon);
std::vector<std::vector<double>> zero_shot_short_forecast(const ModelWeights<float>& model,
                                                          std::span<const Series> histories, int horizon);

// Forecasting head applied to the most recent T points. Throws ConfigError
// when no head is attached or its horizon differs from `horizon`.
std::vector<double> long_forecast(const ModelWeights<float>& model, const Series& history, int horizon);
std::vector<std::vector<double>> long_forecast(const ModelWeights<float>& model, std::span<const Series> histories,
                                               int horizon);

// ---------------------------------------------------------------------------
// Classification

// One row per series: masked mean of final-layer patch embeddings over the
// non-padded patches of fit_to_window(series).
Eigen::MatrixXd representations(const ModelWeights<float>& model, std::span<const Series> series);

struct SvmSelection {
  std::vector<int> predictions;
  double C = 1.0;
  double validation_accuracy = 0.0;
};

// RBF-SVM on representation rows. C is picked from the grid by accuracy on
// (val_x, val_y) or, when empty, on a stratified holdout of the training
// rows; the final model is refit on all training rows.
SvmSelection select_and_predict(const Eigen::MatrixXd& train_x, std::span<const int> train_y,
                                const Eigen::MatrixXd& test_x, const Eigen::MatrixXd& val_x = {},
                                std::span<const int> val_y = {}, std::uint64_t seed = 13);

struct ClassificationResult {
  double accuracy = 0.0;
  std::vector<int> predictions;
  double C = 1.0;
};

// Predictions are made before test labels are consulted; a test class absent
// from training raises StratificationError.
ClassificationResult classify_by_representation(const ModelWeights<float>& model, std::span<const Series> train,
                                                std::span<const int> train_labels, std::span<const Series> test,
                                                std::span<const int> test_labels, std::span<const Series> val = {},
                                                std::span<const int> val_labels = {});

}  // namespace moment::tasks
