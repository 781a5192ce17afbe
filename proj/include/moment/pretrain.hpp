#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "moment/model.hpp"
#include "moment/optim.hpp"

namespace moment {

struct PretrainConfig {
  double mask_ratio = 0.30;
  int batch_size = 64;
  long max_steps = 2000;
  int max_epochs = 2;  // <= 0: bounded by max_steps only
  std::uint64_t seed = 13;
  CosineSchedule schedule{1e-4, 1e-5, 1};  // total_steps is derived from the run length
  double clip_norm = 5.0;
  AdamWHyper adam{};

  void validate() const;
};

struct TrainLogEntry {
  long step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainLog {
  std::vector<TrainLogEntry> entries;
  // Digest of the sorted names of every series the run consumed.
  std::string consumed_digest;

  void write_csv(const std::filesystem::path& path) const;
};

// floor(ratio * n), clamped to at least 1.
std::size_t mask_count(std::size_t n_patches, double ratio);

// Exactly mask_count(n, ratio) patches masked, chosen uniformly without
// replacement.
PatchMaskPlan sample_patch_mask(std::size_t n_patches, double ratio, std::mt19937_64& rng);

// Mean of (x - x_hat)^2 over observed timesteps in masked patches. Throws
// ContractError when no timestep qualifies.
double masked_mse_loss(std::span<const float> x_norm, std::span<const float> x_hat, const PatchMaskPlan& plan,
                       std::span<const std::uint8_t> observed, int patch_len);

// Normalized ground truth (every observed timestep, statistics from the
// visible part) and loss weights (observed timesteps of masked patches).
struct LossTargets {
  std::vector<float> target;
  std::vector<float> weight;
};
LossTargets loss_targets(const Series& window, const PreparedWindow& prepared, int patch_len);

template <typename Scalar>
struct PretrainBatch {
  ModelInput<Scalar> input;
  Matrix<Scalar> target;  // B x T
  Matrix<Scalar> weight;  // B x T, 0/1
  double count = 0.0;     // number of weighted timesteps
};

template <typename Scalar>
PretrainBatch<Scalar> make_pretrain_batch(std::span<const Series> windows, std::span<const PatchMaskPlan> plans,
                                          const ModelConfig& config) {
  PretrainBatch<Scalar> batch;
  std::vector<PreparedWindow> prepared;
  prepared.reserve(windows.size());
  const auto rows = static_cast<Eigen::Index>(windows.size());
  batch.target.resize(rows, config.seq_len);
  batch.weight.resize(rows, config.seq_len);
  for (std::size_t b = 0; b < windows.size(); ++b) {
    prepared.push_back(prepare_window(windows[b], plans[b], config));
    const auto lt = loss_targets(windows[b], prepared.back(), config.patch_len);
    for (int t = 0; t < config.seq_len; ++t) {
      batch.target(static_cast<Eigen::Index>(b), t) = static_cast<Scalar>(lt.target[static_cast<std::size_t>(t)]);
      batch.weight(static_cast<Eigen::Index>(b), t) = static_cast<Scalar>(lt.weight[static_cast<std::size_t>(t)]);
    }
  }
  batch.count = static_cast<double>(batch.weight.sum());
  batch.input = assemble_input<Scalar>(prepared, config);
  return batch;
}

// sum(((x_hat - target) * weight)^2) / count on the tape.
template <typename Scalar>
Tensor<Scalar> masked_mse_loss(const Tensor<Scalar>& x_hat, const Matrix<Scalar>& target, const Matrix<Scalar>& weight,
                               double count) {
  if (!(count > 0.0)) throw ContractError("masked_mse_loss: no masked observed timesteps");
  Tape<Scalar>& tape = x_hat.tape();
  auto diff = mul(sub(x_hat, tape.constant(target)), tape.constant(weight));
  return scale(sum(square(diff)), static_cast<Scalar>(1.0 / count));
}

// Full masked-reconstruction objective for one batch.
template <typename Scalar>
Tensor<Scalar> pretraining_loss(const BoundParameters<Scalar>& p, const PretrainBatch<Scalar>& batch,
                                const ModelConfig& config) {
  auto h = encode(p, batch.input, config);
  auto y = reconstruction_head(p, h, config);
  return masked_mse_loss(y, batch.target, batch.weight, batch.count);
}

struct PretrainResult {
  ModelWeights<float> weights;
  TrainLog log;
};

using StepCallback = std::function<void(const TrainLogEntry&)>;

// Masked-reconstruction pre-training. Each series is fitted to the model
// window; one fresh mask plan is drawn per series per step.
PretrainResult pretrain(ModelWeights<float> initial, std::span<const Series> dataset, const PretrainConfig& config,
                        const StepCallback& on_step = {});

// ---------------------------------------------------------------------------
// Linear probing

enum class HeadKind { reconstruction, forecasting };

struct ProbeConfig {
  int epochs = 20;
  int batch_size = 32;
  double lr_init = 1e-3;
  double lr_final = 1e-4;
  double clip_norm = 5.0;
  double mask_ratio = 0.30;  // reconstruction probing only
  AdamWHyper adam{};
  std::uint64_t seed = 13;
  bool freeze_encoder = true;  // false: end-to-end fine-tuning
};

struct ForecastExample {
  Series history;  // length seq_len (left-padded if needed)
  std::vector<float> future;
};

// Non-overlapping-origin (stride) examples with `lookback` history and
// `horizon` future points.
std::vector<ForecastExample> make_forecast_examples(std::span<const Series> series, int lookback, int horizon,
                                                    int stride);

// Trains the selected head; with freeze_encoder every other parameter stays
// bit-identical. Reconstruction probing uses the masked objective on
// `windows`; forecasting probing needs an attached head and `examples`.
ModelWeights<float> linear_probe(const ModelWeights<float>& model, HeadKind head, std::span<const Series> windows,
                                 std::span<const ForecastExample> examples, const ProbeConfig& config);

// Mean squared error of the forecasting head in normalized space.
double forecast_head_mse(const ModelWeights<float>& model, std::span<const ForecastExample> examples);

}  // namespace moment
