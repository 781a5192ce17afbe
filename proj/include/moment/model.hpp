#pragma once

// Patch-based masked-reconstruction transformer encoder. Everything that
// touches learnable parameters is templated on the scalar type; data
// preparation (RevIN, patching, plans) works on float series.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "moment/autodiff.hpp"
#include "moment/errors.hpp"
#include "moment/optim.hpp"
#include "moment/series.hpp"

namespace moment {

struct ModelConfig {
  int seq_len = 512;
  int patch_len = 8;
  int d_model = 32;
  int n_layers = 1;
  int n_heads = 4;
  int d_ff = 64;
  int n_rel_buckets = 32;
  int rel_max_distance = 128;
  double revin_eps = 1e-5;
  double norm_eps = 1e-6;

  int n_patches() const { return seq_len / patch_len; }
  void validate() const;

  // "tiny", "small", "base" desk-scale presets.
  static ModelConfig named(std::string_view name);
};

bool operator==(const ModelConfig& a, const ModelConfig& b);

// ---------------------------------------------------------------------------
// Reversible instance normalization

struct RevinStats {
  double mean = 0.0;
  double stdev = 1.0;
};

// Statistics over entries with observed != 0 (population variance). The
// standard deviation is floored at eps.
RevinStats revin_stats(std::span<const float> values, std::span<const std::uint8_t> observed, double eps = 1e-5);

// Observed entries become (x - mean) / stdev; unobserved entries become 0.
std::pair<Series, RevinStats> revin_normalize(const Series& x, double eps = 1e-5);
Series revin_denormalize(const Series& y, const RevinStats& stats);
std::vector<float> revin_denormalize(std::span<const float> y, const RevinStats& stats);

// ---------------------------------------------------------------------------
// Patching

// N x P matrix; row i holds x[iP, (i+1)P).
template <typename Scalar>
Matrix<Scalar> patchify(std::span<const float> x, int patch_len) {
  if (patch_len <= 0 || x.size() % static_cast<std::size_t>(patch_len) != 0) {
    throw DimensionError("patchify: length " + std::to_string(x.size()) + " is not a multiple of patch length " +
                         std::to_string(patch_len));
  }
  const auto n = static_cast<Eigen::Index>(x.size()) / patch_len;
  Matrix<Scalar> out(n, patch_len);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < patch_len; ++j) out(i, j) = static_cast<Scalar>(x[static_cast<std::size_t>(i * patch_len + j)]);
  }
  return out;
}

// Per-patch flag: 1 = embedded by the linear projection, 0 = replaced by the
// mask embedding.
struct PatchMaskPlan {
  std::vector<std::uint8_t> observed;

  std::size_t size() const { return observed.size(); }
  std::size_t masked_count() const;

  static PatchMaskPlan all_observed(std::size_t n_patches) { return {std::vector<std::uint8_t>(n_patches, 1)}; }
  // A patch is observed only if every timestep in it is observed.
  static PatchMaskPlan from_observation(std::span<const std::uint8_t> timestep_observed, int patch_len);
  // Logical AND of two plans of equal length.
  PatchMaskPlan intersect(const PatchMaskPlan& other) const;
};

// ---------------------------------------------------------------------------
// Positions

// PE[pos, 2i] = sin(pos / 10000^(2i/D)), PE[pos, 2i+1] = cos(...).
template <typename Scalar>
Matrix<Scalar> sinusoidal_pe(int n_positions, int d_model) {
  if (d_model <= 0 || d_model % 2 != 0) throw ConfigError("sinusoidal_pe: model width must be even");
  Matrix<Scalar> pe(n_positions, d_model);
  for (int pos = 0; pos < n_positions; ++pos) {
    for (int i = 0; i < d_model / 2; ++i) {
      const double angle = pos / std::pow(10000.0, 2.0 * i / d_model);
      pe(pos, 2 * i) = static_cast<Scalar>(std::sin(angle));
      pe(pos, 2 * i + 1) = static_cast<Scalar>(std::cos(angle));
    }
  }
  return pe;
}

// Bidirectional log-bucketed relative position (key - query). Half the
// buckets serve positive offsets; within each half the first half is exact
// and the rest is log-spaced up to max_distance.
int relative_bucket(int rel_pos, int n_buckets = 32, int max_distance = 128);

using BucketIndex = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
BucketIndex relative_bucket_index(int n_positions, int n_buckets, int max_distance);

// ---------------------------------------------------------------------------
// Parameters

namespace param {
inline constexpr std::string_view patch_weight = "patch_embedding.weight";
inline constexpr std::string_view patch_bias = "patch_embedding.bias";
inline constexpr std::string_view mask_embedding = "mask_embedding";
inline constexpr std::string_view recon_weight = "head.reconstruction.weight";
inline constexpr std::string_view recon_bias = "head.reconstruction.bias";
inline constexpr std::string_view forecast_weight = "head.forecast.weight";
inline constexpr std::string_view forecast_bias = "head.forecast.bias";

std::string layer(int l, std::string_view leaf);
bool is_head(std::string_view name);
bool is_reconstruction_head(std::string_view name);
bool is_forecast_head(std::string_view name);
}  // namespace param

// Expected shape of every parameter for a config (forecast head included when
// horizon > 0).
std::map<std::string, std::pair<Eigen::Index, Eigen::Index>> parameter_shapes(const ModelConfig& config,
                                                                             int horizon = 0);

template <typename Scalar>
struct ModelWeights {
  ModelConfig config;
  ParameterMap<Scalar> params;

  // Fan-in scaled uniform for projections, ones for norm gains, zeros for
  // biases and relative-bias tables, i.i.d. N(0, 1) for the mask embedding.
  static ModelWeights initialize(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    ModelWeights w;
    w.config = config;
    std::mt19937_64 rng(seed);
    for (const auto& [name, shape] : parameter_shapes(config)) {
      w.params[name] = init_parameter(name, shape.first, shape.second, rng);
    }
    return w;
  }

  bool has_forecasting_head() const { return params.contains(std::string(param::forecast_weight)); }

  int horizon() const {
    auto it = params.find(std::string(param::forecast_weight));
    return it == params.end() ? 0 : static_cast<int>(it->second.cols());
  }

  void attach_forecasting_head(int horizon, std::uint64_t seed) {
    if (horizon <= 0) throw ConfigError("forecasting head horizon must be positive");
    std::mt19937_64 rng(seed);
    const Eigen::Index in = static_cast<Eigen::Index>(config.n_patches()) * config.d_model;
    params[std::string(param::forecast_weight)] = init_parameter(std::string(param::forecast_weight), in, horizon, rng);
    params[std::string(param::forecast_bias)] = Matrix<Scalar>::Zero(1, horizon);
  }

  const Matrix<Scalar>& at(std::string_view name) const {
    auto it = params.find(std::string(name));
    if (it == params.end()) throw ConfigError("missing parameter '" + std::string(name) + "'");
    return it->second;
  }

  template <typename Other>
  ModelWeights<Other> cast() const {
    ModelWeights<Other> out;
    out.config = config;
    for (const auto& [name, m] : params) out.params[name] = m.template cast<Other>();
    return out;
  }

  // Throws ConfigError when any expected parameter is missing or misshapen.
  void validate() const {
    const auto expected = parameter_shapes(config, horizon());
    for (const auto& [name, shape] : expected) {
      const auto& m = at(name);
      if (m.rows() != shape.first || m.cols() != shape.second) {
        throw ConfigError("parameter '" + name + "' has shape " + std::to_string(m.rows()) + "x" +
                          std::to_string(m.cols()) + ", expected " + std::to_string(shape.first) + "x" +
                          std::to_string(shape.second));
      }
    }
    for (const auto& [name, m] : params) {
      if (!expected.contains(name)) throw ConfigError("unexpected parameter '" + name + "'");
    }
  }

 private:
  static Matrix<Scalar> init_parameter(const std::string& name, Eigen::Index rows, Eigen::Index cols,
                                       std::mt19937_64& rng) {
    const auto ends_with = [&](std::string_view suffix) {
      return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    Matrix<Scalar> m(rows, cols);
    if (name == param::mask_embedding) {
      std::normal_distribution<double> normal(0.0, 1.0);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(normal(rng));
    } else if (ends_with(".gamma")) {
      m.setOnes();
    } else if (ends_with(".bias") || ends_with("relative_bias")) {
      m.setZero();
    } else {
      const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
      std::uniform_real_distribution<double> uniform(-bound, bound);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(uniform(rng));
    }
    return m;
  }
};

// ---------------------------------------------------------------------------
// Forward pass on the tape

template <typename Scalar>
class BoundParameters {
 public:
  // Every parameter becomes a tape leaf; only those accepted by `trainable`
  // receive gradients.
  BoundParameters(Tape<Scalar>& tape, const ParameterMap<Scalar>& params,
                  const std::function<bool(const std::string&)>& trainable = {}) {
    for (const auto& [name, m] : params) {
      leaves_.emplace(name, tape.variable(m, trainable ? trainable(name) : true));
    }
  }

  const Tensor<Scalar>& operator[](std::string_view name) const {
    auto it = leaves_.find(std::string(name));
    if (it == leaves_.end()) {
      if (param::is_forecast_head(name)) throw ConfigError("forecasting head not attached");
      throw ConfigError("missing parameter '" + std::string(name) + "'");
    }
    return it->second;
  }

  bool contains(std::string_view name) const { return leaves_.contains(std::string(name)); }

  ParameterMap<Scalar> gradients() const {
    ParameterMap<Scalar> out;
    for (const auto& [name, t] : leaves_) {
      if (!t.requires_grad()) continue;
      out[name] = t.grad().size() ? t.grad() : Matrix<Scalar>::Zero(t.rows(), t.cols());
    }
    return out;
  }

 private:
  std::map<std::string, Tensor<Scalar>> leaves_;
};

// Normalized model input for a batch of windows: patches are (B*N) x P with
// hidden or unobserved content zeroed; keep[i] = 0 routes row i to the mask
// embedding.
template <typename Scalar>
struct ModelInput {
  Matrix<Scalar> patches;
  std::vector<std::uint8_t> keep;
  int batch = 0;
};

template <typename Scalar>
struct ForwardCapture {
  // Per layer: attention probabilities for every (series, head).
  std::vector<AttentionCapture<Scalar>> attention;
  // Final hidden state values, (B*N) x D.
  Matrix<Scalar> hidden;
};

template <typename Scalar>
Tensor<Scalar> embed_patches(const BoundParameters<Scalar>& p, const ModelInput<Scalar>& input) {
  Tape<Scalar>& tape = p[param::patch_weight].tape();
  auto x = tape.constant(input.patches);
  auto projected = add_row(matmul(x, p[param::patch_weight]), p[param::patch_bias]);
  return substitute_rows(projected, p[param::mask_embedding], std::span<const std::uint8_t>(input.keep));
}

template <typename Scalar>
Tensor<Scalar> add_positions(const Tensor<Scalar>& x, const ModelConfig& config, int batch) {
  const Matrix<Scalar> pe = sinusoidal_pe<Scalar>(config.n_patches(), config.d_model);
  Matrix<Scalar> tiled(static_cast<Eigen::Index>(batch) * config.n_patches(), config.d_model);
  for (int b = 0; b < batch; ++b) tiled.middleRows(static_cast<Eigen::Index>(b) * config.n_patches(), config.n_patches()) = pe;
  return add(x, x.tape().constant(std::move(tiled)));
}

// Pre-norm blocks: x + Attn(norm(x)), then x + FF(norm(x)). No biases.
template <typename Scalar>
Tensor<Scalar> encoder_forward(const BoundParameters<Scalar>& p, Tensor<Scalar> x, const ModelConfig& config,
                               ForwardCapture<Scalar>* capture = nullptr) {
  const BucketIndex buckets = relative_bucket_index(config.n_patches(), config.n_rel_buckets, config.rel_max_distance);
  const auto eps = static_cast<Scalar>(config.norm_eps);
  if (capture) capture->attention.assign(static_cast<std::size_t>(config.n_layers), {});
  for (int l = 0; l < config.n_layers; ++l) {
    auto h = scale_norm(x, p[param::layer(l, "attn_norm.gamma")], eps);
    auto q = matmul(h, p[param::layer(l, "attn.q")]);
    auto k = matmul(h, p[param::layer(l, "attn.k")]);
    auto v = matmul(h, p[param::layer(l, "attn.v")]);
    auto a = multi_head_attention(q, k, v, p[param::layer(l, "attn.relative_bias")], buckets, config.n_heads,
                                  config.n_patches(), capture ? &capture->attention[static_cast<std::size_t>(l)] : nullptr);
    x = add(x, matmul(a, p[param::layer(l, "attn.o")]));
    auto f = scale_norm(x, p[param::layer(l, "ff_norm.gamma")], eps);
    f = matmul(relu(matmul(f, p[param::layer(l, "ff.w1")])), p[param::layer(l, "ff.w2")]);
    x = add(x, f);
    if (!x.value().allFinite()) {
      throw NumericError("encoder layer " + std::to_string(l) + " produced non-finite activations");
    }
  }
  if (capture) capture->hidden = x.value();
  return x;
}

// Per-patch D -> P projection, concatenated back to B x T.
template <typename Scalar>
Tensor<Scalar> reconstruction_head(const BoundParameters<Scalar>& p, const Tensor<Scalar>& h, const ModelConfig& config) {
  auto y = add_row(matmul(h, p[param::recon_weight]), p[param::recon_bias]);
  return reshape(y, h.rows() / config.n_patches(), config.seq_len);
}

// Flattens the N patch embeddings of each series (row-major) and projects to H.
template <typename Scalar>
Tensor<Scalar> forecasting_head(const BoundParameters<Scalar>& p, const Tensor<Scalar>& h, const ModelConfig& config) {
  if (!p.contains(param::forecast_weight)) throw ConfigError("forecasting head not attached");
  auto flat = reshape(h, h.rows() / config.n_patches(), static_cast<Eigen::Index>(config.n_patches()) * config.d_model);
  return add_row(matmul(flat, p[param::forecast_weight]), p[param::forecast_bias]);
}

// Embedding + positions + encoder: the shared trunk of every task.
template <typename Scalar>
Tensor<Scalar> encode(const BoundParameters<Scalar>& p, const ModelInput<Scalar>& input, const ModelConfig& config,
                      ForwardCapture<Scalar>* capture = nullptr) {
  auto x = embed_patches(p, input);
  x = add_positions(x, config, input.batch);
  return encoder_forward(p, x, config, capture);
}

// Masked mean of the hidden rows (N x D) whose keep flag is set.
template <typename Scalar>
RowVector<Scalar> sequence_representation(const Matrix<Scalar>& hidden, std::span<const std::uint8_t> keep) {
  if (static_cast<Eigen::Index>(keep.size()) != hidden.rows()) {
    throw DimensionError("sequence_representation: one flag per patch row required");
  }
  RowVector<Scalar> acc = RowVector<Scalar>::Zero(hidden.cols());
  Eigen::Index n = 0;
  for (Eigen::Index i = 0; i < hidden.rows(); ++i) {
    if (keep[static_cast<std::size_t>(i)]) {
      acc += hidden.row(i);
      ++n;
    }
  }
  if (n == 0) throw EmptySeriesError("sequence_representation: every patch is padded");
  return acc / static_cast<Scalar>(n);
}

// ---------------------------------------------------------------------------
// Window preparation

// One length-T window ready for the model: values normalized with statistics
// from the visible timesteps (observed and in a plan-observed patch); hidden
// timesteps are zero.
struct PreparedWindow {
  std::vector<float> normalized;
  std::vector<std::uint8_t> visible;
  PatchMaskPlan plan;
  RevinStats stats;
};

enum class MaskMode {
  mask_token,  // masked patches use the learned mask embedding
  zero_fill,   // masked timesteps are zero and the patch is projected as if observed
};

// `plan` is intersected with the window's own patch observedness.
PreparedWindow prepare_window(const Series& window, const PatchMaskPlan& plan, const ModelConfig& config);

template <typename Scalar>
ModelInput<Scalar> assemble_input(std::span<const PreparedWindow> windows, const ModelConfig& config,
                                  MaskMode mode = MaskMode::mask_token) {
  ModelInput<Scalar> in;
  in.batch = static_cast<int>(windows.size());
  const int n = config.n_patches();
  in.patches.resize(static_cast<Eigen::Index>(in.batch) * n, config.patch_len);
  in.keep.resize(static_cast<std::size_t>(in.batch) * static_cast<std::size_t>(n));
  for (int b = 0; b < in.batch; ++b) {
    const auto& w = windows[static_cast<std::size_t>(b)];
    in.patches.middleRows(static_cast<Eigen::Index>(b) * n, n) = patchify<Scalar>(w.normalized, config.patch_len);
    for (int i = 0; i < n; ++i) {
      in.keep[static_cast<std::size_t>(b * n + i)] = mode == MaskMode::zero_fill ? 1 : w.plan.observed[static_cast<std::size_t>(i)];
    }
  }
  return in;
}

struct Reconstruction {
  std::vector<float> normalized;    // model output, length T
  std::vector<float> denormalized;  // same, mapped back with the window's RevIN stats
  PreparedWindow window;
  Matrix<float> hidden;  // N x D final-layer patch embeddings
};

// Inference over a batch of windows (no gradients).
std::vector<Reconstruction> reconstruct(const ModelWeights<float>& weights, std::span<const Series> windows,
                                        std::span<const PatchMaskPlan> plans, MaskMode mode = MaskMode::mask_token,
                                        ForwardCapture<float>* capture = nullptr);

}  // namespace moment
