#include "moment/model.hpp"

#include <algorithm>
#include <cmath>

namespace moment {

void ModelConfig::validate() const {
  if (seq_len <= 0 || patch_len <= 0 || d_model <= 0 || n_layers < 0 || n_heads <= 0 || d_ff <= 0 ||
      n_rel_buckets <= 1 || rel_max_distance <= 0) {
    throw ConfigError("model config: all sizes must be positive");
  }
  if (seq_len % patch_len != 0) throw ConfigError("model config: seq_len must be a multiple of patch_len");
  if (d_model % n_heads != 0) throw ConfigError("model config: d_model must be divisible by n_heads");
  if (d_model % 2 != 0) throw ConfigError("model config: d_model must be even for sinusoidal positions");
  if (n_rel_buckets % 4 != 0) throw ConfigError("model config: n_rel_buckets must be a multiple of 4");
  if (rel_max_distance <= n_rel_buckets / 4) {
    throw ConfigError("model config: rel_max_distance must exceed the exact-bucket range n_rel_buckets/4");
  }
  if (!(revin_eps > 0.0) || !(norm_eps >= 0.0)) throw ConfigError("model config: eps values must be positive");
}

ModelConfig ModelConfig::named(std::string_view name) {
  ModelConfig c;
  if (name == "tiny") {
    c.n_layers = 1, c.d_model = 32, c.n_heads = 4, c.d_ff = 64;
  } else if (name == "small") {
    c.n_layers = 2, c.d_model = 64, c.n_heads = 4, c.d_ff = 128;
  } else if (name == "base") {
    c.n_layers = 4, c.d_model = 128, c.n_heads = 8, c.d_ff = 256;
  } else {
    throw ConfigError("unknown model config '" + std::string(name) + "' (expected tiny, small or base)");
  }
  return c;
}

bool operator==(const ModelConfig& a, const ModelConfig& b) {
  return a.seq_len == b.seq_len && a.patch_len == b.patch_len && a.d_model == b.d_model && a.n_layers == b.n_layers &&
         a.n_heads == b.n_heads && a.d_ff == b.d_ff && a.n_rel_buckets == b.n_rel_buckets &&
         a.rel_max_distance == b.rel_max_distance && a.revin_eps == b.revin_eps && a.norm_eps == b.norm_eps;
}

RevinStats revin_stats(std::span<const float> values, std::span<const std::uint8_t> observed, double eps) {
  if (values.size() != observed.size()) throw DimensionError("revin: mask length differs from values");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (observed[i]) {
      sum += values[i];
      ++n;
    }
  }
  if (n == 0) throw EmptySeriesError("revin: no observed timesteps");
  const double mean = sum / static_cast<double>(n);
  double sq = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (observed[i]) sq += (values[i] - mean) * (values[i] - mean);
  }
  return {mean, std::max(std::sqrt(sq / static_cast<double>(n)), eps)};
}

std::pair<Series, RevinStats> revin_normalize(const Series& x, double eps) {
  const RevinStats stats = revin_stats(x.values, x.observed, eps);
  Series y = x;
  for (std::size_t i = 0; i < y.size(); ++i) {
    y.values[i] = y.observed[i] ? static_cast<float>((x.values[i] - stats.mean) / stats.stdev) : 0.0f;
  }
  return {std::move(y), stats};
}

std::vector<float> revin_denormalize(std::span<const float> y, const RevinStats& stats) {
  std::vector<float> out(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) out[i] = static_cast<float>(y[i] * stats.stdev + stats.mean);
  return out;
}

Series revin_denormalize(const Series& y, const RevinStats& stats) {
  Series out = y;
  out.values = revin_denormalize(std::span<const float>(y.values), stats);
  return out;
}

std::size_t PatchMaskPlan::masked_count() const {
  return static_cast<std::size_t>(std::count(observed.begin(), observed.end(), std::uint8_t{0}));
}

PatchMaskPlan PatchMaskPlan::from_observation(std::span<const std::uint8_t> timestep_observed, int patch_len) {
  if (patch_len <= 0 || timestep_observed.size() % static_cast<std::size_t>(patch_len) != 0) {
    throw DimensionError("patch plan: length is not a multiple of the patch length");
  }
  const std::size_t p = static_cast<std::size_t>(patch_len);
  PatchMaskPlan plan;
  plan.observed.resize(timestep_observed.size() / p);
  for (std::size_t i = 0; i < plan.observed.size(); ++i) {
    plan.observed[i] = std::all_of(timestep_observed.begin() + static_cast<std::ptrdiff_t>(i * p),
                                   timestep_observed.begin() + static_cast<std::ptrdiff_t>((i + 1) * p),
                                   [](std::uint8_t o) { return o != 0; });
  }
  return plan;
}

PatchMaskPlan PatchMaskPlan::intersect(const PatchMaskPlan& other) const {
  if (other.size() != size()) throw DimensionError("patch plan: lengths differ");
  PatchMaskPlan out = *this;
  for (std::size_t i = 0; i < size(); ++i) out.observed[i] = observed[i] && other.observed[i];
  return out;
}

int relative_bucket(int rel_pos, int n_buckets, int max_distance) {
  const int half = n_buckets / 2;
  int bucket = rel_pos > 0 ? half : 0;
  const int n = std::abs(rel_pos);
  const int max_exact = half / 2;
  if (n < max_exact) return bucket + n;
  const double scaled = std::log(static_cast<double>(n) / max_exact) /
                        std::log(static_cast<double>(max_distance) / max_exact) * (half - max_exact);
  // The epsilon keeps exact powers (e.g. n = 16) from rounding into the
  // bucket below.
  const int large = max_exact + static_cast<int>(std::floor(scaled + 1e-9));
  return bucket + std::min(large, half - 1);
}

BucketIndex relative_bucket_index(int n_positions, int n_buckets, int max_distance) {
  BucketIndex idx(n_positions, n_positions);
  for (int q = 0; q < n_positions; ++q) {
    for (int k = 0; k < n_positions; ++k) idx(q, k) = relative_bucket(k - q, n_buckets, max_distance);
  }
  return idx;
}

namespace param {

std::string layer(int l, std::string_view leaf) {
  return "encoder.layers." + std::to_string(l) + "." + std::string(leaf);
}

bool is_reconstruction_head(std::string_view name) { return name.starts_with("head.reconstruction."); }
bool is_forecast_head(std::string_view name) { return name.starts_with("head.forecast."); }
bool is_head(std::string_view name) { return name.starts_with("head."); }

}  // namespace param

std::map<std::string, std::pair<Eigen::Index, Eigen::Index>> parameter_shapes(const ModelConfig& c, int horizon) {
  std::map<std::string, std::pair<Eigen::Index, Eigen::Index>> s;
  s[std::string(param::patch_weight)] = {c.patch_len, c.d_model};
  s[std::string(param::patch_bias)] = {1, c.d_model};
  s[std::string(param::mask_embedding)] = {1, c.d_model};
  for (int l = 0; l < c.n_layers; ++l) {
    s[param::layer(l, "attn_norm.gamma")] = {1, c.d_model};
    for (const char* m : {"attn.q", "attn.k", "attn.v", "attn.o"}) s[param::layer(l, m)] = {c.d_model, c.d_model};
    s[param::layer(l, "attn.relative_bias")] = {c.n_rel_buckets, c.n_heads};
    s[param::layer(l, "ff_norm.gamma")] = {1, c.d_model};
    s[param::layer(l, "ff.w1")] = {c.d_model, c.d_ff};
    s[param::layer(l, "ff.w2")] = {c.d_ff, c.d_model};
  }
  s[std::string(param::recon_weight)] = {c.d_model, c.patch_len};
  s[std::string(param::recon_bias)] = {1, c.patch_len};
  if (horizon > 0) {
    s[std::string(param::forecast_weight)] = {static_cast<Eigen::Index>(c.n_patches()) * c.d_model, horizon};
    s[std::string(param::forecast_bias)] = {1, horizon};
  }
  return s;
}

PreparedWindow prepare_window(const Series& window, const PatchMaskPlan& plan, const ModelConfig& config) {
  window.validate();
  if (static_cast<int>(window.size()) != config.seq_len) {
    throw DimensionError("prepare_window: window length " + std::to_string(window.size()) + " != seq_len " +
                         std::to_string(config.seq_len));
  }
  if (static_cast<int>(plan.size()) != config.n_patches()) {
    throw DimensionError("prepare_window: plan length must equal the number of patches");
  }
  PreparedWindow w;
  w.plan = PatchMaskPlan::from_observation(window.observed, config.patch_len).intersect(plan);
  w.visible.resize(window.size());
  const auto p = static_cast<std::size_t>(config.patch_len);
  for (std::size_t t = 0; t < window.size(); ++t) w.visible[t] = window.observed[t] && w.plan.observed[t / p];
  w.stats = revin_stats(window.values, w.visible, config.revin_eps);
  w.normalized.resize(window.size());
  for (std::size_t t = 0; t < window.size(); ++t) {
    w.normalized[t] = w.visible[t] ? static_cast<float>((window.values[t] - w.stats.mean) / w.stats.stdev) : 0.0f;
  }
  return w;
}

std::vector<Reconstruction> reconstruct(const ModelWeights<float>& weights, std::span<const Series> windows,
                                        std::span<const PatchMaskPlan> plans, MaskMode mode,
                                        ForwardCapture<float>* capture) {
  if (windows.size() != plans.size()) throw DimensionError("reconstruct: one plan per window required");
  const auto& cfg = weights.config;
  std::vector<PreparedWindow> prepared;
  prepared.reserve(windows.size());
  for (std::size_t i = 0; i < windows.size(); ++i) prepared.push_back(prepare_window(windows[i], plans[i], cfg));
  std::vector<Reconstruction> out(windows.size());
  if (windows.empty()) return out;

  Tape<float> tape;
  BoundParameters<float> p(tape, weights.params, [](const std::string&) { return false; });
  const auto input = assemble_input<float>(prepared, cfg, mode);
  ForwardCapture<float> local;
  ForwardCapture<float>& cap = capture ? *capture : local;
  auto h = encode(p, input, cfg, &cap);
  auto y = reconstruction_head(p, h, cfg);
  const int n = cfg.n_patches();
  for (std::size_t b = 0; b < windows.size(); ++b) {
    auto& r = out[b];
    r.normalized.assign(y.value().row(static_cast<Eigen::Index>(b)).data(),
                        y.value().row(static_cast<Eigen::Index>(b)).data() + cfg.seq_len);
    r.denormalized = revin_denormalize(std::span<const float>(r.normalized), prepared[b].stats);
    r.hidden = cap.hidden.middleRows(static_cast<Eigen::Index>(b) * n, n);
    r.window = std::move(prepared[b]);
  }
  return out;
}

}  // namespace moment
