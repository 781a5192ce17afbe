#include "moment/probes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "moment/baselines.hpp"
#include "moment/errors.hpp"
#include "moment/pretrain.hpp"
#include "moment/tasks.hpp"

namespace moment::probes {
namespace {

std::vector<double> log_spaced(double lo, double hi, int n) {
  std::vector<double> g(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double f = n == 1 ? 0.0 : static_cast<double>(i) / (n - 1);
    g[static_cast<std::size_t>(i)] = lo * std::pow(hi / lo, f);
  }
  return g;
}

std::vector<double> ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << text;
}

}  // namespace

std::vector<double> default_grid(data::SineKind kind, int points) {
  if (points < 3) throw ContractError("probe grid needs at least 3 points");
  switch (kind) {
    case data::SineKind::frequency: {
      std::vector<double> g;
      for (int i = 0; i < points; ++i) g.push_back(1.0 + 31.0 * i / (points - 1));
      return g;
    }
    case data::SineKind::trend: return log_spaced(0.125, 8.0, points);
    case data::SineKind::amplitude: return log_spaced(0.125, 32.0, points);
    case data::SineKind::baseline: {
      std::vector<double> g;
      for (int i = 0; i < points; ++i) g.push_back(-8.0 + 16.0 * i / (points - 1));
      return g;
    }
    case data::SineKind::phase: {
      std::vector<double> g;
      for (int i = 0; i < points; ++i) g.push_back(2.0 * std::numbers::pi * i / points);
      return g;
    }
  }
  throw ContractError("unknown synthetic kind");
}

EmbeddingSuite sinusoid_embedding_suite(const ModelWeights<float>& model, data::SineKind kind,
                                        std::span<const double> grid, double noise_sigma, std::uint64_t seed) {
  if (grid.size() < 3) throw ContractError("embedding suite needs at least 3 grid points");
  std::vector<Series> suite;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    suite.push_back(data::synth_sine(kind, grid[i], static_cast<std::size_t>(model.config.seq_len), noise_sigma, seed + i));
  }
  const Eigen::MatrixXd reps = tasks::representations(model, suite);
  const auto pca = baselines::pca_fit(reps, 2);
  EmbeddingSuite out;
  out.kind = kind;
  out.c.assign(grid.begin(), grid.end());
  out.coords = baselines::pca_project(pca, reps);
  out.explained_share = pca.explained_share;
  return out;
}

std::string scatter_svg(std::span<const double> x, std::span<const double> y, std::span<const double> color,
                        const std::string& title) {
  constexpr double W = 480, H = 400, M = 48;
  const auto [xmin_it, xmax_it] = std::minmax_element(x.begin(), x.end());
  const auto [ymin_it, ymax_it] = std::minmax_element(y.begin(), y.end());
  const auto [cmin_it, cmax_it] = std::minmax_element(color.begin(), color.end());
  const double xmin = x.empty() ? 0 : *xmin_it, xmax = x.empty() ? 1 : *xmax_it;
  const double ymin = y.empty() ? 0 : *ymin_it, ymax = y.empty() ? 1 : *ymax_it;
  const double cmin = color.empty() ? 0 : *cmin_it, cmax = color.empty() ? 1 : *cmax_it;
  const auto span_or_one = [](double lo, double hi) { return hi - lo > 0 ? hi - lo : 1.0; };
  const double xs = span_or_one(xmin, xmax), ys = span_or_one(ymin, ymax), cs = span_or_one(cmin, cmax);

  std::ostringstream svg;
  svg.precision(6);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
      << ' ' << H << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">"
      << title << "</text>\n";
  svg << "<line x1=\"" << M << "\" y1=\"" << H - M << "\" x2=\"" << W - M << "\" y2=\"" << H - M
      << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << M << "\" y1=\"" << M << "\" x2=\"" << M << "\" y2=\"" << H - M << "\" stroke=\"black\"/>\n";
  svg << "<text x=\"" << W / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
      << "font-size=\"12\">PC1</text>\n";
  svg << "<text x=\"14\" y=\"" << H / 2 << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" "
      << "transform=\"rotate(-90 14 " << H / 2 << ")\">PC2</text>\n";
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double px = M + (x[i] - xmin) / xs * (W - 2 * M);
    const double py = H - M - (y[i] - ymin) / ys * (H - 2 * M);
    const double f = (color[i] - cmin) / cs;
    const int r = static_cast<int>(std::lround(255 * f)), b = static_cast<int>(std::lround(255 * (1 - f)));
    svg << "<circle cx=\"" << px << "\" cy=\"" << py << "\" r=\"4\" fill=\"rgb(" << r << ",64," << b << ")\"/>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

void write_suite(const EmbeddingSuite& suite, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  const std::string stem = "embedding_" + std::string(data::to_string(suite.kind));
  std::ostringstream csv;
  csv.precision(9);
  csv << "c,pc1,pc2\n";
  std::vector<double> x, y, color;
  const bool log_color = suite.kind == data::SineKind::trend || suite.kind == data::SineKind::amplitude;
  for (std::size_t i = 0; i < suite.c.size(); ++i) {
    const double a = suite.coords(static_cast<Eigen::Index>(i), 0);
    const double b = suite.coords.cols() > 1 ? suite.coords(static_cast<Eigen::Index>(i), 1) : 0.0;
    csv << suite.c[i] << ',' << a << ',' << b << '\n';
    x.push_back(a);
    y.push_back(b);
    color.push_back(log_color ? std::log(suite.c[i]) : suite.c[i]);
  }
  write_text(out_dir / (stem + ".csv"), csv.str());
  write_text(out_dir / (stem + ".svg"), scatter_svg(x, y, color, stem));
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("spearman: length mismatch");
  if (a.size() < 2) throw ContractError("spearman: need at least two points");
  const auto ra = ranks(a), rb = ranks(b);
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / static_cast<double>(ra.size());
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / static_cast<double>(rb.size());
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0 || sbb == 0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

FrequencyCurve frequency_error_curve(const ModelWeights<float>& model, std::span<const double> grid,
                                     double noise_sigma, std::uint64_t seed, double mask_ratio) {
  const auto& cfg = model.config;
  std::mt19937_64 rng(seed);
  const PatchMaskPlan plan = sample_patch_mask(static_cast<std::size_t>(cfg.n_patches()), mask_ratio, rng);
  std::vector<Series> windows;
  for (double c : grid) {
    windows.push_back(data::synth_sine(data::SineKind::frequency, c, static_cast<std::size_t>(cfg.seq_len), noise_sigma, seed));
  }
  const std::vector<PatchMaskPlan> plans(windows.size(), plan);
  FrequencyCurve curve;
  curve.c.assign(grid.begin(), grid.end());
  for (std::size_t b = 0; b < windows.size(); b += 64) {
    const std::size_t n = std::min<std::size_t>(64, windows.size() - b);
    const auto rec = reconstruct(model, std::span<const Series>(windows).subspan(b, n),
                                 std::span<const PatchMaskPlan>(plans).subspan(b, n));
    for (std::size_t i = 0; i < n; ++i) {
      const auto lt = loss_targets(windows[b + i], rec[i].window, cfg.patch_len);
      curve.mse.push_back(masked_mse_loss(lt.target, rec[i].normalized, rec[i].window.plan, windows[b + i].observed,
                                          cfg.patch_len));
    }
  }
  curve.spearman = curve.c.size() >= 2 ? spearman(curve.c, curve.mse) : 0.0;
  return curve;
}

void write_curve(const FrequencyCurve& curve, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::ostringstream csv;
  csv.precision(9);
  csv << "c,mse\n";
  for (std::size_t i = 0; i < curve.c.size(); ++i) csv << curve.c[i] << ',' << curve.mse[i] << '\n';
  write_text(out_dir / "frequency_error_frequency.csv", csv.str());
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double ks_statistic_normal(std::span<const double> sample) {
  if (sample.empty()) throw ContractError("ks_statistic_normal: empty sample");
  std::vector<double> s(sample.begin(), sample.end());
  std::sort(s.begin(), s.end());
  const double n = static_cast<double>(s.size());
  double d = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double f = normal_cdf(s[i]);
    d = std::max({d, static_cast<double>(i + 1) / n - f, f - static_cast<double>(i) / n});
  }
  return d;
}

MaskStats mask_embedding_stats(const ModelWeights<float>& model) {
  const auto& m = model.at(param::mask_embedding);
  std::vector<double> v(m.data(), m.data() + m.size());
  MaskStats st;
  st.dimension = v.size();
  st.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - st.mean) * (x - st.mean);
  st.stdev = std::sqrt(ss / static_cast<double>(v.size()));
  st.ks_statistic = ks_statistic_normal(v);
  return st;
}

ZeroVsMask zero_vs_mask_probe(const ModelWeights<float>& model, std::span<const Series> sample, double mask_ratio,
                              std::uint64_t seed) {
  if (sample.empty()) throw ContractError("zero_vs_mask_probe: empty sample");
  const auto& cfg = model.config;
  std::mt19937_64 rng(seed);
  std::vector<Series> windows;
  std::vector<PatchMaskPlan> plans;
  for (const auto& s : sample) {
    windows.push_back(data::fit_to_window(s, static_cast<std::size_t>(cfg.seq_len)));
    plans.push_back(sample_patch_mask(static_cast<std::size_t>(cfg.n_patches()), mask_ratio, rng));
  }
  ZeroVsMask out;
  for (std::size_t b = 0; b < windows.size(); b += 64) {
    const std::size_t n = std::min<std::size_t>(64, windows.size() - b);
    const auto ws = std::span<const Series>(windows).subspan(b, n);
    const auto ps = std::span<const PatchMaskPlan>(plans).subspan(b, n);
    const auto with_mask = reconstruct(model, ws, ps, MaskMode::mask_token);
    const auto with_zero = reconstruct(model, ws, ps, MaskMode::zero_fill);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& w = windows[b + i];
      const auto lt = loss_targets(w, with_mask[i].window, cfg.patch_len);
      out.mask_token_mse.push_back(
          masked_mse_loss(lt.target, with_mask[i].normalized, with_mask[i].window.plan, w.observed, cfg.patch_len));
      out.zero_fill_mse.push_back(
          masked_mse_loss(lt.target, with_zero[i].normalized, with_mask[i].window.plan, w.observed, cfg.patch_len));
      for (std::size_t t = 0; t < w.size(); ++t) {
        if (!with_mask[i].window.visible[t]) continue;
        out.unmasked_input_gap = std::max(
            out.unmasked_input_gap,
            static_cast<double>(std::abs(with_mask[i].window.normalized[t] - with_zero[i].window.normalized[t])));
      }
    }
  }
  const double n = static_cast<double>(out.mask_token_mse.size());
  out.mean_mask_token = std::accumulate(out.mask_token_mse.begin(), out.mask_token_mse.end(), 0.0) / n;
  out.mean_zero_fill = std::accumulate(out.zero_fill_mse.begin(), out.zero_fill_mse.end(), 0.0) / n;
  return out;
}

}  // namespace moment::probes
