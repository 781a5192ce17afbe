#include "moment/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "moment/errors.hpp"

namespace moment::baselines {
namespace {

std::vector<std::size_t> observed_indices(const Series& x, std::size_t minimum, const char* who) {
  x.validate();
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x.observed[i]) idx.push_back(i);
  }
  if (idx.size() < minimum) {
    throw EmptySeriesError(std::string(who) + ": needs at least " + std::to_string(minimum) + " observed points, got " +
                           std::to_string(idx.size()));
  }
  return idx;
}

Series filled_copy(const Series& x) {
  Series out = x;
  std::fill(out.observed.begin(), out.observed.end(), std::uint8_t{1});
  return out;
}

// Leading and trailing gaps copy the nearest observed value.
void fill_edges(Series& out, const Series& x, const std::vector<std::size_t>& idx) {
  for (std::size_t i = 0; i < idx.front(); ++i) out.values[i] = x.values[idx.front()];
  for (std::size_t i = idx.back() + 1; i < x.size(); ++i) out.values[i] = x.values[idx.back()];
}

void require_horizon(int horizon) {
  if (horizon <= 0) throw ContractError("forecast horizon must be positive");
}

}  // namespace

Series interp_linear(const Series& x) {
  const auto idx = observed_indices(x, 2, "interp_linear");
  Series out = filled_copy(x);
  fill_edges(out, x, idx);
  for (std::size_t k = 0; k + 1 < idx.size(); ++k) {
    const std::size_t a = idx[k], b = idx[k + 1];
    const double ya = x.values[a], yb = x.values[b];
    for (std::size_t t = a + 1; t < b; ++t) {
      const double w = static_cast<double>(t - a) / static_cast<double>(b - a);
      out.values[t] = static_cast<float>(ya + w * (yb - ya));
    }
  }
  return out;
}

Series interp_nearest(const Series& x) {
  const auto idx = observed_indices(x, 2, "interp_nearest");
  Series out = filled_copy(x);
  fill_edges(out, x, idx);
  for (std::size_t k = 0; k + 1 < idx.size(); ++k) {
    const std::size_t a = idx[k], b = idx[k + 1];
    for (std::size_t t = a + 1; t < b; ++t) out.values[t] = (t - a <= b - t) ? x.values[a] : x.values[b];
  }
  return out;
}

Series interp_cubic(const Series& x) {
  const auto idx = observed_indices(x, 4, "interp_cubic");
  const std::size_t n = idx.size();
  std::vector<double> h(n - 1), y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = x.values[idx[i]];
  for (std::size_t i = 0; i + 1 < n; ++i) h[i] = static_cast<double>(idx[i + 1] - idx[i]);

  // Second derivatives M with M_0 = M_{n-1} = 0; Thomas algorithm on the
  // interior system.
  std::vector<double> m(n, 0.0);
  const std::size_t interior = n - 2;
  std::vector<double> diag(interior), upper(interior), rhs(interior);
  for (std::size_t r = 0; r < interior; ++r) {
    const std::size_t i = r + 1;
    diag[r] = 2.0 * (h[i - 1] + h[i]);
    upper[r] = h[i];
    rhs[r] = 6.0 * ((y[i + 1] - y[i]) / h[i] - (y[i] - y[i - 1]) / h[i - 1]);
  }
  for (std::size_t r = 1; r < interior; ++r) {
    const double lower = h[r];
    const double f = lower / diag[r - 1];
    diag[r] -= f * upper[r - 1];
    rhs[r] -= f * rhs[r - 1];
  }
  for (std::size_t r = interior; r-- > 0;) {
    const double next = (r + 1 < interior) ? m[r + 2] : 0.0;
    m[r + 1] = (rhs[r] - upper[r] * next) / diag[r];
  }

  Series out = filled_copy(x);
  fill_edges(out, x, idx);
  for (std::size_t k = 0; k + 1 < n; ++k) {
    const double xa = static_cast<double>(idx[k]), xb = static_cast<double>(idx[k + 1]), hk = h[k];
    for (std::size_t t = idx[k] + 1; t < idx[k + 1]; ++t) {
      const double u = static_cast<double>(t);
      const double v = m[k] * std::pow(xb - u, 3) / (6.0 * hk) + m[k + 1] * std::pow(u - xa, 3) / (6.0 * hk) +
                       (y[k] / hk - m[k] * hk / 6.0) * (xb - u) + (y[k + 1] / hk - m[k + 1] * hk / 6.0) * (u - xa);
      out.values[t] = static_cast<float>(v);
    }
  }
  return out;
}

Series naive_fill(const Series& x) {
  const auto idx = observed_indices(x, 1, "naive_fill");
  Series out = filled_copy(x);
  float last = x.values[idx.front()];
  for (std::size_t t = 0; t < x.size(); ++t) {
    if (x.observed[t]) last = x.values[t];
    out.values[t] = last;
  }
  return out;
}

std::vector<double> naive_forecast(std::span<const double> history, int horizon) {
  require_horizon(horizon);
  if (history.empty()) throw EmptySeriesError("naive_forecast: empty history");
  return std::vector<double>(static_cast<std::size_t>(horizon), history.back());
}

std::vector<double> seasonal_naive(std::span<const double> history, int horizon, int season) {
  require_horizon(horizon);
  if (season <= 0) throw ContractError("seasonal_naive: season must be positive");
  const std::size_t m = static_cast<std::size_t>(season);
  if (history.size() < m) throw EmptySeriesError("seasonal_naive: history shorter than one season");
  const std::size_t n = history.size();
  std::vector<double> out(static_cast<std::size_t>(horizon));
  for (std::size_t h = 1; h <= out.size(); ++h) out[h - 1] = history[n - m + (h - 1) % m];
  return out;
}

std::vector<double> random_walk_drift(std::span<const double> history, int horizon) {
  require_horizon(horizon);
  if (history.size() < 2) throw EmptySeriesError("random_walk_drift: needs at least 2 points");
  const std::size_t n = history.size();
  const double slope = (history.back() - history.front()) / static_cast<double>(n - 1);
  std::vector<double> out(static_cast<std::size_t>(horizon));
  for (std::size_t h = 1; h <= out.size(); ++h) out[h - 1] = history.back() + static_cast<double>(h) * slope;
  return out;
}

double ses_sse(std::span<const double> y, double alpha) {
  if (y.empty()) return 0.0;
  double level = y[0], sse = 0.0;
  for (std::size_t t = 1; t < y.size(); ++t) {
    const double err = y[t] - level;
    sse += err * err;
    level += alpha * err;
  }
  return sse;
}

namespace {

double ses_final_level(std::span<const double> y, double alpha) {
  double level = y[0];
  for (std::size_t t = 1; t < y.size(); ++t) level += alpha * (y[t] - level);
  return level;
}

std::vector<double> autocorrelations(std::span<const double> y, std::size_t max_lag) {
  const double mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
  double denom = 0.0;
  for (double v : y) denom += (v - mean) * (v - mean);
  std::vector<double> r(max_lag + 1, 0.0);
  if (denom == 0.0) return r;
  for (std::size_t k = 0; k <= max_lag; ++k) {
    double num = 0.0;
    for (std::size_t t = k; t < y.size(); ++t) num += (y[t] - mean) * (y[t - k] - mean);
    r[k] = num / denom;
  }
  return r;
}

bool seasonality_significant(std::span<const double> y, std::size_t m) {
  const auto r = autocorrelations(y, m);
  double acc = 1.0;
  for (std::size_t k = 1; k < m; ++k) acc += 2.0 * r[k] * r[k];
  const double band = 1.645 * std::sqrt(acc / static_cast<double>(y.size()));
  return std::abs(r[m]) > band;
}

// Classical multiplicative decomposition: centred moving average trend, then
// per-position mean ratios normalised to average 1.
std::vector<double> multiplicative_indices(std::span<const double> y, std::size_t m) {
  const std::size_t n = y.size();
  std::vector<double> trend(n, std::numeric_limits<double>::quiet_NaN());
  const std::size_t half = m / 2;
  for (std::size_t t = half; t + half < n; ++t) {
    double s = 0.0;
    if (m % 2 == 1) {
      for (std::size_t j = t - half; j <= t + half; ++j) s += y[j];
      trend[t] = s / static_cast<double>(m);
    } else {
      if (t + half >= n) continue;
      s = 0.5 * y[t - half] + 0.5 * y[t + half];
      for (std::size_t j = t - half + 1; j < t + half; ++j) s += y[j];
      trend[t] = s / static_cast<double>(m);
    }
  }
  std::vector<double> sum(m, 0.0);
  std::vector<std::size_t> count(m, 0);
  for (std::size_t t = 0; t < n; ++t) {
    if (std::isnan(trend[t]) || trend[t] == 0.0) continue;
    sum[t % m] += y[t] / trend[t];
    ++count[t % m];
  }
  std::vector<double> idx(m, 1.0);
  double total = 0.0;
  for (std::size_t k = 0; k < m; ++k) {
    idx[k] = count[k] ? sum[k] / static_cast<double>(count[k]) : 1.0;
    total += idx[k];
  }
  for (auto& v : idx) v *= static_cast<double>(m) / total;
  return idx;
}

}  // namespace

ThetaFit theta_fit(std::span<const double> history, int horizon, int season) {
  require_horizon(horizon);
  if (history.size() < 3) throw EmptySeriesError("theta_forecast: needs at least 3 points");
  if (season <= 0) throw ContractError("theta_forecast: season must be positive");
  const std::size_t n = history.size();
  const auto m = static_cast<std::size_t>(season);
  ThetaFit fit;
  std::vector<double> y(history.begin(), history.end());
  const bool positive = std::all_of(y.begin(), y.end(), [](double v) { return v > 0.0; });
  if (m > 1 && n >= 2 * m && positive && seasonality_significant(y, m)) {
    fit.seasonal = true;
    fit.seasonal_index = multiplicative_indices(y, m);
    for (std::size_t t = 0; t < n; ++t) y[t] /= fit.seasonal_index[t % m];
  }

  // theta = 0 line: ordinary least squares on t = 0..n-1.
  const double tn = static_cast<double>(n);
  const double tbar = (tn - 1.0) / 2.0;
  const double ybar = std::accumulate(y.begin(), y.end(), 0.0) / tn;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    sxy += (static_cast<double>(t) - tbar) * (y[t] - ybar);
    sxx += (static_cast<double>(t) - tbar) * (static_cast<double>(t) - tbar);
  }
  fit.slope = sxy / sxx;
  fit.intercept = ybar - fit.slope * tbar;

  std::vector<double> theta2(n);
  for (std::size_t t = 0; t < n; ++t) theta2[t] = 2.0 * y[t] - (fit.intercept + fit.slope * static_cast<double>(t));

  double best = std::numeric_limits<double>::infinity();
  for (int a = 1; a <= 99; ++a) {
    const double alpha = a / 100.0;
    const double sse = ses_sse(theta2, alpha);
    if (sse < best) {
      best = sse;
      fit.alpha = alpha;
    }
  }
  fit.level = ses_final_level(theta2, fit.alpha);

  fit.forecast.resize(static_cast<std::size_t>(horizon));
  for (std::size_t h = 1; h <= fit.forecast.size(); ++h) {
    const double trend = fit.intercept + fit.slope * static_cast<double>(n - 1 + h);
    double f = 0.5 * trend + 0.5 * fit.level;
    if (fit.seasonal) f *= fit.seasonal_index[(n - 1 + h) % m];
    fit.forecast[h - 1] = f;
  }
  return fit;
}

std::vector<double> theta_forecast(std::span<const double> history, int horizon, int season) {
  return theta_fit(history, horizon, season).forecast;
}

std::vector<double> knn_anomaly(std::span<const double> x, int window, int k) {
  if (window <= 0 || k <= 0) throw ContractError("knn_anomaly: window and k must be positive");
  const auto w = static_cast<std::size_t>(window);
  if (x.size() < w + 1) throw ContractError("knn_anomaly: series shorter than window + 1");
  const std::size_t count = x.size() - w + 1;
  const std::size_t kk = std::min<std::size_t>(static_cast<std::size_t>(k), count - 1);
  std::vector<double> window_score(count);
  std::vector<double> dist(count - 1);
  for (std::size_t i = 0; i < count; ++i) {
    std::size_t c = 0;
    for (std::size_t j = 0; j < count; ++j) {
      if (j == i) continue;
      double s = 0.0;
      for (std::size_t t = 0; t < w; ++t) {
        const double d = x[i + t] - x[j + t];
        s += d * d;
      }
      dist[c++] = s;
    }
    std::nth_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(kk - 1), dist.end());
    window_score[i] = std::sqrt(dist[kk - 1]);
  }
  std::vector<double> scores(x.size(), 0.0);
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t t = i; t < i + w; ++t) scores[t] = std::max(scores[t], window_score[i]);
  }
  return scores;
}

// ---------------------------------------------------------------------------
// SVM

namespace {

Eigen::MatrixXd rbf_kernel(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B, double gamma) {
  const Eigen::VectorXd na = A.rowwise().squaredNorm();
  const Eigen::VectorXd nb = B.rowwise().squaredNorm();
  Eigen::MatrixXd d2 = (-2.0 * A * B.transpose()).colwise() + na;
  d2.rowwise() += nb.transpose();
  return (-gamma * d2.cwiseMax(0.0)).array().exp().matrix();
}

// Dual SMO with second-order working-set selection.
BinarySvm solve_binary(const Eigen::MatrixXd& K, const std::vector<int>& y, double C, double eps, long max_iter) {
  constexpr double tau = 1e-12;
  const auto n = static_cast<Eigen::Index>(y.size());
  std::vector<double> alpha(y.size(), 0.0), G(y.size(), -1.0);
  const auto Q = [&](Eigen::Index i, Eigen::Index j) { return y[i] * y[j] * K(i, j); };
  const auto upper = [&](Eigen::Index i) { return alpha[i] >= C; };
  const auto lower = [&](Eigen::Index i) { return alpha[i] <= 0.0; };
  BinarySvm out;
  double gap = 0.0;
  long iter = 0;
  for (; iter < max_iter; ++iter) {
    double gmax = -std::numeric_limits<double>::infinity(), gmax2 = gmax;
    Eigen::Index i = -1, j = -1;
    for (Eigen::Index t = 0; t < n; ++t) {
      if (y[t] == 1) {
        if (!upper(t) && -G[t] >= gmax) gmax = -G[t], i = t;
      } else {
        if (!lower(t) && G[t] >= gmax) gmax = G[t], i = t;
      }
    }
    double best_obj = std::numeric_limits<double>::infinity();
    for (Eigen::Index t = 0; t < n && i >= 0; ++t) {
      if (y[t] == 1) {
        if (lower(t)) continue;
        const double grad_diff = gmax + G[t];
        gmax2 = std::max(gmax2, G[t]);
        if (grad_diff > 0) {
          double quad = K(i, i) + K(t, t) - 2.0 * y[i] * Q(i, t);
          const double obj = -(grad_diff * grad_diff) / (quad > 0 ? quad : tau);
          if (obj <= best_obj) best_obj = obj, j = t;
        }
      } else {
        if (upper(t)) continue;
        const double grad_diff = gmax - G[t];
        gmax2 = std::max(gmax2, -G[t]);
        if (grad_diff > 0) {
          double quad = K(i, i) + K(t, t) + 2.0 * y[i] * Q(i, t);
          const double obj = -(grad_diff * grad_diff) / (quad > 0 ? quad : tau);
          if (obj <= best_obj) best_obj = obj, j = t;
        }
      }
    }
    gap = gmax + gmax2;
    if (i < 0 || j < 0 || gap < eps) break;

    const double old_i = alpha[i], old_j = alpha[j];
    if (y[i] != y[j]) {
      double quad = K(i, i) + K(j, j) + 2.0 * Q(i, j);
      if (quad <= 0) quad = tau;
      const double delta = (-G[i] - G[j]) / quad;
      const double diff = alpha[i] - alpha[j];
      alpha[i] += delta;
      alpha[j] += delta;
      if (diff > 0) {
        if (alpha[j] < 0) alpha[j] = 0, alpha[i] = diff;
      } else {
        if (alpha[i] < 0) alpha[i] = 0, alpha[j] = -diff;
      }
      if (diff > 0) {
        if (alpha[i] > C) alpha[i] = C, alpha[j] = C - diff;
      } else {
        if (alpha[j] > C) alpha[j] = C, alpha[i] = C + diff;
      }
    } else {
      double quad = K(i, i) + K(j, j) - 2.0 * Q(i, j);
      if (quad <= 0) quad = tau;
      const double delta = (G[i] - G[j]) / quad;
      const double total = alpha[i] + alpha[j];
      alpha[i] -= delta;
      alpha[j] += delta;
      if (total > C) {
        if (alpha[i] > C) alpha[i] = C, alpha[j] = total - C;
      } else {
        if (alpha[j] < 0) alpha[j] = 0, alpha[i] = total;
      }
      if (total > C) {
        if (alpha[j] > C) alpha[j] = C, alpha[i] = total - C;
      } else {
        if (alpha[i] < 0) alpha[i] = 0, alpha[j] = total;
      }
    }
    const double di = alpha[i] - old_i, dj = alpha[j] - old_j;
    for (Eigen::Index t = 0; t < n; ++t) G[t] += Q(i, t) * di + Q(j, t) * dj;
  }
  out.iterations = iter;
  out.kkt_gap = gap;
  out.converged = iter < max_iter;

  double ub = std::numeric_limits<double>::infinity(), lb = -ub, free_sum = 0.0;
  long n_free = 0;
  for (Eigen::Index t = 0; t < n; ++t) {
    const double yg = y[t] * G[t];
    if (upper(t)) {
      if (y[t] == -1) ub = std::min(ub, yg); else lb = std::max(lb, yg);
    } else if (lower(t)) {
      if (y[t] == 1) ub = std::min(ub, yg); else lb = std::max(lb, yg);
    } else {
      ++n_free;
      free_sum += yg;
    }
  }
  out.rho = n_free > 0 ? free_sum / static_cast<double>(n_free) : (ub + lb) / 2.0;
  for (Eigen::Index t = 0; t < n; ++t) {
    if (alpha[t] > 0.0) {
      out.support.push_back(static_cast<int>(t));
      out.dual.push_back(alpha[t] * y[t]);
    }
  }
  return out;
}

}  // namespace

double default_gamma(const Eigen::MatrixXd& X) {
  const double mean = X.mean();
  const double var = (X.array() - mean).square().mean();
  const double d = static_cast<double>(X.cols());
  return var > 0.0 ? 1.0 / (d * var) : 1.0;
}

std::vector<double> svm_c_grid() { return {1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1e3, 1e4}; }

Eigen::MatrixXd SvmModel::decision_values(const Eigen::MatrixXd& X) const {
  const Eigen::MatrixXd K = rbf_kernel(X, support_vectors, gamma);
  Eigen::MatrixXd out(X.rows(), static_cast<Eigen::Index>(machines.size()));
  for (std::size_t c = 0; c < machines.size(); ++c) {
    const auto& m = machines[c];
    for (Eigen::Index r = 0; r < X.rows(); ++r) {
      double s = -m.rho;
      for (std::size_t k = 0; k < m.support.size(); ++k) s += m.dual[k] * K(r, m.support[k]);
      out(r, static_cast<Eigen::Index>(c)) = s;
    }
  }
  return out;
}

SvmModel svm_fit(const Eigen::MatrixXd& X, std::span<const int> labels, const SvmOptions& options) {
  if (static_cast<Eigen::Index>(labels.size()) != X.rows()) throw DimensionError("svm_fit: one label per row required");
  if (!(options.C > 0.0)) throw ContractError("svm_fit: C must be positive");
  SvmModel model;
  model.classes.assign(labels.begin(), labels.end());
  std::sort(model.classes.begin(), model.classes.end());
  model.classes.erase(std::unique(model.classes.begin(), model.classes.end()), model.classes.end());
  if (model.classes.size() < 2) throw StratificationError("svm_fit: need at least two classes");
  model.support_vectors = X;
  model.C = options.C;
  model.gamma = options.gamma > 0.0 ? options.gamma : default_gamma(X);
  const Eigen::MatrixXd K = rbf_kernel(X, X, model.gamma);
  for (int cls : model.classes) {
    std::vector<int> y(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) y[i] = labels[i] == cls ? 1 : -1;
    model.machines.push_back(solve_binary(K, y, options.C, options.tolerance, options.max_iterations));
  }
  return model;
}

std::vector<int> svm_predict(const SvmModel& model, const Eigen::MatrixXd& X) {
  const Eigen::MatrixXd dv = model.decision_values(X);
  std::vector<int> out(static_cast<std::size_t>(X.rows()));
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    Eigen::Index best = 0;
    dv.row(r).maxCoeff(&best);
    out[static_cast<std::size_t>(r)] = model.classes[static_cast<std::size_t>(best)];
  }
  return out;
}

PcaModel pca_fit(const Eigen::MatrixXd& X, int k) {
  if (X.rows() < 2) throw ContractError("pca_fit: needs at least two samples");
  if (k <= 0 || k > X.cols()) throw DimensionError("pca_fit: k must be in [1, dimension]");
  PcaModel model;
  model.mean = X.colwise().mean();
  const Eigen::MatrixXd centered = X.rowwise() - model.mean;
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(X.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  const Eigen::VectorXd values = solver.eigenvalues().cwiseMax(0.0);
  const Eigen::MatrixXd vectors = solver.eigenvectors();
  const double total = values.sum();
  const Eigen::Index d = X.cols();
  model.components.resize(d, k);
  for (int c = 0; c < k; ++c) {
    const Eigen::Index src = d - 1 - c;  // eigenvalues come ascending
    Eigen::VectorXd v = vectors.col(src);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    model.components.col(c) = v;
    model.explained_share.push_back(total > 0.0 ? values(src) / total : 0.0);
  }
  return model;
}

Eigen::MatrixXd pca_project(const PcaModel& model, const Eigen::MatrixXd& X) {
  if (X.cols() != model.mean.size()) throw DimensionError("pca_project: dimension mismatch");
  return (X.rowwise() - model.mean) * model.components;
}

}  // namespace moment::baselines
