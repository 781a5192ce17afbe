#include "moment/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>

#include "moment/errors.hpp"

namespace moment::metrics {
namespace {

void require_same_length(std::size_t a, std::size_t b, const char* who) {
  if (a != b) {
    throw DimensionError(std::string(who) + ": length mismatch (" + std::to_string(a) + " vs " + std::to_string(b) + ")");
  }
  if (a == 0) throw DimensionError(std::string(who) + ": empty input");
}

double f1_from_counts(std::size_t tp, std::size_t fp, std::size_t fn) {
  const std::size_t denom = 2 * tp + fp + fn;
  return denom == 0 ? 0.0 : static_cast<double>(2 * tp) / static_cast<double>(denom);
}

// Sweeps thresholds over unique scores in descending order. `positives_at`
// returns how many true positives are credited at threshold index.
template <typename Credit>
double sweep_best_f1(std::span<const double> scores, std::span<const std::uint8_t> labels, Credit&& credited_tp) {
  std::vector<double> negatives;
  std::size_t total_pos = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i]) {
      ++total_pos;
    } else {
      negatives.push_back(scores[i]);
    }
  }
  if (total_pos == 0) return 0.0;
  std::sort(negatives.begin(), negatives.end(), std::greater<>());
  std::vector<double> thresholds(scores.begin(), scores.end());
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  double best = 0.0;
  std::size_t fp = 0;
  for (double theta : thresholds) {
    while (fp < negatives.size() && negatives[fp] >= theta) ++fp;
    const std::size_t tp = credited_tp(theta);
    best = std::max(best, f1_from_counts(tp, fp, total_pos - tp));
  }
  return best;
}

}  // namespace

double mse(std::span<const double> y, std::span<const double> y_hat) {
  require_same_length(y.size(), y_hat.size(), "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += (y[i] - y_hat[i]) * (y[i] - y_hat[i]);
  return s / static_cast<double>(y.size());
}

double mae(std::span<const double> y, std::span<const double> y_hat) {
  require_same_length(y.size(), y_hat.size(), "mae");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += std::abs(y[i] - y_hat[i]);
  return s / static_cast<double>(y.size());
}

double smape_m4(std::span<const double> y, std::span<const double> y_hat) {
  require_same_length(y.size(), y_hat.size(), "smape_m4");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double denom = std::abs(y[i]) + std::abs(y_hat[i]);
    if (denom > 0.0) s += std::abs(y[i] - y_hat[i]) / denom;
  }
  return 200.0 * s / static_cast<double>(y.size());
}

double accuracy(std::span<const int> predicted, std::span<const int> truth) {
  require_same_length(predicted.size(), truth.size(), "accuracy");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += predicted[i] == truth[i];
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

std::vector<std::pair<std::size_t, std::size_t>> anomaly_segments(std::span<const std::uint8_t> labels) {
  std::vector<std::pair<std::size_t, std::size_t>> segs;
  for (std::size_t i = 0; i < labels.size();) {
    if (!labels[i]) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < labels.size() && labels[j]) ++j;
    segs.emplace_back(i, j);
    i = j;
  }
  return segs;
}

double adjusted_best_f1(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  require_same_length(scores.size(), labels.size(), "adjusted_best_f1");
  // A segment is credited in full once its peak score clears the threshold.
  std::vector<std::pair<double, std::size_t>> peaks;
  for (auto [b, e] : anomaly_segments(labels)) {
    peaks.emplace_back(*std::max_element(scores.begin() + static_cast<std::ptrdiff_t>(b),
                                         scores.begin() + static_cast<std::ptrdiff_t>(e)),
                       e - b);
  }
  std::sort(peaks.begin(), peaks.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::size_t cursor = 0, tp = 0;
  return sweep_best_f1(scores, labels, [&](double theta) {
    while (cursor < peaks.size() && peaks[cursor].first >= theta) tp += peaks[cursor++].second;
    return tp;
  });
}

double best_f1(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  require_same_length(scores.size(), labels.size(), "best_f1");
  std::vector<double> pos;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i]) pos.push_back(scores[i]);
  }
  std::sort(pos.begin(), pos.end(), std::greater<>());
  std::size_t cursor = 0;
  return sweep_best_f1(scores, labels, [&](double theta) {
    while (cursor < pos.size() && pos[cursor] >= theta) ++cursor;
    return cursor;
  });
}

double soft_label_auc(std::span<const double> scores, std::span<const double> soft_labels) {
  require_same_length(scores.size(), soft_labels.size(), "soft_label_auc");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_weight = 0.0, negatives_below = 0.0, numerator = 0.0;
  std::size_t negatives = 0;
  for (std::size_t g = 0; g < order.size();) {
    std::size_t e = g;
    double group_pos = 0.0, group_neg = 0.0;
    while (e < order.size() && scores[order[e]] == scores[order[g]]) {
      const double w = soft_labels[order[e]];
      if (w > 0.0) {
        group_pos += w;
      } else {
        group_neg += 1.0;
      }
      ++e;
    }
    numerator += group_pos * (negatives_below + 0.5 * group_neg);
    negatives_below += group_neg;
    pos_weight += group_pos;
    negatives += static_cast<std::size_t>(group_neg);
    g = e;
  }
  if (pos_weight == 0.0 || negatives == 0) {
    throw UndefinedMetricError("AUC undefined: labels contain a single class");
  }
  return numerator / (pos_weight * static_cast<double>(negatives));
}

double roc_auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  require_same_length(scores.size(), labels.size(), "roc_auc");
  std::vector<double> w(labels.begin(), labels.end());
  return soft_label_auc(scores, w);
}

std::vector<double> buffered_labels(std::span<const std::uint8_t> labels, int buffer) {
  if (buffer < 0) throw ContractError("buffered_labels: buffer must be non-negative");
  std::vector<double> w(labels.size(), 0.0);
  const auto n = static_cast<std::ptrdiff_t>(labels.size());
  for (auto [b, e] : anomaly_segments(labels)) {
    for (auto t = static_cast<std::ptrdiff_t>(b); t < static_cast<std::ptrdiff_t>(e); ++t) w[static_cast<std::size_t>(t)] = 1.0;
    for (int d = 1; d <= buffer; ++d) {
      const double ramp = 1.0 - static_cast<double>(d) / static_cast<double>(buffer + 1);
      const auto left = static_cast<std::ptrdiff_t>(b) - d;
      const auto right = static_cast<std::ptrdiff_t>(e) - 1 + d;
      if (left >= 0) w[static_cast<std::size_t>(left)] = std::max(w[static_cast<std::size_t>(left)], ramp);
      if (right < n) w[static_cast<std::size_t>(right)] = std::max(w[static_cast<std::size_t>(right)], ramp);
    }
  }
  return w;
}

double vus_roc(std::span<const double> scores, std::span<const std::uint8_t> labels, int max_buffer) {
  require_same_length(scores.size(), labels.size(), "vus_roc");
  if (max_buffer < 0) throw ContractError("vus_roc: max buffer must be non-negative");
  double acc = roc_auc(scores, labels);
  for (int l = 1; l <= max_buffer; ++l) acc += soft_label_auc(scores, buffered_labels(labels, l));
  return acc / static_cast<double>(max_buffer + 1);
}

}  // namespace moment::metrics
