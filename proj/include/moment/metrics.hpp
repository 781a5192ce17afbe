#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace moment::metrics {

double mse(std::span<const double> y, std::span<const double> y_hat);
double mae(std::span<const double> y, std::span<const double> y_hat);

// (200/h) * sum |y - y_hat| / (|y| + |y_hat|); zero-denominator terms add 0.
double smape_m4(std::span<const double> y, std::span<const double> y_hat);

double accuracy(std::span<const int> predicted, std::span<const int> truth);

// Maximal contiguous runs of positive labels as [begin, end) pairs.
std::vector<std::pair<std::size_t, std::size_t>> anomaly_segments(std::span<const std::uint8_t> labels);

// Point-adjusted best F1 over every unique score threshold (predict
// score >= threshold). Returns 0 when there are no positive labels.
double adjusted_best_f1(std::span<const double> scores, std::span<const std::uint8_t> labels);

// Unadjusted best F1 over the same thresholds.
double best_f1(std::span<const double> scores, std::span<const std::uint8_t> labels);

// Mann-Whitney AUC, ties count one half. Throws UndefinedMetricError unless
// both classes are present.
double roc_auc(std::span<const double> scores, std::span<const std::uint8_t> labels);

// Soft label of every timestep for buffer width `buffer`: 1 inside an anomaly
// segment, 1 - d/(buffer+1) at distance d <= buffer outside it, else 0.
std::vector<double> buffered_labels(std::span<const std::uint8_t> labels, int buffer);

// AUC against soft labels: each point with w > 0 is a positive of weight w,
// points with w == 0 are negatives. Equals roc_auc for binary labels.
double soft_label_auc(std::span<const double> scores, std::span<const double> soft_labels);

// Mean of soft_label_auc over buffer widths 0..max_buffer.
double vus_roc(std::span<const double> scores, std::span<const std::uint8_t> labels, int max_buffer = 4);

}  // namespace moment::metrics
