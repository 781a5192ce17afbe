#pragma once

// Statistical comparators: gap interpolators, naive forecasters, Theta,
// k-NN anomaly scoring, an RBF-kernel SVM and PCA.

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "moment/series.hpp"

namespace moment::baselines {

// ---------------------------------------------------------------------------
// Imputation. All return fully observed copies; observed points are kept
// exactly and edge gaps take the nearest observed value.

Series interp_linear(const Series& x);
// Ties between equally distant neighbours go to the left one.
Series interp_nearest(const Series& x);
// Natural cubic spline through the observed points (needs >= 4).
Series interp_cubic(const Series& x);
// Forward fill, with a leading gap back-filled from the first observation.
Series naive_fill(const Series& x);

// ---------------------------------------------------------------------------
// Forecasting

std::vector<double> naive_forecast(std::span<const double> history, int horizon);
std::vector<double> seasonal_naive(std::span<const double> history, int horizon, int season);
std::vector<double> random_walk_drift(std::span<const double> history, int horizon);

// In-sample one-step SSE of simple exponential smoothing with level
// initialised at the first point.
double ses_sse(std::span<const double> y, double alpha);

struct ThetaFit {
  double alpha = 0.0;      // SES smoothing of the theta=2 line
  double intercept = 0.0;  // theta=0 line a + b*t, t = 0..n-1
  double slope = 0.0;
  double level = 0.0;      // final SES level
  bool seasonal = false;
  std::vector<double> seasonal_index;  // length m when seasonal
  std::vector<double> forecast;
};

// Classic Theta: average of the extrapolated linear trend and SES on the
// theta=2 line, after multiplicative deseasonalisation when m > 1 and the lag-m
// autocorrelation is significant at 90%.
ThetaFit theta_fit(std::span<const double> history, int horizon, int season = 1);
std::vector<double> theta_forecast(std::span<const double> history, int horizon, int season = 1);

// ---------------------------------------------------------------------------
// Anomaly scoring

// Sliding windows of length `window` (stride 1); a window scores its
// Euclidean distance to the k-th nearest other window, k clamped to
// count - 1; each timestep takes the max over the windows covering it.
std::vector<double> knn_anomaly(std::span<const double> x, int window, int k = 5);

// ---------------------------------------------------------------------------
// SVM

struct BinarySvm {
  std::vector<double> dual;  // alpha_i * y_i for each support vector
  std::vector<int> support;  // indices into SvmModel::support_vectors
  double rho = 0.0;          // decision = sum dual_i K(sv_i, x) - rho
  double kkt_gap = 0.0;      // max violation at exit
  long iterations = 0;
  bool converged = true;
};

struct SvmModel {
  Eigen::MatrixXd support_vectors;  // every training sample, row-wise
  std::vector<int> classes;         // sorted class labels
  std::vector<BinarySvm> machines;  // one-vs-rest, aligned with classes
  double gamma = 1.0;
  double C = 1.0;

  Eigen::MatrixXd decision_values(const Eigen::MatrixXd& X) const;
};

struct SvmOptions {
  double C = 1.0;
  double gamma = 0.0;  // <= 0 selects 1 / (d * var(X))
  double tolerance = 1e-3;
  long max_iterations = 10'000'000;
};

double default_gamma(const Eigen::MatrixXd& X);
SvmModel svm_fit(const Eigen::MatrixXd& X, std::span<const int> labels, const SvmOptions& options = {});
std::vector<int> svm_predict(const SvmModel& model, const Eigen::MatrixXd& X);

// C grid used for model selection.
std::vector<double> svm_c_grid();

// ---------------------------------------------------------------------------
// PCA

struct PcaModel {
  Eigen::RowVectorXd mean;
  Eigen::MatrixXd components;  // d x k, orthonormal columns
  std::vector<double> explained_share;
};

PcaModel pca_fit(const Eigen::MatrixXd& X, int k);
Eigen::MatrixXd pca_project(const PcaModel& model, const Eigen::MatrixXd& X);

}  // namespace moment::baselines
