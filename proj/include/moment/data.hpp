#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "moment/series.hpp"

namespace moment::data {

enum class SplitMode { horizontal, by_series };

struct SplitSpec {
  double train = 0.6;
  double val = 0.1;
  double test = 0.3;
  std::uint64_t seed = 13;
  SplitMode mode = SplitMode::horizontal;

  void validate() const;
};

template <typename T>
struct Split {
  T train;
  T val;
  T test;
};

// One Series per column; the header row supplies names. Empty cells are
// missing (observed = 0, value 0).
std::vector<Series> load_csv(const std::filesystem::path& path);
std::vector<Series> parse_csv(std::string_view text, const std::string& source = "<memory>");
void save_csv(const std::filesystem::path& path, const std::vector<Series>& columns);

// `<name>.labels.csv`: one binary flag per row (an optional non-numeric header
// line is skipped).
std::vector<std::uint8_t> load_labels(const std::filesystem::path& path);
// `<name>.classes.csv`: rows of `series_name,class`.
std::map<std::string, int> load_classes(const std::filesystem::path& path);

Split<Series> split_horizontal(const Series& x, const SplitSpec& spec = {});
Split<std::vector<Series>> split_by_series(const std::vector<Series>& collection, const SplitSpec& spec = {});

// Subsample longer inputs by stride ceil(L/T) keeping the most recent T points,
// left-pad shorter ones with unobserved zeros.
Series fit_to_window(const Series& x, std::size_t window = 512);

// Prepends T-L unobserved zeros. Throws DimensionError if L > T.
Series left_pad(const Series& x, std::size_t window);

// Keeps every factor-th point when longer than threshold; anomaly labels are
// OR-reduced over each group of `factor` points.
Series downsample(const Series& x, std::size_t threshold = 2560, std::size_t factor = 10);

enum class SineKind { trend, amplitude, frequency, baseline, phase };

SineKind parse_sine_kind(std::string_view name);
std::string_view to_string(SineKind kind);

// Entries [begin, end) with labels; the name gains `suffix`.
Series slice(const Series& x, std::size_t begin, std::size_t end, const std::string& suffix = {});

// Synthetic probe families; see README for the closed forms.
Series synth_sine(SineKind kind, double c, std::size_t length = 512, double noise_sigma = 0.1,
                  std::uint64_t seed = 13);

// x_t = phi * x_{t-1} + e_t, e_t ~ N(0, sigma^2).
Series synth_ar1(double phi, std::size_t length, double sigma, std::uint64_t seed);

struct CorpusSpec {
  std::size_t n_series = 256;
  std::size_t length = 512;
  double sine_share = 0.5;
  double min_period = 16.0;
  double max_period = 128.0;
  double noise_sigma = 0.1;
  double ar_phi_min = 0.5;
  double ar_phi_max = 0.95;
  std::uint64_t seed = 13;
};

// Mixed corpus for smoke pre-training: sums of two random-phase sinusoids with
// periods drawn log-uniformly from [min_period, max_period] plus AR(1) paths.
std::vector<Series> synth_corpus(const CorpusSpec& spec);

}  // namespace moment::data
