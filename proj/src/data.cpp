#include "moment/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "moment/errors.hpp"

namespace moment {

void Series::validate() const {
  if (observed.size() != values.size()) {
    throw DimensionError("series '" + name + "': observation mask length differs from values");
  }
  if (!anomaly_labels.empty() && anomaly_labels.size() != values.size()) {
    throw DimensionError("series '" + name + "': anomaly labels length differs from values");
  }
  for (auto l : anomaly_labels) {
    if (l > 1) throw ContractError("series '" + name + "': anomaly labels must be binary");
  }
}

}  // namespace moment

namespace moment::data {
namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.push_back(trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

bool parse_double(std::string_view field, double& out) {
  if (field.empty()) return false;
  if (field.front() == '+') field.remove_prefix(1);
  const auto* end = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(field.data(), end, out);
  return ec == std::errc() && ptr == end;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string_view> lines_of(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    auto pos = text.find('\n', start);
    if (pos == std::string_view::npos) pos = text.size();
    lines.push_back(text.substr(start, pos - start));
    start = pos + 1;
  }
  while (!lines.empty() && trim(lines.back()).empty()) lines.pop_back();
  return lines;
}

std::size_t floor_share(double fraction, std::size_t n) {
  return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
}

}  // namespace

void SplitSpec::validate() const {
  if (train < 0 || val < 0 || test < 0 || std::abs(train + val + test - 1.0) > 1e-9) {
    throw ContractError("split fractions must be non-negative and sum to 1");
  }
}

std::vector<Series> parse_csv(std::string_view text, const std::string& source) {
  const auto lines = lines_of(text);
  if (lines.empty()) throw ParseError(source + ": empty file");
  const auto header = split_fields(lines[0]);
  std::vector<Series> columns(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) {
    columns[c].name = header[c].empty() ? "col" + std::to_string(c) : std::string(header[c]);
  }
  for (std::size_t li = 1; li < lines.size(); ++li) {
    const auto fields = split_fields(lines[li]);
    if (fields.size() != header.size()) {
      throw ParseError(source + ":" + std::to_string(li + 1) + ": expected " + std::to_string(header.size()) +
                       " fields, found " + std::to_string(fields.size()));
    }
    for (std::size_t c = 0; c < fields.size(); ++c) {
      double v = 0.0;
      if (fields[c].empty()) {
        columns[c].values.push_back(0.0f);
        columns[c].observed.push_back(0);
      } else if (parse_double(fields[c], v) && std::isfinite(v)) {
        columns[c].values.push_back(static_cast<float>(v));
        columns[c].observed.push_back(1);
      } else {
        throw ParseError(source + ":" + std::to_string(li + 1) + ": non-numeric cell '" + std::string(fields[c]) +
                         "' in column '" + columns[c].name + "'");
      }
    }
  }
  return columns;
}

std::vector<Series> load_csv(const std::filesystem::path& path) {
  return parse_csv(read_file(path), path.string());
}

void save_csv(const std::filesystem::path& path, const std::vector<Series>& columns) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write '" + path.string() + "'");
  std::size_t rows = 0;
  for (std::size_t c = 0; c < columns.size(); ++c) {
    out << (c ? "," : "") << columns[c].name;
    rows = std::max(rows, columns[c].size());
  }
  out << '\n';
  out.precision(9);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < columns.size(); ++c) {
      if (c) out << ',';
      const auto& s = columns[c];
      if (r < s.size() && s.observed[r]) out << s.values[r];
    }
    out << '\n';
  }
}

std::vector<std::uint8_t> load_labels(const std::filesystem::path& path) {
  const auto text = read_file(path);
  const auto lines = lines_of(text);
  std::vector<std::uint8_t> labels;
  for (std::size_t li = 0; li < lines.size(); ++li) {
    const auto field = trim(lines[li]);
    double v = 0.0;
    if (!parse_double(field, v)) {
      if (li == 0) continue;  // header
      throw ParseError(path.string() + ":" + std::to_string(li + 1) + ": label is not numeric");
    }
    if (v != 0.0 && v != 1.0) {
      throw ParseError(path.string() + ":" + std::to_string(li + 1) + ": label must be 0 or 1");
    }
    labels.push_back(v == 1.0 ? 1 : 0);
  }
  return labels;
}

std::map<std::string, int> load_classes(const std::filesystem::path& path) {
  const auto text = read_file(path);
  const auto lines = lines_of(text);
  std::map<std::string, int> classes;
  for (std::size_t li = 0; li < lines.size(); ++li) {
    const auto fields = split_fields(lines[li]);
    if (fields.size() != 2) throw ParseError(path.string() + ":" + std::to_string(li + 1) + ": expected name,class");
    double v = 0.0;
    if (!parse_double(fields[1], v)) {
      if (li == 0) continue;
      throw ParseError(path.string() + ":" + std::to_string(li + 1) + ": class is not numeric");
    }
    classes[std::string(fields[0])] = static_cast<int>(v);
  }
  return classes;
}

Series slice(const Series& x, std::size_t begin, std::size_t end, const std::string& suffix) {
  Series out;
  out.name = x.name + suffix;
  out.frequency = x.frequency;
  out.class_label = x.class_label;
  out.values.assign(x.values.begin() + begin, x.values.begin() + end);
  out.observed.assign(x.observed.begin() + begin, x.observed.begin() + end);
  if (x.has_anomaly_labels()) {
    out.anomaly_labels.assign(x.anomaly_labels.begin() + begin, x.anomaly_labels.begin() + end);
  }
  return out;
}

Split<Series> split_horizontal(const Series& x, const SplitSpec& spec) {
  spec.validate();
  x.validate();
  const std::size_t n = x.size();
  if (n < 10) throw ContractError("split_horizontal: series '" + x.name + "' shorter than 10 points");
  const std::size_t a = floor_share(spec.train, n);
  const std::size_t b = floor_share(spec.train + spec.val, n);
  return {slice(x, 0, a, "/train"), slice(x, a, b, "/val"), slice(x, b, n, "/test")};
}

Split<std::vector<Series>> split_by_series(const std::vector<Series>& collection, const SplitSpec& spec) {
  spec.validate();
  const std::size_t n = collection.size();
  if (n < 3) throw ContractError("split_by_series: need at least 3 series");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(spec.seed);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t a = floor_share(spec.train, n);
  const std::size_t b = floor_share(spec.train + spec.val, n);
  Split<std::vector<Series>> out;
  for (std::size_t i = 0; i < n; ++i) {
    auto& dst = i < a ? out.train : (i < b ? out.val : out.test);
    dst.push_back(collection[order[i]]);
  }
  return out;
}

Series left_pad(const Series& x, std::size_t window) {
  if (x.size() > window) {
    throw DimensionError("left_pad: length " + std::to_string(x.size()) + " exceeds window " + std::to_string(window));
  }
  const std::size_t pad = window - x.size();
  Series out = x;
  out.values.insert(out.values.begin(), pad, 0.0f);
  out.observed.insert(out.observed.begin(), pad, 0);
  if (x.has_anomaly_labels()) out.anomaly_labels.insert(out.anomaly_labels.begin(), pad, 0);
  return out;
}

Series fit_to_window(const Series& x, std::size_t window) {
  if (x.size() == 0) throw EmptySeriesError("fit_to_window: empty series '" + x.name + "'");
  if (x.size() <= window) return left_pad(x, window);
  const std::size_t stride = (x.size() + window - 1) / window;
  std::vector<std::size_t> idx;
  for (auto i = static_cast<std::ptrdiff_t>(x.size()) - 1; i >= 0 && idx.size() < window;
       i -= static_cast<std::ptrdiff_t>(stride)) {
    idx.push_back(static_cast<std::size_t>(i));
  }
  std::reverse(idx.begin(), idx.end());
  Series out;
  out.name = x.name;
  out.frequency = x.frequency;
  out.class_label = x.class_label;
  for (auto i : idx) {
    out.values.push_back(x.values[i]);
    out.observed.push_back(x.observed[i]);
    if (x.has_anomaly_labels()) out.anomaly_labels.push_back(x.anomaly_labels[i]);
  }
  return left_pad(out, window);
}

Series downsample(const Series& x, std::size_t threshold, std::size_t factor) {
  if (factor == 0) throw ContractError("downsample: factor must be positive");
  if (x.size() <= threshold) return x;
  Series out;
  out.name = x.name;
  out.frequency = x.frequency;
  out.class_label = x.class_label;
  for (std::size_t i = 0; i < x.size(); i += factor) {
    out.values.push_back(x.values[i]);
    out.observed.push_back(x.observed[i]);
    if (x.has_anomaly_labels()) {
      std::uint8_t any = 0;
      for (std::size_t j = i; j < std::min(x.size(), i + factor); ++j) any |= x.anomaly_labels[j];
      out.anomaly_labels.push_back(any);
    }
  }
  return out;
}

SineKind parse_sine_kind(std::string_view name) {
  if (name == "trend") return SineKind::trend;
  if (name == "amplitude") return SineKind::amplitude;
  if (name == "frequency") return SineKind::frequency;
  if (name == "baseline") return SineKind::baseline;
  if (name == "phase") return SineKind::phase;
  throw ContractError("unknown synthetic kind '" + std::string(name) + "'");
}

std::string_view to_string(SineKind kind) {
  switch (kind) {
    case SineKind::trend: return "trend";
    case SineKind::amplitude: return "amplitude";
    case SineKind::frequency: return "frequency";
    case SineKind::baseline: return "baseline";
    case SineKind::phase: return "phase";
  }
  return "?";
}

Series synth_sine(SineKind kind, double c, std::size_t length, double noise_sigma, std::uint64_t seed) {
  if (length == 0) throw ContractError("synth_sine: length must be positive");
  const double T = static_cast<double>(length);
  const auto in = [&](double lo, double hi) {
    if (!(c >= lo && c <= hi)) {
      throw ContractError("synth_sine: c=" + std::to_string(c) + " outside [" + std::to_string(lo) + ", " +
                          std::to_string(hi) + "] for kind " + std::string(to_string(kind)));
    }
  };
  switch (kind) {
    case SineKind::trend: in(0.125, 8.0); break;
    case SineKind::amplitude: in(1e-6, 32.0); break;
    case SineKind::frequency: in(1e-6, T / 2.0); break;
    case SineKind::baseline: in(-32.0, 32.0); break;
    case SineKind::phase: in(0.0, 2.0 * std::numbers::pi); break;
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  constexpr double two_pi = 2.0 * std::numbers::pi;
  std::vector<float> v(length);
  for (std::size_t i = 0; i < length; ++i) {
    const double t = static_cast<double>(i);
    double y = 0.0;
    switch (kind) {
      case SineKind::trend: y = std::pow(t / T, c); break;
      case SineKind::amplitude: y = c * std::sin(two_pi * 8.0 * t / T); break;
      case SineKind::frequency: y = std::sin(two_pi * c * t / T); break;
      case SineKind::baseline: y = std::sin(two_pi * 8.0 * t / T) + c; break;
      case SineKind::phase: y = std::sin(two_pi * 8.0 * t / T + c); break;
    }
    if (noise_sigma > 0.0) y += noise_sigma * noise(rng);
    v[i] = static_cast<float>(y);
  }
  return Series(std::move(v), std::string(to_string(kind)) + "_c" + std::to_string(c));
}

Series synth_ar1(double phi, std::size_t length, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, sigma);
  std::vector<float> v(length);
  // Start from the stationary distribution.
  double x = std::abs(phi) < 1.0 ? noise(rng) / std::sqrt(1.0 - phi * phi) : 0.0;
  for (std::size_t i = 0; i < length; ++i) {
    v[i] = static_cast<float>(x);
    x = phi * x + noise(rng);
  }
  return Series(std::move(v), "ar1");
}

std::vector<Series> synth_corpus(const CorpusSpec& spec) {
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  constexpr double two_pi = 2.0 * std::numbers::pi;
  const auto log_period = [&] {
    const double lo = std::log(spec.min_period), hi = std::log(spec.max_period);
    return std::exp(lo + (hi - lo) * unit(rng));
  };
  std::vector<Series> out;
  out.reserve(spec.n_series);
  const auto n_sine = static_cast<std::size_t>(std::round(spec.sine_share * static_cast<double>(spec.n_series)));
  for (std::size_t s = 0; s < spec.n_series; ++s) {
    Series series;
    if (s < n_sine) {
      const double p1 = log_period(), p2 = log_period();
      const double a1 = 0.5 + unit(rng), a2 = 0.5 * unit(rng);
      const double ph1 = two_pi * unit(rng), ph2 = two_pi * unit(rng);
      const double level = gauss(rng), scale = std::exp(gauss(rng));
      std::vector<float> v(spec.length);
      for (std::size_t i = 0; i < spec.length; ++i) {
        const double t = static_cast<double>(i);
        const double y = a1 * std::sin(two_pi * t / p1 + ph1) + a2 * std::sin(two_pi * t / p2 + ph2) +
                         spec.noise_sigma * gauss(rng);
        v[i] = static_cast<float>(level + scale * y);
      }
      series = Series(std::move(v));
      series.name = "sine_" + std::to_string(s);
    } else {
      const double phi = spec.ar_phi_min + (spec.ar_phi_max - spec.ar_phi_min) * unit(rng);
      series = synth_ar1(phi, spec.length, 1.0, rng());
      series.name = "ar1_" + std::to_string(s);
    }
    out.push_back(std::move(series));
  }
  return out;
}

}  // namespace moment::data
