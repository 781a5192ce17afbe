#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace moment {

// A univariate series with its observation mask (1 = observed) and optional
// labels. Unobserved entries conventionally hold 0.
struct Series {
  std::string name;
  std::vector<float> values;
  std::vector<std::uint8_t> observed;
  std::string frequency;
  std::optional<int> class_label;
  std::vector<std::uint8_t> anomaly_labels;  // empty, or one flag per timestep

  Series() = default;
  explicit Series(std::vector<float> v, std::string series_name = {})
      : name(std::move(series_name)), values(std::move(v)), observed(values.size(), 1) {}

  std::size_t size() const { return values.size(); }
  bool has_anomaly_labels() const { return !anomaly_labels.empty(); }
  std::size_t observed_count() const {
    std::size_t n = 0;
    for (auto o : observed) n += o != 0;
    return n;
  }
  void validate() const;
};

}  // namespace moment
