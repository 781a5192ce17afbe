#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace moment {

// Result of one run: metric map plus what is needed to replay it.
struct EvalReport {
  std::string task;
  std::string dataset;
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 13;
  std::string version;
  std::map<std::string, double> metrics;
  std::map<std::string, std::string> errors;  // metrics that could not be computed
  std::vector<std::string> warnings;
  nlohmann::json per_series;  // optional

  // FNV-1a of the compact canonical (sorted-key) config dump.
  std::string config_hash() const;
  nlohmann::json to_json() const;
  void write(const std::filesystem::path& path) const;
};

}  // namespace moment
