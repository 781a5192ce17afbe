#include "moment/report.hpp"

#include <cmath>
#include <fstream>

#include "moment/errors.hpp"
#include "moment/hashing.hpp"

namespace moment {

std::string EvalReport::config_hash() const { return to_hex(fnv1a64(config.dump())); }

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["task"] = task;
  j["dataset"] = dataset;
  j["config"] = config;
  j["config_hash"] = config_hash();
  j["seed"] = seed;
  j["version"] = version;
  j["metrics"] = nlohmann::json::object();
  for (const auto& [k, v] : metrics) {
    // JSON has no NaN/inf.
    j["metrics"][k] = std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
  }
  if (!errors.empty()) j["errors"] = errors;
  if (!warnings.empty()) j["warnings"] = warnings;
  if (!per_series.is_null()) j["per_series"] = per_series;
  return j;
}

void EvalReport::write(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << to_json().dump(2) << '\n';
}

}  // namespace moment
