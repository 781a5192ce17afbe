#pragma once

#include <filesystem>

#include <nlohmann/json.hpp>

#include "moment/model.hpp"

namespace moment {

nlohmann::json to_json(const ModelConfig& config);
// Rejects unknown keys; missing keys keep their defaults.
ModelConfig model_config_from_json(const nlohmann::json& j);
// A preset name ("tiny", ...) or a path to a JSON file holding a config.
ModelConfig resolve_model_config(const std::string& name_or_path);

// A checkpoint is a directory holding `manifest.json` (config plus, per
// parameter, its shape and byte offset/length in the blob) and `weights.bin`,
// a contiguous little-endian float32 blob in manifest order.
inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kBlobFile = "weights.bin";

void save_checkpoint(const std::filesystem::path& dir, const ModelWeights<float>& weights);
ModelWeights<float> load_checkpoint(const std::filesystem::path& dir);

}  // namespace moment
