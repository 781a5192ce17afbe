#include "moment/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

namespace moment {
namespace {

using nlohmann::json;

std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
  }
  return v;
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("invalid JSON in '" + path.string() + "': " + e.what());
  }
}

}  // namespace

json to_json(const ModelConfig& c) {
  return json{{"seq_len", c.seq_len},     {"patch_len", c.patch_len},
              {"d_model", c.d_model},     {"n_layers", c.n_layers},
              {"n_heads", c.n_heads},     {"d_ff", c.d_ff},
              {"n_rel_buckets", c.n_rel_buckets}, {"rel_max_distance", c.rel_max_distance},
              {"revin_eps", c.revin_eps}, {"norm_eps", c.norm_eps}};
}

ModelConfig model_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  ModelConfig c;
  if (j.contains("preset")) c = ModelConfig::named(j.at("preset").get<std::string>());
  static const std::set<std::string> known = {"preset",    "seq_len",       "patch_len",        "d_model",
                                              "n_layers",  "n_heads",       "d_ff",             "n_rel_buckets",
                                              "rel_max_distance", "revin_eps", "norm_eps"};
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown model config key '" + key + "'");
  }
  try {
    const auto get_int = [&](const char* key, int& dst) {
      if (j.contains(key)) dst = j.at(key).get<int>();
    };
    get_int("seq_len", c.seq_len);
    get_int("patch_len", c.patch_len);
    get_int("d_model", c.d_model);
    get_int("n_layers", c.n_layers);
    get_int("n_heads", c.n_heads);
    get_int("d_ff", c.d_ff);
    get_int("n_rel_buckets", c.n_rel_buckets);
    get_int("rel_max_distance", c.rel_max_distance);
    if (j.contains("revin_eps")) c.revin_eps = j.at("revin_eps").get<double>();
    if (j.contains("norm_eps")) c.norm_eps = j.at("norm_eps").get<double>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

ModelConfig resolve_model_config(const std::string& name_or_path) {
  if (name_or_path == "tiny" || name_or_path == "small" || name_or_path == "base") {
    return ModelConfig::named(name_or_path);
  }
  json j = read_json(name_or_path);
  // A run config may nest the model section.
  if (j.contains("model") && j.at("model").is_object()) j = j.at("model");
  if (j.is_string()) return ModelConfig::named(j.get<std::string>());
  return model_config_from_json(j);
}

void save_checkpoint(const std::filesystem::path& dir, const ModelWeights<float>& weights) {
  weights.validate();
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["format"] = "moment-mini-checkpoint";
  manifest["version"] = 1;
  manifest["config"] = to_json(weights.config);
  manifest["forecast_horizon"] = weights.horizon();
  manifest["blob"] = kBlobFile;
  manifest["dtype"] = "float32-le";
  std::ofstream blob(dir / kBlobFile, std::ios::binary);
  if (!blob) throw ConfigError("cannot write '" + (dir / kBlobFile).string() + "'");
  std::uint64_t offset = 0;
  json params = json::object();
  for (const auto& [name, m] : weights.params) {
    const std::uint64_t length = static_cast<std::uint64_t>(m.size()) * sizeof(float);
    params[name] = {{"shape", {m.rows(), m.cols()}}, {"offset", offset}, {"length", length}};
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const std::uint32_t bits = to_little_endian(std::bit_cast<std::uint32_t>(m.data()[i]));
      blob.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
    }
    offset += length;
  }
  manifest["parameters"] = params;
  manifest["blob_bytes"] = offset;
  std::ofstream out(dir / kManifestFile);
  out << manifest.dump(2) << '\n';
  if (!out || !blob) throw ConfigError("failed writing checkpoint to '" + dir.string() + "'");
}

ModelWeights<float> load_checkpoint(const std::filesystem::path& dir) {
  const json manifest = read_json(dir / kManifestFile);
  ModelWeights<float> w;
  int horizon = 0;
  try {
    w.config = model_config_from_json(manifest.at("config"));
    horizon = manifest.value("forecast_horizon", 0);
  } catch (const json::exception& e) {
    throw ConfigError("checkpoint manifest: " + std::string(e.what()));
  }
  std::ifstream blob(dir / manifest.value("blob", std::string(kBlobFile)), std::ios::binary);
  if (!blob) throw ConfigError("cannot open checkpoint blob in '" + dir.string() + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(blob)), std::istreambuf_iterator<char>());

  const auto expected = parameter_shapes(w.config, horizon);
  const auto& params = manifest.at("parameters");
  for (const auto& [name, shape] : expected) {
    if (!params.contains(name)) throw ConfigError("checkpoint is missing parameter '" + name + "'");
    const auto& entry = params.at(name);
    const auto rows = entry.at("shape").at(0).get<Eigen::Index>();
    const auto cols = entry.at("shape").at(1).get<Eigen::Index>();
    if (rows != shape.first || cols != shape.second) {
      throw ConfigError("checkpoint parameter '" + name + "' has shape " + std::to_string(rows) + "x" +
                        std::to_string(cols) + ", config expects " + std::to_string(shape.first) + "x" +
                        std::to_string(shape.second));
    }
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const auto length = entry.at("length").get<std::uint64_t>();
    if (length != static_cast<std::uint64_t>(rows * cols) * sizeof(float) || offset + length > bytes.size()) {
      throw ConfigError("checkpoint parameter '" + name + "' has an inconsistent byte range");
    }
    Matrix<float> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      std::uint32_t bits = 0;
      std::memcpy(&bits, bytes.data() + offset + static_cast<std::uint64_t>(i) * sizeof(float), sizeof(bits));
      m.data()[i] = std::bit_cast<float>(to_little_endian(bits));
    }
    w.params[name] = std::move(m);
  }
  for (const auto& [name, entry] : params.items()) {
    if (!expected.contains(name)) throw ConfigError("checkpoint has unexpected parameter '" + name + "'");
  }
  return w;
}

}  // namespace moment
