#pragma once
// Structured run configuration (JSON). Every block has documented defaults;
// unknown keys are rejected with the offending path.

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "volssl/augment.hpp"
#include "volssl/backbone.hpp"
#include "volssl/prep.hpp"
#include "volssl/trainer.hpp"

namespace volssl::config {

using Json = nlohmann::ordered_json;

struct PrepConfig {
  std::size_t max_side = prep::kDefaultMaxSide;
  double air_threshold_hu = prep::kDefaultAirThresholdHu;
  bool operator==(const PrepConfig&) const = default;
};

enum class EmbedMode { full3d, chunked2p5d };

struct EmbedConfig {
  EmbedMode mode = EmbedMode::full3d;
  std::size_t chunk_depth = 112;
  std::size_t max_tokens = 4096;  // full-3D budget in patch tokens
  bool operator==(const EmbedConfig&) const = default;
};

struct ProbeConfig {
  std::size_t epochs = 100;
  std::size_t patience = 10;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  std::size_t hidden = 256;
  double fraction = 1.0;
  std::size_t qformer_queries = 8;
  std::size_t qformer_heads = 4;
  std::size_t loc_heads = 4;
  std::size_t seg_channels = 32;
  std::size_t seg_max_side = 32;  // label volumes are sampled down to at most this side
  double val_fraction = 0.2;
  double test_fraction = 0.2;
  bool operator==(const ProbeConfig&) const = default;
};

struct EvalConfig {
  std::size_t bootstrap = 10000;
  std::size_t max_redraws = 100;
  bool operator==(const EvalConfig&) const = default;
};

struct RunConfig {
  std::uint64_t seed = 0;
  PrepConfig prep;
  train::SslConfig ssl;  // augment, backbone, heads, objectives and trainer blocks
  EmbedConfig embed;
  ProbeConfig probe;
  EvalConfig eval;

  void validate() const;
};

Json to_json(const RunConfig& c);
/// Missing keys take defaults; unknown keys and bad types throw ConfigError.
RunConfig from_json(const Json& j);

RunConfig load(const std::filesystem::path& path);
void save(const RunConfig& c, const std::filesystem::path& path);

/// Desk-scale defaults used by the phantom pipeline and acceptance runs.
RunConfig toy();

Json ssl_to_json(const train::SslConfig& c);
train::SslConfig ssl_from_json(const Json& j);

const char* to_string(EmbedMode m);
EmbedMode embed_mode_from_string(const std::string& s);

}  // namespace volssl::config
