#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"
#include "ropelab/model.h"

namespace ropelab {

nlohmann::json to_json(const AttentionSpec& spec);
AttentionSpec attention_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TinyLMConfig& config);
TinyLMConfig model_config_from_json(const nlohmann::json& j);

struct Checkpoint {
  TinyLM model;
  // Free-form provenance: config hashes, method, lineage.
  nlohmann::json metadata;
};

// Layout: the magic line "ROPELAB-CKPT 1\n", an 8-byte little-endian header
// length, a JSON header (config, step, blob directory, metadata), then raw
// little-endian doubles for every parameter followed by every EMA tensor.
void save_checkpoint(const std::filesystem::path& path, const TinyLM& model,
                     const nlohmann::json& metadata);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace ropelab
