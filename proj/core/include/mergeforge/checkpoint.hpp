#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "mergeforge/model.hpp"

namespace mergeforge {

// On-disk checkpoint: a directory holding
//   manifest.json  ordered layer/param names + shapes, config, seed, provenance
//   params.bin     little-endian IEEE-754 doubles concatenated in manifest order
// Round-trips are bit-exact.
struct Checkpoint {
    ModelConfig config;
    ParameterSet params;
    uint64_t seed = 0;
    nlohmann::json provenance;
};

void save_checkpoint(const std::filesystem::path& dir, const ModelConfig& config,
                     const ParameterSet& params, uint64_t seed,
                     const nlohmann::json& provenance = nlohmann::json::object());

Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace mergeforge
