#pragma once

// Versioned checkpoint container:
//   line 1  "CSVNET-CHECKPOINT <version>"
//   line 2  byte length of the JSON header
//   header  JSON metadata (config, sensing, step, tensor table, payload crc)
//   payload little-endian float32 arrays, column-major, in table order

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "csvnet/params.hpp"
#include "csvnet/sensing.hpp"
#include "csvnet/training.hpp"

namespace csvnet {

inline constexpr int kCheckpointVersion = 1;

struct SensingMeta {
    std::uint64_t seed = 0;
    int n = 0;
    int m_key = 0;
    int m_nonkey = 0;
    float key_scale = 0.0f;
    float nonkey_scale = 0.0f;
    NoiseMode noise_mode = NoiseMode::measurement;

    static SensingMeta of(const SensingMatrixSet& set, NoiseMode mode = NoiseMode::measurement);
    SensingMatrixSet regenerate() const;
};

enum class CheckpointKind { key_cnn, decoder };

struct Checkpoint {
    CheckpointKind kind = CheckpointKind::decoder;
    DecoderMode mode = DecoderMode::csvideonet;
    /// For key_cnn checkpoints only params.key is populated.
    DecoderParams<float> params;
    OptimizerState optimizer;
    SensingMeta sensing;
    TrainConfig train;
    long step = 0;
    /// Free-form resolved run configuration, stored verbatim.
    nlohmann::json run_config = nlohmann::json::object();
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);

/// Validates version, tensor table, shapes and payload checksum. With
/// `expected`, the stored model configuration must equal it.
Checkpoint load_checkpoint(const std::string& path, const ModelConfig* expected = nullptr);

nlohmann::json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

const char* to_string(NoiseMode mode);
NoiseMode noise_mode_from_string(const std::string& name);

}  // namespace csvnet
