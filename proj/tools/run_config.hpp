#pragma once

// Run configuration shared by every subcommand.
//
// Layout (all keys optional, unknown keys rejected):
//   out        output directory
//   ingest     paths, synthetic{clips,frames,seed}, cropHeight, cropWidth,
//              blockSize, gopLength, testClips
//   sensing    mKey, mNonKey, seed, noiseMode
//   model      kernelSize, keyChannels, nonkeyChannels, hiddenSize, lstmLayers
//   pretrain   train config for the key CNN phase
//   train      train config for the full phase
//   eval       crLabels, snrLevels, checkpoints{label: path}, noiseSeed,
//              repeats, warmup, frameLists, ablation{csvideonet, cnnOnly}
//   data       train, test (dataset dirs), pretrained (key CNN checkpoint)

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "csvnet/params.hpp"
#include "csvnet/sensing.hpp"
#include "csvnet/training.hpp"

namespace csvnet::app {

struct SyntheticSource {
    int clips = 0;
    int frames = 10;
    std::uint64_t seed = 1;
};

struct IngestSection {
    std::vector<std::string> paths;
    SyntheticSource synthetic;
    int crop_height = 160;
    int crop_width = 160;
    int block_size = 32;
    int gop_length = 10;
    int test_clips = 0;  // trailing clips held out as the test split
};

struct SensingSection {
    int m_key = 40;
    int m_nonkey = 10;
    std::uint64_t seed = 7;
    NoiseMode noise_mode = NoiseMode::measurement;
};

struct ModelSection {
    int kernel_size = 3;
    std::vector<int> key_channels{128, 64, 32, 32, 16, 16, 1};
    std::vector<int> nonkey_channels{64, 16, 1};
    int hidden_size = 1024;
    int lstm_layers = 1;
};

struct EvalSection {
    std::vector<int> cr_labels;  // empty: every label in checkpoints
    std::vector<double> snr_levels{kNoiseDisabled};
    std::map<int, std::string> checkpoints;
    std::uint64_t noise_seed = 0;
    int repeats = 20;
    int warmup = 2;
    bool frame_lists = true;
    std::string ablation_csvideonet;
    std::string ablation_cnn_only;
};

struct DataSection {
    std::string train;
    std::string test;
    std::string pretrained;
};

struct RunConfig {
    std::string out = "out";
    IngestSection ingest;
    SensingSection sensing;
    ModelSection model;
    TrainConfig pretrain = TrainConfig::pretrain_defaults();
    TrainConfig train = TrainConfig::full_defaults();
    EvalSection eval;
    DataSection data;

    ModelConfig model_config() const;
    SensingMatrixSet sensing_set() const;
    /// Labels to evaluate, each checked against the checkpoint map.
    std::vector<int> eval_labels() const;
    void validate() const;
};

nlohmann::json to_json(const RunConfig& config);
/// Strict: unknown keys and wrongly typed values raise ValidationError.
RunConfig run_config_from_json(const nlohmann::json& j);

struct ConfigSources {
    std::optional<std::string> file;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::vector<std::string> overrides;  // dotted.key=value, value parsed as JSON when possible
};

/// Defaults, then the file, then flags.
RunConfig resolve_config(const ConfigSources& sources);

/// The resolved config without host-specific paths (out, data, input
/// paths and checkpoint locations), as embedded in checkpoints.
nlohmann::json portable_config(const RunConfig& config);

}  // namespace csvnet::app
