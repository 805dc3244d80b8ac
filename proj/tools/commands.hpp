#pragma once

#include <string>

#include "run_config.hpp"

namespace csvnet::app {

// Every command writes into config.out: config.json (resolved config),
// manifest.json (version, command, produced files with CRC-32) and its own
// artifacts. A `.incomplete` marker exists while the command runs; a
// `FAILED` marker with the error replaces it when the command throws.

inline constexpr const char* kIncompleteMarker = ".incomplete";
inline constexpr const char* kFailedMarker = "FAILED";

/// out/train (and out/test when ingest.testClips > 0) datasets.
void cmd_ingest(const RunConfig& config);
/// out/key_cnn.ckpt and out/pretrain.jsonl from data.train.
void cmd_pretrain(const RunConfig& config);
/// out/decoder.ckpt, out/train.jsonl and (with evalEvery) out/eval.jsonl.
void cmd_train(const RunConfig& config);
/// out/metrics.json, out/metrics.csv and out/psnr_snr.svg on data.test.
void cmd_eval(const RunConfig& config);
/// out/runtime.json and out/runtime.csv.
void cmd_bench(const RunConfig& config);
/// out/ablation.json: both arms' PSNR per SNR level and their difference.
void cmd_ablate(const RunConfig& config);

/// Full command-line entry point. Returns 0 on success, 2 for invalid
/// arguments or configuration, 1 for runtime failures.
int cli_main(int argc, char** argv);

}  // namespace csvnet::app
