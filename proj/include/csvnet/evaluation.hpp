#pragma once

// Frame quality metrics, the (CR x SNR) evaluation sweep, runtime
// benchmarking and report/plot emission.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "csvnet/ingest.hpp"
#include "csvnet/model.hpp"
#include "csvnet/sensing.hpp"

namespace csvnet {

/// Returned by psnr for identical frames (and an upper clip otherwise).
inline constexpr double kPsnrCap = 100.0;

struct SsimParams {
    double k1 = 0.01;
    double k2 = 0.03;
    double dynamic_range = 255.0;
    int window = 11;
    double sigma = 1.5;
};

/// Frames hold values in [0,1]; metrics work on the [0,255] scale.
double psnr(const Plane& x, const Plane& y);
double mae(const Plane& x, const Plane& y);
/// Mean SSIM over all valid window positions (no padding).
double ssim(const Plane& x, const Plane& y, const SsimParams& params = {});

/// 100 * (low - high) / low.
double psnr_drop(double psnr_low, double psnr_high);

struct CellMetrics {
    int cr_label = 0;
    double snr_db = kNoiseDisabled;
    double mean_psnr = 0.0;
    double mean_ssim = 0.0;
    double mean_mae = 0.0;
    int sample_count = 0;
    std::vector<double> frame_psnr;
    std::vector<double> frame_ssim;
    std::vector<double> frame_mae;
};

struct RuntimeStats {
    int cr_label = 0;
    int repeats = 0;
    int warmup = 0;
    int threads = 1;
    double mean_ms = 0.0;  // per 160x160 frame
    double min_ms = 0.0;
    double max_ms = 0.0;
};

struct MetricsReport {
    std::vector<CellMetrics> cells;
    /// Between the lowest and the highest CR label on clean input, if both exist.
    std::optional<double> psnr_drop_percent;
    std::optional<std::pair<int, int>> psnr_drop_labels;
    std::vector<RuntimeStats> runtime;

    const CellMetrics* find(int cr_label, double snr_db) const;
};

/// A trained decoder together with the encoder it was trained against.
struct EvalModel {
    int cr_label = 0;
    DecoderParams<float> params;
    SensingMatrixSet sensing;
    DecoderMode mode = DecoderMode::csvideonet;
};

struct EvalOptions {
    std::vector<double> snr_levels{kNoiseDisabled};
    NoiseMode noise_mode = NoiseMode::measurement;
    std::uint64_t noise_seed = 0;
    bool keep_frame_lists = true;
};

/// Noise of one GOP stream; stream 0 = key measurements, 1 = non-key
/// measurements, 2 = pixels in frame mode.
std::uint64_t noise_seed_for(std::uint64_t base, std::size_t gop, int stream, std::size_t snr_index);

/// Applies the sweep noise to one GOP (frame mode) or its measurements.
MeasurementGop sense_with_noise(const SensingMatrixSet& sensing, const GopBlockSequence& gop, double snr_db,
                                NoiseMode mode, std::uint64_t seed_base, std::size_t gop_index,
                                std::size_t snr_index);

/// Reconstruction clamped to [0,1].
GopBlockSequence reconstruct_clamped(const EvalModel& model, const MeasurementGop& mg);

/// One cell per (model, snr) pair, in model-major order.
MetricsReport evaluate_model(std::span<const EvalModel> models, std::span<const GopBlockSequence> dataset,
                             const EvalOptions& options);

/// Times whole-GOP reconstructions of a fixed synthetic GOP; per-frame time
/// is the GOP time divided by T. Warm-up runs are excluded.
RuntimeStats runtime_bench(const EvalModel& model, int repeats, int warmup = 2);

nlohmann::json report_to_json(const MetricsReport& report);
/// Columns cr, snr, psnr, ssim, mae, n.
std::string report_to_csv(const MetricsReport& report);
/// PSNR against SNR, one polyline per CR label, as an SVG document.
std::string psnr_snr_plot_svg(const MetricsReport& report);

std::string snr_label(double snr_db);
double snr_from_label(const std::string& label);

}  // namespace csvnet
