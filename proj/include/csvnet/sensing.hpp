#pragma once

// Multi-rate block compressive sensing: Bernoulli operators, block and GOP
// projection, and sensor-noise injection.

#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "csvnet/ingest.hpp"

namespace csvnet {

/// Dense row-major m x n sensing operator.
struct SensingMatrix {
    int rows = 0;
    int cols = 0;
    std::vector<float> values;

    std::span<const float> row(int i) const {
        return {values.data() + static_cast<std::size_t>(i) * cols, static_cast<std::size_t>(cols)};
    }
    bool operator==(const SensingMatrix&) const = default;
};

enum class NoiseMode { measurement, frame };

/// Regenerable from (seed, m_key, m_nonkey, n) alone.
struct SensingMatrixSet {
    int n = 0;
    int m_key = 0;
    int m_nonkey = 0;
    std::uint64_t seed = 0;
    SensingMatrix phi_key;
    SensingMatrix phi_nonkey;

    float key_scale() const;
    float nonkey_scale() const;
};

/// Measurements of one GOP. key: (gridRow, gridCol, m_key);
/// nonkey: (frame-1, gridRow, gridCol, m_nonkey).
struct MeasurementGop {
    int frames = 0;
    int grid_rows = 0;
    int grid_cols = 0;
    int m_key = 0;
    int m_nonkey = 0;
    int n = 0;
    std::vector<float> key;
    std::vector<float> nonkey;

    int positions() const { return grid_rows * grid_cols; }
    std::span<const float> key_vector(int pos) const {
        return {key.data() + static_cast<std::size_t>(pos) * m_key, static_cast<std::size_t>(m_key)};
    }
    /// t in [1, frames).
    std::span<const float> nonkey_vector(int t, int pos) const {
        return {nonkey.data() + (static_cast<std::size_t>(t - 1) * positions() + pos) * m_nonkey,
                static_cast<std::size_t>(m_nonkey)};
    }
};

/// Entries are +-1/sqrt(m), one sign bit per mt19937_64 draw in row-major order.
SensingMatrix make_bernoulli_matrix(int m, int n, std::uint64_t seed);

/// Key operator uses `seed`; the non-key operator uses a derived seed.
SensingMatrixSet make_sensing_set(int n, int m_key, int m_nonkey, std::uint64_t seed);

/// phi * block, accumulated in double and rounded once to float.
std::vector<float> sense_block(const SensingMatrix& phi, std::span<const float> block);
void sense_block_into(const SensingMatrix& phi, std::span<const float> block, std::span<float> out);

MeasurementGop sense_gop(const SensingMatrixSet& mats, const GopBlockSequence& gop);

inline constexpr double kNoiseDisabled = std::numeric_limits<double>::infinity();

/// y + white Gaussian noise with power mean(y^2) / 10^(snr_db/10).
/// snr_db = +inf returns y unchanged.
std::vector<float> add_measurement_noise(std::span<const float> y, double snr_db, std::uint64_t seed);

/// GOP-level compression ratio T*n / (m_key + (T-1)*m_nonkey).
double aggregate_cr(int m_key, int m_nonkey, int frames, int n);

/// Per-frame measurement count for a nominal CR label at n = 1024
/// (25 -> 40, 50 -> 20, 100 -> 10); other labels round n/label.
int measurements_for_cr(int cr_label, int n = 1024);

}  // namespace csvnet
