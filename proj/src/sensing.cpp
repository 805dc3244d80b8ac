#include "csvnet/sensing.hpp"

#include <cmath>
#include <random>

#include "csvnet/common.hpp"

namespace csvnet {

namespace {
constexpr std::uint64_t kNonKeySeedOffset = 0x9E3779B97F4A7C15ull;
}

float SensingMatrixSet::key_scale() const { return phi_key.values.empty() ? 0.0f : std::abs(phi_key.values[0]); }
float SensingMatrixSet::nonkey_scale() const {
    return phi_nonkey.values.empty() ? 0.0f : std::abs(phi_nonkey.values[0]);
}

SensingMatrix make_bernoulli_matrix(int m, int n, std::uint64_t seed) {
    if (m < 1 || n < 1)
        throw ValidationError("Bernoulli matrix needs positive dimensions, got " + std::to_string(m) + "x" +
                              std::to_string(n));
    SensingMatrix phi;
    phi.rows = m;
    phi.cols = n;
    phi.values.resize(static_cast<std::size_t>(m) * n);
    const float scale = static_cast<float>(1.0 / std::sqrt(static_cast<double>(m)));
    std::mt19937_64 engine(seed);
    for (auto& v : phi.values) v = (engine() >> 63) ? scale : -scale;
    return phi;
}

SensingMatrixSet make_sensing_set(int n, int m_key, int m_nonkey, std::uint64_t seed) {
    require(n >= 1, "block length must be positive");
    require(m_key >= m_nonkey && m_nonkey >= 1,
            "sensing rates need m_key >= m_nonkey >= 1, got " + std::to_string(m_key) + ", " + std::to_string(m_nonkey));
    require(m_key <= n, "m_key cannot exceed the block length");
    SensingMatrixSet set;
    set.n = n;
    set.m_key = m_key;
    set.m_nonkey = m_nonkey;
    set.seed = seed;
    set.phi_key = make_bernoulli_matrix(m_key, n, seed);
    set.phi_nonkey = make_bernoulli_matrix(m_nonkey, n, seed + kNonKeySeedOffset);
    return set;
}

void sense_block_into(const SensingMatrix& phi, std::span<const float> block, std::span<float> out) {
    if (static_cast<int>(block.size()) != phi.cols)
        throw ShapeError("block length " + std::to_string(block.size()) + " does not match sensing matrix columns " +
                         std::to_string(phi.cols));
    require_shape(static_cast<int>(out.size()) == phi.rows, "measurement buffer length mismatch");
    for (int i = 0; i < phi.rows; ++i) {
        const float* row = phi.values.data() + static_cast<std::size_t>(i) * phi.cols;
        double acc = 0.0;
        for (int j = 0; j < phi.cols; ++j) acc += static_cast<double>(row[j]) * block[j];
        out[i] = static_cast<float>(acc);
    }
}

std::vector<float> sense_block(const SensingMatrix& phi, std::span<const float> block) {
    std::vector<float> y(static_cast<std::size_t>(phi.rows));
    sense_block_into(phi, block, y);
    return y;
}

MeasurementGop sense_gop(const SensingMatrixSet& mats, const GopBlockSequence& gop) {
    require_shape(gop.block_len() == mats.n, "GOP block length " + std::to_string(gop.block_len()) +
                                                 " does not match sensing n " + std::to_string(mats.n));
    require_shape(gop.frames >= 2, "GOP needs at least two frames");
    require_shape(gop.values.size() == static_cast<std::size_t>(gop.frames) * gop.positions() * gop.block_len(),
                  "GOP storage does not match its shape");
    MeasurementGop mg;
    mg.frames = gop.frames;
    mg.grid_rows = gop.grid_rows;
    mg.grid_cols = gop.grid_cols;
    mg.m_key = mats.m_key;
    mg.m_nonkey = mats.m_nonkey;
    mg.n = mats.n;
    const int positions = gop.positions();
    mg.key.resize(static_cast<std::size_t>(positions) * mats.m_key);
    mg.nonkey.resize(static_cast<std::size_t>(gop.frames - 1) * positions * mats.m_nonkey);
    for (int p = 0; p < positions; ++p) {
        sense_block_into(mats.phi_key, gop.block(0, p / gop.grid_cols, p % gop.grid_cols),
                         std::span<float>(mg.key.data() + static_cast<std::size_t>(p) * mats.m_key, mats.m_key));
    }
    for (int t = 1; t < gop.frames; ++t)
        for (int p = 0; p < positions; ++p) {
            float* dst = mg.nonkey.data() + (static_cast<std::size_t>(t - 1) * positions + p) * mats.m_nonkey;
            sense_block_into(mats.phi_nonkey, gop.block(t, p / gop.grid_cols, p % gop.grid_cols),
                             std::span<float>(dst, mats.m_nonkey));
        }
    return mg;
}

std::vector<float> add_measurement_noise(std::span<const float> y, double snr_db, std::uint64_t seed) {
    if (std::isinf(snr_db) && snr_db > 0) return {y.begin(), y.end()};
    if (!std::isfinite(snr_db)) throw ValidationError("SNR must be finite or +inf");
    require(!y.empty(), "cannot add noise to an empty vector");
    double power = 0.0;
    for (float v : y) power += static_cast<double>(v) * v;
    power /= static_cast<double>(y.size());
    if (power <= 0.0) throw ValidationError("zero-power signal: SNR is undefined");
    const double sigma = std::sqrt(power / std::pow(10.0, snr_db / 10.0));
    std::mt19937_64 engine(seed);
    std::normal_distribution<double> gauss(0.0, sigma);
    std::vector<float> out(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) out[i] = static_cast<float>(y[i] + gauss(engine));
    return out;
}

double aggregate_cr(int m_key, int m_nonkey, int frames, int n) {
    require(m_key > 0 && m_nonkey > 0 && frames > 0 && n > 0, "aggregate CR needs positive arguments");
    return static_cast<double>(frames) * n / (m_key + static_cast<double>(frames - 1) * m_nonkey);
}

int measurements_for_cr(int cr_label, int n) {
    require(cr_label > 0 && n > 0, "CR label and block length must be positive");
    return std::max(1, n / cr_label);
}

}  // namespace csvnet
