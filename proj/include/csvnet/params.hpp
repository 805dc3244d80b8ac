#pragma once

// Decoder configuration and trainable parameter containers.

#include <cstdint>
#include <string>
#include <vector>

#include "csvnet/kernels.hpp"

namespace csvnet {

using kernels::Matrix;

struct ModelConfig {
    int block_size = 32;
    int m_key = 40;
    int m_nonkey = 10;
    int frames = 10;  // GOP length T
    int kernel_size = 3;
    std::vector<int> key_channels{128, 64, 32, 32, 16, 16, 1};
    std::vector<int> nonkey_channels{64, 16, 1};
    int hidden_size = 1024;
    int lstm_layers = 1;

    int n() const { return block_size * block_size; }
    /// Throws ValidationError on inconsistent settings.
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

/// Weight (out x in) and bias (out x 1).
template <typename S>
struct AffineParams {
    Matrix<S> weight;
    Matrix<S> bias;
};

/// Dense stage mapping m measurements to one block-sized map, followed by
/// size-preserving convolutions. conv[i].weight is (cout, k*k*cin).
template <typename S>
struct CnnParams {
    AffineParams<S> fc;
    std::vector<AffineParams<S>> conv;
};

/// Gate rows are ordered input, forget, cell candidate, output.
template <typename S>
struct LstmLayerParams {
    Matrix<S> w_input;   // 4H x in
    Matrix<S> w_hidden;  // 4H x H
    Matrix<S> bias;      // 4H x 1
};

template <typename S>
struct LstmParams {
    std::vector<LstmLayerParams<S>> layers;
    AffineParams<S> projection;  // n x H
};

template <typename S>
struct DecoderParams {
    ModelConfig config;
    CnnParams<S> key;
    CnnParams<S> nonkey;
    LstmParams<S> lstm;
};

// Visits every tensor with a stable name, in a fixed order.
template <typename P, typename F>
void for_each_tensor(P& cnn, const std::string& prefix, F&& f)
    requires requires { cnn.fc; cnn.conv; }
{
    f(prefix + ".fc.weight", cnn.fc.weight);
    f(prefix + ".fc.bias", cnn.fc.bias);
    for (std::size_t i = 0; i < cnn.conv.size(); ++i) {
        f(prefix + ".conv" + std::to_string(i) + ".weight", cnn.conv[i].weight);
        f(prefix + ".conv" + std::to_string(i) + ".bias", cnn.conv[i].bias);
    }
}

template <typename P, typename F>
void for_each_tensor(P& lstm, const std::string& prefix, F&& f)
    requires requires { lstm.layers; lstm.projection; }
{
    for (std::size_t i = 0; i < lstm.layers.size(); ++i) {
        const std::string base = prefix + ".layer" + std::to_string(i);
        f(base + ".w_input", lstm.layers[i].w_input);
        f(base + ".w_hidden", lstm.layers[i].w_hidden);
        f(base + ".bias", lstm.layers[i].bias);
    }
    f(prefix + ".projection.weight", lstm.projection.weight);
    f(prefix + ".projection.bias", lstm.projection.bias);
}

template <typename P, typename F>
void for_each_tensor(P& params, F&& f)
    requires requires { params.key; params.nonkey; params.lstm; }
{
    for_each_tensor(params.key, "key", f);
    for_each_tensor(params.nonkey, "nonkey", f);
    for_each_tensor(params.lstm, "lstm", f);
}

template <typename S>
CnnParams<S> make_cnn_shape(int m, int block_size, int kernel, const std::vector<int>& channels);

/// Zero-valued parameters with the shapes implied by `config`.
template <typename S>
DecoderParams<S> zero_params(const ModelConfig& config);

/// Fan-in scaled uniform weights (bound sqrt(6/fan_in) before a ReLU,
/// sqrt(3/fan_in) before a linear output, 1/sqrt(H) inside the LSTM),
/// zero biases, forget-gate bias 1.0. Deterministic per seed.
template <typename S>
DecoderParams<S> init_params(const ModelConfig& config, std::uint64_t seed);

template <typename To, typename From>
DecoderParams<To> cast_params(const DecoderParams<From>& params);

template <typename To, typename From>
CnnParams<To> cast_cnn(const CnnParams<From>& params);

template <typename S>
std::size_t parameter_count(const DecoderParams<S>& params);

/// Throws NumericError if any entry is NaN or infinite.
template <typename S>
void check_finite(const DecoderParams<S>& params);

/// Throws ShapeError unless every tensor matches `params.config`.
template <typename S>
void check_shapes(const DecoderParams<S>& params);

}  // namespace csvnet
