#include "csvnet/params.hpp"

#include <cmath>
#include <random>

#include "csvnet/common.hpp"

namespace csvnet {

void ModelConfig::validate() const {
    require(block_size >= 1, "block_size must be positive");
    require(m_key >= 1 && m_nonkey >= 1, "measurement counts must be positive");
    require(m_key >= m_nonkey, "m_key must be >= m_nonkey");
    require(m_key <= n(), "m_key cannot exceed block_size^2");
    require(frames >= 2, "GOP length must be at least 2");
    require(kernel_size >= 1 && kernel_size % 2 == 1, "kernel_size must be odd and positive");
    require(hidden_size >= 1, "hidden_size must be positive");
    require(lstm_layers >= 1, "lstm_layers must be positive");
    for (const auto* plan : {&key_channels, &nonkey_channels}) {
        for (int c : *plan) require(c >= 1, "channel counts must be positive");
        require(plan->empty() || plan->back() == 1, "the last convolution must produce a single map");
    }
}

template <typename S>
CnnParams<S> make_cnn_shape(int m, int block_size, int kernel, const std::vector<int>& channels) {
    const int n = block_size * block_size;
    CnnParams<S> cnn;
    cnn.fc.weight = Matrix<S>::Zero(n, m);
    cnn.fc.bias = Matrix<S>::Zero(n, 1);
    int cin = 1;
    for (int cout : channels) {
        cnn.conv.push_back({Matrix<S>::Zero(cout, kernel * kernel * cin), Matrix<S>::Zero(cout, 1)});
        cin = cout;
    }
    return cnn;
}

template <typename S>
DecoderParams<S> zero_params(const ModelConfig& config) {
    config.validate();
    DecoderParams<S> p;
    p.config = config;
    p.key = make_cnn_shape<S>(config.m_key, config.block_size, config.kernel_size, config.key_channels);
    p.nonkey = make_cnn_shape<S>(config.m_nonkey, config.block_size, config.kernel_size, config.nonkey_channels);
    const int h = config.hidden_size;
    int in = config.n();
    for (int l = 0; l < config.lstm_layers; ++l) {
        p.lstm.layers.push_back({Matrix<S>::Zero(4 * h, in), Matrix<S>::Zero(4 * h, h), Matrix<S>::Zero(4 * h, 1)});
        in = h;
    }
    p.lstm.projection = {Matrix<S>::Zero(config.n(), h), Matrix<S>::Zero(config.n(), 1)};
    return p;
}

namespace {

template <typename S>
void fill_uniform(Matrix<S>& m, double bound, std::mt19937_64& engine) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    // column-major fill order, fixed
    for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = static_cast<S>(dist(engine));
}

double relu_bound(double fan_in) { return std::sqrt(6.0 / fan_in); }
double linear_bound(double fan_in) { return std::sqrt(3.0 / fan_in); }

template <typename S>
void init_cnn(CnnParams<S>& cnn, std::mt19937_64& engine) {
    const bool fc_is_last = cnn.conv.empty();
    const double fc_fan = static_cast<double>(cnn.fc.weight.cols());
    fill_uniform(cnn.fc.weight, fc_is_last ? linear_bound(fc_fan) : relu_bound(fc_fan), engine);
    for (std::size_t i = 0; i < cnn.conv.size(); ++i) {
        const double fan = static_cast<double>(cnn.conv[i].weight.cols());
        const bool last = i + 1 == cnn.conv.size();
        fill_uniform(cnn.conv[i].weight, last ? linear_bound(fan) : relu_bound(fan), engine);
    }
}

}  // namespace

template <typename S>
DecoderParams<S> init_params(const ModelConfig& config, std::uint64_t seed) {
    DecoderParams<S> p = zero_params<S>(config);
    std::mt19937_64 engine(seed);
    init_cnn(p.key, engine);
    init_cnn(p.nonkey, engine);
    const int h = config.hidden_size;
    const double lstm_bound = 1.0 / std::sqrt(static_cast<double>(h));
    for (auto& layer : p.lstm.layers) {
        fill_uniform(layer.w_input, lstm_bound, engine);
        fill_uniform(layer.w_hidden, lstm_bound, engine);
        layer.bias.middleRows(h, h).setConstant(S(1));
    }
    fill_uniform(p.lstm.projection.weight, linear_bound(h), engine);
    return p;
}

template <typename To, typename From>
CnnParams<To> cast_cnn(const CnnParams<From>& params) {
    CnnParams<To> out;
    out.fc = {params.fc.weight.template cast<To>(), params.fc.bias.template cast<To>()};
    for (const auto& c : params.conv) out.conv.push_back({c.weight.template cast<To>(), c.bias.template cast<To>()});
    return out;
}

template <typename To, typename From>
DecoderParams<To> cast_params(const DecoderParams<From>& params) {
    DecoderParams<To> out;
    out.config = params.config;
    out.key = cast_cnn<To>(params.key);
    out.nonkey = cast_cnn<To>(params.nonkey);
    for (const auto& l : params.lstm.layers)
        out.lstm.layers.push_back(
            {l.w_input.template cast<To>(), l.w_hidden.template cast<To>(), l.bias.template cast<To>()});
    out.lstm.projection = {params.lstm.projection.weight.template cast<To>(),
                           params.lstm.projection.bias.template cast<To>()};
    return out;
}

template <typename S>
std::size_t parameter_count(const DecoderParams<S>& params) {
    std::size_t total = 0;
    for_each_tensor(params, [&](const std::string&, const Matrix<S>& m) { total += static_cast<std::size_t>(m.size()); });
    return total;
}

template <typename S>
void check_finite(const DecoderParams<S>& params) {
    for_each_tensor(params, [](const std::string& name, const Matrix<S>& m) {
        if (!m.allFinite()) throw NumericError("non-finite values in parameter " + name);
    });
}

template <typename S>
void check_shapes(const DecoderParams<S>& params) {
    const DecoderParams<S> ref = zero_params<S>(params.config);
    std::vector<std::pair<Eigen::Index, Eigen::Index>> want;
    std::vector<std::string> names;
    for_each_tensor(ref, [&](const std::string& name, const Matrix<S>& m) {
        want.emplace_back(m.rows(), m.cols());
        names.push_back(name);
    });
    std::size_t i = 0;
    for_each_tensor(params, [&](const std::string& name, const Matrix<S>& m) {
        if (i >= want.size() || name != names[i] || m.rows() != want[i].first || m.cols() != want[i].second)
            throw ShapeError("parameter " + name + " does not match the model configuration");
        ++i;
    });
    if (i != want.size()) throw ShapeError("parameter set is missing tensors for the model configuration");
}

template CnnParams<float> make_cnn_shape<float>(int, int, int, const std::vector<int>&);
template CnnParams<double> make_cnn_shape<double>(int, int, int, const std::vector<int>&);
template DecoderParams<float> zero_params<float>(const ModelConfig&);
template DecoderParams<double> zero_params<double>(const ModelConfig&);
template DecoderParams<float> init_params<float>(const ModelConfig&, std::uint64_t);
template DecoderParams<double> init_params<double>(const ModelConfig&, std::uint64_t);
template DecoderParams<float> cast_params<float, double>(const DecoderParams<double>&);
template DecoderParams<double> cast_params<double, float>(const DecoderParams<float>&);
template DecoderParams<float> cast_params<float, float>(const DecoderParams<float>&);
template DecoderParams<double> cast_params<double, double>(const DecoderParams<double>&);
template CnnParams<float> cast_cnn<float, double>(const CnnParams<double>&);
template CnnParams<double> cast_cnn<double, float>(const CnnParams<float>&);
template CnnParams<float> cast_cnn<float, float>(const CnnParams<float>&);
template std::size_t parameter_count<float>(const DecoderParams<float>&);
template std::size_t parameter_count<double>(const DecoderParams<double>&);
template void check_finite<float>(const DecoderParams<float>&);
template void check_finite<double>(const DecoderParams<double>&);
template void check_shapes<float>(const DecoderParams<float>&);
template void check_shapes<double>(const DecoderParams<double>&);

}  // namespace csvnet
