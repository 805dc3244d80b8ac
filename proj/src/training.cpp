#include "csvnet/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

#include "csvnet/common.hpp"

namespace csvnet {

TrainConfig TrainConfig::pretrain_defaults() {
    TrainConfig c;
    c.phase = TrainPhase::pretrain;
    c.batch_size = 100;
    c.learning_rate = 1e-3;
    c.clip_norm = 0.0;
    return c;
}

TrainConfig TrainConfig::full_defaults() { return TrainConfig{}; }

void TrainConfig::validate() const {
    require(batch_size >= 1, "batch size must be positive");
    require(steps >= 1, "step count must be positive");
    require(std::isfinite(learning_rate) && learning_rate > 0.0, "learning rate must be positive");
    require(adam_beta1 > 0.0 && adam_beta1 < 1.0, "adam beta1 must lie in (0,1)");
    require(adam_beta2 > 0.0 && adam_beta2 < 1.0, "adam beta2 must lie in (0,1)");
    require(adam_eps > 0.0, "adam epsilon must be positive");
    require(eval_every >= 0, "evalEvery must be non-negative");
    require(std::isfinite(clip_norm), "clip norm must be finite");
}

// --- datasets ------------------------------------------------------------------

KeyBlockSet build_key_block_set(std::span<const GopBlockSequence> gops, const SensingMatrixSet& sensing) {
    require(!gops.empty(), "empty dataset");
    const int n = sensing.n;
    std::size_t total = 0;
    for (const auto& g : gops) {
        require_shape(g.block_len() == n, "block size does not match the sensing operator");
        total += static_cast<std::size_t>(g.positions());
    }
    KeyBlockSet set;
    set.measurements.resize(sensing.m_key, static_cast<Eigen::Index>(total));
    set.blocks.resize(n, static_cast<Eigen::Index>(total));
    Eigen::Index col = 0;
    for (const auto& g : gops) {
        for (int r = 0; r < g.grid_rows; ++r)
            for (int c = 0; c < g.grid_cols; ++c, ++col) {
                const auto block = g.block(0, r, c);
                std::copy(block.begin(), block.end(), set.blocks.col(col).data());
                sense_block_into(sensing.phi_key, block,
                                 {set.measurements.col(col).data(), static_cast<std::size_t>(sensing.m_key)});
            }
    }
    return set;
}

SequenceSet build_sequence_set(std::span<const GopBlockSequence> gops, const SensingMatrixSet& sensing) {
    require(!gops.empty(), "empty dataset");
    const int n = sensing.n;
    const int frames = gops.front().frames;
    std::size_t total = 0;
    for (const auto& g : gops) {
        require_shape(g.block_len() == n, "block size does not match the sensing operator");
        require_shape(g.frames == frames, "GOPs of different lengths in one dataset");
        total += static_cast<std::size_t>(g.positions());
    }
    const auto items = static_cast<Eigen::Index>(total);
    SequenceSet set;
    set.frames = frames;
    set.key.resize(sensing.m_key, items);
    set.nonkey.resize(sensing.m_nonkey, items * (frames - 1));
    set.targets.resize(n, items * frames);
    Eigen::Index item = 0;
    for (const auto& g : gops) {
        const MeasurementGop mg = sense_gop(sensing, g);
        for (int pos = 0; pos < g.positions(); ++pos, ++item) {
            const auto kv = mg.key_vector(pos);
            std::copy(kv.begin(), kv.end(), set.key.col(item).data());
            for (int t = 1; t < frames; ++t) {
                const auto v = mg.nonkey_vector(t, pos);
                std::copy(v.begin(), v.end(), set.nonkey.col(item * (frames - 1) + t - 1).data());
            }
            for (int t = 0; t < frames; ++t) {
                const auto b = g.block(t, pos / g.grid_cols, pos % g.grid_cols);
                std::copy(b.begin(), b.end(), set.targets.col(item * frames + t).data());
            }
        }
    }
    return set;
}

SequenceBatch<float> gather_batch(const SequenceSet& set, std::span<const int> items, Matrix<float>* targets) {
    const auto b = static_cast<Eigen::Index>(items.size());
    const int frames = set.frames;
    SequenceBatch<float> batch;
    batch.items = static_cast<int>(b);
    batch.key.resize(set.key.rows(), b);
    batch.nonkey.resize(set.nonkey.rows(), (frames - 1) * b);
    if (targets) targets->resize(set.targets.rows(), frames * b);
    for (Eigen::Index j = 0; j < b; ++j) {
        const Eigen::Index i = items[static_cast<std::size_t>(j)];
        require(i >= 0 && i < set.size(), "batch index out of range");
        batch.key.col(j) = set.key.col(i);
        for (int t = 1; t < frames; ++t)
            batch.nonkey.col((t - 1) * b + j) = set.nonkey.col(i * (frames - 1) + t - 1);
        if (targets)
            for (int t = 0; t < frames; ++t) targets->col(t * b + j) = set.targets.col(i * frames + t);
    }
    return batch;
}

// --- loss and optimizers -------------------------------------------------------

template <typename S>
double mse_loss(const Matrix<S>& pred, const Matrix<S>& target, int items) {
    require_shape(pred.rows() == target.rows() && pred.cols() == target.cols(), "prediction and target shapes differ");
    require(items >= 1, "loss needs at least one item");
    if (!pred.allFinite() || !target.allFinite()) throw NumericError("non-finite values in loss inputs");
    return (pred.template cast<double>() - target.template cast<double>()).squaredNorm() /
           (2.0 * static_cast<double>(items));
}

namespace {

struct TensorList {
    std::vector<std::string> names;
    std::vector<Matrix<float>*> tensors;
};

template <typename P>
TensorList collect(P& params) {
    TensorList out;
    auto visit = [&](const std::string& name, Matrix<float>& m) {
        out.names.push_back(name);
        out.tensors.push_back(&m);
    };
    if constexpr (requires { params.lstm; })
        for_each_tensor(params, visit);
    else
        for_each_tensor(params, "key", visit);
    return out;
}

void prepare_state(const TensorList& params, const TensorList& grads, OptimizerState& state) {
    require_shape(params.tensors.size() == grads.tensors.size(), "gradient set does not match parameters");
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
        const auto& p = *params.tensors[i];
        const auto& g = *grads.tensors[i];
        require_shape(p.rows() == g.rows() && p.cols() == g.cols(), "gradient shape mismatch for " + params.names[i]);
        if (!g.allFinite()) throw NumericError("non-finite gradient in " + params.names[i]);
    }
    if (state.first.empty() && state.step == 0) {
        state.names = params.names;
        for (auto* p : params.tensors) {
            state.first.push_back(Matrix<float>::Zero(p->rows(), p->cols()));
            state.second.push_back(Matrix<float>::Zero(p->rows(), p->cols()));
        }
    }
    require_shape(state.names == params.names && state.first.size() == params.tensors.size() &&
                      state.second.size() == params.tensors.size(),
                  "optimizer state does not match the parameter set");
    for (std::size_t i = 0; i < params.tensors.size(); ++i)
        require_shape(state.first[i].rows() == params.tensors[i]->rows() &&
                          state.first[i].cols() == params.tensors[i]->cols() &&
                          state.second[i].rows() == params.tensors[i]->rows() &&
                          state.second[i].cols() == params.tensors[i]->cols(),
                      "optimizer accumulator shape mismatch for " + params.names[i]);
}

void apply_update(const TensorList& params, const TensorList& grads, OptimizerState& state,
                  const TrainConfig& config) {
    prepare_state(params, grads, state);
    const long t = state.step + 1;
    const double lr = config.learning_rate;
    switch (config.optimizer) {
        case OptimizerKind::adam: {
            const float b1 = static_cast<float>(config.adam_beta1);
            const float b2 = static_cast<float>(config.adam_beta2);
            const double c1 = 1.0 - std::pow(config.adam_beta1, static_cast<double>(t));
            const double c2 = 1.0 - std::pow(config.adam_beta2, static_cast<double>(t));
            const float step_size = static_cast<float>(lr / c1);
            const float inv_sqrt_c2 = static_cast<float>(1.0 / std::sqrt(c2));
            const float eps = static_cast<float>(config.adam_eps);
            for (std::size_t i = 0; i < params.tensors.size(); ++i) {
                auto m = state.first[i].array();
                auto v = state.second[i].array();
                const auto g = grads.tensors[i]->array();
                m = b1 * m + (1.0f - b1) * g;
                v = b2 * v + (1.0f - b2) * g.square();
                params.tensors[i]->array() -= step_size * m / (v.sqrt() * inv_sqrt_c2 + eps);
            }
            break;
        }
        case OptimizerKind::sgd:
            for (std::size_t i = 0; i < params.tensors.size(); ++i)
                *params.tensors[i] -= static_cast<float>(lr) * *grads.tensors[i];
            break;
        case OptimizerKind::adagrad: {
            const float eps = static_cast<float>(config.adam_eps);
            for (std::size_t i = 0; i < params.tensors.size(); ++i) {
                auto acc = state.second[i].array();
                const auto g = grads.tensors[i]->array();
                acc += g.square();
                params.tensors[i]->array() -= static_cast<float>(lr) * g / (acc.sqrt() + eps);
            }
            break;
        }
    }
    state.step = t;
}

}  // namespace

template <typename P>
void adam_step(P& params, const P& grads, OptimizerState& state, const TrainConfig& config) {
    TrainConfig c = config;
    c.optimizer = OptimizerKind::adam;
    optimizer_step(params, grads, state, c);
}

template <typename P>
void optimizer_step(P& params, const P& grads, OptimizerState& state, const TrainConfig& config) {
    const TensorList p = collect(params);
    const TensorList g = collect(const_cast<P&>(grads));
    apply_update(p, g, state, config);
}

template <typename P>
double clip_global_norm(P& grads, double max_norm) {
    const TensorList g = collect(grads);
    double sq = 0.0;
    for (auto* m : g.tensors) sq += m->template cast<double>().squaredNorm();
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
    if (max_norm > 0.0 && norm > max_norm) {
        const float scale = static_cast<float>(max_norm / norm);
        for (auto* m : g.tensors) *m *= scale;
    }
    return norm;
}

// --- training loops ----------------------------------------------------------------

namespace {

// Seed-determined order: a fresh permutation per epoch, batches never span epochs.
class BatchOrder {
public:
    BatchOrder(int size, int batch, std::uint64_t seed)
        : order_(static_cast<std::size_t>(size)), batch_(std::min(batch, size)), engine_(seed) {
        std::iota(order_.begin(), order_.end(), 0);
        reshuffle();
    }

    std::span<const int> next() {
        if (pos_ + static_cast<std::size_t>(batch_) > order_.size()) reshuffle();
        std::span<const int> out(order_.data() + pos_, static_cast<std::size_t>(batch_));
        pos_ += static_cast<std::size_t>(batch_);
        return out;
    }

private:
    void reshuffle() {
        // Fisher-Yates with explicit draws so the order does not depend on the standard library.
        for (std::size_t i = order_.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(engine_() % i);
            std::swap(order_[i - 1], order_[j]);
        }
        pos_ = 0;
    }

    std::vector<int> order_;
    int batch_;
    std::mt19937_64 engine_;
    std::size_t pos_ = 0;
};

constexpr std::uint64_t kOrderSalt = 0xD1B54A32D192ED03ULL;

double elapsed_ms(std::chrono::steady_clock::time_point since) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

void zero_cnn(CnnParams<float>& g) {
    g.fc.weight.setZero();
    g.fc.bias.setZero();
    for (auto& c : g.conv) {
        c.weight.setZero();
        c.bias.setZero();
    }
}

}  // namespace

PretrainResult pretrain_key_cnn(const KeyBlockSet& data, const ModelConfig& model, const TrainConfig& config,
                                const TrainHooks& hooks) {
    config.validate();
    model.validate();
    require(data.size() >= 1, "empty pretraining dataset");
    require_shape(data.measurements.rows() == model.m_key && data.blocks.rows() == model.n() &&
                      data.measurements.cols() == data.blocks.cols(),
                  "pretraining data does not match the model configuration");

    PretrainResult result;
    result.key = init_params<float>(model, config.seed).key;
    CnnParams<float> grads = make_cnn_shape<float>(model.m_key, model.block_size, model.kernel_size, model.key_channels);
    CnnTrace<float> trace;
    BatchOrder order(data.size(), config.batch_size, config.seed ^ kOrderSalt);
    Matrix<float> y, x;
    const auto start = std::chrono::steady_clock::now();
    result.history.reserve(static_cast<std::size_t>(config.steps));

    for (int step = 1; step <= config.steps; ++step) {
        const auto idx = order.next();
        const auto b = static_cast<Eigen::Index>(idx.size());
        y.resize(data.measurements.rows(), b);
        x.resize(data.blocks.rows(), b);
        for (Eigen::Index j = 0; j < b; ++j) {
            y.col(j) = data.measurements.col(idx[static_cast<std::size_t>(j)]);
            x.col(j) = data.blocks.col(idx[static_cast<std::size_t>(j)]);
        }
        Matrix<float> residual = cnn_forward_batch<float>(Backend::parallel, result.key, model, y, &trace);
        if (!residual.allFinite()) throw NumericError("non-finite key CNN output at step " + std::to_string(step));
        residual -= x;
        const double loss = residual.cast<double>().squaredNorm() / (2.0 * static_cast<double>(b));
        residual /= static_cast<float>(b);
        zero_cnn(grads);
        cnn_backward_batch<float>(Backend::parallel, result.key, model, trace, residual, grads);
        const double norm = clip_global_norm(grads, config.clip_norm);
        optimizer_step(result.key, grads, result.optimizer, config);
        result.history.push_back(loss);
        if (hooks.on_step) hooks.on_step({step, TrainPhase::pretrain, loss, norm, elapsed_ms(start)});
    }
    return result;
}

DecoderParams<float> init_full_params(const ModelConfig& model, std::uint64_t seed, const CnnParams<float>* pretrained) {
    DecoderParams<float> params = init_params<float>(model, seed);
    if (!pretrained) return params;
    const auto& ref = params.key;
    bool ok = pretrained->conv.size() == ref.conv.size() && pretrained->fc.weight.rows() == ref.fc.weight.rows() &&
              pretrained->fc.weight.cols() == ref.fc.weight.cols() && pretrained->fc.bias.rows() == ref.fc.bias.rows();
    for (std::size_t i = 0; ok && i < ref.conv.size(); ++i)
        ok = pretrained->conv[i].weight.rows() == ref.conv[i].weight.rows() &&
             pretrained->conv[i].weight.cols() == ref.conv[i].weight.cols() &&
             pretrained->conv[i].bias.rows() == ref.conv[i].bias.rows();
    if (!ok) throw ShapeError("pretrained key CNN does not match the model configuration");
    params.key = *pretrained;
    return params;
}

TrainResult train_full(const SequenceSet& data, const ModelConfig& model, const TrainConfig& config,
                       const CnnParams<float>* pretrained, const TrainHooks& hooks) {
    config.validate();
    model.validate();
    require(data.size() >= 1, "empty training dataset");
    require_shape(data.frames == model.frames && data.key.rows() == model.m_key &&
                      data.nonkey.rows() == model.m_nonkey && data.targets.rows() == model.n(),
                  "training data does not match the model configuration");

    TrainResult result;
    result.params = init_full_params(model, config.seed, pretrained);

    DecoderParams<float> grads = zero_params<float>(model);
    DecoderTrace<float> trace;
    const ForwardOptions opts{Backend::parallel, config.mode};
    BatchOrder order(data.size(), config.batch_size, config.seed ^ kOrderSalt);
    Matrix<float> targets;
    const auto start = std::chrono::steady_clock::now();
    result.history.reserve(static_cast<std::size_t>(config.steps));

    for (int step = 1; step <= config.steps; ++step) {
        const auto idx = order.next();
        const auto batch = gather_batch(data, idx, &targets);
        Matrix<float> residual = decoder_forward<float>(result.params, batch, opts, &trace);
        residual -= targets;
        const double loss =
            residual.cast<double>().squaredNorm() / (2.0 * static_cast<double>(batch.items));
        residual /= static_cast<float>(batch.items);
        for_each_tensor(grads, [](const std::string&, Matrix<float>& m) { m.setZero(); });
        decoder_backward<float>(result.params, trace, residual, opts, grads);
        const double norm = clip_global_norm(grads, config.clip_norm);
        optimizer_step(result.params, grads, result.optimizer, config);
        result.history.push_back(loss);
        if (hooks.on_step) hooks.on_step({step, TrainPhase::full, loss, norm, elapsed_ms(start)});
        if (hooks.on_eval && config.eval_every > 0 && step % config.eval_every == 0) hooks.on_eval(step, result.params);
    }
    return result;
}

double dataset_loss(const DecoderParams<float>& params, const SequenceSet& data, DecoderMode mode) {
    require(data.size() >= 1, "empty dataset");
    constexpr int kChunk = 50;
    double total = 0.0;
    std::vector<int> idx;
    Matrix<float> targets;
    for (int first = 0; first < data.size(); first += kChunk) {
        const int count = std::min(kChunk, data.size() - first);
        idx.resize(static_cast<std::size_t>(count));
        std::iota(idx.begin(), idx.end(), first);
        const auto batch = gather_batch(data, idx, &targets);
        const Matrix<float> out = decoder_forward<float>(params, batch, {Backend::parallel, mode});
        total += (out.cast<double>() - targets.cast<double>()).squaredNorm();
    }
    return total / (2.0 * static_cast<double>(data.size()));
}

double key_dataset_loss(const CnnParams<float>& key, const ModelConfig& model, const KeyBlockSet& data) {
    require(data.size() >= 1, "empty dataset");
    const Matrix<float> out = cnn_forward_batch<float>(Backend::parallel, key, model, data.measurements, nullptr);
    return mse_loss<float>(out, data.blocks, data.size());
}

std::string format_step_record(const StepRecord& record) {
    nlohmann::json j;
    j["step"] = record.step;
    j["phase"] = to_string(record.phase);
    j["loss"] = record.loss;
    j["grad_norm"] = record.grad_norm;
    j["wall_ms"] = record.wall_ms;
    return j.dump();
}

const char* to_string(TrainPhase phase) { return phase == TrainPhase::pretrain ? "pretrain" : "full"; }

const char* to_string(OptimizerKind kind) {
    switch (kind) {
        case OptimizerKind::adam: return "adam";
        case OptimizerKind::sgd: return "sgd";
        case OptimizerKind::adagrad: return "adagrad";
    }
    return "adam";
}

const char* to_string(DecoderMode mode) { return mode == DecoderMode::cnn_only ? "cnn_only" : "csvideonet"; }

OptimizerKind optimizer_from_string(const std::string& name) {
    if (name == "adam") return OptimizerKind::adam;
    if (name == "sgd") return OptimizerKind::sgd;
    if (name == "adagrad") return OptimizerKind::adagrad;
    throw ValidationError("unknown optimizer '" + name + "' (expected adam, sgd or adagrad)");
}

DecoderMode mode_from_string(const std::string& name) {
    if (name == "csvideonet") return DecoderMode::csvideonet;
    if (name == "cnn_only") return DecoderMode::cnn_only;
    throw ValidationError("unknown decoder mode '" + name + "' (expected csvideonet or cnn_only)");
}

template double mse_loss<float>(const Matrix<float>&, const Matrix<float>&, int);
template double mse_loss<double>(const Matrix<double>&, const Matrix<double>&, int);
template void adam_step<CnnParams<float>>(CnnParams<float>&, const CnnParams<float>&, OptimizerState&,
                                          const TrainConfig&);
template void adam_step<DecoderParams<float>>(DecoderParams<float>&, const DecoderParams<float>&, OptimizerState&,
                                              const TrainConfig&);
template void optimizer_step<CnnParams<float>>(CnnParams<float>&, const CnnParams<float>&, OptimizerState&,
                                               const TrainConfig&);
template void optimizer_step<DecoderParams<float>>(DecoderParams<float>&, const DecoderParams<float>&,
                                                   OptimizerState&, const TrainConfig&);
template double clip_global_norm<CnnParams<float>>(CnnParams<float>&, double);
template double clip_global_norm<DecoderParams<float>>(DecoderParams<float>&, double);

}  // namespace csvnet
