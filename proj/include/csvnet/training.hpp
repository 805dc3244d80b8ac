#pragma once

// Two-phase optimization: key-CNN pretraining on (key measurement, key block)
// pairs, then end-to-end training of the whole decoder on GOP sequences.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "csvnet/ingest.hpp"
#include "csvnet/model.hpp"
#include "csvnet/params.hpp"
#include "csvnet/sensing.hpp"

namespace csvnet {

enum class TrainPhase { pretrain, full };
enum class OptimizerKind { adam, sgd, adagrad };

struct TrainConfig {
    TrainPhase phase = TrainPhase::full;
    int batch_size = 20;  // blocks when pretraining, GOP sequences otherwise
    int steps = 1000;
    double learning_rate = 1e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
    int eval_every = 0;     // 0 disables periodic evaluation
    double clip_norm = 5.0;  // global gradient norm cap, <= 0 disables
    OptimizerKind optimizer = OptimizerKind::adam;
    DecoderMode mode = DecoderMode::csvideonet;

    static TrainConfig pretrain_defaults();
    static TrainConfig full_defaults();
    void validate() const;
};

/// Moment accumulators aligned with the visiting order of the parameters.
struct OptimizerState {
    long step = 0;
    std::vector<std::string> names;
    std::vector<Matrix<float>> first;
    std::vector<Matrix<float>> second;
};

/// Key frames of every grid position: measurements (m_key x N), blocks (n x N).
struct KeyBlockSet {
    Matrix<float> measurements;
    Matrix<float> blocks;
    int size() const { return static_cast<int>(blocks.cols()); }
};

/// GOP sequences of single grid positions, item-major:
/// key (m_key x N), nonkey (m_nonkey x (T-1)N), targets (n x T N).
struct SequenceSet {
    int frames = 0;
    Matrix<float> key;
    Matrix<float> nonkey;
    Matrix<float> targets;
    int size() const { return static_cast<int>(key.cols()); }
};

KeyBlockSet build_key_block_set(std::span<const GopBlockSequence> gops, const SensingMatrixSet& sensing);
SequenceSet build_sequence_set(std::span<const GopBlockSequence> gops, const SensingMatrixSet& sensing);

/// Frame-major batch and targets for the given item indices.
SequenceBatch<float> gather_batch(const SequenceSet& set, std::span<const int> items, Matrix<float>* targets);

/// (1/2N) * sum over N items of the squared residual norm.
template <typename S>
double mse_loss(const Matrix<S>& pred, const Matrix<S>& target, int items);

/// Adam with bias correction; increments state.step.
template <typename P>
void adam_step(P& params, const P& grads, OptimizerState& state, const TrainConfig& config);

/// Dispatches on config.optimizer (adam, sgd, adagrad).
template <typename P>
void optimizer_step(P& params, const P& grads, OptimizerState& state, const TrainConfig& config);

/// Scales grads in place so their global L2 norm is at most max_norm;
/// returns the norm before scaling.
template <typename P>
double clip_global_norm(P& grads, double max_norm);

struct StepRecord {
    int step = 0;  // 1-based
    TrainPhase phase = TrainPhase::full;
    double loss = 0.0;
    double grad_norm = 0.0;
    double wall_ms = 0.0;
};

struct TrainHooks {
    std::function<void(const StepRecord&)> on_step;
    /// Called after steps that are multiples of eval_every.
    std::function<void(int step, const DecoderParams<float>&)> on_eval;
};

struct PretrainResult {
    CnnParams<float> key;
    std::vector<double> history;
    OptimizerState optimizer;
};

/// Trains the key CNN alone; initialization is init_params(model, seed).key.
PretrainResult pretrain_key_cnn(const KeyBlockSet& data, const ModelConfig& model, const TrainConfig& config,
                                const TrainHooks& hooks = {});

struct TrainResult {
    DecoderParams<float> params;
    std::vector<double> history;
    OptimizerState optimizer;
};

/// Starting point of the full phase: init_params(model, seed) with the key
/// CNN replaced by `pretrained` when given.
DecoderParams<float> init_full_params(const ModelConfig& model, std::uint64_t seed, const CnnParams<float>* pretrained);

/// End-to-end training. With `pretrained`, the key CNN starts from those
/// weights and everything else from init_params(model, seed).
TrainResult train_full(const SequenceSet& data, const ModelConfig& model, const TrainConfig& config,
                       const CnnParams<float>* pretrained, const TrainHooks& hooks = {});

/// Loss over a whole sequence set, N = set size.
double dataset_loss(const DecoderParams<float>& params, const SequenceSet& data, DecoderMode mode);

/// Key-CNN loss over a key block set, N = set size.
double key_dataset_loss(const CnnParams<float>& key, const ModelConfig& model, const KeyBlockSet& data);

/// One JSON object per line: step, phase, loss, grad_norm, wall_ms.
std::string format_step_record(const StepRecord& record);

const char* to_string(TrainPhase phase);
const char* to_string(OptimizerKind kind);
const char* to_string(DecoderMode mode);
OptimizerKind optimizer_from_string(const std::string& name);
DecoderMode mode_from_string(const std::string& name);

}  // namespace csvnet
