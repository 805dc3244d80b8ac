#pragma once

// The decoder: key CNN (low CR frame), shared non-key CNN (high CR frames)
// and the synthesizing LSTM that fuses one GOP position into T blocks.
//
// Batched entry points work on "sequence items": the T measurement vectors
// of one grid position. Frame-major column layout is used throughout, so
// the column of (frame t, item b) is t * items + b.

#include <span>
#include <vector>

#include "csvnet/ingest.hpp"
#include "csvnet/params.hpp"
#include "csvnet/sensing.hpp"

namespace csvnet {

using kernels::Backend;

enum class DecoderMode {
    csvideonet,  // CNNs feed the LSTM, LSTM projection is the output
    cnn_only,    // CNN outputs are the reconstruction, LSTM bypassed
};

template <typename S>
struct SequenceBatch {
    int items = 0;
    Matrix<S> key;     // m_key x items
    Matrix<S> nonkey;  // m_nonkey x ((T-1) * items), frame-major
};

template <typename S>
struct CnnTrace {
    Matrix<S> input;                 // m x items
    std::vector<Matrix<S>> stages;   // stage 0: dense (n x items); then conv outputs (c x items*n)
};

template <typename S>
struct LstmLayerTrace {
    Matrix<S> input;   // in x T*items
    Matrix<S> gates;   // 4H x T*items, post-activation (i, f, g, o)
    Matrix<S> cell;    // H x T*items
    Matrix<S> hidden;  // H x T*items
};

template <typename S>
struct DecoderTrace {
    int items = 0;
    CnnTrace<S> key;
    CnnTrace<S> nonkey;
    std::vector<LstmLayerTrace<S>> lstm;
};

struct ForwardOptions {
    Backend backend = Backend::parallel;
    DecoderMode mode = DecoderMode::csvideonet;
};

/// n x items block estimates (one column per item).
template <typename S>
Matrix<S> cnn_forward_batch(Backend be, const CnnParams<S>& cnn, const ModelConfig& config,
                            const Matrix<S>& measurements, CnnTrace<S>* trace);

/// Accumulates into `grads`; d_output is n x items.
template <typename S>
void cnn_backward_batch(Backend be, const CnnParams<S>& cnn, const ModelConfig& config, const CnnTrace<S>& trace,
                        const Matrix<S>& d_output, CnnParams<S>& grads);

/// inputs: n x T*items (frame-major). Returns n x T*items.
template <typename S>
Matrix<S> lstm_forward_batch(Backend be, const LstmParams<S>& lstm, int frames, const Matrix<S>& inputs,
                             std::vector<LstmLayerTrace<S>>* trace);

/// Accumulates into grads; returns d_inputs (n x T*items).
template <typename S>
Matrix<S> lstm_backward_batch(Backend be, const LstmParams<S>& lstm, int frames,
                              const std::vector<LstmLayerTrace<S>>& trace, const Matrix<S>& d_output,
                              LstmParams<S>& grads);

/// Returns n x T*items reconstructions (frame-major).
template <typename S>
Matrix<S> decoder_forward(const DecoderParams<S>& params, const SequenceBatch<S>& batch, const ForwardOptions& opts,
                          DecoderTrace<S>* trace = nullptr);

/// Accumulates gradients of a scalar loss whose derivative with respect to
/// the decoder output is d_output.
template <typename S>
void decoder_backward(const DecoderParams<S>& params, const DecoderTrace<S>& trace, const Matrix<S>& d_output,
                      const ForwardOptions& opts, DecoderParams<S>& grads);

// --- per-block and per-GOP operations ------------------------------------

template <typename S>
std::vector<S> key_cnn_forward(const CnnParams<S>& cnn, const ModelConfig& config, std::span<const S> y);

template <typename S>
std::vector<S> nonkey_cnn_forward(const CnnParams<S>& cnn, const ModelConfig& config, std::span<const S> y);

template <typename S>
struct LstmState {
    std::vector<S> hidden;
    std::vector<S> cell;
};

/// One step of one LSTM layer for a single input vector.
template <typename S>
LstmState<S> lstm_step(const LstmLayerParams<S>& layer, std::span<const S> x, const LstmState<S>& state);

/// Gathers a MeasurementGop into a batch whose items are the grid positions.
template <typename S>
SequenceBatch<S> batch_from_gop(const MeasurementGop& mg, const ModelConfig& config);

/// Reconstruction shaped like the source GOP (frames x grid x block).
GopBlockSequence csvideonet_forward(const DecoderParams<float>& params, const MeasurementGop& mg,
                                    Backend be = Backend::parallel);
GopBlockSequence cnn_only_forward(const DecoderParams<float>& params, const MeasurementGop& mg,
                                  Backend be = Backend::parallel);

/// Unclamped reconstruction of one GOP in the requested mode.
GopBlockSequence reconstruct_gop(const DecoderParams<float>& params, const MeasurementGop& mg,
                                 const ForwardOptions& opts);

/// Frame-major n x T*items targets for a GOP, items = grid positions.
template <typename S>
Matrix<S> targets_from_gop(const GopBlockSequence& gop);

/// Exact gradients of L = 1/(2N) sum_i sum_t ||f_t(y_i) - x_{i,t}||^2 for one
/// GOP, with i ranging over the N grid positions. frame_mask (optional, size T)
/// restricts the loss to the selected frames.
template <typename S>
DecoderParams<S> backward(const DecoderParams<S>& params, const MeasurementGop& mg, const GopBlockSequence& target,
                          const ForwardOptions& opts, double* loss_out = nullptr,
                          const std::vector<bool>& frame_mask = {});

}  // namespace csvnet
