#include "csvnet/model.hpp"

#include <cmath>

#include "csvnet/common.hpp"

namespace csvnet {

namespace {

template <typename S>
using MapC = Eigen::Map<const Matrix<S>>;
template <typename S>
using MapM = Eigen::Map<Matrix<S>>;

// Same storage seen with a different column-major shape.
template <typename S>
MapC<S> reshape(const Matrix<S>& m, Eigen::Index rows, Eigen::Index cols) {
    return MapC<S>(m.data(), rows, cols);
}
template <typename S>
MapM<S> reshape(Matrix<S>& m, Eigen::Index rows, Eigen::Index cols) {
    return MapM<S>(m.data(), rows, cols);
}

template <typename S>
S sigmoid(S x) {
    return S(1) / (S(1) + std::exp(-x));
}

}  // namespace

// --- CNN ---------------------------------------------------------------------

template <typename S>
Matrix<S> cnn_forward_batch(Backend be, const CnnParams<S>& cnn, const ModelConfig& config,
                            const Matrix<S>& measurements, CnnTrace<S>* trace) {
    const int n = config.n();
    const Eigen::Index items = measurements.cols();
    require_shape(measurements.rows() == cnn.fc.weight.cols(),
                  "measurement length " + std::to_string(measurements.rows()) + " does not match CNN input " +
                      std::to_string(cnn.fc.weight.cols()));
    require_shape(cnn.fc.weight.rows() == n, "CNN dense stage does not produce a block");

    // a reused trace keeps its buffers; resize() is a no-op for equal shapes
    std::vector<Matrix<S>> local;
    std::vector<Matrix<S>>& stages = trace ? trace->stages : local;
    stages.resize(cnn.conv.size() + 1);
    if (trace) trace->input = measurements;

    stages[0].resize(n, items);
    kernels::affine_forward<S>(be, cnn.fc.weight, cnn.fc.bias, measurements, stages[0]);
    if (!cnn.conv.empty()) kernels::relu_inplace<S>(be, stages[0]);

    for (std::size_t i = 0; i < cnn.conv.size(); ++i) {
        const auto& layer = cnn.conv[i];
        const Matrix<S>& prev = stages[i];
        const Eigen::Index cin = i == 0 ? 1 : cnn.conv[i - 1].weight.rows();
        Matrix<S>& out = stages[i + 1];
        out.resize(layer.weight.rows(), items * n);
        kernels::conv_forward<S>(be, layer.weight, layer.bias, reshape(prev, cin, items * n), config.block_size,
                                 config.kernel_size, out);
        if (i + 1 < cnn.conv.size()) kernels::relu_inplace<S>(be, out);
    }
    require_shape(stages.back().size() == static_cast<Eigen::Index>(n) * items, "CNN must end in a single map");
    return reshape(stages.back(), n, items);
}

template <typename S>
void cnn_backward_batch(Backend be, const CnnParams<S>& cnn, const ModelConfig& config, const CnnTrace<S>& trace,
                        const Matrix<S>& d_output, CnnParams<S>& grads) {
    const int n = config.n();
    const Eigen::Index items = trace.input.cols();
    require_shape(d_output.rows() == n && d_output.cols() == items, "CNN output gradient shape mismatch");
    require_shape(trace.stages.size() == cnn.conv.size() + 1, "CNN trace does not match parameters");

    Matrix<S> grad = d_output;  // gradient w.r.t. the current stage output, any shape with the same storage
    for (std::size_t ii = cnn.conv.size(); ii-- > 0;) {
        const Matrix<S>& out = trace.stages[ii + 1];
        auto g = reshape(grad, out.rows(), out.cols());
        if (ii + 1 < cnn.conv.size()) kernels::relu_backward_inplace<S>(be, out, g);
        const Eigen::Index cin = ii == 0 ? 1 : cnn.conv[ii - 1].weight.rows();
        Matrix<S> dx;
        kernels::conv_backward<S>(be, cnn.conv[ii].weight, reshape(trace.stages[ii], cin, items * n), g,
                                  config.block_size, config.kernel_size, grads.conv[ii].weight, grads.conv[ii].bias,
                                  &dx);
        grad = std::move(dx);
    }
    auto g = reshape(grad, n, items);
    if (!cnn.conv.empty()) kernels::relu_backward_inplace<S>(be, trace.stages[0], g);
    kernels::affine_backward<S>(be, cnn.fc.weight, trace.input, g, grads.fc.weight, grads.fc.bias, nullptr);
}

// --- LSTM --------------------------------------------------------------------

template <typename S>
Matrix<S> lstm_forward_batch(Backend be, const LstmParams<S>& lstm, int frames, const Matrix<S>& inputs,
                             std::vector<LstmLayerTrace<S>>* trace) {
    require_shape(frames >= 1 && inputs.cols() % frames == 0, "LSTM input columns are not a multiple of T");
    const Eigen::Index total = inputs.cols();
    const Eigen::Index items = total / frames;

    std::vector<LstmLayerTrace<S>> local;
    auto& layers = trace ? *trace : local;
    layers.resize(lstm.layers.size());

    const Matrix<S>* x = &inputs;
    for (std::size_t l = 0; l < lstm.layers.size(); ++l) {
        const auto& p = lstm.layers[l];
        auto& tr = layers[l];
        const Eigen::Index h = p.w_hidden.cols();
        require_shape(p.w_input.cols() == x->rows(), "LSTM input size mismatch");
        tr.input = *x;
        tr.gates.resize(4 * h, total);
        tr.cell.resize(h, total);
        tr.hidden.resize(h, total);
        kernels::affine_forward<S>(be, p.w_input, p.bias, *x, tr.gates);
        for (int t = 0; t < frames; ++t) {
            auto gates = tr.gates.middleCols(t * items, items);
            if (t > 0) kernels::matmul_accumulate<S>(be, p.w_hidden, tr.hidden.middleCols((t - 1) * items, items), gates);
#pragma omp parallel for schedule(static) if (be == Backend::parallel)
            for (Eigen::Index j = 0; j < items; ++j) {
                const Eigen::Index col = t * items + j;
                S* g = tr.gates.col(col).data();
                S* c = tr.cell.col(col).data();
                S* hv = tr.hidden.col(col).data();
                const S* c_prev = t > 0 ? tr.cell.col(col - items).data() : nullptr;
                for (Eigen::Index u = 0; u < h; ++u) {
                    const S ig = sigmoid(g[u]);
                    const S fg = sigmoid(g[h + u]);
                    const S cg = std::tanh(g[2 * h + u]);
                    const S og = sigmoid(g[3 * h + u]);
                    g[u] = ig;
                    g[h + u] = fg;
                    g[2 * h + u] = cg;
                    g[3 * h + u] = og;
                    c[u] = (c_prev ? fg * c_prev[u] : S(0)) + ig * cg;
                    hv[u] = og * std::tanh(c[u]);
                }
            }
        }
        x = &tr.hidden;
    }
    Matrix<S> out(lstm.projection.weight.rows(), total);
    kernels::affine_forward<S>(be, lstm.projection.weight, lstm.projection.bias, *x, out);
    return out;
}

template <typename S>
Matrix<S> lstm_backward_batch(Backend be, const LstmParams<S>& lstm, int frames,
                              const std::vector<LstmLayerTrace<S>>& trace, const Matrix<S>& d_output,
                              LstmParams<S>& grads) {
    require_shape(trace.size() == lstm.layers.size() && !trace.empty(), "LSTM trace does not match parameters");
    const Eigen::Index total = d_output.cols();
    const Eigen::Index items = total / frames;

    Matrix<S> d_hidden;
    kernels::affine_backward<S>(be, lstm.projection.weight, trace.back().hidden, d_output, grads.projection.weight,
                                grads.projection.bias, &d_hidden);

    for (std::size_t l = lstm.layers.size(); l-- > 0;) {
        const auto& p = lstm.layers[l];
        const auto& tr = trace[l];
        auto& gp = grads.layers[l];
        const Eigen::Index h = p.w_hidden.cols();
        Matrix<S> d_gates(4 * h, total);
        Matrix<S> dh_next = Matrix<S>::Zero(h, items);
        Matrix<S> dc_next = Matrix<S>::Zero(h, items);
        for (int t = frames - 1; t >= 0; --t) {
#pragma omp parallel for schedule(static) if (be == Backend::parallel)
            for (Eigen::Index j = 0; j < items; ++j) {
                const Eigen::Index col = t * items + j;
                const S* g = tr.gates.col(col).data();
                const S* c = tr.cell.col(col).data();
                const S* c_prev = t > 0 ? tr.cell.col(col - items).data() : nullptr;
                const S* dh_out = d_hidden.col(col).data();
                S* dhn = dh_next.col(j).data();
                S* dcn = dc_next.col(j).data();
                S* dg = d_gates.col(col).data();
                for (Eigen::Index u = 0; u < h; ++u) {
                    const S ig = g[u], fg = g[h + u], cg = g[2 * h + u], og = g[3 * h + u];
                    const S tc = std::tanh(c[u]);
                    const S dh = dh_out[u] + dhn[u];
                    const S dc = dcn[u] + dh * og * (S(1) - tc * tc);
                    const S d_o = dh * tc;
                    const S d_i = dc * cg;
                    const S d_c = dc * ig;
                    const S d_f = c_prev ? dc * c_prev[u] : S(0);
                    dcn[u] = dc * fg;
                    dg[u] = d_i * ig * (S(1) - ig);
                    dg[h + u] = d_f * fg * (S(1) - fg);
                    dg[2 * h + u] = d_c * (S(1) - cg * cg);
                    dg[3 * h + u] = d_o * og * (S(1) - og);
                }
            }
            if (t > 0) kernels::matmul_transposed<S>(be, p.w_hidden, d_gates.middleCols(t * items, items), dh_next);
        }
        if (frames > 1) {
            kernels::outer_accumulate<S>(be, d_gates.middleCols(items, total - items),
                                         tr.hidden.middleCols(0, total - items), gp.w_hidden);
        }
        Matrix<S> d_input;
        kernels::affine_backward<S>(be, p.w_input, tr.input, d_gates, gp.w_input, gp.bias, &d_input);
        d_hidden = std::move(d_input);
    }
    return d_hidden;
}

// --- full decoder ------------------------------------------------------------

template <typename S>
Matrix<S> decoder_forward(const DecoderParams<S>& params, const SequenceBatch<S>& batch, const ForwardOptions& opts,
                          DecoderTrace<S>* trace) {
    const auto& cfg = params.config;
    const Eigen::Index items = batch.items;
    require_shape(items >= 1, "empty batch");
    require_shape(batch.key.rows() == cfg.m_key && batch.key.cols() == items,
                  "key measurements do not match the model (m_key " + std::to_string(cfg.m_key) + ")");
    require_shape(batch.nonkey.rows() == cfg.m_nonkey && batch.nonkey.cols() == (cfg.frames - 1) * items,
                  "non-key measurements do not match the model (m_nonkey " + std::to_string(cfg.m_nonkey) + ")");
    const int n = cfg.n();
    const Eigen::Index total = static_cast<Eigen::Index>(cfg.frames) * items;

    Matrix<S> frames_in(n, total);
    frames_in.leftCols(items) =
        cnn_forward_batch<S>(opts.backend, params.key, cfg, batch.key, trace ? &trace->key : nullptr);
    frames_in.rightCols(total - items) =
        cnn_forward_batch<S>(opts.backend, params.nonkey, cfg, batch.nonkey, trace ? &trace->nonkey : nullptr);
    if (trace) trace->items = static_cast<int>(items);

    Matrix<S> out;
    if (opts.mode == DecoderMode::cnn_only) {
        out = std::move(frames_in);
        if (trace) trace->lstm.clear();
    } else {
        out = lstm_forward_batch<S>(opts.backend, params.lstm, cfg.frames, frames_in, trace ? &trace->lstm : nullptr);
    }
    if (!out.allFinite()) throw NumericError("non-finite activations in decoder output");
    return out;
}

template <typename S>
void decoder_backward(const DecoderParams<S>& params, const DecoderTrace<S>& trace, const Matrix<S>& d_output,
                      const ForwardOptions& opts, DecoderParams<S>& grads) {
    const auto& cfg = params.config;
    const Eigen::Index items = trace.items;
    const Eigen::Index total = static_cast<Eigen::Index>(cfg.frames) * items;
    require_shape(d_output.rows() == cfg.n() && d_output.cols() == total, "decoder output gradient shape mismatch");

    Matrix<S> d_frames = opts.mode == DecoderMode::cnn_only
                             ? d_output
                             : lstm_backward_batch<S>(opts.backend, params.lstm, cfg.frames, trace.lstm, d_output,
                                                      grads.lstm);
    cnn_backward_batch<S>(opts.backend, params.key, cfg, trace.key, d_frames.leftCols(items), grads.key);
    cnn_backward_batch<S>(opts.backend, params.nonkey, cfg, trace.nonkey, d_frames.rightCols(total - items),
                          grads.nonkey);
}

// --- single-item operations -------------------------------------------------

template <typename S>
std::vector<S> key_cnn_forward(const CnnParams<S>& cnn, const ModelConfig& config, std::span<const S> y) {
    require_shape(static_cast<Eigen::Index>(y.size()) == cnn.fc.weight.cols(), "key measurement length mismatch");
    Matrix<S> in = MapC<S>(y.data(), static_cast<Eigen::Index>(y.size()), 1);
    Matrix<S> out = cnn_forward_batch<S>(Backend::parallel, cnn, config, in, nullptr);
    if (!out.allFinite()) throw NumericError("non-finite activations in key CNN");
    return {out.data(), out.data() + out.size()};
}

template <typename S>
std::vector<S> nonkey_cnn_forward(const CnnParams<S>& cnn, const ModelConfig& config, std::span<const S> y) {
    require_shape(static_cast<Eigen::Index>(y.size()) == cnn.fc.weight.cols(), "non-key measurement length mismatch");
    Matrix<S> in = MapC<S>(y.data(), static_cast<Eigen::Index>(y.size()), 1);
    Matrix<S> out = cnn_forward_batch<S>(Backend::parallel, cnn, config, in, nullptr);
    if (!out.allFinite()) throw NumericError("non-finite activations in non-key CNN");
    return {out.data(), out.data() + out.size()};
}

template <typename S>
LstmState<S> lstm_step(const LstmLayerParams<S>& layer, std::span<const S> x, const LstmState<S>& state) {
    const Eigen::Index h = layer.w_hidden.cols();
    require_shape(static_cast<Eigen::Index>(x.size()) == layer.w_input.cols(), "LSTM input length mismatch");
    require_shape(static_cast<Eigen::Index>(state.hidden.size()) == h &&
                      static_cast<Eigen::Index>(state.cell.size()) == h,
                  "LSTM state length mismatch");
    using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
    const Vec xv = Eigen::Map<const Vec>(x.data(), static_cast<Eigen::Index>(x.size()));
    const Vec hv = Eigen::Map<const Vec>(state.hidden.data(), h);
    const Vec cv = Eigen::Map<const Vec>(state.cell.data(), h);
    const Vec pre = layer.w_input * xv + layer.w_hidden * hv + layer.bias.col(0);
    LstmState<S> next{std::vector<S>(static_cast<std::size_t>(h)), std::vector<S>(static_cast<std::size_t>(h))};
    for (Eigen::Index u = 0; u < h; ++u) {
        const S ig = sigmoid(pre(u));
        const S fg = sigmoid(pre(h + u));
        const S cg = std::tanh(pre(2 * h + u));
        const S og = sigmoid(pre(3 * h + u));
        next.cell[u] = fg * cv(u) + ig * cg;
        next.hidden[u] = og * std::tanh(next.cell[u]);
    }
    return next;
}

template <typename S>
SequenceBatch<S> batch_from_gop(const MeasurementGop& mg, const ModelConfig& config) {
    require_shape(mg.m_key == config.m_key && mg.m_nonkey == config.m_nonkey && mg.frames == config.frames &&
                      mg.n == config.n(),
                  "measurement GOP (m_key " + std::to_string(mg.m_key) + ", m_nonkey " + std::to_string(mg.m_nonkey) +
                      ", T " + std::to_string(mg.frames) + ") does not match the model configuration");
    const int positions = mg.positions();
    require_shape(mg.key.size() == static_cast<std::size_t>(positions) * mg.m_key &&
                      mg.nonkey.size() == static_cast<std::size_t>(positions) * (mg.frames - 1) * mg.m_nonkey,
                  "measurement GOP storage does not match its shape");
    SequenceBatch<S> batch;
    batch.items = positions;
    batch.key = Eigen::Map<const Matrix<float>>(mg.key.data(), mg.m_key, positions).template cast<S>();
    batch.nonkey = Eigen::Map<const Matrix<float>>(mg.nonkey.data(), mg.m_nonkey, (mg.frames - 1) * positions)
                       .template cast<S>();
    return batch;
}

template <typename S>
Matrix<S> targets_from_gop(const GopBlockSequence& gop) {
    return Eigen::Map<const Matrix<float>>(gop.values.data(), gop.block_len(),
                                           static_cast<Eigen::Index>(gop.frames) * gop.positions())
        .template cast<S>();
}

GopBlockSequence reconstruct_gop(const DecoderParams<float>& params, const MeasurementGop& mg,
                                 const ForwardOptions& opts) {
    const auto batch = batch_from_gop<float>(mg, params.config);
    const Matrix<float> out = decoder_forward<float>(params, batch, opts);
    GopBlockSequence rec;
    rec.frames = mg.frames;
    rec.grid_rows = mg.grid_rows;
    rec.grid_cols = mg.grid_cols;
    rec.block_size = params.config.block_size;
    rec.values.assign(out.data(), out.data() + out.size());
    return rec;
}

GopBlockSequence csvideonet_forward(const DecoderParams<float>& params, const MeasurementGop& mg, Backend be) {
    return reconstruct_gop(params, mg, {be, DecoderMode::csvideonet});
}

GopBlockSequence cnn_only_forward(const DecoderParams<float>& params, const MeasurementGop& mg, Backend be) {
    return reconstruct_gop(params, mg, {be, DecoderMode::cnn_only});
}

template <typename S>
DecoderParams<S> backward(const DecoderParams<S>& params, const MeasurementGop& mg, const GopBlockSequence& target,
                          const ForwardOptions& opts, double* loss_out, const std::vector<bool>& frame_mask) {
    const auto& cfg = params.config;
    require_shape(target.frames == mg.frames && target.grid_rows == mg.grid_rows && target.grid_cols == mg.grid_cols &&
                      target.block_len() == cfg.n(),
                  "target GOP does not match the measurements");
    require_shape(frame_mask.empty() || static_cast<int>(frame_mask.size()) == cfg.frames,
                  "frame mask must have one entry per frame");
    const auto batch = batch_from_gop<S>(mg, cfg);
    DecoderTrace<S> trace;
    const Matrix<S> out = decoder_forward<S>(params, batch, opts, &trace);
    Matrix<S> residual = out - targets_from_gop<S>(target);
    const Eigen::Index items = batch.items;
    if (!frame_mask.empty())
        for (int t = 0; t < cfg.frames; ++t)
            if (!frame_mask[t]) residual.middleCols(t * items, items).setZero();
    const double loss = residual.template cast<double>().squaredNorm() / (2.0 * static_cast<double>(items));
    if (!std::isfinite(loss)) throw NumericError("non-finite loss");
    if (loss_out) *loss_out = loss;
    DecoderParams<S> grads = zero_params<S>(cfg);
    residual /= static_cast<S>(items);
    decoder_backward<S>(params, trace, residual, opts, grads);
    return grads;
}

#define CSVNET_INSTANTIATE(S)                                                                                          \
    template Matrix<S> cnn_forward_batch<S>(Backend, const CnnParams<S>&, const ModelConfig&, const Matrix<S>&,       \
                                            CnnTrace<S>*);                                                            \
    template void cnn_backward_batch<S>(Backend, const CnnParams<S>&, const ModelConfig&, const CnnTrace<S>&,         \
                                        const Matrix<S>&, CnnParams<S>&);                                             \
    template Matrix<S> lstm_forward_batch<S>(Backend, const LstmParams<S>&, int, const Matrix<S>&,                    \
                                             std::vector<LstmLayerTrace<S>>*);                                        \
    template Matrix<S> lstm_backward_batch<S>(Backend, const LstmParams<S>&, int,                                     \
                                              const std::vector<LstmLayerTrace<S>>&, const Matrix<S>&,               \
                                              LstmParams<S>&);                                                        \
    template Matrix<S> decoder_forward<S>(const DecoderParams<S>&, const SequenceBatch<S>&, const ForwardOptions&,    \
                                          DecoderTrace<S>*);                                                          \
    template void decoder_backward<S>(const DecoderParams<S>&, const DecoderTrace<S>&, const Matrix<S>&,              \
                                      const ForwardOptions&, DecoderParams<S>&);                                      \
    template std::vector<S> key_cnn_forward<S>(const CnnParams<S>&, const ModelConfig&, std::span<const S>);          \
    template std::vector<S> nonkey_cnn_forward<S>(const CnnParams<S>&, const ModelConfig&, std::span<const S>);       \
    template LstmState<S> lstm_step<S>(const LstmLayerParams<S>&, std::span<const S>, const LstmState<S>&);           \
    template SequenceBatch<S> batch_from_gop<S>(const MeasurementGop&, const ModelConfig&);                            \
    template Matrix<S> targets_from_gop<S>(const GopBlockSequence&);                                                  \
    template DecoderParams<S> backward<S>(const DecoderParams<S>&, const MeasurementGop&, const GopBlockSequence&,    \
                                          const ForwardOptions&, double*, const std::vector<bool>&);

CSVNET_INSTANTIATE(float)
CSVNET_INSTANTIATE(double)

#undef CSVNET_INSTANTIATE

}  // namespace csvnet
