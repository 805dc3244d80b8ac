// Reference against parallel backends on the decoder's own layer shapes.

#include <random>

#include <benchmark/benchmark.h>

#include "csvnet/kernels.hpp"
#include "csvnet/model.hpp"
#include "csvnet/sensing.hpp"

using namespace csvnet;
using kernels::Backend;
using Mf = kernels::Matrix<float>;

namespace {

Mf random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    Mf m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
    return m;
}

Backend backend_of(const benchmark::State& state) { return state.range(0) == 0 ? Backend::reference : Backend::parallel; }

// args: backend, cin, cout; 32x32 maps, 20 items
void BM_ConvForward(benchmark::State& state) {
    const int cin = static_cast<int>(state.range(1)), cout = static_cast<int>(state.range(2)), side = 32, items = 20;
    const Mf w = random_matrix(cout, 9 * cin, 1), b = random_matrix(cout, 1, 2);
    const Mf x = random_matrix(cin, items * side * side, 3);
    Mf y(cout, x.cols());
    for (auto _ : state) {
        kernels::conv_forward<float>(backend_of(state), w, b, x, side, 3, y);
        benchmark::DoNotOptimize(y.data());
    }
    state.SetItemsProcessed(state.iterations() * items);
}

void BM_ConvBackward(benchmark::State& state) {
    const int cin = static_cast<int>(state.range(1)), cout = static_cast<int>(state.range(2)), side = 32, items = 20;
    const Mf w = random_matrix(cout, 9 * cin, 1);
    const Mf x = random_matrix(cin, items * side * side, 3), dy = random_matrix(cout, x.cols(), 4);
    Mf dw = Mf::Zero(w.rows(), w.cols()), db = Mf::Zero(cout, 1), dx;
    for (auto _ : state) {
        kernels::conv_backward<float>(backend_of(state), w, x, dy, side, 3, dw, db, &dx);
        benchmark::DoNotOptimize(dx.data());
    }
    state.SetItemsProcessed(state.iterations() * items);
}

void BM_AffineForward(benchmark::State& state) {
    const Mf w = random_matrix(1024, 40, 1), b = random_matrix(1024, 1, 2), x = random_matrix(40, 200, 3);
    Mf y(1024, 200);
    for (auto _ : state) {
        kernels::affine_forward<float>(backend_of(state), w, b, x, y);
        benchmark::DoNotOptimize(y.data());
    }
}

// One 160x160 GOP through the full decoder at default sizes.
void BM_ReconstructGop(benchmark::State& state) {
    const ModelConfig config;
    const auto params = init_params<float>(config, 1);
    const auto sensing = make_sensing_set(config.n(), config.m_key, config.m_nonkey, 2);
    GopBlockSequence gop;
    gop.frames = config.frames;
    gop.grid_rows = gop.grid_cols = 5;
    gop.block_size = config.block_size;
    gop.values.assign(static_cast<std::size_t>(config.frames) * 25 * config.n(), 0.5f);
    const auto mg = sense_gop(sensing, gop);
    for (auto _ : state) {
        auto rec = reconstruct_gop(params, mg, {backend_of(state), DecoderMode::csvideonet});
        benchmark::DoNotOptimize(rec.values.data());
    }
    state.SetItemsProcessed(state.iterations() * config.frames);
}

void conv_shapes(benchmark::internal::Benchmark* b) {
    for (int be : {0, 1})
        for (auto [cin, cout] : {std::pair{1, 128}, {128, 64}, {64, 32}, {16, 1}}) b->Args({be, cin, cout});
}

}  // namespace

BENCHMARK(BM_ConvForward)->Apply(conv_shapes)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvBackward)->Apply(conv_shapes)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_AffineForward)->Arg(0)->Arg(1)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_ReconstructGop)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
