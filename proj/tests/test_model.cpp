#include <cmath>
#include <random>

#include "doctest.h"
#include "gradcheck.hpp"

#include "csvnet/common.hpp"
#include "csvnet/model.hpp"

using namespace csvnet;
using testutil::random_gop;
using testutil::tiny_config;

namespace {

double empirical_std(const Matrix<float>& m) {
    const double mean = m.cast<double>().mean();
    return std::sqrt((m.cast<double>().array() - mean).square().mean());
}

// Naive CNN oracle: dense stage, ReLU, then zero-padded convolutions.
std::vector<double> cnn_oracle(const CnnParams<double>& p, int side, int k, const std::vector<double>& y) {
    const int n = side * side;
    std::vector<std::vector<double>> maps(1, std::vector<double>(n));
    for (int i = 0; i < n; ++i) {
        double s = p.fc.bias(i, 0);
        for (std::size_t j = 0; j < y.size(); ++j) s += p.fc.weight(i, static_cast<Eigen::Index>(j)) * y[j];
        maps[0][i] = p.conv.empty() ? s : std::max(0.0, s);
    }
    for (std::size_t l = 0; l < p.conv.size(); ++l) {
        const auto& w = p.conv[l].weight;
        const int cin = static_cast<int>(maps.size());
        std::vector<std::vector<double>> next(static_cast<std::size_t>(w.rows()), std::vector<double>(n));
        for (Eigen::Index co = 0; co < w.rows(); ++co)
            for (int r = 0; r < side; ++r)
                for (int c = 0; c < side; ++c) {
                    double s = p.conv[l].bias(co, 0);
                    for (int dy = 0; dy < k; ++dy)
                        for (int dx = 0; dx < k; ++dx) {
                            const int rr = r + dy - k / 2, cc = c + dx - k / 2;
                            if (rr < 0 || rr >= side || cc < 0 || cc >= side) continue;
                            for (int ci = 0; ci < cin; ++ci) s += w(co, (dy * k + dx) * cin + ci) * maps[ci][rr * side + cc];
                        }
                    next[co][r * side + c] = l + 1 < p.conv.size() ? std::max(0.0, s) : s;
                }
        maps = std::move(next);
    }
    return maps[0];
}

DecoderParams<float> randomized(const ModelConfig& c, std::uint64_t seed) {
    auto p = init_params<float>(c, seed);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(-0.1f, 0.1f);
    for_each_tensor(p, [&](const std::string& name, Matrix<float>& m) {
        if (name.ends_with("bias"))
            for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += u(rng);
    });
    return p;
}

}  // namespace

TEST_SUITE("model") {
    TEST_CASE("init_params is deterministic with zero biases and unit forget bias") {
        const ModelConfig c = tiny_config();
        const auto a = init_params<float>(c, 3), b = init_params<float>(c, 3), d = init_params<float>(c, 4);
        std::vector<Matrix<float>> ta, tb, td;
        for_each_tensor(a, [&](const std::string&, const Matrix<float>& m) { ta.push_back(m); });
        for_each_tensor(b, [&](const std::string&, const Matrix<float>& m) { tb.push_back(m); });
        for_each_tensor(d, [&](const std::string&, const Matrix<float>& m) { td.push_back(m); });
        CHECK(ta == tb);
        CHECK(ta != td);
        const int h = c.hidden_size;
        for_each_tensor(a, [&](const std::string& name, const Matrix<float>& m) {
            if (!name.ends_with("bias")) return;
            if (name == "lstm.layer0.bias") {
                for (int i = 0; i < 4 * h; ++i) CHECK(m(i, 0) == (i >= h && i < 2 * h ? 1.0f : 0.0f));
            } else {
                CHECK(m.isZero(0.0f));
            }
        });
        check_shapes(a);
    }

    TEST_CASE("weight spread shrinks as fan-in grows") {
        const ModelConfig c;
        const auto p = init_params<float>(c, 1);
        // key conv1 has fan-in 9*128, conv4 has fan-in 9*32; both precede a ReLU
        const double wide = empirical_std(p.key.conv[1].weight);
        const double narrow = empirical_std(p.key.conv[4].weight);
        CHECK(wide < narrow);
        CHECK(wide == doctest::Approx(std::sqrt(6.0 / (9 * 128)) / std::sqrt(3.0)).epsilon(0.02));
        CHECK(narrow == doctest::Approx(std::sqrt(6.0 / (9 * 32)) / std::sqrt(3.0)).epsilon(0.05));
    }

    TEST_CASE("default decoder has the eight-layer key CNN and three-layer non-key CNN") {
        const auto p = zero_params<float>(ModelConfig{});
        CHECK(p.key.conv.size() + 1 == 8);
        CHECK(p.nonkey.conv.size() == 3);
        CHECK(p.key.conv[0].weight.rows() == 128);
        CHECK(p.key.conv[0].weight.cols() == 9);
        CHECK(p.nonkey.conv[1].weight.cols() == 9 * 64);
        CHECK(p.lstm.layers[0].w_input.rows() == 4096);
        CHECK(p.lstm.projection.weight.rows() == 1024);
    }

    TEST_CASE("zero parameters give a zero block of block size for any m") {
        for (int m : {10, 40, 100}) {
            ModelConfig c;
            c.m_key = m;
            c.m_nonkey = std::min(m, 10);
            const auto p = zero_params<float>(c);
            std::vector<float> y(static_cast<std::size_t>(m), 0.7f);
            const auto out = key_cnn_forward<float>(p.key, c, y);
            CHECK(out.size() == 32 * 32);
            for (float v : out) REQUIRE(v == 0.0f);
            const auto nk = nonkey_cnn_forward<float>(p.nonkey, c, std::span<const float>(y).first(c.m_nonkey));
            for (float v : nk) REQUIRE(v == 0.0f);
        }
    }

    TEST_CASE("toy CNNs match a naive convolution oracle") {
        ModelConfig c;
        c.block_size = 4;
        c.m_key = 6;
        c.m_nonkey = 3;
        c.key_channels = {3, 2, 1};
        c.nonkey_channels = {2, 1};
        c.hidden_size = 4;
        const auto pf = randomized(c, 7);
        const auto pd = cast_params<double>(pf);
        std::mt19937_64 rng(8);
        std::uniform_real_distribution<float> u(-1.0f, 1.0f);
        for (int trial = 0; trial < 5; ++trial) {
            std::vector<float> yk(6), yn(3);
            for (auto& v : yk) v = u(rng);
            for (auto& v : yn) v = u(rng);
            const auto got_k = key_cnn_forward<float>(pf.key, c, yk);
            const auto want_k = cnn_oracle(pd.key, 4, 3, {yk.begin(), yk.end()});
            for (int i = 0; i < 16; ++i) CHECK(got_k[i] == doctest::Approx(want_k[i]).epsilon(1e-5).scale(1.0));
            const auto got_n = nonkey_cnn_forward<float>(pf.nonkey, c, yn);
            const auto want_n = cnn_oracle(pd.nonkey, 4, 3, {yn.begin(), yn.end()});
            for (int i = 0; i < 16; ++i) CHECK(std::abs(got_n[i] - want_n[i]) < 1e-5);
            CHECK(nonkey_cnn_forward<float>(pf.nonkey, c, yn) == got_n);
        }
        CHECK_THROWS_AS(key_cnn_forward<float>(pf.key, c, std::vector<float>(5)), ShapeError);
    }

    TEST_CASE("lstm_step: zero case, bounds and a hand-evaluated single unit") {
        LstmLayerParams<double> zero{Matrix<double>::Zero(4, 2), Matrix<double>::Zero(4, 1), Matrix<double>::Zero(4, 1)};
        zero.bias(1, 0) = 1.0;
        const auto s = lstm_step<double>(zero, std::vector<double>{0.3, -2.0}, {{0.0}, {0.0}});
        CHECK(s.cell[0] == 0.0);
        CHECK(s.hidden[0] == 0.0);

        LstmLayerParams<double> p{Matrix<double>(4, 1), Matrix<double>(4, 1), Matrix<double>(4, 1)};
        p.w_input << 0.5, -0.3, 0.8, 0.2;
        p.w_hidden << 0.1, 0.4, -0.6, 0.7;
        p.bias << 0.05, 1.0, -0.1, 0.2;
        const double x = 0.9, h0 = -0.4, c0 = 0.6;
        auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
        const double i = sig(0.5 * x + 0.1 * h0 + 0.05);
        const double f = sig(-0.3 * x + 0.4 * h0 + 1.0);
        const double g = std::tanh(0.8 * x - 0.6 * h0 - 0.1);
        const double o = sig(0.2 * x + 0.7 * h0 + 0.2);
        const double c1 = f * c0 + i * g;
        const double h1 = o * std::tanh(c1);
        const auto out = lstm_step<double>(p, std::vector<double>{x}, {{h0}, {c0}});
        CHECK(std::abs(out.cell[0] - c1) < 1e-6);
        CHECK(std::abs(out.hidden[0] - h1) < 1e-6);

        std::mt19937_64 rng(2);
        std::normal_distribution<double> nd(0.0, 5.0);
        LstmLayerParams<double> big{Matrix<double>(16, 3), Matrix<double>(16, 4), Matrix<double>(16, 1)};
        for (auto* m : {&big.w_input, &big.w_hidden, &big.bias})
            for (Eigen::Index k = 0; k < m->size(); ++k) m->data()[k] = nd(rng);
        LstmState<double> st{std::vector<double>(4, 0.0), std::vector<double>(4, 0.0)};
        for (int t = 0; t < 20; ++t) {
            st = lstm_step<double>(big, std::vector<double>{nd(rng), nd(rng), nd(rng)}, st);
            for (double v : st.hidden) REQUIRE(std::abs(v) <= 1.0);
        }
    }

    TEST_CASE("batched LSTM agrees with repeated lstm_step") {
        const ModelConfig c = tiny_config();
        const auto p = cast_params<double>(randomized(c, 11));
        std::mt19937_64 rng(12);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        const int items = 3;
        Matrix<double> in(c.n(), c.frames * items);
        for (Eigen::Index k = 0; k < in.size(); ++k) in.data()[k] = u(rng);
        const auto out = lstm_forward_batch<double>(Backend::parallel, p.lstm, c.frames, in, nullptr);
        for (int b = 0; b < items; ++b) {
            LstmState<double> st{std::vector<double>(16, 0.0), std::vector<double>(16, 0.0)};
            for (int t = 0; t < c.frames; ++t) {
                const Eigen::Index col = t * items + b;
                st = lstm_step<double>(p.lstm.layers[0], {in.col(col).data(), static_cast<std::size_t>(c.n())}, st);
                Eigen::VectorXd hv = Eigen::Map<const Eigen::VectorXd>(st.hidden.data(), 16);
                const Eigen::VectorXd want = p.lstm.projection.weight * hv + p.lstm.projection.bias.col(0);
                CHECK((out.col(col) - want).cwiseAbs().maxCoeff() < 1e-12);
            }
        }
    }

    TEST_CASE("default decoder output shape is (10, 5, 5, 32, 32)") {
        const ModelConfig c;
        const auto p = init_params<float>(c, 5);
        const auto s = make_sensing_set(1024, 40, 10, 5);
        const auto gop = random_gop(c, 5, 5, 1);
        const auto rec = csvideonet_forward(p, sense_gop(s, gop));
        CHECK(rec.frames == 10);
        CHECK(rec.grid_rows == 5);
        CHECK(rec.grid_cols == 5);
        CHECK(rec.block_size == 32);
        CHECK(rec.values.size() == 10u * 5 * 5 * 32 * 32);
    }

    TEST_CASE("grid positions are independent and the recurrence is causal") {
        const ModelConfig c = tiny_config();
        const auto p = randomized(c, 21);
        const auto s = make_sensing_set(c.n(), c.m_key, c.m_nonkey, 22);
        const auto gop = random_gop(c, 2, 2, 23);
        const auto mg = sense_gop(s, gop);
        const auto rec = csvideonet_forward(p, mg);

        // swap positions 0 and 3 in the measurements
        MeasurementGop swapped = mg;
        auto swap_vec = [](std::vector<float>& v, std::size_t a, std::size_t b, std::size_t len) {
            std::swap_ranges(v.begin() + a * len, v.begin() + (a + 1) * len, v.begin() + b * len);
        };
        swap_vec(swapped.key, 0, 3, c.m_key);
        for (int t = 1; t < c.frames; ++t)
            swap_vec(swapped.nonkey, (t - 1) * 4 + 0, (t - 1) * 4 + 3, c.m_nonkey);
        const auto rec2 = csvideonet_forward(p, swapped);
        for (int t = 0; t < c.frames; ++t) {
            const auto a = rec.block(t, 0, 0), b = rec2.block(t, 1, 1);
            for (int i = 0; i < c.n(); ++i) CHECK(std::abs(a[i] - b[i]) < 1e-6f);
        }

        // perturb frame 2 (the last) and check frames 0 and 1 are untouched
        MeasurementGop late = mg;
        for (int pos = 0; pos < 4; ++pos)
            for (int k = 0; k < c.m_nonkey; ++k) late.nonkey[(1 * 4 + pos) * c.m_nonkey + k] += 0.5f;
        const auto rec3 = csvideonet_forward(p, late);
        for (int t = 0; t < 2; ++t)
            for (int pos = 0; pos < 4; ++pos) {
                const auto a = rec.block(t, pos / 2, pos % 2), b = rec3.block(t, pos / 2, pos % 2);
                CHECK(std::equal(a.begin(), a.end(), b.begin()));
            }
        const auto a = rec.block(2, 0, 0), b = rec3.block(2, 0, 0);
        CHECK(!std::equal(a.begin(), a.end(), b.begin()));
    }

    TEST_CASE("cnn_only equals the pre-LSTM intermediates and shares non-key weights") {
        const ModelConfig c = tiny_config();
        const auto p = randomized(c, 31);
        const auto s = make_sensing_set(c.n(), c.m_key, c.m_nonkey, 32);
        auto gop = random_gop(c, 2, 2, 33);
        // frames 1 and 2 identical so their measurements are identical
        std::copy(gop.values.begin() + 4 * c.n(), gop.values.begin() + 8 * c.n(), gop.values.begin() + 8 * c.n());
        const auto mg = sense_gop(s, gop);
        const auto batch = batch_from_gop<float>(mg, c);
        DecoderTrace<float> trace;
        (void)decoder_forward<float>(p, batch, {Backend::parallel, DecoderMode::csvideonet}, &trace);
        const auto rec = cnn_only_forward(p, mg);
        const Matrix<float>& pre = trace.lstm[0].input;
        CHECK(std::equal(rec.values.begin(), rec.values.end(), pre.data()));
        for (int pos = 0; pos < 4; ++pos) {
            const auto a = rec.block(1, pos / 2, pos % 2), b = rec.block(2, pos / 2, pos % 2);
            CHECK(std::equal(a.begin(), a.end(), b.begin()));
        }
        const auto z = zero_params<float>(c);
        MeasurementGop zm = mg;
        std::fill(zm.key.begin(), zm.key.end(), 0.0f);
        std::fill(zm.nonkey.begin(), zm.nonkey.end(), 0.0f);
        for (float v : cnn_only_forward(z, zm).values) CHECK(v == 0.0f);
    }

    TEST_CASE("forward is bit-reproducible") {
        const ModelConfig c = tiny_config();
        const auto p = randomized(c, 41);
        const auto mg = sense_gop(make_sensing_set(c.n(), c.m_key, c.m_nonkey, 1), random_gop(c, 2, 2, 2));
        CHECK(csvideonet_forward(p, mg).values == csvideonet_forward(p, mg).values);
    }

    TEST_CASE("reference and parallel backends agree on the decoder") {
        const ModelConfig c = tiny_config();
        const auto p = cast_params<double>(randomized(c, 51));
        const auto mg = sense_gop(make_sensing_set(c.n(), c.m_key, c.m_nonkey, 3), random_gop(c, 2, 2, 4));
        const auto target = random_gop(c, 2, 2, 5);
        double l_ref = 0, l_par = 0;
        const auto g_ref = backward<double>(p, mg, target, {Backend::reference, DecoderMode::csvideonet}, &l_ref);
        const auto g_par = backward<double>(p, mg, target, {Backend::parallel, DecoderMode::csvideonet}, &l_par);
        CHECK(l_ref == doctest::Approx(l_par).epsilon(1e-12));
        std::vector<const Matrix<double>*> a, b;
        for_each_tensor(g_ref, [&](const std::string&, const Matrix<double>& m) { a.push_back(&m); });
        for_each_tensor(g_par, [&](const std::string&, const Matrix<double>& m) { b.push_back(&m); });
        for (std::size_t i = 0; i < a.size(); ++i) CHECK((*a[i] - *b[i]).cwiseAbs().maxCoeff() < 1e-10);
    }

    TEST_CASE("gradients match central finite differences") {
        const auto r = testutil::gradient_check(tiny_config(), 120, 61);
        INFO(r.worst);
        CHECK(r.coordinates >= 120);
        CHECK(r.max_rel_error < 1e-4);
        const auto r2 = testutil::gradient_check(tiny_config(), 60, 62, DecoderMode::cnn_only);
        INFO(r2.worst);
        CHECK(r2.max_rel_error < 1e-4);
    }

    TEST_CASE("untouched parameters get zero gradient") {
        const ModelConfig c = tiny_config();
        const auto p = cast_params<double>(randomized(c, 71));
        const auto mg = sense_gop(make_sensing_set(c.n(), c.m_key, c.m_nonkey, 6), random_gop(c, 2, 2, 7));
        const auto target = random_gop(c, 2, 2, 8);
        const std::vector<bool> late_frames{false, true, true};
        const auto g = backward<double>(p, mg, target, {Backend::parallel, DecoderMode::cnn_only}, nullptr, late_frames);
        for_each_tensor(g.key, "key", [](const std::string&, const Matrix<double>& m) { CHECK(m.isZero(0.0)); });
        CHECK(!g.nonkey.fc.weight.isZero(0.0));
        for_each_tensor(g.lstm, "lstm", [](const std::string&, const Matrix<double>& m) { CHECK(m.isZero(0.0)); });
    }

    TEST_CASE("perfect reconstruction is a stationary point") {
        const ModelConfig c = tiny_config();
        const auto p = randomized(c, 81);
        const auto mg = sense_gop(make_sensing_set(c.n(), c.m_key, c.m_nonkey, 9), random_gop(c, 2, 2, 10));
        const GopBlockSequence target = csvideonet_forward(p, mg);
        double loss = -1.0;
        const auto g = backward<float>(p, mg, target, {Backend::parallel, DecoderMode::csvideonet}, &loss);
        CHECK(loss == 0.0);
        for_each_tensor(g, [](const std::string&, const Matrix<float>& m) { CHECK(m.isZero(0.0f)); });
    }

    TEST_CASE("shape mismatches are rejected") {
        const ModelConfig c = tiny_config();
        const auto p = init_params<float>(c, 1);
        ModelConfig other = c;
        other.m_nonkey = 4;
        const auto mg = sense_gop(make_sensing_set(other.n(), other.m_key, other.m_nonkey, 1), random_gop(c, 2, 2, 1));
        CHECK_THROWS_AS(csvideonet_forward(p, mg), ShapeError);
        ModelConfig bad = c;
        bad.key_channels = {4, 2};
        CHECK_THROWS_AS(bad.validate(), ValidationError);
    }
}
