#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

#include "doctest.h"
#include "gradcheck.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

#include "csvnet/common.hpp"
#include "csvnet/evaluation.hpp"

using namespace csvnet;
using testutil::random_plane;
using testutil::tiny_config;
using testutil::psnr_oracle;
using testutil::ssim_oracle;
using testutil::mae_oracle;

namespace {

EvalModel tiny_model(int label, std::uint64_t seed) {
    const ModelConfig c = tiny_config();
    return {label, init_params<float>(c, seed), make_sensing_set(c.n(), c.m_key, c.m_nonkey, seed + 1),
            DecoderMode::csvideonet};
}

std::vector<GopBlockSequence> tiny_dataset(int count) {
    std::vector<GopBlockSequence> out;
    for (int i = 0; i < count; ++i) out.push_back(testutil::random_gop(tiny_config(), 2, 2, 300 + i));
    return out;
}

}  // namespace

TEST_SUITE("evaluation") {
    TEST_CASE("psnr and mae match brute-force oracles") {
        std::mt19937_64 rng(1);
        for (int trial = 0; trial < 5; ++trial) {
            const Plane x = random_plane(17, 23, rng), y = random_plane(17, 23, rng);
            CHECK(psnr(x, y) == doctest::Approx(psnr_oracle(x, y)).epsilon(1e-9));
            CHECK(mae(x, y) == doctest::Approx(mae_oracle(x, y)).epsilon(1e-9));
            CHECK(psnr(x, y) == doctest::Approx(psnr(y, x)));
        }
    }

    TEST_CASE("psnr closed forms and cap") {
        const Plane a(8, 8, 0.25f);
        CHECK(psnr(a, a) == kPsnrCap);
        Plane b = a;
        for (auto& v : b.values) v += 16.0f / 255.0f;
        // MSE = 256 exactly on the 255 scale
        CHECK(psnr(a, b) == doctest::Approx(10.0 * std::log10(255.0 * 255.0 / 256.0)).epsilon(1e-5));
        CHECK(mae(a, b) == doctest::Approx(16.0).epsilon(1e-5));
        Plane d = a;
        for (auto& v : d.values) v += 5.0f / 255.0f;
        CHECK(mae(a, d) == doctest::Approx(5.0).epsilon(1e-5));
        CHECK(mae(a, a) == 0.0);
        Plane c = a;
        c.values[0] += 1e-7f;
        CHECK(psnr(a, c) <= kPsnrCap);
        CHECK_THROWS_AS(psnr(a, Plane(8, 9)), ShapeError);
    }

    TEST_CASE("ssim matches a direct windowed oracle") {
        std::mt19937_64 rng(2);
        for (int trial = 0; trial < 3; ++trial) {
            const Plane x = random_plane(20, 26, rng);
            Plane y = x;
            std::normal_distribution<float> n(0.0f, 0.05f + 0.1f * trial);
            for (auto& v : y.values) v = std::clamp(v + n(rng), 0.0f, 1.0f);
            const double s = ssim(x, y);
            CHECK(s == doctest::Approx(ssim_oracle(x, y)).epsilon(1e-9));
            CHECK(s == doctest::Approx(ssim(y, x)).epsilon(1e-12));
            CHECK(s <= 1.0);
            CHECK(s >= -1.0);
        }
        const Plane x = random_plane(16, 16, rng);
        CHECK(ssim(x, x) == doctest::Approx(1.0));
        CHECK_THROWS_AS(ssim(Plane(8, 8), Plane(8, 8)), ValidationError);
    }

    TEST_CASE("ssim of constant frames has a closed form") {
        // variances vanish, leaving the luminance term
        const double a = 0.2 * 255, b = 0.6 * 255, c1 = std::pow(0.01 * 255, 2);
        const double want = (2 * a * b + c1) / (a * a + b * b + c1);
        CHECK(ssim(Plane(12, 12, 0.2f), Plane(12, 12, 0.6f)) == doctest::Approx(want).epsilon(1e-6));
    }

    TEST_CASE("shuffled pixels keep psnr-relevant statistics but lower ssim") {
        std::mt19937_64 rng(3);
        Plane x(32, 32);
        for (int r = 0; r < 32; ++r)
            for (int c = 0; c < 32; ++c) x.at(r, c) = 0.5f + 0.4f * std::sin(0.3f * r) * std::cos(0.2f * c);
        Plane y = x;
        std::shuffle(y.values.begin(), y.values.end(), rng);
        const double mean_x = std::accumulate(x.values.begin(), x.values.end(), 0.0);
        const double mean_y = std::accumulate(y.values.begin(), y.values.end(), 0.0);
        CHECK(mean_x == doctest::Approx(mean_y));
        CHECK(ssim(x, y) < 0.5);

        // the same permutation applied to both frames leaves psnr and mae unchanged
        Plane a = random_plane(32, 32, rng), b = random_plane(32, 32, rng);
        std::vector<std::size_t> perm(a.values.size());
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        Plane pa = a, pb = b;
        for (std::size_t i = 0; i < perm.size(); ++i) {
            pa.values[i] = a.values[perm[i]];
            pb.values[i] = b.values[perm[i]];
        }
        CHECK(psnr(pa, pb) == doctest::Approx(psnr(a, b)).epsilon(1e-12));
        CHECK(mae(pa, pb) == doctest::Approx(mae(a, b)).epsilon(1e-12));
        CHECK(ssim(pa, pb) != doctest::Approx(ssim(a, b)).epsilon(1e-6));
    }

    TEST_CASE("psnr drop") {
        CHECK(psnr_drop(26.87, 24.23) == doctest::Approx(100.0 * (26.87 - 24.23) / 26.87));
        CHECK(psnr_drop(26.87, 24.23) == doctest::Approx(9.825).epsilon(1e-3));
        CHECK(psnr_drop(30, 30) == 0.0);
        CHECK(psnr_drop(20, 10) == doctest::Approx(50.0));
        CHECK_THROWS_AS(psnr_drop(0.0, 1.0), ValidationError);
    }

    TEST_CASE("clean sentinel equals the noiseless pipeline") {
        const auto model = tiny_model(25, 1);
        const auto gop = tiny_dataset(1).front();
        const auto a = sense_with_noise(model.sensing, gop, kNoiseDisabled, NoiseMode::measurement, 5, 0, 0);
        const auto b = sense_gop(model.sensing, gop);
        CHECK(a.key == b.key);
        CHECK(a.nonkey == b.nonkey);
        const auto n1 = sense_with_noise(model.sensing, gop, 20.0, NoiseMode::measurement, 5, 0, 1);
        const auto n2 = sense_with_noise(model.sensing, gop, 20.0, NoiseMode::measurement, 5, 0, 1);
        CHECK(n1.key == n2.key);
        CHECK(n1.key != b.key);
        const auto f = sense_with_noise(model.sensing, gop, 20.0, NoiseMode::frame, 5, 0, 1);
        CHECK(f.key != b.key);
        CHECK(noise_seed_for(1, 0, 0, 0) != noise_seed_for(1, 0, 1, 0));
        CHECK(noise_seed_for(1, 0, 0, 0) != noise_seed_for(1, 1, 0, 0));
    }

    TEST_CASE("sweep cardinality, per-frame means and clamping") {
        const std::vector<EvalModel> models{tiny_model(25, 1), tiny_model(100, 2)};
        const auto data = tiny_dataset(2);
        EvalOptions opt;
        opt.snr_levels = {kNoiseDisabled, 20.0, 40.0};
        const auto report = evaluate_model(models, data, opt);
        REQUIRE(report.cells.size() == 6);
        CHECK(report.cells[0].cr_label == 25);
        CHECK(report.cells[3].cr_label == 100);
        for (const auto& cell : report.cells) {
            CHECK(cell.sample_count == 2 * tiny_config().frames);
            REQUIRE(cell.frame_psnr.size() == static_cast<std::size_t>(cell.sample_count));
            const double m = std::accumulate(cell.frame_psnr.begin(), cell.frame_psnr.end(), 0.0) / cell.sample_count;
            CHECK(cell.mean_psnr == doctest::Approx(m));
            CHECK(cell.mean_ssim <= 1.0);
        }
        REQUIRE(report.psnr_drop_percent.has_value());
        CHECK(report.psnr_drop_labels->first == 25);
        CHECK(*report.psnr_drop_percent ==
              doctest::Approx(psnr_drop(report.find(25, kNoiseDisabled)->mean_psnr,
                                        report.find(100, kNoiseDisabled)->mean_psnr)));

        const auto mg = sense_gop(models[0].sensing, data[0]);
        for (float v : reconstruct_clamped(models[0], mg).values) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }

        EvalOptions clean;
        const auto only = evaluate_model(std::span(models).first(1), data, clean);
        CHECK(only.cells.size() == 1);
        CHECK(!only.psnr_drop_percent.has_value());
        CHECK(only.cells[0].mean_psnr == report.cells[0].mean_psnr);

        EvalModel bad = models[0];
        bad.sensing = make_sensing_set(64, 12, 8, 1);
        CHECK_THROWS_AS(evaluate_model(std::span(&bad, 1), data, clean), ShapeError);
        CHECK_THROWS_AS(evaluate_model(models, std::span<const GopBlockSequence>{}, clean), ValidationError);
    }

    TEST_CASE("runtime statistics") {
        const auto model = tiny_model(100, 3);
        const auto rt = runtime_bench(model, 10, 1);
        CHECK(rt.repeats == 10);
        CHECK(rt.min_ms <= rt.mean_ms);
        CHECK(rt.mean_ms <= rt.max_ms);
        CHECK(rt.min_ms > 0.0);
        CHECK_THROWS_AS(runtime_bench(model, 9), ValidationError);
    }

    TEST_CASE("report emitters") {
        const std::vector<EvalModel> models{tiny_model(25, 1), tiny_model(50, 2)};
        EvalOptions opt;
        opt.snr_levels = {20.0, kNoiseDisabled};
        MetricsReport report = evaluate_model(models, tiny_dataset(1), opt);
        report.runtime.push_back(runtime_bench(models[1], 10, 0));

        const std::string csv = report_to_csv(report);
        CHECK(csv.rfind("cr,snr,psnr,ssim,mae,n\n", 0) == 0);
        CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
        CHECK(csv.find("25,clean,") != std::string::npos);

        const auto j = report_to_json(report);
        CHECK(j["cells"].size() == 4);
        CHECK(j["cells"][0]["snr"] == "20");
        CHECK(j.contains("psnr_drop"));
        CHECK(j["runtime"][0]["repeats"] == 10);
        CHECK(j.contains("context"));

        const std::string svg = psnr_snr_plot_svg(report);
        CHECK(svg.find("<svg") != std::string::npos);
        CHECK(svg.find("</svg>") != std::string::npos);
        CHECK(svg.find("polyline") != std::string::npos);

        CHECK(snr_label(kNoiseDisabled) == "clean");
        CHECK(snr_from_label("40") == 40.0);
        CHECK(snr_from_label("clean") == kNoiseDisabled);
        CHECK_THROWS_AS(snr_from_label("loud"), ValidationError);
    }
}
