#include "csvnet/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "csvnet/common.hpp"
#include "csvnet/kernels.hpp"

namespace csvnet {

namespace {

void require_same_shape(const Plane& x, const Plane& y) {
    require_shape(x.height == y.height && x.width == y.width && x.values.size() == y.values.size(),
                  "frames differ in shape (" + std::to_string(x.height) + "x" + std::to_string(x.width) + " vs " +
                      std::to_string(y.height) + "x" + std::to_string(y.width) + ")");
    require_shape(!x.values.empty(), "empty frame");
}

// Valid (unpadded) separable filtering of a row-major plane.
std::vector<double> filter_valid(const std::vector<double>& src, int h, int w, const std::vector<double>& taps) {
    const int k = static_cast<int>(taps.size());
    const int ow = w - k + 1, oh = h - k + 1;
    std::vector<double> tmp(static_cast<std::size_t>(h) * ow);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < ow; ++c) {
            double s = 0.0;
            for (int i = 0; i < k; ++i) s += taps[i] * src[static_cast<std::size_t>(r) * w + c + i];
            tmp[static_cast<std::size_t>(r) * ow + c] = s;
        }
    std::vector<double> out(static_cast<std::size_t>(oh) * ow);
    for (int r = 0; r < oh; ++r)
        for (int c = 0; c < ow; ++c) {
            double s = 0.0;
            for (int i = 0; i < k; ++i) s += taps[i] * tmp[static_cast<std::size_t>(r + i) * ow + c];
            out[static_cast<std::size_t>(r) * ow + c] = s;
        }
    return out;
}

}  // namespace

double psnr(const Plane& x, const Plane& y) {
    require_same_shape(x, y);
    double sum = 0.0;
    for (std::size_t i = 0; i < x.values.size(); ++i) {
        const double d = 255.0 * (static_cast<double>(x.values[i]) - static_cast<double>(y.values[i]));
        sum += d * d;
    }
    const double mse = sum / static_cast<double>(x.values.size());
    if (mse == 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(255.0 * 255.0 / mse));
}

double mae(const Plane& x, const Plane& y) {
    require_same_shape(x, y);
    double sum = 0.0;
    for (std::size_t i = 0; i < x.values.size(); ++i)
        sum += std::abs(static_cast<double>(x.values[i]) - static_cast<double>(y.values[i]));
    return 255.0 * sum / static_cast<double>(x.values.size());
}

double ssim(const Plane& x, const Plane& y, const SsimParams& p) {
    require_same_shape(x, y);
    require(p.window >= 1 && p.sigma > 0.0, "invalid SSIM window");
    require(x.height >= p.window && x.width >= p.window,
            "frame " + std::to_string(x.height) + "x" + std::to_string(x.width) + " is smaller than the " +
                std::to_string(p.window) + "x" + std::to_string(p.window) + " SSIM window");

    std::vector<double> taps(static_cast<std::size_t>(p.window));
    const double centre = 0.5 * (p.window - 1);
    double norm = 0.0;
    for (int i = 0; i < p.window; ++i) {
        taps[i] = std::exp(-(i - centre) * (i - centre) / (2.0 * p.sigma * p.sigma));
        norm += taps[i];
    }
    for (double& t : taps) t /= norm;

    const std::size_t count = x.values.size();
    std::vector<double> a(count), b(count), aa(count), bb(count), ab(count);
    for (std::size_t i = 0; i < count; ++i) {
        a[i] = 255.0 * x.values[i];
        b[i] = 255.0 * y.values[i];
        aa[i] = a[i] * a[i];
        bb[i] = b[i] * b[i];
        ab[i] = a[i] * b[i];
    }
    const int h = x.height, w = x.width;
    const auto mu_a = filter_valid(a, h, w, taps);
    const auto mu_b = filter_valid(b, h, w, taps);
    const auto e_aa = filter_valid(aa, h, w, taps);
    const auto e_bb = filter_valid(bb, h, w, taps);
    const auto e_ab = filter_valid(ab, h, w, taps);

    const double c1 = (p.k1 * p.dynamic_range) * (p.k1 * p.dynamic_range);
    const double c2 = (p.k2 * p.dynamic_range) * (p.k2 * p.dynamic_range);
    double total = 0.0;
    for (std::size_t i = 0; i < mu_a.size(); ++i) {
        const double ma = mu_a[i], mb = mu_b[i];
        const double va = e_aa[i] - ma * ma, vb = e_bb[i] - mb * mb, cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    return total / static_cast<double>(mu_a.size());
}

double psnr_drop(double psnr_low, double psnr_high) {
    require(psnr_low > 0.0, "psnr_drop needs a positive reference PSNR");
    return 100.0 * (psnr_low - psnr_high) / psnr_low;
}

const CellMetrics* MetricsReport::find(int cr_label, double snr_db) const {
    for (const auto& c : cells)
        if (c.cr_label == cr_label && (c.snr_db == snr_db)) return &c;
    return nullptr;
}

// --- sweep -----------------------------------------------------------------------

std::uint64_t noise_seed_for(std::uint64_t base, std::size_t gop, int stream, std::size_t snr_index) {
    // splitmix64 over the combined key
    std::uint64_t z = base ^ (static_cast<std::uint64_t>(gop) * 0x9E3779B97F4A7C15ULL) ^
                      (static_cast<std::uint64_t>(stream) << 56) ^ (static_cast<std::uint64_t>(snr_index) << 40);
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

MeasurementGop sense_with_noise(const SensingMatrixSet& sensing, const GopBlockSequence& gop, double snr_db,
                                NoiseMode mode, std::uint64_t seed_base, std::size_t gop_index,
                                std::size_t snr_index) {
    if (snr_db == kNoiseDisabled) return sense_gop(sensing, gop);
    if (mode == NoiseMode::frame) {
        GopBlockSequence noisy = gop;
        noisy.values = add_measurement_noise(gop.values, snr_db, noise_seed_for(seed_base, gop_index, 2, snr_index));
        return sense_gop(sensing, noisy);
    }
    MeasurementGop mg = sense_gop(sensing, gop);
    mg.key = add_measurement_noise(mg.key, snr_db, noise_seed_for(seed_base, gop_index, 0, snr_index));
    mg.nonkey = add_measurement_noise(mg.nonkey, snr_db, noise_seed_for(seed_base, gop_index, 1, snr_index));
    return mg;
}

GopBlockSequence reconstruct_clamped(const EvalModel& model, const MeasurementGop& mg) {
    GopBlockSequence rec = reconstruct_gop(model.params, mg, {Backend::parallel, model.mode});
    for (float& v : rec.values) v = std::clamp(v, 0.0f, 1.0f);
    return rec;
}

MetricsReport evaluate_model(std::span<const EvalModel> models, std::span<const GopBlockSequence> dataset,
                             const EvalOptions& options) {
    require(!models.empty(), "no models to evaluate");
    require(!dataset.empty(), "empty evaluation dataset");
    require(!options.snr_levels.empty(), "no SNR levels requested");
    for (double s : options.snr_levels) require(s == kNoiseDisabled || std::isfinite(s), "SNR levels must be finite or clean");

    MetricsReport report;
    for (const auto& model : models) {
        const auto& cfg = model.params.config;
        require_shape(model.sensing.m_key == cfg.m_key && model.sensing.m_nonkey == cfg.m_nonkey &&
                          model.sensing.n == cfg.n(),
                      "sensing operator of CR " + std::to_string(model.cr_label) + " does not match its decoder");
        for (std::size_t si = 0; si < options.snr_levels.size(); ++si) {
            CellMetrics cell;
            cell.cr_label = model.cr_label;
            cell.snr_db = options.snr_levels[si];
            for (std::size_t g = 0; g < dataset.size(); ++g) {
                const auto& gop = dataset[g];
                require_shape(gop.block_size == cfg.block_size && gop.frames == cfg.frames,
                              "evaluation GOP does not match the decoder configuration");
                const MeasurementGop mg =
                    sense_with_noise(model.sensing, gop, cell.snr_db, options.noise_mode, options.noise_seed, g, si);
                const GopBlockSequence rec = reconstruct_clamped(model, mg);
                for (int t = 0; t < gop.frames; ++t) {
                    const LumaFrame truth = gop.frame(t);
                    const LumaFrame est = rec.frame(t);
                    cell.frame_psnr.push_back(psnr(truth, est));
                    cell.frame_ssim.push_back(ssim(truth, est));
                    cell.frame_mae.push_back(mae(truth, est));
                }
            }
            auto mean = [](const std::vector<double>& v) {
                double s = 0.0;
                for (double x : v) s += x;
                return s / static_cast<double>(v.size());
            };
            cell.sample_count = static_cast<int>(cell.frame_psnr.size());
            cell.mean_psnr = mean(cell.frame_psnr);
            cell.mean_ssim = mean(cell.frame_ssim);
            cell.mean_mae = mean(cell.frame_mae);
            if (!options.keep_frame_lists) {
                cell.frame_psnr.clear();
                cell.frame_ssim.clear();
                cell.frame_mae.clear();
            }
            report.cells.push_back(std::move(cell));
        }
    }

    std::set<int> labels;
    for (const auto& m : models) labels.insert(m.cr_label);
    if (labels.size() >= 2) {
        const int low = *labels.begin(), high = *labels.rbegin();
        const auto* a = report.find(low, kNoiseDisabled);
        const auto* b = report.find(high, kNoiseDisabled);
        if (a && b && a->mean_psnr > 0.0) {
            report.psnr_drop_percent = psnr_drop(a->mean_psnr, b->mean_psnr);
            report.psnr_drop_labels = std::make_pair(low, high);
        }
    }
    return report;
}

RuntimeStats runtime_bench(const EvalModel& model, int repeats, int warmup) {
    require(repeats >= 10, "runtime benchmark needs at least 10 repeats");
    require(warmup >= 0, "warm-up count must be non-negative");
    const auto& cfg = model.params.config;
    const int side = 5 * cfg.block_size;
    const auto frames = synthetic_clip(cfg.frames, 0, std::max(side, 240), std::max(side, 320));
    const auto gops = ingest_frames(frames, {side, side, cfg.block_size, cfg.frames}, "bench");
    const MeasurementGop mg = sense_gop(model.sensing, gops.front());

    using clock = std::chrono::steady_clock;
    RuntimeStats stats;
    stats.cr_label = model.cr_label;
    stats.repeats = repeats;
    stats.warmup = warmup;
    stats.threads = kernels::thread_count();
    for (int i = 0; i < warmup; ++i) (void)reconstruct_clamped(model, mg);
    double sum = 0.0;
    stats.min_ms = std::numeric_limits<double>::infinity();
    stats.max_ms = 0.0;
    for (int i = 0; i < repeats; ++i) {
        const auto t0 = clock::now();
        (void)reconstruct_clamped(model, mg);
        const double ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count() / cfg.frames;
        sum += ms;
        stats.min_ms = std::min(stats.min_ms, ms);
        stats.max_ms = std::max(stats.max_ms, ms);
    }
    stats.mean_ms = sum / repeats;
    return stats;
}

// --- reports -----------------------------------------------------------------------

std::string snr_label(double snr_db) {
    if (snr_db == kNoiseDisabled) return "clean";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", snr_db);
    return buf;
}

double snr_from_label(const std::string& label) {
    if (label == "clean" || label == "inf") return kNoiseDisabled;
    try {
        std::size_t used = 0;
        const double v = std::stod(label, &used);
        if (used == label.size() && std::isfinite(v)) return v;
    } catch (const std::exception&) {
    }
    throw ValidationError("SNR level '" + label + "' is neither a number nor 'clean'");
}

nlohmann::json report_to_json(const MetricsReport& report) {
    using nlohmann::json;
    json cells = json::array();
    for (const auto& c : report.cells) {
        json j{{"cr", c.cr_label},       {"snr", snr_label(c.snr_db)}, {"psnr", c.mean_psnr},
               {"ssim", c.mean_ssim},    {"mae", c.mean_mae},          {"n", c.sample_count}};
        if (!c.frame_psnr.empty()) {
            j["frame_psnr"] = c.frame_psnr;
            j["frame_ssim"] = c.frame_ssim;
            j["frame_mae"] = c.frame_mae;
        }
        cells.push_back(std::move(j));
    }
    json out{{"cells", cells}};
    if (report.psnr_drop_percent) {
        out["psnr_drop"] = {{"from_cr", report.psnr_drop_labels->first},
                            {"to_cr", report.psnr_drop_labels->second},
                            {"percent", *report.psnr_drop_percent}};
    }
    if (!report.runtime.empty()) {
        json rt = json::array();
        for (const auto& r : report.runtime)
            rt.push_back({{"cr", r.cr_label},
                          {"repeats", r.repeats},
                          {"warmup", r.warmup},
                          {"threads", r.threads},
                          {"mean_ms_per_frame", r.mean_ms},
                          {"min_ms_per_frame", r.min_ms},
                          {"max_ms_per_frame", r.max_ms}});
        out["runtime"] = rt;
    }
    // reference figures from the original full-scale experiments, never asserted
    out["context"] = {{"reference_psnr_db", {{"25", 26.87}, {"50", 25.09}, {"100", 24.23}}},
                      {"reference_psnr_drop_percent_25_to_100", 10},
                      {"reference_runtime_s_per_frame_cr100", 0.0080}};
    return out;
}

std::string report_to_csv(const MetricsReport& report) {
    std::ostringstream os;
    os << "cr,snr,psnr,ssim,mae,n\n";
    char buf[160];
    for (const auto& c : report.cells) {
        std::snprintf(buf, sizeof buf, "%d,%s,%.6f,%.6f,%.6f,%d\n", c.cr_label, snr_label(c.snr_db).c_str(),
                      c.mean_psnr, c.mean_ssim, c.mean_mae, c.sample_count);
        os << buf;
    }
    return os.str();
}

std::string psnr_snr_plot_svg(const MetricsReport& report) {
    // x positions: finite SNRs ascending, then "clean" at the right end
    std::set<double> finite;
    bool has_clean = false;
    std::map<int, std::vector<const CellMetrics*>> series;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& c : report.cells) {
        if (c.snr_db == kNoiseDisabled)
            has_clean = true;
        else
            finite.insert(c.snr_db);
        series[c.cr_label].push_back(&c);
        lo = std::min(lo, c.mean_psnr);
        hi = std::max(hi, c.mean_psnr);
    }
    std::vector<double> xs(finite.begin(), finite.end());
    if (has_clean) xs.push_back(kNoiseDisabled);
    if (xs.empty() || !std::isfinite(lo)) {
        lo = 0.0;
        hi = 1.0;
    }
    if (hi - lo < 1.0) {
        lo -= 0.5;
        hi += 0.5;
    }
    lo = std::floor(lo);
    hi = std::ceil(hi);

    const double W = 640, H = 420, left = 70, right = 150, top = 40, bottom = 60;
    const double pw = W - left - right, ph = H - top - bottom;
    auto px = [&](double snr) {
        const auto it = std::find(xs.begin(), xs.end(), snr);
        const double idx = static_cast<double>(it - xs.begin());
        return left + (xs.size() > 1 ? idx / (static_cast<double>(xs.size()) - 1.0) * pw : pw / 2);
    };
    auto py = [&](double v) { return top + (hi - v) / (hi - lo) * ph; };
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

    std::ostringstream os;
    char buf[256];
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
       << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << left + pw / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">PSNR vs SNR</text>\n";
    std::snprintf(buf, sizeof buf,
                  "<rect x=\"%.1f\" y=\"%.1f\" width=\"%.1f\" height=\"%.1f\" fill=\"none\" stroke=\"black\"/>\n",
                  left, top, pw, ph);
    os << buf;
    for (int k = 0; k <= 4; ++k) {
        const double v = lo + (hi - lo) * k / 4.0;
        std::snprintf(buf, sizeof buf,
                      "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"#ddd\"/>"
                      "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"end\">%.1f</text>\n",
                      left, py(v), left + pw, py(v), left - 6, py(v) + 4, v);
        os << buf;
    }
    for (double s : xs) {
        std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\">%s</text>\n", px(s),
                      top + ph + 18, s == kNoiseDisabled ? "clean" : (snr_label(s) + " dB").c_str());
        os << buf;
    }
    std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\">SNR</text>\n", left + pw / 2,
                  H - 14);
    os << buf;
    std::snprintf(buf, sizeof buf,
                  "<text x=\"18\" y=\"%.1f\" text-anchor=\"middle\" transform=\"rotate(-90 18 %.1f)\">PSNR (dB)</text>\n",
                  top + ph / 2, top + ph / 2);
    os << buf;

    std::size_t si = 0;
    for (const auto& [label, cells] : series) {
        const char* color = colors[si % (sizeof colors / sizeof *colors)];
        std::vector<const CellMetrics*> sorted = cells;
        std::sort(sorted.begin(), sorted.end(), [&](auto* a, auto* b) { return px(a->snr_db) < px(b->snr_db); });
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
        for (const auto* c : sorted) {
            std::snprintf(buf, sizeof buf, "%.1f,%.1f ", px(c->snr_db), py(c->mean_psnr));
            os << buf;
        }
        os << "\"/>\n";
        for (const auto* c : sorted) {
            std::snprintf(buf, sizeof buf, "<circle cx=\"%.1f\" cy=\"%.1f\" r=\"3.5\" fill=\"%s\"/>\n",
                          px(c->snr_db), py(c->mean_psnr), color);
            os << buf;
        }
        const double ly = top + 16 + 20.0 * static_cast<double>(si);
        std::snprintf(buf, sizeof buf,
                      "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"%s\" stroke-width=\"2\"/>"
                      "<text x=\"%.1f\" y=\"%.1f\">CR %d</text>\n",
                      left + pw + 16, ly, left + pw + 40, ly, color, left + pw + 46, ly + 4, label);
        os << buf;
        ++si;
    }
    os << "</svg>\n";
    return os.str();
}

}  // namespace csvnet
