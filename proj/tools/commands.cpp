#include "commands.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "csvnet/checkpoint.hpp"
#include "csvnet/common.hpp"
#include "csvnet/evaluation.hpp"
#include "csvnet/ingest.hpp"
#include "csvnet/training.hpp"

namespace csvnet::app {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void log_line(const std::string& command, const std::string& text) {
    std::fprintf(stderr, "[%s] %s\n", command.c_str(), text.c_str());
}

void write_text(const fs::path& path, const std::string& text) {
    write_file_bytes(path.string(), std::span<const char>(text.data(), text.size()));
}

class OutputDir {
public:
    OutputDir(const RunConfig& config, std::string command) : dir_(config.out), command_(std::move(command)) {
        std::error_code ec;
        fs::create_directories(dir_, ec);
        if (ec) throw IoError("cannot create output directory '" + dir_.string() + "': " + ec.message());
        fs::remove(dir_ / kFailedMarker, ec);
        write_text(dir_ / kIncompleteMarker, command_ + "\n");
        write_text(dir_ / "config.json", to_json(config).dump(2) + "\n");
        files_.push_back("config.json");
    }
    OutputDir(const OutputDir&) = delete;
    OutputDir& operator=(const OutputDir&) = delete;
    ~OutputDir() {
        if (!finished_) {
            try {
                write_text(dir_ / kFailedMarker, json{{"command", command_}, {"error", "interrupted"}}.dump() + "\n");
            } catch (...) {
            }
        }
    }

    fs::path path(const std::string& name) const { return dir_ / name; }
    void add(const std::string& name) { files_.push_back(name); }

    void finish() {
        json files = json::array();
        for (const auto& name : files_) {
            const auto bytes = read_file_bytes(path(name).string());
            files.push_back({{"name", name}, {"bytes", bytes.size()}, {"crc32", crc32_of(bytes)}});
        }
        const json manifest{{"command", command_}, {"library_version", kLibraryVersion}, {"files", files}};
        write_text(path("manifest.json"), manifest.dump(2) + "\n");
        std::error_code ec;
        fs::remove(path(kIncompleteMarker), ec);
        finished_ = true;
    }

private:
    fs::path dir_;
    std::string command_;
    std::vector<std::string> files_;
    bool finished_ = false;
};

class JsonlLog {
public:
    explicit JsonlLog(const fs::path& path) : out_(path, std::ios::trunc) {
        if (!out_) throw IoError("cannot write log '" + path.string() + "'");
    }
    void write(const std::string& line) { out_ << line << '\n' << std::flush; }

private:
    std::ofstream out_;
};

DatasetShape expected_shape(const RunConfig& c) {
    return {c.ingest.block_size, c.ingest.gop_length, c.ingest.crop_height / c.ingest.block_size,
            c.ingest.crop_width / c.ingest.block_size};
}

BlockDataset load_split(const std::string& dir, const char* what, const RunConfig& c) {
    if (dir.empty()) throw ValidationError(std::string("data.") + what + " must name a dataset directory");
    return read_dataset(dir, expected_shape(c));
}

void require_same_encoder(const SensingMeta& meta, const RunConfig& c, const std::string& path) {
    if (meta.seed != c.sensing.seed || meta.m_key != c.sensing.m_key || meta.m_nonkey != c.sensing.m_nonkey ||
        meta.n != c.ingest.block_size * c.ingest.block_size)
        throw ValidationError("checkpoint '" + path + "' was trained against a different sensing operator");
}

Checkpoint base_checkpoint(const RunConfig& c) {
    Checkpoint ck;
    ck.sensing = SensingMeta::of(c.sensing_set(), c.sensing.noise_mode);
    ck.run_config = portable_config(c);
    return ck;
}

int progress_every(int steps) { return std::max(1, steps / 20); }

EvalModel load_eval_model(int label, const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    if (ck.kind != CheckpointKind::decoder)
        throw ValidationError("checkpoint '" + path + "' holds only a key CNN; evaluation needs a full decoder");
    return {label, std::move(ck.params), ck.sensing.regenerate(), ck.mode};
}

EvalOptions eval_options(const RunConfig& c) {
    EvalOptions o;
    o.snr_levels = c.eval.snr_levels;
    o.noise_mode = c.sensing.noise_mode;
    o.noise_seed = c.eval.noise_seed;
    o.keep_frame_lists = c.eval.frame_lists;
    return o;
}

}  // namespace

void cmd_ingest(const RunConfig& c) {
    OutputDir out(c, "ingest");
    const IngestOptions opts{c.ingest.crop_height, c.ingest.crop_width, c.ingest.block_size, c.ingest.gop_length};

    std::vector<std::vector<GopBlockSequence>> clips;
    if (!c.ingest.paths.empty()) {
        const BlockDataset corpus = ingest_corpus(c.ingest.paths, opts);
        for (const auto& path : c.ingest.paths) {
            clips.emplace_back();
            for (const auto& g : corpus.gops)
                if (g.source_id == path) clips.back().push_back(g);
        }
    }
    for (int k = 0; k < c.ingest.synthetic.clips; ++k) {
        const std::uint64_t seed = c.ingest.synthetic.seed * 1000003ULL + static_cast<std::uint64_t>(k);
        const auto frames = synthetic_clip(c.ingest.synthetic.frames, seed);
        clips.push_back(ingest_frames(frames, opts, "synthetic:" + std::to_string(seed)));
    }
    if (clips.empty()) throw ValidationError("nothing to ingest: set ingest.paths or ingest.synthetic.clips");
    if (c.ingest.test_clips >= static_cast<int>(clips.size()))
        throw ValidationError("ingest.testClips must leave at least one training clip");

    const std::size_t n_train = clips.size() - static_cast<std::size_t>(c.ingest.test_clips);
    auto collect = [&](std::size_t from, std::size_t to) {
        std::vector<GopBlockSequence> gops;
        for (std::size_t i = from; i < to; ++i)
            for (auto& g : clips[i]) gops.push_back(std::move(g));
        return make_dataset(std::move(gops));
    };
    BlockDataset train = collect(0, n_train);
    BlockDataset test = collect(n_train, clips.size());
    if (train.gops.empty()) throw ValidationError("the training split holds no complete GOP");

    write_dataset(train, out.path("train").string());
    out.add("train/manifest.json");
    out.add(std::string("train/") + kDatasetBlocks);
    if (c.ingest.test_clips > 0) {
        write_dataset(test, out.path("test").string());
        out.add("test/manifest.json");
        out.add(std::string("test/") + kDatasetBlocks);
    }
    const json summary{{"clips", clips.size()},
                       {"train_clips", n_train},
                       {"test_clips", c.ingest.test_clips},
                       {"train_gops", train.gops.size()},
                       {"test_gops", test.gops.size()}};
    write_text(out.path("ingest.json"), summary.dump(2) + "\n");
    out.add("ingest.json");
    log_line("ingest", summary.dump());
    out.finish();
}

void cmd_pretrain(const RunConfig& c) {
    OutputDir out(c, "pretrain");
    const BlockDataset ds = load_split(c.data.train, "train", c);
    const ModelConfig model = c.model_config();
    const SensingMatrixSet sensing = c.sensing_set();
    const KeyBlockSet set = build_key_block_set(ds.gops, sensing);
    log_line("pretrain", std::to_string(set.size()) + " key blocks, " + std::to_string(c.pretrain.steps) + " steps");

    JsonlLog log(out.path("pretrain.jsonl"));
    const int every = progress_every(c.pretrain.steps);
    TrainHooks hooks;
    hooks.on_step = [&](const StepRecord& r) {
        log.write(format_step_record(r));
        if (r.step % every == 0) log_line("pretrain", "step " + std::to_string(r.step) + " loss " + std::to_string(r.loss));
    };
    PretrainResult result = pretrain_key_cnn(set, model, c.pretrain, hooks);
    out.add("pretrain.jsonl");

    Checkpoint ck = base_checkpoint(c);
    ck.kind = CheckpointKind::key_cnn;
    ck.params.config = model;
    ck.params.key = std::move(result.key);
    ck.optimizer = std::move(result.optimizer);
    ck.train = c.pretrain;
    ck.step = c.pretrain.steps;
    save_checkpoint(ck, out.path("key_cnn.ckpt").string());
    out.add("key_cnn.ckpt");

    const double final_loss = key_dataset_loss(ck.params.key, model, set);
    write_text(out.path("summary.json"), json{{"steps", c.pretrain.steps}, {"dataset_loss", final_loss}}.dump(2) + "\n");
    out.add("summary.json");
    log_line("pretrain", "dataset loss " + std::to_string(final_loss));
    out.finish();
}

void cmd_train(const RunConfig& c) {
    OutputDir out(c, "train");
    const BlockDataset ds = load_split(c.data.train, "train", c);
    const ModelConfig model = c.model_config();
    const SensingMatrixSet sensing = c.sensing_set();
    const SequenceSet set = build_sequence_set(ds.gops, sensing);

    std::optional<CnnParams<float>> pretrained;
    if (!c.data.pretrained.empty()) {
        Checkpoint pre = load_checkpoint(c.data.pretrained, &model);
        require_same_encoder(pre.sensing, c, c.data.pretrained);
        pretrained = std::move(pre.params.key);
        log_line("train", "key CNN initialized from " + c.data.pretrained);
    } else {
        log_line("train", "no pretrained key CNN given; training from scratch");
    }
    log_line("train", std::to_string(set.size()) + " block sequences, " + std::to_string(c.train.steps) + " steps");

    JsonlLog log(out.path("train.jsonl"));
    std::optional<JsonlLog> eval_log;
    if (c.train.eval_every > 0) eval_log.emplace(out.path("eval.jsonl"));
    const int every = progress_every(c.train.steps);
    EvalOptions clean;
    clean.keep_frame_lists = false;
    TrainHooks hooks;
    hooks.on_step = [&](const StepRecord& r) {
        log.write(format_step_record(r));
        if (r.step % every == 0) log_line("train", "step " + std::to_string(r.step) + " loss " + std::to_string(r.loss));
    };
    hooks.on_eval = [&](int step, const DecoderParams<float>& params) {
        const EvalModel em{0, params, sensing, c.train.mode};
        const MetricsReport rep = evaluate_model(std::span(&em, 1), ds.gops, clean);
        eval_log->write(json{{"step", step},
                             {"dataset_loss", dataset_loss(params, set, c.train.mode)},
                             {"train_psnr", rep.cells.front().mean_psnr}}
                            .dump());
    };
    TrainResult result = train_full(set, model, c.train, pretrained ? &*pretrained : nullptr, hooks);
    out.add("train.jsonl");
    if (eval_log) out.add("eval.jsonl");

    Checkpoint ck = base_checkpoint(c);
    ck.kind = CheckpointKind::decoder;
    ck.mode = c.train.mode;
    ck.params = std::move(result.params);
    ck.optimizer = std::move(result.optimizer);
    ck.train = c.train;
    ck.step = c.train.steps;
    save_checkpoint(ck, out.path("decoder.ckpt").string());
    out.add("decoder.ckpt");
    out.finish();
}

void cmd_eval(const RunConfig& c) {
    OutputDir out(c, "eval");
    const BlockDataset ds = load_split(c.data.test, "test", c);
    std::vector<EvalModel> models;
    for (int label : c.eval_labels()) models.push_back(load_eval_model(label, c.eval.checkpoints.at(label)));
    const MetricsReport report = evaluate_model(models, ds.gops, eval_options(c));

    write_text(out.path("metrics.json"), report_to_json(report).dump(2) + "\n");
    write_text(out.path("metrics.csv"), report_to_csv(report));
    write_text(out.path("psnr_snr.svg"), psnr_snr_plot_svg(report));
    for (const char* f : {"metrics.json", "metrics.csv", "psnr_snr.svg"}) out.add(f);
    for (const auto& cell : report.cells)
        log_line("eval", "CR " + std::to_string(cell.cr_label) + " SNR " + snr_label(cell.snr_db) + ": PSNR " +
                             std::to_string(cell.mean_psnr) + " SSIM " + std::to_string(cell.mean_ssim) + " MAE " +
                             std::to_string(cell.mean_mae));
    out.finish();
}

void cmd_bench(const RunConfig& c) {
    OutputDir out(c, "bench");
    MetricsReport report;
    for (int label : c.eval_labels()) {
        const EvalModel model = load_eval_model(label, c.eval.checkpoints.at(label));
        report.runtime.push_back(runtime_bench(model, c.eval.repeats, c.eval.warmup));
        const auto& r = report.runtime.back();
        log_line("bench", "CR " + std::to_string(label) + ": mean " + std::to_string(r.mean_ms) + " ms/frame (min " +
                              std::to_string(r.min_ms) + ", max " + std::to_string(r.max_ms) + ")");
    }
    const json j = report_to_json(report);
    write_text(out.path("runtime.json"), json{{"runtime", j["runtime"]}, {"context", j["context"]}}.dump(2) + "\n");
    std::string csv = "cr,repeats,warmup,threads,mean_ms,min_ms,max_ms\n";
    for (const auto& r : report.runtime) {
        char buf[200];
        std::snprintf(buf, sizeof buf, "%d,%d,%d,%d,%.6f,%.6f,%.6f\n", r.cr_label, r.repeats, r.warmup, r.threads,
                      r.mean_ms, r.min_ms, r.max_ms);
        csv += buf;
    }
    write_text(out.path("runtime.csv"), csv);
    out.add("runtime.json");
    out.add("runtime.csv");
    out.finish();
}

void cmd_ablate(const RunConfig& c) {
    OutputDir out(c, "ablate");
    if (c.eval.ablation_csvideonet.empty() || c.eval.ablation_cnn_only.empty())
        throw ValidationError("eval.ablation.csvideonet and eval.ablation.cnnOnly must both name checkpoints");
    const BlockDataset ds = load_split(c.data.test, "test", c);
    EvalModel full = load_eval_model(0, c.eval.ablation_csvideonet);
    EvalModel cnn = load_eval_model(0, c.eval.ablation_cnn_only);
    full.mode = DecoderMode::csvideonet;
    cnn.mode = DecoderMode::cnn_only;
    const EvalOptions opts = eval_options(c);
    const MetricsReport a = evaluate_model(std::span(&full, 1), ds.gops, opts);
    const MetricsReport b = evaluate_model(std::span(&cnn, 1), ds.gops, opts);

    json rows = json::array();
    for (std::size_t i = 0; i < a.cells.size(); ++i) {
        const auto& x = a.cells[i];
        const auto& y = b.cells[i];
        rows.push_back({{"snr", snr_label(x.snr_db)},
                        {"csvideonet_psnr", x.mean_psnr},
                        {"cnn_only_psnr", y.mean_psnr},
                        {"psnr_difference", x.mean_psnr - y.mean_psnr},
                        {"csvideonet_ssim", x.mean_ssim},
                        {"cnn_only_ssim", y.mean_ssim},
                        {"csvideonet_mae", x.mean_mae},
                        {"cnn_only_mae", y.mean_mae},
                        {"n", x.sample_count}});
        log_line("ablate", "SNR " + snr_label(x.snr_db) + ": CSVideoNet " + std::to_string(x.mean_psnr) +
                               " dB, CNN-only " + std::to_string(y.mean_psnr) + " dB, difference " +
                               std::to_string(x.mean_psnr - y.mean_psnr) + " dB");
    }
    write_text(out.path("ablation.json"), json{{"cells", rows}}.dump(2) + "\n");
    out.add("ablation.json");
    out.finish();
}

int cli_main(int argc, char** argv) {
    CLI::App app{"Compressive video sensing: ingest, train, evaluate and benchmark"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_file, out_dir;
    std::uint64_t seed = 0;
    std::vector<std::string> overrides;
    auto* config_opt = app.add_option("--config", config_file, "JSON run configuration")->check(CLI::ExistingFile);
    auto* seed_opt = app.add_option("--seed", seed, "Seed for training, noise and synthetic clips");
    auto* out_opt = app.add_option("--out", out_dir, "Output directory");
    app.add_option("--override", overrides, "key.path=value (value parsed as JSON when possible)");

    std::vector<std::string> paths;
    std::vector<std::string> checkpoints;
    auto* ingest = app.add_subcommand("ingest", "Decode clips into train/test block datasets");
    ingest->add_option("paths", paths, "Video files or image-sequence directories");
    auto* pretrain = app.add_subcommand("pretrain", "Train the key CNN alone");
    auto* train = app.add_subcommand("train", "Train the full decoder end to end");
    auto* eval = app.add_subcommand("eval", "Quality sweep over CR labels and SNR levels");
    auto* bench = app.add_subcommand("bench", "Per-frame reconstruction runtime");
    auto* ablate = app.add_subcommand("ablate", "CSVideoNet against the CNN-only decoder");
    for (auto* sub : {eval, bench})
        sub->add_option("--checkpoint", checkpoints, "CR label and checkpoint path as LABEL=PATH");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    ConfigSources sources;
    if (*config_opt) sources.file = config_file;
    if (*seed_opt) sources.seed = seed;
    if (*out_opt) sources.out = out_dir;
    sources.overrides = overrides;
    if (!paths.empty()) sources.overrides.push_back("ingest.paths=" + json(paths).dump());
    for (const auto& item : checkpoints) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) {
            std::cerr << "error: --checkpoint expects LABEL=PATH, got '" << item << "'\n";
            return 2;
        }
        sources.overrides.push_back("eval.checkpoints." + item.substr(0, eq) + "=" +
                                    json(item.substr(eq + 1)).dump());
    }

    std::string out_path;
    try {
        const RunConfig config = resolve_config(sources);
        out_path = config.out;
        if (*ingest) cmd_ingest(config);
        if (*pretrain) cmd_pretrain(config);
        if (*train) cmd_train(config);
        if (*eval) cmd_eval(config);
        if (*bench) cmd_bench(config);
        if (*ablate) cmd_ablate(config);
        return 0;
    } catch (const std::exception& e) {
        const bool invalid = dynamic_cast<const ValidationError*>(&e) != nullptr;
        std::cerr << "error: " << e.what() << "\n";
        if (!out_path.empty() && fs::exists(out_path)) {
            try {
                write_text(fs::path(out_path) / kFailedMarker,
                           json{{"error", e.what()}, {"kind", invalid ? "validation" : "runtime"}}.dump() + "\n");
            } catch (...) {
            }
        }
        return invalid ? 2 : 1;
    }
}

}  // namespace csvnet::app
