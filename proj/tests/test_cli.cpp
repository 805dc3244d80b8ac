#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "doctest.h"
#include "helpers.hpp"

#include "commands.hpp"
#include "csvnet/checkpoint.hpp"
#include "csvnet/common.hpp"
#include "csvnet/evaluation.hpp"
#include "run_config.hpp"

using namespace csvnet;
using namespace csvnet::app;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_run(const std::string& out) {
    RunConfig c;
    c.out = out;
    c.ingest.synthetic = {3, 6, 5};
    c.ingest.crop_height = c.ingest.crop_width = 32;
    c.ingest.block_size = 8;
    c.ingest.gop_length = 3;
    c.ingest.test_clips = 1;
    c.sensing.m_key = 16;
    c.sensing.m_nonkey = 8;
    c.model.key_channels = {8, 4, 1};
    c.model.nonkey_channels = {4, 1};
    c.model.hidden_size = 16;
    c.pretrain.steps = 8;
    c.pretrain.batch_size = 10;
    c.train.steps = 6;
    c.train.batch_size = 4;
    c.eval.repeats = 10;
    return c;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

int run(std::vector<std::string> args) {
    args.insert(args.begin(), "csvnet");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    return cli_main(static_cast<int>(argv.size()), argv.data());
}

}  // namespace

TEST_SUITE("cli") {
    TEST_CASE("defaults round trip and every key is documented in the serialized form") {
        const RunConfig d;
        const json j = to_json(d);
        const RunConfig back = run_config_from_json(j);
        CHECK(to_json(back) == j);
        CHECK(back.model_config() == ModelConfig{});
        CHECK(back.pretrain.batch_size == 100);
        CHECK(back.train.batch_size == 20);
        CHECK(back.eval.snr_levels.size() == 1);
        CHECK(j["eval"]["snrLevels"][0] == "clean");
    }

    TEST_CASE("unknown keys and bad types are rejected") {
        json j = to_json(RunConfig{});
        j["ingest"]["cropheight"] = 10;
        CHECK_THROWS_AS(run_config_from_json(j), ValidationError);
        j = to_json(RunConfig{});
        j["extra"] = 1;
        CHECK_THROWS_AS(run_config_from_json(j), ValidationError);
        j = to_json(RunConfig{});
        j["train"]["momentum"] = 0.9;
        CHECK_THROWS_AS(run_config_from_json(j), ValidationError);
        j = to_json(RunConfig{});
        j["sensing"]["mKey"] = "forty";
        CHECK_THROWS_AS(run_config_from_json(j), ValidationError);
        j = to_json(RunConfig{});
        j["eval"]["snrLevels"] = {"loud"};
        CHECK_THROWS_AS(run_config_from_json(j), ValidationError);
        j = to_json(RunConfig{});
        j["ingest"]["cropHeight"] = 100;  // not a multiple of 32
        CHECK_THROWS_AS(run_config_from_json(j), ValidationError);
    }

    TEST_CASE("precedence: flags over file over defaults") {
        testutil::TempDir dir("cli");
        const std::string file = dir.sub("run.json");
        {
            std::ofstream f(file);
            f << R"({"out": "from-file", "sensing": {"mNonKey": 20}, "train": {"learningRate": 0.01, "seed": 4},
                    "eval": {"snrLevels": ["clean", 20], "checkpoints": {"25": "a.ckpt"}}})";
        }
        ConfigSources s;
        s.file = file;
        RunConfig c = resolve_config(s);
        CHECK(c.out == "from-file");
        CHECK(c.sensing.m_nonkey == 20);
        CHECK(c.sensing.m_key == 40);
        CHECK(c.train.learning_rate == 0.01);
        CHECK(c.train.batch_size == 20);
        CHECK(c.eval.snr_levels.size() == 2);
        CHECK(c.eval.checkpoints.at(25) == "a.ckpt");

        s.out = "from-flag";
        s.seed = 9;
        s.overrides = {"sensing.mNonKey=10", "train.learningRate=0.5", "data.test=some/dir", "eval.crLabels=[25]"};
        c = resolve_config(s);
        CHECK(c.out == "from-flag");
        CHECK(c.sensing.m_nonkey == 10);
        CHECK(c.train.learning_rate == 0.5);
        CHECK(c.train.seed == 9);
        CHECK(c.pretrain.seed == 9);
        CHECK(c.eval.noise_seed == 9);
        CHECK(c.data.test == "some/dir");
        CHECK(c.eval_labels() == std::vector<int>{25});

        s.overrides = {"model.widthMultiplier=2"};
        CHECK_THROWS_AS(resolve_config(s), ValidationError);
        s.overrides = {"noequals"};
        CHECK_THROWS_AS(resolve_config(s), ValidationError);

        ConfigSources missing;
        missing.overrides = {"eval.crLabels=[50]"};
        CHECK_THROWS_AS(resolve_config(missing).eval_labels(), ValidationError);
    }

    TEST_CASE("portable config drops host paths") {
        RunConfig c;
        c.data.train = "/x";
        c.eval.checkpoints[25] = "/y";
        const json j = portable_config(c);
        CHECK(!j.contains("out"));
        CHECK(!j.contains("data"));
        CHECK(!j["eval"].contains("checkpoints"));
        CHECK(j["sensing"]["seed"] == 7);
    }

    TEST_CASE("pipeline: self-describing outputs, determinism, eval cardinality, ablation") {
        testutil::TempDir dir("cli");
        RunConfig c = tiny_run(dir.sub("ds"));
        cmd_ingest(c);
        CHECK(fs::exists(dir.path() / "ds" / "manifest.json"));
        CHECK(fs::exists(dir.path() / "ds" / "config.json"));
        CHECK(!fs::exists(dir.path() / "ds" / kIncompleteMarker));
        const BlockDataset train = read_dataset(dir.sub("ds/train"));
        const BlockDataset test = read_dataset(dir.sub("ds/test"));
        CHECK(train.gops.size() == 4);
        CHECK(test.gops.size() == 2);
        for (const auto& g : test.gops)
            for (const auto& h : train.gops) CHECK(g.source_id != h.source_id);

        c.data.train = dir.sub("ds/train");
        c.data.test = dir.sub("ds/test");
        c.out = dir.sub("pre1");
        cmd_pretrain(c);
        c.out = dir.sub("pre2");
        cmd_pretrain(c);
        CHECK(slurp(dir.path() / "pre1" / "key_cnn.ckpt") == slurp(dir.path() / "pre2" / "key_cnn.ckpt"));
        const json manifest = json::parse(slurp(dir.path() / "pre1" / "manifest.json"));
        CHECK(manifest["command"] == "pretrain");
        CHECK(manifest["library_version"] == kLibraryVersion);
        CHECK(manifest["files"].size() >= 3);

        c.data.pretrained = dir.sub("pre1/key_cnn.ckpt");
        c.out = dir.sub("full");
        cmd_train(c);
        RunConfig cnn = c;
        cnn.train.mode = DecoderMode::cnn_only;
        cnn.out = dir.sub("cnn");
        cmd_train(cnn);

        c.eval.checkpoints = {{25, dir.sub("full/decoder.ckpt")}, {100, dir.sub("cnn/decoder.ckpt")}};
        c.out = dir.sub("eval");
        cmd_eval(c);
        const json metrics = json::parse(slurp(dir.path() / "eval" / "metrics.json"));
        CHECK(metrics["cells"].size() == 2);  // clean-only sweep: one cell per CR label
        CHECK(fs::exists(dir.path() / "eval" / "psnr_snr.svg"));
        CHECK(fs::exists(dir.path() / "eval" / "metrics.csv"));

        c.eval.ablation_csvideonet = dir.sub("full/decoder.ckpt");
        c.eval.ablation_cnn_only = dir.sub("cnn/decoder.ckpt");
        c.out = dir.sub("ablate");
        cmd_ablate(c);
        const json ab = json::parse(slurp(dir.path() / "ablate" / "ablation.json"));
        REQUIRE(ab["cells"].size() == 1);
        const auto& row = ab["cells"][0];
        CHECK(row["psnr_difference"].get<double>() ==
              doctest::Approx(row["csvideonet_psnr"].get<double>() - row["cnn_only_psnr"].get<double>()));

        c.out = dir.sub("bench");
        cmd_bench(c);
        const json rt = json::parse(slurp(dir.path() / "bench" / "runtime.json"));
        CHECK(rt["runtime"].size() == 2);
    }

    TEST_CASE("exit codes and failure markers") {
        testutil::TempDir dir("cli");
        CHECK(run({"pretrain", "--out", dir.sub("a"), "--override", "model.bogus=1"}) == 2);
        CHECK(run({"nosuchcommand"}) == 2);
        CHECK(run({"pretrain", "--out", dir.sub("b"), "--override", "data.train=" + dir.sub("missing")}) == 1);
        CHECK(fs::exists(dir.path() / "b" / kFailedMarker));
        CHECK(run({"eval", "--out", dir.sub("c"), "--checkpoint", "25"}) == 2);
    }
}
