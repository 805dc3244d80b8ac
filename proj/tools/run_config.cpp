#include "run_config.hpp"

#include <cmath>
#include <set>

#include "csvnet/checkpoint.hpp"
#include "csvnet/common.hpp"
#include "csvnet/evaluation.hpp"

namespace csvnet::app {

using nlohmann::json;

namespace {

// Reads one JSON object, remembering which keys were consumed.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ValidationError("config section '" + path_ + "' must be an object");
    }

    void get(const char* key, int& out) {
        if (const json* v = take(key)) {
            if (!v->is_number_integer()) bad(key, "an integer");
            out = v->get<int>();
        }
    }
    void get(const char* key, std::uint64_t& out) {
        if (const json* v = take(key)) {
            if (!v->is_number_unsigned()) bad(key, "a non-negative integer");
            out = v->get<std::uint64_t>();
        }
    }
    void get(const char* key, bool& out) {
        if (const json* v = take(key)) {
            if (!v->is_boolean()) bad(key, "a boolean");
            out = v->get<bool>();
        }
    }
    void get(const char* key, std::string& out) {
        if (const json* v = take(key)) {
            if (!v->is_string()) bad(key, "a string");
            out = v->get<std::string>();
        }
    }
    void get(const char* key, std::vector<int>& out) {
        if (const json* v = take(key)) {
            if (!v->is_array()) bad(key, "an array of integers");
            out.clear();
            for (const auto& e : *v) {
                if (!e.is_number_integer()) bad(key, "an array of integers");
                out.push_back(e.get<int>());
            }
        }
    }
    void get(const char* key, std::vector<std::string>& out) {
        if (const json* v = take(key)) {
            if (!v->is_array()) bad(key, "an array of strings");
            out.clear();
            for (const auto& e : *v) {
                if (!e.is_string()) bad(key, "an array of strings");
                out.push_back(e.get<std::string>());
            }
        }
    }
    const json* take(const char* key) {
        used_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }
    std::string child(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!used_.count(it.key()))
                throw ValidationError("unknown config key '" + (path_.empty() ? it.key() : path_ + "." + it.key()) +
                                      "'");
    }

private:
    [[noreturn]] void bad(const char* key, const char* what) const {
        throw ValidationError("config key '" + child(key) + "' must be " + what);
    }

    const json& j_;
    std::string path_;
    std::set<std::string> used_;
};

TrainConfig train_section(const json& j, const std::string& name, TrainConfig base) {
    if (!j.is_object()) throw ValidationError("config section '" + name + "' must be an object");
    // missing keys keep the phase defaults
    json merged = train_config_to_json(base);
    for (auto it = j.begin(); it != j.end(); ++it) merged[it.key()] = it.value();
    try {
        return train_config_from_json(merged);
    } catch (const ValidationError& e) {
        throw ValidationError(name + ": " + e.what());
    }
}

json snr_levels_json(const std::vector<double>& levels) {
    json out = json::array();
    for (double s : levels) {
        if (s == kNoiseDisabled)
            out.push_back("clean");
        else
            out.push_back(s);
    }
    return out;
}

int parse_label(const std::string& s, const std::string& where) {
    std::size_t used = 0;
    int v = 0;
    try {
        v = std::stoi(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != s.size() || v <= 0) throw ValidationError(where + ": CR label '" + s + "' is not a positive integer");
    return v;
}

}  // namespace

ModelConfig RunConfig::model_config() const {
    ModelConfig m;
    m.block_size = ingest.block_size;
    m.frames = ingest.gop_length;
    m.m_key = sensing.m_key;
    m.m_nonkey = sensing.m_nonkey;
    m.kernel_size = model.kernel_size;
    m.key_channels = model.key_channels;
    m.nonkey_channels = model.nonkey_channels;
    m.hidden_size = model.hidden_size;
    m.lstm_layers = model.lstm_layers;
    return m;
}

SensingMatrixSet RunConfig::sensing_set() const {
    return make_sensing_set(ingest.block_size * ingest.block_size, sensing.m_key, sensing.m_nonkey, sensing.seed);
}

std::vector<int> RunConfig::eval_labels() const {
    std::vector<int> labels = eval.cr_labels;
    if (labels.empty())
        for (const auto& [label, path] : eval.checkpoints) labels.push_back(label);
    for (int label : labels)
        if (!eval.checkpoints.count(label))
            throw ValidationError("no checkpoint configured for CR label " + std::to_string(label));
    return labels;
}

void RunConfig::validate() const {
    model_config().validate();
    pretrain.validate();
    train.validate();
    require(pretrain.phase == TrainPhase::pretrain, "pretrain.phase must be pretrain");
    require(train.phase == TrainPhase::full, "train.phase must be full");
    require(!out.empty(), "out must name a directory");
    require(ingest.crop_height > 0 && ingest.crop_width > 0, "crop size must be positive");
    require(ingest.crop_height % ingest.block_size == 0 && ingest.crop_width % ingest.block_size == 0,
            "crop size must be a multiple of blockSize");
    require(ingest.test_clips >= 0, "ingest.testClips must be non-negative");
    require(ingest.synthetic.clips >= 0, "ingest.synthetic.clips must be non-negative");
    require(ingest.synthetic.frames > 0, "ingest.synthetic.frames must be positive");
    require(eval.repeats >= 10, "eval.repeats must be at least 10");
    require(eval.warmup >= 0, "eval.warmup must be non-negative");
    require(!eval.snr_levels.empty(), "eval.snrLevels must not be empty");
    for (int label : eval.cr_labels) require(label > 0, "CR labels must be positive");
}

json to_json(const RunConfig& c) {
    json checkpoints = json::object();
    for (const auto& [label, path] : c.eval.checkpoints) checkpoints[std::to_string(label)] = path;
    return {
        {"out", c.out},
        {"ingest",
         {{"paths", c.ingest.paths},
          {"synthetic",
           {{"clips", c.ingest.synthetic.clips}, {"frames", c.ingest.synthetic.frames}, {"seed", c.ingest.synthetic.seed}}},
          {"cropHeight", c.ingest.crop_height},
          {"cropWidth", c.ingest.crop_width},
          {"blockSize", c.ingest.block_size},
          {"gopLength", c.ingest.gop_length},
          {"testClips", c.ingest.test_clips}}},
        {"sensing",
         {{"mKey", c.sensing.m_key},
          {"mNonKey", c.sensing.m_nonkey},
          {"seed", c.sensing.seed},
          {"noiseMode", to_string(c.sensing.noise_mode)}}},
        {"model",
         {{"kernelSize", c.model.kernel_size},
          {"keyChannels", c.model.key_channels},
          {"nonkeyChannels", c.model.nonkey_channels},
          {"hiddenSize", c.model.hidden_size},
          {"lstmLayers", c.model.lstm_layers}}},
        {"pretrain", train_config_to_json(c.pretrain)},
        {"train", train_config_to_json(c.train)},
        {"eval",
         {{"crLabels", c.eval.cr_labels},
          {"snrLevels", snr_levels_json(c.eval.snr_levels)},
          {"checkpoints", checkpoints},
          {"noiseSeed", c.eval.noise_seed},
          {"repeats", c.eval.repeats},
          {"warmup", c.eval.warmup},
          {"frameLists", c.eval.frame_lists},
          {"ablation", {{"csvideonet", c.eval.ablation_csvideonet}, {"cnnOnly", c.eval.ablation_cnn_only}}}}},
        {"data", {{"train", c.data.train}, {"test", c.data.test}, {"pretrained", c.data.pretrained}}},
    };
}

RunConfig run_config_from_json(const json& j) {
    RunConfig c;
    Section top(j, "");
    top.get("out", c.out);

    if (const json* v = top.take("ingest")) {
        Section s(*v, "ingest");
        s.get("paths", c.ingest.paths);
        if (const json* syn = s.take("synthetic")) {
            Section t(*syn, "ingest.synthetic");
            t.get("clips", c.ingest.synthetic.clips);
            t.get("frames", c.ingest.synthetic.frames);
            t.get("seed", c.ingest.synthetic.seed);
            t.finish();
        }
        s.get("cropHeight", c.ingest.crop_height);
        s.get("cropWidth", c.ingest.crop_width);
        s.get("blockSize", c.ingest.block_size);
        s.get("gopLength", c.ingest.gop_length);
        s.get("testClips", c.ingest.test_clips);
        s.finish();
    }
    if (const json* v = top.take("sensing")) {
        Section s(*v, "sensing");
        s.get("mKey", c.sensing.m_key);
        s.get("mNonKey", c.sensing.m_nonkey);
        s.get("seed", c.sensing.seed);
        std::string mode = to_string(c.sensing.noise_mode);
        s.get("noiseMode", mode);
        c.sensing.noise_mode = noise_mode_from_string(mode);
        s.finish();
    }
    if (const json* v = top.take("model")) {
        Section s(*v, "model");
        s.get("kernelSize", c.model.kernel_size);
        s.get("keyChannels", c.model.key_channels);
        s.get("nonkeyChannels", c.model.nonkey_channels);
        s.get("hiddenSize", c.model.hidden_size);
        s.get("lstmLayers", c.model.lstm_layers);
        s.finish();
    }
    if (const json* v = top.take("pretrain")) c.pretrain = train_section(*v, "pretrain", c.pretrain);
    if (const json* v = top.take("train")) c.train = train_section(*v, "train", c.train);
    if (const json* v = top.take("eval")) {
        Section s(*v, "eval");
        s.get("crLabels", c.eval.cr_labels);
        if (const json* levels = s.take("snrLevels")) {
            if (!levels->is_array()) throw ValidationError("eval.snrLevels must be an array");
            c.eval.snr_levels.clear();
            for (const auto& e : *levels) {
                if (e.is_string())
                    c.eval.snr_levels.push_back(snr_from_label(e.get<std::string>()));
                else if (e.is_number() && std::isfinite(e.get<double>()))
                    c.eval.snr_levels.push_back(e.get<double>());
                else
                    throw ValidationError("eval.snrLevels entries must be numbers or \"clean\"");
            }
        }
        if (const json* ck = s.take("checkpoints")) {
            if (!ck->is_object()) throw ValidationError("eval.checkpoints must map CR labels to paths");
            c.eval.checkpoints.clear();
            for (auto it = ck->begin(); it != ck->end(); ++it) {
                if (!it.value().is_string()) throw ValidationError("eval.checkpoints values must be paths");
                c.eval.checkpoints[parse_label(it.key(), "eval.checkpoints")] = it.value().get<std::string>();
            }
        }
        s.get("noiseSeed", c.eval.noise_seed);
        s.get("repeats", c.eval.repeats);
        s.get("warmup", c.eval.warmup);
        s.get("frameLists", c.eval.frame_lists);
        if (const json* ab = s.take("ablation")) {
            Section t(*ab, "eval.ablation");
            t.get("csvideonet", c.eval.ablation_csvideonet);
            t.get("cnnOnly", c.eval.ablation_cnn_only);
            t.finish();
        }
        s.finish();
    }
    if (const json* v = top.take("data")) {
        Section s(*v, "data");
        s.get("train", c.data.train);
        s.get("test", c.data.test);
        s.get("pretrained", c.data.pretrained);
        s.finish();
    }
    top.finish();
    c.validate();
    return c;
}

RunConfig resolve_config(const ConfigSources& sources) {
    json j = to_json(RunConfig{});
    if (sources.file) {
        json file;
        try {
            const auto bytes = read_file_bytes(*sources.file);
            file = json::parse(bytes.begin(), bytes.end());
        } catch (const json::parse_error& e) {
            throw ValidationError("config file '" + *sources.file + "' is not valid JSON: " + e.what());
        }
        if (!file.is_object()) throw ValidationError("config file '" + *sources.file + "' must hold a JSON object");
        j.merge_patch(file);
    }
    for (const auto& item : sources.overrides) {
        const auto eq = item.find('=');
        if (eq == std::string::npos || eq == 0)
            throw ValidationError("override '" + item + "' must look like key.path=value");
        const std::string key = item.substr(0, eq), text = item.substr(eq + 1);
        std::string pointer;
        for (std::size_t start = 0;;) {
            const auto dot = key.find('.', start);
            pointer += "/" + key.substr(start, dot - start);
            if (dot == std::string::npos) break;
            start = dot + 1;
        }
        json value = json::parse(text, nullptr, false);
        if (value.is_discarded()) value = text;
        try {
            j[json::json_pointer(pointer)] = value;
        } catch (const json::exception& e) {
            throw ValidationError("override '" + item + "' does not address a config key: " + e.what());
        }
    }
    if (sources.seed) {
        j["pretrain"]["seed"] = *sources.seed;
        j["train"]["seed"] = *sources.seed;
        j["eval"]["noiseSeed"] = *sources.seed;
        j["ingest"]["synthetic"]["seed"] = *sources.seed;
    }
    if (sources.out) j["out"] = *sources.out;
    return run_config_from_json(j);
}

json portable_config(const RunConfig& config) {
    json j = to_json(config);
    j.erase("out");
    j.erase("data");
    j["ingest"].erase("paths");
    j["eval"].erase("checkpoints");
    j["eval"].erase("ablation");
    return j;
}

}  // namespace csvnet::app
