#include "csvnet/checkpoint.hpp"

#include <charconv>
#include <cmath>

#include "csvnet/common.hpp"

namespace csvnet {

using nlohmann::json;

namespace {

constexpr const char* kMagic = "CSVNET-CHECKPOINT";

template <typename T>
T get_as(const json& j, const std::string& key) {
    try {
        return j.get<T>();
    } catch (const json::exception&) {
        throw ValidationError("config key '" + key + "' has the wrong type");
    }
}

}  // namespace

// --- config serialization ------------------------------------------------------

json model_config_to_json(const ModelConfig& c) {
    return {{"blockSize", c.block_size},     {"mKey", c.m_key},
            {"mNonKey", c.m_nonkey},         {"gopLength", c.frames},
            {"kernelSize", c.kernel_size},   {"keyChannels", c.key_channels},
            {"nonkeyChannels", c.nonkey_channels}, {"hiddenSize", c.hidden_size},
            {"lstmLayers", c.lstm_layers}};
}

ModelConfig model_config_from_json(const json& j) {
    require(j.is_object(), "model config must be an object");
    ModelConfig c;
    for (const auto& [key, v] : j.items()) {
        if (key == "blockSize") c.block_size = get_as<int>(v, key);
        else if (key == "mKey") c.m_key = get_as<int>(v, key);
        else if (key == "mNonKey") c.m_nonkey = get_as<int>(v, key);
        else if (key == "gopLength") c.frames = get_as<int>(v, key);
        else if (key == "kernelSize") c.kernel_size = get_as<int>(v, key);
        else if (key == "keyChannels") c.key_channels = get_as<std::vector<int>>(v, key);
        else if (key == "nonkeyChannels") c.nonkey_channels = get_as<std::vector<int>>(v, key);
        else if (key == "hiddenSize") c.hidden_size = get_as<int>(v, key);
        else if (key == "lstmLayers") c.lstm_layers = get_as<int>(v, key);
        else throw ValidationError("unknown model config key '" + key + "'");
    }
    c.validate();
    return c;
}

json train_config_to_json(const TrainConfig& c) {
    return {{"phase", to_string(c.phase)},
            {"batchSize", c.batch_size},
            {"stepCount", c.steps},
            {"learningRate", c.learning_rate},
            {"adamBeta1", c.adam_beta1},
            {"adamBeta2", c.adam_beta2},
            {"adamEps", c.adam_eps},
            {"seed", c.seed},
            {"evalEvery", c.eval_every},
            {"clipNorm", c.clip_norm},
            {"optimizer", to_string(c.optimizer)},
            {"mode", to_string(c.mode)}};
}

TrainConfig train_config_from_json(const json& j) {
    require(j.is_object(), "train config must be an object");
    TrainConfig c;
    for (const auto& [key, v] : j.items()) {
        if (key == "phase") {
            const auto s = get_as<std::string>(v, key);
            require(s == "pretrain" || s == "full", "phase must be pretrain or full");
            c.phase = s == "pretrain" ? TrainPhase::pretrain : TrainPhase::full;
        } else if (key == "batchSize") c.batch_size = get_as<int>(v, key);
        else if (key == "stepCount") c.steps = get_as<int>(v, key);
        else if (key == "learningRate") c.learning_rate = get_as<double>(v, key);
        else if (key == "adamBeta1") c.adam_beta1 = get_as<double>(v, key);
        else if (key == "adamBeta2") c.adam_beta2 = get_as<double>(v, key);
        else if (key == "adamEps") c.adam_eps = get_as<double>(v, key);
        else if (key == "seed") c.seed = get_as<std::uint64_t>(v, key);
        else if (key == "evalEvery") c.eval_every = get_as<int>(v, key);
        else if (key == "clipNorm") c.clip_norm = get_as<double>(v, key);
        else if (key == "optimizer") c.optimizer = optimizer_from_string(get_as<std::string>(v, key));
        else if (key == "mode") c.mode = mode_from_string(get_as<std::string>(v, key));
        else throw ValidationError("unknown train config key '" + key + "'");
    }
    c.validate();
    return c;
}

const char* to_string(NoiseMode mode) { return mode == NoiseMode::frame ? "frame" : "measurement"; }

NoiseMode noise_mode_from_string(const std::string& name) {
    if (name == "measurement") return NoiseMode::measurement;
    if (name == "frame") return NoiseMode::frame;
    throw ValidationError("unknown noise mode '" + name + "' (expected measurement or frame)");
}

SensingMeta SensingMeta::of(const SensingMatrixSet& set, NoiseMode mode) {
    return {set.seed, set.n, set.m_key, set.m_nonkey, set.key_scale(), set.nonkey_scale(), mode};
}

SensingMatrixSet SensingMeta::regenerate() const { return make_sensing_set(n, m_key, m_nonkey, seed); }

// --- container -------------------------------------------------------------------

namespace {

struct TensorRef {
    std::string name;
    const Matrix<float>* data;
};

std::vector<TensorRef> tensors_of(const Checkpoint& c) {
    std::vector<TensorRef> out;
    auto add = [&](const std::string& name, const Matrix<float>& m) { out.push_back({name, &m}); };
    if (c.kind == CheckpointKind::key_cnn)
        for_each_tensor(c.params.key, "key", add);
    else
        for_each_tensor(c.params, add);
    for (std::size_t i = 0; i < c.optimizer.first.size(); ++i) {
        add("opt.m." + c.optimizer.names.at(i), c.optimizer.first[i]);
        add("opt.v." + c.optimizer.names.at(i), c.optimizer.second[i]);
    }
    return out;
}

const char* kind_name(CheckpointKind k) { return k == CheckpointKind::key_cnn ? "key_cnn" : "decoder"; }

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    if (ckpt.kind == CheckpointKind::decoder) check_shapes(ckpt.params);
    require(ckpt.optimizer.first.size() == ckpt.optimizer.second.size() &&
                ckpt.optimizer.first.size() == ckpt.optimizer.names.size(),
            "inconsistent optimizer state");

    std::vector<char> payload;
    json table = json::array();
    for (const auto& t : tensors_of(ckpt)) {
        const std::size_t offset = payload.size();
        append_f32_le(payload, {t.data->data(), static_cast<std::size_t>(t.data->size())});
        table.push_back({{"name", t.name},
                         {"shape", {t.data->rows(), t.data->cols()}},
                         {"offset", offset},
                         {"bytes", payload.size() - offset}});
    }

    json header;
    header["format"] = "csvnet-checkpoint";
    header["version"] = kCheckpointVersion;
    header["library_version"] = kLibraryVersion;
    header["kind"] = kind_name(ckpt.kind);
    header["mode"] = to_string(ckpt.mode);
    header["model"] = model_config_to_json(ckpt.params.config);
    header["sensing"] = {{"seed", ckpt.sensing.seed},
                         {"n", ckpt.sensing.n},
                         {"mKey", ckpt.sensing.m_key},
                         {"mNonKey", ckpt.sensing.m_nonkey},
                         {"keyScale", ckpt.sensing.key_scale},
                         {"nonkeyScale", ckpt.sensing.nonkey_scale},
                         {"noiseMode", to_string(ckpt.sensing.noise_mode)}};
    header["train"] = train_config_to_json(ckpt.train);
    header["step"] = ckpt.step;
    header["optimizer_step"] = ckpt.optimizer.step;
    header["run_config"] = ckpt.run_config;
    header["tensors"] = table;
    header["payload_bytes"] = payload.size();
    header["payload_crc32"] = crc32_of(payload);

    const std::string head = header.dump(1);
    std::string prefix = std::string(kMagic) + " " + std::to_string(kCheckpointVersion) + "\n" +
                         std::to_string(head.size()) + "\n" + head;
    std::vector<char> bytes(prefix.begin(), prefix.end());
    bytes.insert(bytes.end(), payload.begin(), payload.end());
    write_file_bytes(path, bytes);
}

Checkpoint load_checkpoint(const std::string& path, const ModelConfig* expected) {
    const std::vector<char> bytes = read_file_bytes(path);
    auto corrupt = [&](const std::string& what) { return IoError("checkpoint " + path + ": " + what); };

    const std::string_view all(bytes.data(), bytes.size());
    const auto eol1 = all.find('\n');
    if (eol1 == std::string_view::npos) throw corrupt("missing magic line");
    const std::string_view magic_line = all.substr(0, eol1);
    const std::string magic_prefix = std::string(kMagic) + " ";
    if (magic_line.substr(0, magic_prefix.size()) != magic_prefix) throw corrupt("not a checkpoint file");
    int version = 0;
    {
        const auto v = magic_line.substr(magic_prefix.size());
        if (std::from_chars(v.data(), v.data() + v.size(), version).ec != std::errc{})
            throw corrupt("unreadable version");
    }
    if (version != kCheckpointVersion)
        throw ValidationError("checkpoint " + path + " has version " + std::to_string(version) + ", expected " +
                              std::to_string(kCheckpointVersion));
    const auto eol2 = all.find('\n', eol1 + 1);
    if (eol2 == std::string_view::npos) throw corrupt("missing header length");
    std::size_t head_len = 0;
    {
        const auto v = all.substr(eol1 + 1, eol2 - eol1 - 1);
        if (std::from_chars(v.data(), v.data() + v.size(), head_len).ec != std::errc{})
            throw corrupt("unreadable header length");
    }
    const std::size_t head_start = eol2 + 1;
    if (head_start + head_len > bytes.size()) throw corrupt("truncated header");
    json header;
    try {
        header = json::parse(all.substr(head_start, head_len));
    } catch (const json::exception& e) {
        throw corrupt(std::string("malformed header: ") + e.what());
    }

    Checkpoint ckpt;
    try {
        if (header.at("format") != "csvnet-checkpoint") throw corrupt("unexpected format tag");
        if (header.at("version").get<int>() != version) throw corrupt("header version disagrees with magic line");
        const auto kind = header.at("kind").get<std::string>();
        if (kind != "key_cnn" && kind != "decoder") throw corrupt("unknown kind '" + kind + "'");
        ckpt.kind = kind == "key_cnn" ? CheckpointKind::key_cnn : CheckpointKind::decoder;
        ckpt.mode = mode_from_string(header.at("mode").get<std::string>());
        const ModelConfig model = model_config_from_json(header.at("model"));
        if (expected && !(model == *expected))
            throw ShapeError("checkpoint " + path + " was built for blockSize " + std::to_string(model.block_size) +
                             ", mKey " + std::to_string(model.m_key) + ", mNonKey " +
                             std::to_string(model.m_nonkey) + " and does not match the requested model (blockSize " +
                             std::to_string(expected->block_size) + ", mKey " + std::to_string(expected->m_key) +
                             ", mNonKey " + std::to_string(expected->m_nonkey) + ")");
        const auto& s = header.at("sensing");
        ckpt.sensing.seed = s.at("seed").get<std::uint64_t>();
        ckpt.sensing.n = s.at("n").get<int>();
        ckpt.sensing.m_key = s.at("mKey").get<int>();
        ckpt.sensing.m_nonkey = s.at("mNonKey").get<int>();
        ckpt.sensing.key_scale = s.at("keyScale").get<float>();
        ckpt.sensing.nonkey_scale = s.at("nonkeyScale").get<float>();
        ckpt.sensing.noise_mode = noise_mode_from_string(s.at("noiseMode").get<std::string>());
        ckpt.train = train_config_from_json(header.at("train"));
        ckpt.step = header.at("step").get<long>();
        ckpt.optimizer.step = header.at("optimizer_step").get<long>();
        ckpt.run_config = header.at("run_config");

        // Expected tensor table: parameters first, then optimizer moments.
        ckpt.params = zero_params<float>(model);
        if (ckpt.kind == CheckpointKind::key_cnn) {
            ckpt.params.nonkey = {};
            ckpt.params.lstm = {};
        }
        const auto& table = header.at("tensors");
        if (!table.is_array()) throw corrupt("tensor table is not an array");

        const std::size_t payload_start = head_start + head_len;
        const std::size_t payload_bytes = header.at("payload_bytes").get<std::size_t>();
        if (bytes.size() != payload_start + payload_bytes)
            throw corrupt("payload size " + std::to_string(bytes.size() - payload_start) + " differs from header " +
                          std::to_string(payload_bytes));
        const std::span<const char> payload(bytes.data() + payload_start, payload_bytes);
        if (crc32_of(payload) != header.at("payload_crc32").get<std::uint32_t>())
            throw corrupt("payload checksum mismatch");

        std::vector<std::pair<std::string, Matrix<float>*>> slots;
        auto add = [&](const std::string& name, Matrix<float>& m) { slots.emplace_back(name, &m); };
        if (ckpt.kind == CheckpointKind::key_cnn)
            for_each_tensor(ckpt.params.key, "key", add);
        else
            for_each_tensor(ckpt.params, add);
        const std::size_t param_count = slots.size();
        const std::size_t moment_entries = table.size() >= param_count ? table.size() - param_count : 0;
        if (table.size() != param_count && moment_entries != 2 * param_count)
            throw ShapeError("checkpoint " + path + " tensor table has " + std::to_string(table.size()) +
                             " entries, expected " + std::to_string(param_count) + " or " +
                             std::to_string(3 * param_count));
        if (moment_entries > 0) {
            for (std::size_t i = 0; i < param_count; ++i) {
                ckpt.optimizer.names.push_back(slots[i].first);
                ckpt.optimizer.first.push_back(Matrix<float>::Zero(slots[i].second->rows(), slots[i].second->cols()));
                ckpt.optimizer.second.push_back(Matrix<float>::Zero(slots[i].second->rows(), slots[i].second->cols()));
            }
            for (std::size_t i = 0; i < param_count; ++i) {
                add("opt.m." + ckpt.optimizer.names[i], ckpt.optimizer.first[i]);
                add("opt.v." + ckpt.optimizer.names[i], ckpt.optimizer.second[i]);
            }
        }

        std::size_t expected_offset = 0;
        for (std::size_t i = 0; i < slots.size(); ++i) {
            const auto& entry = table[i];
            const auto& [name, dst] = slots[i];
            if (entry.at("name").get<std::string>() != name)
                throw ShapeError("checkpoint " + path + ": tensor " + std::to_string(i) + " is '" +
                                 entry.at("name").get<std::string>() + "', expected '" + name + "'");
            const auto shape = entry.at("shape").get<std::vector<long>>();
            if (shape.size() != 2 || shape[0] != dst->rows() || shape[1] != dst->cols())
                throw ShapeError("checkpoint " + path + ": tensor " + name + " has shape " + json(shape).dump() +
                                 ", expected [" + std::to_string(dst->rows()) + "," + std::to_string(dst->cols()) +
                                 "]");
            const auto offset = entry.at("offset").get<std::size_t>();
            const auto nbytes = entry.at("bytes").get<std::size_t>();
            if (offset != expected_offset || nbytes != static_cast<std::size_t>(dst->size()) * 4 ||
                offset + nbytes > payload_bytes)
                throw corrupt("tensor " + name + " has an inconsistent offset or length");
            read_f32_le(payload.data() + offset, {dst->data(), static_cast<std::size_t>(dst->size())});
            expected_offset += nbytes;
        }
        if (expected_offset != payload_bytes) throw corrupt("payload has trailing bytes");
    } catch (const json::exception& e) {
        throw corrupt(std::string("malformed header field: ") + e.what());
    }
    return ckpt;
}

}  // namespace csvnet
