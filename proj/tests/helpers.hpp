#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "csvnet/ingest.hpp"

namespace testutil {

// Fresh directory under the system temp dir, removed on scope exit.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("csvnet-" + tag + "-" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::string str() const { return path_.string(); }
    std::string sub(const std::string& name) const { return (path_ / name).string(); }

private:
    std::filesystem::path path_;
};

inline csvnet::Plane random_plane(int h, int w, std::mt19937_64& rng) {
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    csvnet::Plane p(h, w);
    for (auto& v : p.values) v = u(rng);
    return p;
}

inline csvnet::RgbFrame gray_frame(int h, int w, std::uint8_t value) {
    csvnet::RgbFrame f;
    f.height = h;
    f.width = w;
    f.channels = 3;
    f.data.assign(static_cast<std::size_t>(h) * w * 3, value);
    return f;
}

}  // namespace testutil
