#pragma once

// Video ingestion: decode, luminance, center crop, 32x32 blocking and GOP
// grouping, plus the on-disk block dataset.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace csvnet {

/// Interleaved 8-bit frame as decoded from disk.
struct RgbFrame {
    int height = 0;
    int width = 0;
    int channels = 3;
    std::vector<std::uint8_t> data;  // row-major, channels interleaved

    std::uint8_t at(int row, int col, int ch) const {
        return data[(static_cast<std::size_t>(row) * width + col) * channels + ch];
    }
};

/// Single-channel float plane, row-major. A LumaFrame holds values in [0,1].
struct Plane {
    int height = 0;
    int width = 0;
    std::vector<float> values;

    Plane() = default;
    Plane(int h, int w, float fill = 0.0f)
        : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}

    float& at(int row, int col) { return values[static_cast<std::size_t>(row) * width + col]; }
    float at(int row, int col) const { return values[static_cast<std::size_t>(row) * width + col]; }
    bool operator==(const Plane&) const = default;
};

using LumaFrame = Plane;

/// Non-overlapping square blocks of one frame; block (r,c) is stored
/// contiguously (row-major inside the block) at index r*cols + c.
struct BlockGrid {
    int rows = 0;
    int cols = 0;
    int block_size = 0;
    std::vector<float> values;

    int block_len() const { return block_size * block_size; }
    std::span<const float> block(int r, int c) const {
        return {values.data() + static_cast<std::size_t>(r * cols + c) * block_len(),
                static_cast<std::size_t>(block_len())};
    }
};

/// T frames of one clip, each split into the same grid of blocks.
/// Storage order is (frame, gridRow, gridCol, pixelRow, pixelCol).
struct GopBlockSequence {
    int frames = 0;
    int grid_rows = 0;
    int grid_cols = 0;
    int block_size = 0;
    std::string source_id;
    std::vector<float> values;

    int block_len() const { return block_size * block_size; }
    int positions() const { return grid_rows * grid_cols; }
    std::size_t offset(int t, int r, int c) const {
        return (static_cast<std::size_t>(t) * positions() + static_cast<std::size_t>(r) * grid_cols + c) *
               static_cast<std::size_t>(block_len());
    }
    std::span<const float> block(int t, int r, int c) const {
        return {values.data() + offset(t, r, c), static_cast<std::size_t>(block_len())};
    }
    std::span<float> block(int t, int r, int c) {
        return {values.data() + offset(t, r, c), static_cast<std::size_t>(block_len())};
    }
    /// Reassembles frame t into a plane of (grid_rows*b) x (grid_cols*b).
    LumaFrame frame(int t) const;
};

std::vector<RgbFrame> decode_video(const std::string& path, int min_frames);

LumaFrame extract_luminance(const RgbFrame& frame);

LumaFrame center_crop(const Plane& plane, int crop_height, int crop_width);

BlockGrid blockify(const Plane& frame, int block_size);

Plane assemble(const BlockGrid& grid);

std::vector<GopBlockSequence> group_gops(std::span<const LumaFrame> frames, int gop_length, int block_size,
                                         const std::string& source_id = {});

// --- image files ---------------------------------------------------------

/// Reads binary or ASCII PGM/PPM (P2, P3, P5, P6) with maxval <= 255.
RgbFrame read_pnm(const std::string& path);
/// Writes P5 for one channel, P6 for three.
void write_pnm(const std::string& path, const RgbFrame& frame);

// --- dataset on disk -------------------------------------------------------

struct ClipProvenance {
    std::string source;
    std::uint32_t luma_crc = 0;  // CRC-32 of the clip's blocks as stored
    int gop_count = 0;
};

struct BlockDataset {
    int block_size = 32;
    int gop_length = 10;
    int grid_rows = 5;
    int grid_cols = 5;
    std::vector<ClipProvenance> clips;
    std::vector<GopBlockSequence> gops;
};

/// Optional expectations checked by read_dataset against the manifest.
struct DatasetShape {
    int block_size = 0;  // 0 means "accept whatever the manifest says"
    int gop_length = 0;
    int grid_rows = 0;
    int grid_cols = 0;
};

inline constexpr const char* kDatasetManifest = "manifest.json";
inline constexpr const char* kDatasetBlocks = "blocks.f32";

/// Writes `dir/manifest.json` and `dir/blocks.f32`; returns the manifest text.
std::string write_dataset(const BlockDataset& dataset, const std::string& dir);

BlockDataset read_dataset(const std::string& dir, const DatasetShape& expect = {});

/// Builds the dataset metadata (clip provenance) from a list of GOPs that
/// were produced clip by clip; GOPs sharing a source_id form one clip.
BlockDataset make_dataset(std::vector<GopBlockSequence> gops);

struct IngestOptions {
    int crop_height = 160;
    int crop_width = 160;
    int block_size = 32;
    int gop_length = 10;
};

/// decode -> luminance -> crop -> GOPs for one clip.
std::vector<GopBlockSequence> ingest_frames(std::span<const RgbFrame> frames, const IngestOptions& opts,
                                            const std::string& source_id);
std::vector<GopBlockSequence> ingest_clip(const std::string& path, const IngestOptions& opts);

/// Clips are processed in parallel; output order follows `paths`.
BlockDataset ingest_corpus(std::span<const std::string> paths, const IngestOptions& opts);

// --- synthetic clips -----------------------------------------------------

/// Grey RGB frames of a smooth ramp plus a drifting sinusoidal grating and a
/// moving soft blob. Every parameter is drawn from `seed`.
std::vector<RgbFrame> synthetic_clip(int frames, std::uint64_t seed, int height = 240, int width = 320);

}  // namespace csvnet
