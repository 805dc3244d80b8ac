#include "csvnet/ingest.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "csvnet/common.hpp"

#ifdef CSVNET_HAVE_OPENCV
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/videoio.hpp>
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace csvnet {

namespace {

bool is_pnm_ext(const std::string& ext) { return ext == ".pgm" || ext == ".ppm" || ext == ".pnm"; }

bool is_image_ext(const std::string& ext) {
    if (is_pnm_ext(ext)) return true;
#ifdef CSVNET_HAVE_OPENCV
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp" || ext == ".tif" || ext == ".tiff";
#else
    return false;
#endif
}

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
}

// Trailing integer of a file stem ("frame_0012" -> 12), or -1.
long long trailing_index(const std::string& stem) {
    std::size_t end = stem.size();
    std::size_t begin = end;
    while (begin > 0 && std::isdigit(static_cast<unsigned char>(stem[begin - 1]))) --begin;
    if (begin == end) return -1;
    return std::stoll(stem.substr(begin, std::min<std::size_t>(end - begin, 18)));
}

RgbFrame to_rgb(RgbFrame frame) {
    if (frame.channels == 3) return frame;
    RgbFrame out;
    out.height = frame.height;
    out.width = frame.width;
    out.channels = 3;
    out.data.resize(frame.data.size() * 3);
    for (std::size_t i = 0; i < frame.data.size(); ++i) {
        out.data[3 * i] = out.data[3 * i + 1] = out.data[3 * i + 2] = frame.data[i];
    }
    return out;
}

#ifdef CSVNET_HAVE_OPENCV
RgbFrame from_mat(const cv::Mat& mat) {
    RgbFrame f;
    f.height = mat.rows;
    f.width = mat.cols;
    f.channels = 3;
    f.data.resize(static_cast<std::size_t>(mat.rows) * mat.cols * 3);
    if (mat.channels() == 1) {
        for (int r = 0; r < mat.rows; ++r)
            for (int c = 0; c < mat.cols; ++c) {
                const auto v = mat.at<std::uint8_t>(r, c);
                std::size_t i = (static_cast<std::size_t>(r) * mat.cols + c) * 3;
                f.data[i] = f.data[i + 1] = f.data[i + 2] = v;
            }
        return f;
    }
    for (int r = 0; r < mat.rows; ++r)
        for (int c = 0; c < mat.cols; ++c) {
            const auto& px = mat.at<cv::Vec3b>(r, c);
            std::size_t i = (static_cast<std::size_t>(r) * mat.cols + c) * 3;
            f.data[i] = px[2];
            f.data[i + 1] = px[1];
            f.data[i + 2] = px[0];
        }
    return f;
}
#endif

RgbFrame read_image(const fs::path& path) {
    if (is_pnm_ext(lower(path.extension().string()))) return to_rgb(read_pnm(path.string()));
#ifdef CSVNET_HAVE_OPENCV
    cv::Mat mat = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (mat.empty()) throw IoError("cannot decode image '" + path.string() + "'");
    return from_mat(mat);
#else
    throw IoError("unsupported image format '" + path.string() + "'");
#endif
}

// Skips whitespace and '#' comments in a PNM header.
int pnm_header_int(std::istream& in) {
    for (;;) {
        int ch = in.peek();
        if (ch == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(ch)) {
            in.get();
        } else {
            break;
        }
    }
    int v = -1;
    in >> v;
    if (!in) throw IoError("malformed PNM header");
    return v;
}

}  // namespace

LumaFrame GopBlockSequence::frame(int t) const {
    BlockGrid grid{grid_rows, grid_cols, block_size, {}};
    const auto first = values.begin() + static_cast<std::ptrdiff_t>(offset(t, 0, 0));
    grid.values.assign(first, first + static_cast<std::ptrdiff_t>(positions()) * block_len());
    return assemble(grid);
}

RgbFrame read_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::string magic(2, '\0');
    in.read(magic.data(), 2);
    if (!in || magic[0] != 'P' || (magic[1] != '2' && magic[1] != '3' && magic[1] != '5' && magic[1] != '6'))
        throw IoError("'" + path + "' is not a PGM/PPM file");
    RgbFrame f;
    f.channels = (magic[1] == '3' || magic[1] == '6') ? 3 : 1;
    f.width = pnm_header_int(in);
    f.height = pnm_header_int(in);
    const int maxval = pnm_header_int(in);
    if (f.width <= 0 || f.height <= 0 || maxval <= 0 || maxval > 255)
        throw IoError("unsupported PNM geometry or depth in '" + path + "'");
    f.data.resize(static_cast<std::size_t>(f.width) * f.height * f.channels);
    if (magic[1] == '5' || magic[1] == '6') {
        in.get();  // single whitespace after maxval
        in.read(reinterpret_cast<char*>(f.data.data()), static_cast<std::streamsize>(f.data.size()));
        if (!in) throw IoError("truncated PNM raster in '" + path + "'");
    } else {
        for (auto& v : f.data) v = static_cast<std::uint8_t>(pnm_header_int(in));
    }
    if (maxval != 255) {
        for (auto& v : f.data) v = static_cast<std::uint8_t>((v * 255 + maxval / 2) / maxval);
    }
    return f;
}

void write_pnm(const std::string& path, const RgbFrame& frame) {
    require(frame.channels == 1 || frame.channels == 3, "PNM output needs 1 or 3 channels");
    std::ostringstream header;
    header << (frame.channels == 1 ? "P5" : "P6") << "\n" << frame.width << " " << frame.height << "\n255\n";
    std::string h = header.str();
    std::vector<char> bytes(h.begin(), h.end());
    bytes.insert(bytes.end(), frame.data.begin(), frame.data.end());
    write_file_bytes(path, bytes);
}

std::vector<RgbFrame> decode_video(const std::string& path, int min_frames) {
    std::error_code ec;
    std::vector<RgbFrame> frames;
    if (fs::is_directory(path, ec)) {
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(path)) {
            if (entry.is_regular_file() && is_image_ext(lower(entry.path().extension().string())))
                files.push_back(entry.path());
        }
        std::sort(files.begin(), files.end(), [](const fs::path& a, const fs::path& b) {
            const auto ia = trailing_index(a.stem().string());
            const auto ib = trailing_index(b.stem().string());
            if (ia != ib) return ia < ib;
            return a.filename() < b.filename();
        });
        frames.reserve(files.size());
        for (const auto& f : files) frames.push_back(read_image(f));
    } else if (fs::is_regular_file(path, ec)) {
#ifdef CSVNET_HAVE_OPENCV
        cv::VideoCapture cap(path);
        if (!cap.isOpened()) throw IoError("cannot open video '" + path + "'");
        cv::Mat mat;
        while (cap.read(mat)) frames.push_back(from_mat(mat));
#else
        throw IoError("video containers need OpenCV support; pass an image-sequence directory instead: '" + path +
                      "'");
#endif
    } else {
        throw IoError("unreadable video path '" + path + "'");
    }
    if (frames.empty()) throw ValidationError("zero frames in '" + path + "'");
    if (static_cast<int>(frames.size()) < min_frames)
        throw ValidationError("insufficient frames in '" + path + "': " + std::to_string(frames.size()) + " < " +
                              std::to_string(min_frames));
    for (const auto& f : frames) {
        if (f.height != frames.front().height || f.width != frames.front().width)
            throw ValidationError("frame size changes inside '" + path + "'");
    }
    return frames;
}

LumaFrame extract_luminance(const RgbFrame& frame) {
    if (frame.channels != 3)
        throw ShapeError("luminance needs a 3-channel frame, got " + std::to_string(frame.channels));
    require_shape(frame.data.size() == static_cast<std::size_t>(frame.height) * frame.width * 3,
                  "frame buffer size does not match its dimensions");
    LumaFrame out(frame.height, frame.width);
    const std::size_t count = out.values.size();
    for (std::size_t i = 0; i < count; ++i) {
        const double y =
            (0.299 * frame.data[3 * i] + 0.587 * frame.data[3 * i + 1] + 0.114 * frame.data[3 * i + 2]) / 255.0;
        out.values[i] = static_cast<float>(std::clamp(y, 0.0, 1.0));
    }
    return out;
}

LumaFrame center_crop(const Plane& plane, int crop_height, int crop_width) {
    require(crop_height > 0 && crop_width > 0, "crop size must be positive");
    if (plane.height < crop_height || plane.width < crop_width)
        throw ShapeError("plane " + std::to_string(plane.height) + "x" + std::to_string(plane.width) +
                         " is smaller than crop " + std::to_string(crop_height) + "x" + std::to_string(crop_width));
    // floor division: an odd margin leaves the extra row/column at the bottom/right
    const int top = (plane.height - crop_height) / 2;
    const int left = (plane.width - crop_width) / 2;
    LumaFrame out(crop_height, crop_width);
    for (int r = 0; r < crop_height; ++r) {
        const float* src = plane.values.data() + static_cast<std::size_t>(top + r) * plane.width + left;
        std::copy(src, src + crop_width, out.values.data() + static_cast<std::size_t>(r) * crop_width);
    }
    return out;
}

BlockGrid blockify(const Plane& frame, int block_size) {
    require(block_size > 0, "block size must be positive");
    if (frame.height % block_size != 0 || frame.width % block_size != 0)
        throw ShapeError("frame " + std::to_string(frame.height) + "x" + std::to_string(frame.width) +
                         " is not divisible by block size " + std::to_string(block_size));
    BlockGrid grid;
    grid.rows = frame.height / block_size;
    grid.cols = frame.width / block_size;
    grid.block_size = block_size;
    grid.values.resize(frame.values.size());
    float* dst = grid.values.data();
    for (int br = 0; br < grid.rows; ++br)
        for (int bc = 0; bc < grid.cols; ++bc)
            for (int r = 0; r < block_size; ++r) {
                const float* src =
                    frame.values.data() + static_cast<std::size_t>(br * block_size + r) * frame.width + bc * block_size;
                dst = std::copy(src, src + block_size, dst);
            }
    return grid;
}

Plane assemble(const BlockGrid& grid) {
    const int b = grid.block_size;
    require_shape(grid.values.size() == static_cast<std::size_t>(grid.rows) * grid.cols * b * b,
                  "block grid storage does not match its shape");
    Plane out(grid.rows * b, grid.cols * b);
    const float* src = grid.values.data();
    for (int br = 0; br < grid.rows; ++br)
        for (int bc = 0; bc < grid.cols; ++bc)
            for (int r = 0; r < b; ++r) {
                std::copy(src, src + b, out.values.data() + static_cast<std::size_t>(br * b + r) * out.width + bc * b);
                src += b;
            }
    return out;
}

std::vector<GopBlockSequence> group_gops(std::span<const LumaFrame> frames, int gop_length, int block_size,
                                         const std::string& source_id) {
    require(gop_length >= 2, "GOP length must be at least 2");
    if (static_cast<int>(frames.size()) < gop_length)
        throw ValidationError("insufficient frames: " + std::to_string(frames.size()) + " < GOP length " +
                              std::to_string(gop_length));
    const std::size_t count = frames.size() / static_cast<std::size_t>(gop_length);
    std::vector<GopBlockSequence> gops;
    gops.reserve(count);
    for (std::size_t g = 0; g < count; ++g) {
        GopBlockSequence gop;
        gop.frames = gop_length;
        gop.block_size = block_size;
        gop.source_id = source_id;
        for (int t = 0; t < gop_length; ++t) {
            BlockGrid grid = blockify(frames[g * gop_length + t], block_size);
            if (t == 0) {
                gop.grid_rows = grid.rows;
                gop.grid_cols = grid.cols;
                gop.values.reserve(grid.values.size() * gop_length);
            } else if (grid.rows != gop.grid_rows || grid.cols != gop.grid_cols) {
                throw ShapeError("frames inside one GOP have different sizes");
            }
            gop.values.insert(gop.values.end(), grid.values.begin(), grid.values.end());
        }
        gops.push_back(std::move(gop));
    }
    return gops;
}

// --- dataset ---------------------------------------------------------------

BlockDataset make_dataset(std::vector<GopBlockSequence> gops) {
    BlockDataset ds;
    if (!gops.empty()) {
        ds.block_size = gops.front().block_size;
        ds.gop_length = gops.front().frames;
        ds.grid_rows = gops.front().grid_rows;
        ds.grid_cols = gops.front().grid_cols;
    }
    std::map<std::string, std::size_t> clip_index;
    std::vector<std::vector<char>> clip_bytes;
    for (const auto& g : gops) {
        require_shape(g.block_size == ds.block_size && g.frames == ds.gop_length && g.grid_rows == ds.grid_rows &&
                          g.grid_cols == ds.grid_cols,
                      "GOPs in one dataset must share block size, GOP length and grid");
        auto [it, fresh] = clip_index.emplace(g.source_id, ds.clips.size());
        if (fresh) {
            ds.clips.push_back({g.source_id, 0, 0});
            clip_bytes.emplace_back();
        }
        ds.clips[it->second].gop_count += 1;
        append_f32_le(clip_bytes[it->second], g.values);
    }
    for (std::size_t i = 0; i < ds.clips.size(); ++i) ds.clips[i].luma_crc = crc32_of(clip_bytes[i]);
    ds.gops = std::move(gops);
    return ds;
}

std::string write_dataset(const BlockDataset& dataset, const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create dataset directory '" + dir + "': " + ec.message());

    const std::size_t per_gop =
        static_cast<std::size_t>(dataset.gop_length) * dataset.grid_rows * dataset.grid_cols * dataset.block_size *
        dataset.block_size;
    std::vector<char> bytes;
    bytes.reserve(per_gop * dataset.gops.size() * 4);
    json gop_sources = json::array();
    std::map<std::string, std::size_t> clip_index;
    for (std::size_t i = 0; i < dataset.clips.size(); ++i) clip_index[dataset.clips[i].source] = i;
    for (const auto& g : dataset.gops) {
        require_shape(g.values.size() == per_gop, "GOP storage does not match dataset shape");
        append_f32_le(bytes, g.values);
        auto it = clip_index.find(g.source_id);
        gop_sources.push_back(it == clip_index.end() ? json(nullptr) : json(it->second));
    }
    json clips = json::array();
    for (const auto& c : dataset.clips)
        clips.push_back({{"source", c.source}, {"luma_crc32", c.luma_crc}, {"gops", c.gop_count}});

    json manifest = {
        {"format", "csvnet-blocks"},
        {"version", 1},
        {"dtype", "float32-le"},
        {"layout", "gop,frame,grid_row,grid_col,pixel_row,pixel_col"},
        {"block_size", dataset.block_size},
        {"gop_length", dataset.gop_length},
        {"grid_rows", dataset.grid_rows},
        {"grid_cols", dataset.grid_cols},
        {"gop_count", dataset.gops.size()},
        {"data_file", kDatasetBlocks},
        {"data_crc32", crc32_of(bytes)},
        {"clips", clips},
        {"gop_clip", gop_sources},
    };
    write_file_bytes((fs::path(dir) / kDatasetBlocks).string(), bytes);
    const std::string text = manifest.dump(2) + "\n";
    write_file_bytes((fs::path(dir) / kDatasetManifest).string(), std::span<const char>(text.data(), text.size()));
    return text;
}

BlockDataset read_dataset(const std::string& dir, const DatasetShape& expect) {
    const auto manifest_bytes = read_file_bytes((fs::path(dir) / kDatasetManifest).string());
    json m;
    try {
        m = json::parse(manifest_bytes.begin(), manifest_bytes.end());
    } catch (const json::exception& e) {
        throw IoError("corrupt dataset manifest in '" + dir + "': " + e.what());
    }
    BlockDataset ds;
    std::size_t count = 0;
    std::uint32_t data_crc = 0;
    try {
        if (m.at("format").get<std::string>() != "csvnet-blocks" || m.at("version").get<int>() != 1)
            throw IoError("unsupported dataset format in '" + dir + "'");
        ds.block_size = m.at("block_size").get<int>();
        ds.gop_length = m.at("gop_length").get<int>();
        ds.grid_rows = m.at("grid_rows").get<int>();
        ds.grid_cols = m.at("grid_cols").get<int>();
        count = m.at("gop_count").get<std::size_t>();
        data_crc = m.at("data_crc32").get<std::uint32_t>();
        for (const auto& c : m.at("clips"))
            ds.clips.push_back(
                {c.at("source").get<std::string>(), c.at("luma_crc32").get<std::uint32_t>(), c.at("gops").get<int>()});
    } catch (const json::exception& e) {
        throw IoError("incomplete dataset manifest in '" + dir + "': " + e.what());
    }
    auto check = [&](int want, int got, const char* what) {
        if (want != 0 && want != got)
            throw ShapeError(std::string("dataset ") + what + " " + std::to_string(got) + " does not match expected " +
                             std::to_string(want));
    };
    check(expect.block_size, ds.block_size, "block size");
    check(expect.gop_length, ds.gop_length, "GOP length");
    check(expect.grid_rows, ds.grid_rows, "grid rows");
    check(expect.grid_cols, ds.grid_cols, "grid cols");
    require_shape(ds.block_size > 0 && ds.gop_length > 0 && ds.grid_rows > 0 && ds.grid_cols > 0,
                  "dataset manifest has non-positive dimensions");

    const auto bytes = read_file_bytes((fs::path(dir) / m.value("data_file", std::string(kDatasetBlocks))).string());
    const std::size_t per_gop =
        static_cast<std::size_t>(ds.gop_length) * ds.grid_rows * ds.grid_cols * ds.block_size * ds.block_size;
    if (bytes.size() != per_gop * count * 4)
        throw ShapeError("dataset binary holds " + std::to_string(bytes.size()) + " bytes, manifest implies " +
                         std::to_string(per_gop * count * 4));
    if (crc32_of(bytes) != data_crc) throw IoError("dataset binary checksum mismatch in '" + dir + "'");

    const json& gop_clip = m.contains("gop_clip") ? m["gop_clip"] : json::array();
    ds.gops.resize(count);
    for (std::size_t g = 0; g < count; ++g) {
        auto& gop = ds.gops[g];
        gop.frames = ds.gop_length;
        gop.grid_rows = ds.grid_rows;
        gop.grid_cols = ds.grid_cols;
        gop.block_size = ds.block_size;
        if (g < gop_clip.size() && gop_clip[g].is_number_unsigned()) {
            const auto idx = gop_clip[g].get<std::size_t>();
            if (idx < ds.clips.size()) gop.source_id = ds.clips[idx].source;
        }
        gop.values.resize(per_gop);
        read_f32_le(bytes.data() + g * per_gop * 4, gop.values);
    }
    return ds;
}

// --- pipeline --------------------------------------------------------------

std::vector<GopBlockSequence> ingest_frames(std::span<const RgbFrame> frames, const IngestOptions& opts,
                                            const std::string& source_id) {
    std::vector<LumaFrame> luma;
    luma.reserve(frames.size());
    for (const auto& f : frames) luma.push_back(center_crop(extract_luminance(f), opts.crop_height, opts.crop_width));
    return group_gops(luma, opts.gop_length, opts.block_size, source_id);
}

std::vector<GopBlockSequence> ingest_clip(const std::string& path, const IngestOptions& opts) {
    const auto frames = decode_video(path, opts.gop_length);
    return ingest_frames(frames, opts, path);
}

BlockDataset ingest_corpus(std::span<const std::string> paths, const IngestOptions& opts) {
    std::vector<std::vector<GopBlockSequence>> per_clip(paths.size());
    std::vector<std::exception_ptr> errors(paths.size());
    const long n = static_cast<long>(paths.size());
#pragma omp parallel for schedule(dynamic)
    for (long i = 0; i < n; ++i) {
        try {
            per_clip[i] = ingest_clip(paths[i], opts);
        } catch (...) {
            errors[i] = std::current_exception();
        }
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
    std::vector<GopBlockSequence> all;
    for (auto& clip : per_clip)
        for (auto& g : clip) all.push_back(std::move(g));
    BlockDataset ds = make_dataset(std::move(all));
    if (ds.gops.empty()) {
        ds.block_size = opts.block_size;
        ds.gop_length = opts.gop_length;
        ds.grid_rows = opts.crop_height / opts.block_size;
        ds.grid_cols = opts.crop_width / opts.block_size;
    }
    return ds;
}

// --- synthetic clips -----------------------------------------------------

std::vector<RgbFrame> synthetic_clip(int frames, std::uint64_t seed, int height, int width) {
    require(frames >= 1 && height >= 1 && width >= 1, "synthetic clip dimensions must be positive");
    std::mt19937_64 engine(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto draw = [&](double lo, double hi) { return lo + (hi - lo) * unit(engine); };
    constexpr double two_pi = 2.0 * std::numbers::pi;

    const double ramp_angle = draw(0.0, two_pi);
    const double ramp_amp = draw(0.15, 0.35);
    const double grating_angle = draw(0.0, two_pi);
    const double period = draw(24.0, 64.0);
    const double grating_amp = draw(0.08, 0.2);
    const double phase0 = draw(0.0, two_pi);
    const double speed = draw(0.5, 2.5);  // px per frame along the grating normal
    const double blob_x = draw(0.3, 0.7) * width;
    const double blob_y = draw(0.3, 0.7) * height;
    const double blob_vx = draw(-3.0, 3.0);
    const double blob_vy = draw(-3.0, 3.0);
    const double blob_sigma = draw(12.0, 28.0);
    const double blob_amp = draw(-0.25, 0.25);

    const double rc = std::cos(ramp_angle), rs = std::sin(ramp_angle);
    const double gc = std::cos(grating_angle), gs = std::sin(grating_angle);
    const double cx = 0.5 * width, cy = 0.5 * height;
    const double half_diag = 0.5 * std::hypot(static_cast<double>(width), static_cast<double>(height));

    std::vector<RgbFrame> out(static_cast<std::size_t>(frames));
    for (int t = 0; t < frames; ++t) {
        RgbFrame& f = out[static_cast<std::size_t>(t)];
        f.height = height;
        f.width = width;
        f.channels = 3;
        f.data.resize(static_cast<std::size_t>(height) * width * 3);
        const double bx = blob_x + blob_vx * t, by = blob_y + blob_vy * t;
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) {
                const double ramp = ((x - cx) * rc + (y - cy) * rs) / half_diag;
                const double along = x * gc + y * gs - speed * t;
                const double d2 = (x - bx) * (x - bx) + (y - by) * (y - by);
                double v = 0.5 + ramp_amp * ramp + grating_amp * std::sin(two_pi * along / period + phase0) +
                           blob_amp * std::exp(-d2 / (2.0 * blob_sigma * blob_sigma));
                v = std::clamp(v, 0.0, 1.0);
                const auto byte = static_cast<std::uint8_t>(std::lround(v * 255.0));
                std::uint8_t* px = f.data.data() + (static_cast<std::size_t>(y) * width + x) * 3;
                px[0] = px[1] = px[2] = byte;
            }
    }
    return out;
}

}  // namespace csvnet
