#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace csvnet {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Inputs or configuration that violate a documented precondition.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Array dimensions that do not agree with each other or with a config.
class ShapeError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

/// File system and serialization failures.
class IoError : public Error {
public:
    using Error::Error;
};

/// NaN or infinity where finite values are required.
class NumericError : public Error {
public:
    using Error::Error;
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw ValidationError(what);
}

inline void require_shape(bool cond, const std::string& what) {
    if (!cond) throw ShapeError(what);
}

// Little-endian float32 packing for on-disk arrays.
inline void append_f32_le(std::vector<char>& out, std::span<const float> values) {
    const std::size_t base = out.size();
    out.resize(base + values.size() * 4);
    char* dst = out.data() + base;
    for (float v : values) {
        auto bits = std::bit_cast<std::uint32_t>(v);
        if constexpr (std::endian::native == std::endian::big) {
            bits = ((bits & 0xFFu) << 24) | ((bits & 0xFF00u) << 8) | ((bits >> 8) & 0xFF00u) | (bits >> 24);
        }
        std::memcpy(dst, &bits, 4);
        dst += 4;
    }
}

inline void read_f32_le(const char* src, std::span<float> values) {
    for (float& v : values) {
        std::uint32_t bits;
        std::memcpy(&bits, src, 4);
        if constexpr (std::endian::native == std::endian::big) {
            bits = ((bits & 0xFFu) << 24) | ((bits & 0xFF00u) << 8) | ((bits >> 8) & 0xFF00u) | (bits >> 24);
        }
        v = std::bit_cast<float>(bits);
        src += 4;
    }
}

/// CRC-32 of a byte range (zlib polynomial), used to detect corrupt files.
std::uint32_t crc32_of(std::span<const char> bytes);

/// Reads a whole file; throws IoError if it cannot be opened.
std::vector<char> read_file_bytes(const std::string& path);

/// Writes a whole file atomically enough for our purposes (temp + rename).
void write_file_bytes(const std::string& path, std::span<const char> bytes);

inline constexpr const char* kLibraryVersion = "1.0.0";

}  // namespace csvnet
