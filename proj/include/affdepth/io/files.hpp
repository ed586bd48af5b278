#pragma once

#include <cstdint>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "affdepth/errors.hpp"

namespace affdepth::io {

namespace fs = std::filesystem;

inline std::vector<std::uint8_t> read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FileError(fmt::format("cannot open {}", path.string()));
    std::vector<std::uint8_t> out((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw FileError(fmt::format("error while reading {}", path.string()));
    return out;
}

inline std::string read_text(const fs::path& path) {
    const auto b = read_bytes(path);
    return std::string(b.begin(), b.end());
}

inline void write_bytes(const fs::path& path, const void* data, std::size_t size) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FileError(fmt::format("cannot open {} for writing", path.string()));
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    if (!out) throw FileError(fmt::format("error while writing {}", path.string()));
}

inline void write_text(const fs::path& path, const std::string& text) { write_bytes(path, text.data(), text.size()); }

/// Little-endian cursor over an in-memory file; every read is bounds-checked.
class ByteReader {
public:
    ByteReader(const std::vector<std::uint8_t>& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }

    void need(std::size_t n, const char* field) const {
        if (n > remaining())
            throw TruncatedError(fmt::format("{}: truncated while reading {} ({} bytes needed at offset {}, {} left)",
                                             what_, field, n, pos_, remaining()));
    }

    template <class U>
    U scalar(const char* field) {
        need(sizeof(U), field);
        U v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
        pos_ += sizeof(U);
        return v;  // hosts are little-endian (checked at compile time below)
    }

    std::string string(std::size_t n, const char* field) {
        need(n, field);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    const std::uint8_t* take(std::size_t n, const char* field) {
        need(n, field);
        const auto* p = bytes_.data() + pos_;
        pos_ += n;
        return p;
    }

private:
    const std::vector<std::uint8_t>& bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

class ByteWriter {
public:
    template <class U>
    void scalar(U v) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        bytes.insert(bytes.end(), p, p + sizeof(U));
    }
    void string(const std::string& s) { bytes.insert(bytes.end(), s.begin(), s.end()); }
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        bytes.insert(bytes.end(), b, b + n);
    }

    std::vector<std::uint8_t> bytes;
};

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

}  // namespace affdepth::io
