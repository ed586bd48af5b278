#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "affdepth/depth_map.hpp"
#include "affdepth/errors.hpp"
#include "affdepth/io/files.hpp"

namespace affdepth::io {

/// Single-channel PFM raster: "Pf", "W H", a scale line whose sign gives the
/// byte order (negative = little-endian), then float32 rows bottom to top.
struct PfmImage {
    std::size_t width = 0, height = 0;
    /// Row-major, top row first.
    std::vector<float> pixels;
};

inline constexpr std::size_t pfm_max_side = 1u << 15;

namespace detail {

inline std::string next_token(const std::vector<std::uint8_t>& b, std::size_t& pos, const std::string& what,
                              const char* field) {
    while (pos < b.size() && std::isspace(b[pos])) ++pos;
    const std::size_t start = pos;
    while (pos < b.size() && !std::isspace(b[pos])) ++pos;
    if (start == pos) throw TruncatedError(fmt::format("{}: header ends before the {}", what, field));
    if (pos - start > 32) throw FormatError(fmt::format("{}: {} token is implausibly long", what, field));
    return std::string(b.begin() + static_cast<long>(start), b.begin() + static_cast<long>(pos));
}

inline std::size_t parse_side(const std::string& tok, const std::string& what, const char* field) {
    if (tok.empty() || tok.size() > 6 || !std::all_of(tok.begin(), tok.end(), [](char c) { return std::isdigit(c); }))
        throw FormatError(fmt::format("{}: {} '{}' is not a positive integer", what, field, tok));
    const auto v = std::stoul(tok);
    if (v == 0 || v > pfm_max_side) throw FormatError(fmt::format("{}: {} {} is out of range", what, field, v));
    return v;
}

inline std::uint32_t byteswap32(std::uint32_t v) {
    return (v >> 24) | ((v >> 8) & 0xff00u) | ((v << 8) & 0xff0000u) | (v << 24);
}

}  // namespace detail

inline PfmImage decode_pfm(const std::vector<std::uint8_t>& b, const std::string& what) {
    std::size_t pos = 0;
    const auto magic = detail::next_token(b, pos, what, "magic");
    if (magic == "PF") throw UnsupportedFormat(fmt::format("{}: colour PFM (PF) is not supported, expected Pf", what));
    if (magic != "Pf") throw FormatError(fmt::format("{}: bad magic '{}', expected Pf", what, magic));
    PfmImage img;
    img.width = detail::parse_side(detail::next_token(b, pos, what, "width"), what, "width");
    img.height = detail::parse_side(detail::next_token(b, pos, what, "height"), what, "height");
    const auto scale_tok = detail::next_token(b, pos, what, "scale");
    double scale = 0.0;
    try {
        std::size_t used = 0;
        scale = std::stod(scale_tok, &used);
        if (used != scale_tok.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
        throw FormatError(fmt::format("{}: scale '{}' is not a number", what, scale_tok));
    }
    if (scale == 0.0 || !std::isfinite(scale)) throw FormatError(fmt::format("{}: scale must be finite and non-zero", what));
    // Exactly one whitespace byte separates the header from the payload.
    if (pos >= b.size()) throw TruncatedError(fmt::format("{}: no payload after the header", what));
    if (!std::isspace(b[pos])) throw FormatError(fmt::format("{}: header not terminated by whitespace", what));
    ++pos;

    const std::size_t n = img.width * img.height;
    const std::size_t need = n * 4;
    if (b.size() - pos < need)
        throw TruncatedError(fmt::format("{}: payload has {} bytes, {}x{} needs {}", what, b.size() - pos, img.width,
                                         img.height, need));
    if (b.size() - pos > need)
        throw FormatError(fmt::format("{}: {} unexpected bytes after the payload", what, b.size() - pos - need));
    const bool little = scale < 0.0;
    img.pixels.resize(n);
    for (std::size_t row = 0; row < img.height; ++row) {
        // File rows run bottom to top.
        const std::size_t dst_row = img.height - 1 - row;
        for (std::size_t x = 0; x < img.width; ++x) {
            std::uint32_t bits;
            std::memcpy(&bits, b.data() + pos + (row * img.width + x) * 4, 4);
            if (!little) bits = detail::byteswap32(bits);
            std::memcpy(&img.pixels[dst_row * img.width + x], &bits, 4);
        }
    }
    return img;
}

inline std::vector<std::uint8_t> encode_pfm(const PfmImage& img) {
    if (img.width == 0 || img.height == 0 || img.pixels.size() != img.width * img.height)
        throw ShapeError(fmt::format("write_pfm: {} pixels for {}x{}", img.pixels.size(), img.width, img.height));
    ByteWriter w;
    w.string(fmt::format("Pf\n{} {}\n-1.0\n", img.width, img.height));
    for (std::size_t row = img.height; row-- > 0;) w.raw(img.pixels.data() + row * img.width, img.width * 4);
    return std::move(w.bytes);
}

inline PfmImage read_pfm_image(const fs::path& path) { return decode_pfm(read_bytes(path), path.string()); }

inline void write_pfm_image(const PfmImage& img, const fs::path& path) {
    const auto bytes = encode_pfm(img);
    write_bytes(path, bytes.data(), bytes.size());
}

/// Depth map from a PFM file. Non-finite pixels, and for space = depth
/// non-positive ones, are invalid.
inline DepthMap read_pfm(const fs::path& path, DepthSpace space = DepthSpace::depth) {
    const auto img = read_pfm_image(path);
    std::vector<double> v(img.pixels.begin(), img.pixels.end());
    return DepthMap::from_values(Tensor({1, img.height, img.width}, std::move(v)), space);
}

/// Prediction map: any finite value is valid (affine-invariant outputs may
/// be negative).
inline DepthMap read_prediction_pfm(const fs::path& path, DepthSpace space) {
    const auto img = read_pfm_image(path);
    std::vector<double> v(img.pixels.begin(), img.pixels.end());
    Mask valid(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) valid[i] = std::isfinite(v[i]) ? 1 : 0;
    return DepthMap{Tensor({1, img.height, img.width}, std::move(v)), std::move(valid), space};
}

/// Writes values as float32, invalid pixels as NaN. Valid values must be
/// representable in float32 so that reading back is exact.
inline void write_pfm(const DepthMap& map, const fs::path& path) {
    PfmImage img{map.width(), map.height(), std::vector<float>(map.values.size())};
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        if (!map.valid[i]) {
            img.pixels[i] = std::numeric_limits<float>::quiet_NaN();
            continue;
        }
        const double v = map.values[i];
        const auto f = static_cast<float>(v);
        if (static_cast<double>(f) != v && std::isfinite(v))
            throw NumericError(fmt::format("write_pfm: pixel {} value {} is not representable as float32", i, v));
        img.pixels[i] = f;
    }
    write_pfm_image(img, path);
}

/// Like write_pfm but rounds values to float32 (for computed predictions).
inline void write_prediction_pfm(const DepthMap& map, const fs::path& path) {
    PfmImage img{map.width(), map.height(), std::vector<float>(map.values.size())};
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
        img.pixels[i] = map.valid[i] ? static_cast<float>(map.values[i]) : std::numeric_limits<float>::quiet_NaN();
    write_pfm_image(img, path);
}

}  // namespace affdepth::io
