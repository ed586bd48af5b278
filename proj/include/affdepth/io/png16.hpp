#pragma once

#include <csetjmp>
#include <cstdio>
#include <cstdint>
#include <cstring>
#include <optional>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <png.h>

#include "affdepth/depth_map.hpp"
#include "affdepth/errors.hpp"
#include "affdepth/io/files.hpp"
#include "affdepth/io/json_fields.hpp"

namespace affdepth::io {

/// Decoded 16-bit greyscale PNG, row-major.
struct Png16Image {
    std::size_t width = 0, height = 0;
    std::vector<std::uint16_t> pixels;
};

/// Mapping from raw PNG samples to depth: value = raw * scale + offset.
struct Png16Sidecar {
    double scale = 1.0;
    double offset = 0.0;
    /// Raw sample marking a missing measurement.
    std::optional<std::uint16_t> invalid_value;
};

namespace detail {

// libpng reports failure through longjmp; these callbacks only touch POD
// state so nothing with a destructor is skipped.
struct PngState {
    const std::uint8_t* data = nullptr;
    std::size_t size = 0, pos = 0;
    std::vector<std::uint8_t>* out = nullptr;
    char message[256] = {};
};

inline void png_on_error(png_structp png, png_const_charp msg) {
    auto* st = static_cast<PngState*>(png_get_error_ptr(png));
    std::snprintf(st->message, sizeof st->message, "%s", msg);
    png_longjmp(png, 1);
}

inline void png_on_warning(png_structp, png_const_charp) {}

inline void png_read_mem(png_structp png, png_bytep dst, png_size_t n) {
    auto* st = static_cast<PngState*>(png_get_io_ptr(png));
    if (n > st->size - st->pos) png_error(png, "unexpected end of data");
    std::memcpy(dst, st->data + st->pos, n);
    st->pos += n;
}

inline void png_write_mem(png_structp png, png_bytep src, png_size_t n) {
    auto* st = static_cast<PngState*>(png_get_io_ptr(png));
    st->out->insert(st->out->end(), src, src + n);
}

inline void png_flush_mem(png_structp) {}

}  // namespace detail

inline Png16Image decode_png16(const std::vector<std::uint8_t>& bytes, const std::string& what) {
    if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0)
        throw FormatError(fmt::format("{}: not a PNG file", what));
    detail::PngState st;
    st.data = bytes.data();
    st.size = bytes.size();
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &st, detail::png_on_error, detail::png_on_warning);
    if (!png) throw Error("libpng: cannot allocate read struct");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw Error("libpng: cannot allocate info struct");
    }
    Png16Image img;
    std::vector<png_bytep> rows;
    std::vector<std::uint8_t> buffer;
    // 0 = ok, 1 = libpng error, 2 = bit depth, 3 = colour type.
    volatile int status = 0;
    png_uint_32 w = 0, h = 0;
    int depth = 0, colour = 0;
    if (setjmp(png_jmpbuf(png))) {
        status = 1;
    } else {
        png_set_read_fn(png, &st, detail::png_read_mem);
        png_set_user_limits(png, 1u << 15, 1u << 15);
        png_read_info(png, info);
        w = png_get_image_width(png, info);
        h = png_get_image_height(png, info);
        depth = png_get_bit_depth(png, info);
        colour = png_get_color_type(png, info);
        if (depth != 16) {
            status = 2;
        } else if (colour != PNG_COLOR_TYPE_GRAY) {
            status = 3;
        } else {
            png_set_interlace_handling(png);
            png_read_update_info(png, info);
            buffer.resize(static_cast<std::size_t>(w) * h * 2);
            rows.resize(h);
            for (png_uint_32 y = 0; y < h; ++y) rows[y] = buffer.data() + static_cast<std::size_t>(y) * w * 2;
            png_read_image(png, rows.data());
            png_read_end(png, nullptr);
        }
    }
    png_destroy_read_struct(&png, &info, nullptr);
    if (status == 1) {
        const std::string msg = st.message;
        if (msg.find("end of data") != std::string::npos) throw TruncatedError(fmt::format("{}: truncated PNG", what));
        throw FormatError(fmt::format("{}: {}", what, msg));
    }
    if (status == 2)
        throw UnsupportedFormat(fmt::format("{}: {}-bit PNG, depth maps must be 16-bit", what, depth));
    if (status == 3) throw UnsupportedFormat(fmt::format("{}: depth PNG must be single-channel greyscale", what));
    img.width = w;
    img.height = h;
    img.pixels.resize(static_cast<std::size_t>(w) * h);
    // PNG samples are big-endian.
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
        img.pixels[i] = static_cast<std::uint16_t>((buffer[2 * i] << 8) | buffer[2 * i + 1]);
    return img;
}

inline std::vector<std::uint8_t> encode_png16(const Png16Image& img) {
    if (img.width == 0 || img.height == 0 || img.pixels.size() != img.width * img.height)
        throw ShapeError(fmt::format("write_png16: {} pixels for {}x{}", img.pixels.size(), img.width, img.height));
    std::vector<std::uint8_t> buffer(img.pixels.size() * 2);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        buffer[2 * i] = static_cast<std::uint8_t>(img.pixels[i] >> 8);
        buffer[2 * i + 1] = static_cast<std::uint8_t>(img.pixels[i] & 0xff);
    }
    std::vector<png_bytep> rows(img.height);
    for (std::size_t y = 0; y < img.height; ++y) rows[y] = buffer.data() + y * img.width * 2;
    std::vector<std::uint8_t> out;
    detail::PngState st;
    st.out = &out;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &st, detail::png_on_error, detail::png_on_warning);
    if (!png) throw Error("libpng: cannot allocate write struct");
    png_infop info = png_create_info_struct(png);
    volatile bool failed = false;
    if (!info || setjmp(png_jmpbuf(png))) {
        failed = true;
    } else {
        png_set_write_fn(png, &st, detail::png_write_mem, detail::png_flush_mem);
        png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 16,
                     PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        png_write_info(png, info);
        png_write_image(png, rows.data());
        png_write_end(png, nullptr);
    }
    png_destroy_write_struct(&png, info ? &info : nullptr);
    if (failed) throw Error(fmt::format("libpng: cannot encode image ({})", st.message));
    return out;
}

inline Png16Image read_png16_image(const fs::path& path) { return decode_png16(read_bytes(path), path.string()); }

inline void write_png16_image(const Png16Image& img, const fs::path& path) {
    const auto bytes = encode_png16(img);
    write_bytes(path, bytes.data(), bytes.size());
}

/// Sidecar next to a PNG: same path with the extension replaced by .json.
inline fs::path default_sidecar_path(const fs::path& png) {
    fs::path p = png;
    return p.replace_extension(".json");
}

inline Png16Sidecar parse_sidecar(const json& j) {
    JsonObject o(j, "");
    o.only({"scale", "offset", "invalid_value"});
    Png16Sidecar s;
    s.scale = o.number("scale");
    if (s.scale == 0.0) throw SchemaError(o.child("scale"), "must be non-zero");
    s.offset = o.optional_number("offset").value_or(0.0);
    if (o.has("invalid_value")) {
        const auto v = o.integer("invalid_value");
        if (v < 0 || v > 65535) throw SchemaError(o.child("invalid_value"), "must be within 0..65535");
        s.invalid_value = static_cast<std::uint16_t>(v);
    }
    return s;
}

inline Png16Sidecar read_sidecar(const fs::path& path) {
    if (!fs::exists(path)) throw FileError(fmt::format("sidecar {} does not exist", path.string()));
    try {
        return parse_sidecar(read_json(path));
    } catch (const SchemaError& e) {
        throw SchemaError(e.pointer(), fmt::format("{}: {}", path.string(), e.what()));
    }
}

inline json sidecar_json(const Png16Sidecar& s) {
    ordered_json j;
    j["scale"] = s.scale;
    j["offset"] = s.offset;
    if (s.invalid_value) j["invalid_value"] = *s.invalid_value;
    return j;
}

/// value = raw * scale + offset; raw == invalid_value (and, for depth,
/// non-positive values) are invalid.
inline DepthMap depth_from_png16(const Png16Image& img, const Png16Sidecar& s, DepthSpace space) {
    std::vector<double> v(img.pixels.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(img.pixels[i]) * s.scale + s.offset;
    DepthMap map = DepthMap::from_values(Tensor({1, img.height, img.width}, std::move(v)), space);
    if (s.invalid_value)
        for (std::size_t i = 0; i < img.pixels.size(); ++i)
            if (img.pixels[i] == *s.invalid_value) map.valid[i] = 0;
    return map;
}

/// Reads a 16-bit depth PNG; the sidecar is looked up next to it unless given.
inline DepthMap read_depth_png16(const fs::path& path, DepthSpace space = DepthSpace::depth,
                                 const std::optional<fs::path>& sidecar = std::nullopt) {
    const Png16Sidecar s = read_sidecar(sidecar.value_or(default_sidecar_path(path)));
    return depth_from_png16(read_png16_image(path), s, space);
}

}  // namespace affdepth::io
