#pragma once

#include <cstdint>
#include <cstring>
#include <limits>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "affdepth/errors.hpp"
#include "affdepth/io/files.hpp"
#include "affdepth/io/json_fields.hpp"
#include "affdepth/preimage.hpp"
#include "affdepth/refiner.hpp"
#include "affdepth/tensor.hpp"

namespace affdepth::io {

// Layout (all integers little-endian):
//   "PDRC" u32 version u32 record_count
//   per record: u16 name_len name u16 role_len role u32 group u32 heads
//               u8 width u8 rank u64 dims[rank]
//   payloads in record order, each product(dims) * width bytes.
inline constexpr char container_magic[4] = {'P', 'D', 'R', 'C'};
inline constexpr std::uint32_t container_version = 1;
inline constexpr std::size_t container_max_rank = 8;
inline constexpr std::size_t container_max_records = 1u << 20;

struct RasterRecord {
    std::string name;
    /// Free-form tag: "features", "self_attn", "cross_attn", "param", ...
    std::string role;
    /// Grouping index (the preimage stage for attention maps).
    std::uint32_t group = 0;
    std::uint32_t heads = 0;
    Shape shape;
    /// Bytes per scalar: 4 (float32) or 8 (float64).
    std::uint8_t width = 8;
    std::vector<std::uint8_t> payload;

    std::size_t elements() const {
        std::size_t n = 1;
        for (auto d : shape) n *= d;
        return n;
    }

    friend bool operator==(const RasterRecord&, const RasterRecord&) = default;
};

struct RasterContainer {
    std::vector<RasterRecord> records;

    const RasterRecord& find(std::string_view name) const {
        for (const auto& r : records)
            if (r.name == name) return r;
        throw DataError(fmt::format("container has no record named '{}'", name));
    }

    friend bool operator==(const RasterContainer&, const RasterContainer&) = default;
};

template <class T>
RasterRecord make_record(std::string name, std::string role, const BasicTensor<T>& t, std::uint32_t group = 0,
                         std::uint32_t heads = 0) {
    static_assert(sizeof(T) == 4 || sizeof(T) == 8, "container scalars are float32 or float64");
    RasterRecord r{std::move(name), std::move(role), group, heads, t.shape(), static_cast<std::uint8_t>(sizeof(T)), {}};
    r.payload.resize(t.size() * sizeof(T));
    std::memcpy(r.payload.data(), t.values().data(), r.payload.size());
    return r;
}

/// Tensor view of a record, widening float32 payloads.
template <class T = double>
BasicTensor<T> record_tensor(const RasterRecord& r) {
    std::vector<T> v(r.elements());
    if (r.payload.size() != v.size() * r.width)
        throw FormatError(fmt::format("record '{}': payload holds {} bytes, expected {}", r.name, r.payload.size(),
                                      v.size() * r.width));
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (r.width == 8) {
            double d;
            std::memcpy(&d, r.payload.data() + 8 * i, 8);
            v[i] = static_cast<T>(d);
        } else {
            float f;
            std::memcpy(&f, r.payload.data() + 4 * i, 4);
            v[i] = static_cast<T>(f);
        }
    }
    return BasicTensor<T>(r.shape, std::move(v));
}

inline std::vector<std::uint8_t> encode_container(const RasterContainer& c) {
    ByteWriter w;
    w.raw(container_magic, 4);
    w.scalar<std::uint32_t>(container_version);
    w.scalar<std::uint32_t>(static_cast<std::uint32_t>(c.records.size()));
    for (const auto& r : c.records) {
        if (r.name.size() > 0xffff || r.role.size() > 0xffff)
            throw FormatError(fmt::format("record '{}': name or role too long", r.name.substr(0, 64)));
        if (r.width != 4 && r.width != 8) throw FormatError(fmt::format("record '{}': width {} is not 4 or 8", r.name, r.width));
        if (r.shape.size() > container_max_rank)
            throw FormatError(fmt::format("record '{}': rank {} exceeds {}", r.name, r.shape.size(), container_max_rank));
        if (r.payload.size() != r.elements() * r.width)
            throw FormatError(fmt::format("record '{}': payload holds {} bytes, shape needs {}", r.name,
                                          r.payload.size(), r.elements() * r.width));
        w.scalar<std::uint16_t>(static_cast<std::uint16_t>(r.name.size()));
        w.string(r.name);
        w.scalar<std::uint16_t>(static_cast<std::uint16_t>(r.role.size()));
        w.string(r.role);
        w.scalar<std::uint32_t>(r.group);
        w.scalar<std::uint32_t>(r.heads);
        w.scalar<std::uint8_t>(r.width);
        w.scalar<std::uint8_t>(static_cast<std::uint8_t>(r.shape.size()));
        for (auto d : r.shape) w.scalar<std::uint64_t>(d);
    }
    for (const auto& r : c.records) w.raw(r.payload.data(), r.payload.size());
    return std::move(w.bytes);
}

inline RasterContainer decode_container(const std::vector<std::uint8_t>& bytes, const std::string& what) {
    ByteReader in(bytes, what);
    const std::string magic = in.string(4, "magic");
    if (std::memcmp(magic.data(), container_magic, 4) != 0)
        throw FormatError(fmt::format("{}: bad magic, not a raster container", what));
    const auto version = in.scalar<std::uint32_t>("version");
    if (version != container_version)
        throw UnsupportedFormat(fmt::format("{}: container version {} (this reader handles {})", what, version,
                                            container_version));
    const auto count = in.scalar<std::uint32_t>("record count");
    if (count > container_max_records) throw FormatError(fmt::format("{}: implausible record count {}", what, count));
    RasterContainer c;
    std::size_t payload_total = 0;
    for (std::uint32_t k = 0; k < count; ++k) {
        RasterRecord r;
        r.name = in.string(in.scalar<std::uint16_t>("name length"), "name");
        r.role = in.string(in.scalar<std::uint16_t>("role length"), "role");
        r.group = in.scalar<std::uint32_t>("group");
        r.heads = in.scalar<std::uint32_t>("heads");
        r.width = in.scalar<std::uint8_t>("width");
        if (r.width != 4 && r.width != 8)
            throw FormatError(fmt::format("{}: record '{}' has scalar width {}", what, r.name, r.width));
        const auto rank = in.scalar<std::uint8_t>("rank");
        if (rank > container_max_rank) throw FormatError(fmt::format("{}: record '{}' has rank {}", what, r.name, rank));
        std::size_t n = 1;
        for (std::uint8_t d = 0; d < rank; ++d) {
            const auto dim = in.scalar<std::uint64_t>("dimension");
            if (dim != 0 && n > bytes.size() / dim)
                throw FormatError(fmt::format("{}: record '{}' is larger than the file", what, r.name));
            n *= dim;
            r.shape.push_back(static_cast<std::size_t>(dim));
        }
        if (n > bytes.size() / r.width) throw FormatError(fmt::format("{}: record '{}' is larger than the file", what, r.name));
        payload_total += n * r.width;
        c.records.push_back(std::move(r));
    }
    if (payload_total > in.remaining())
        throw TruncatedError(fmt::format("{}: payloads need {} bytes, {} present", what, payload_total, in.remaining()));
    if (payload_total < in.remaining())
        throw FormatError(fmt::format("{}: {} unexpected bytes after the payloads", what, in.remaining() - payload_total));
    for (auto& r : c.records) {
        const std::size_t n = r.elements() * r.width;
        const auto* p = in.take(n, "payload");
        r.payload.assign(p, p + n);
    }
    return c;
}

inline RasterContainer read_container(const fs::path& path) { return decode_container(read_bytes(path), path.string()); }

inline void write_container(const RasterContainer& c, const fs::path& path) {
    const auto bytes = encode_container(c);
    write_bytes(path, bytes.data(), bytes.size());
}

// ---------------------------------------------------------------------------
// Preimage stages.
// ---------------------------------------------------------------------------

inline RasterContainer preimage_container(const std::vector<PreimageStage>& stages) {
    RasterContainer c;
    for (const auto& st : stages) {
        const auto g = static_cast<std::uint32_t>(st.scale_index);
        for (std::size_t k = 0; k < st.features.size(); ++k)
            c.records.push_back(make_record(fmt::format("stage{}/features{}", st.scale_index, k), "features",
                                            st.features[k].data, g));
        for (std::size_t k = 0; k < st.self_attn.size(); ++k)
            c.records.push_back(make_record(fmt::format("stage{}/self_attn{}", st.scale_index, k), "self_attn",
                                            st.self_attn[k].data, g, static_cast<std::uint32_t>(st.self_attn[k].heads)));
        for (std::size_t k = 0; k < st.cross_attn.size(); ++k)
            c.records.push_back(make_record(fmt::format("stage{}/cross_attn{}", st.scale_index, k), "cross_attn",
                                            st.cross_attn[k].data, g,
                                            static_cast<std::uint32_t>(st.cross_attn[k].heads)));
    }
    return c;
}

/// Stages in order of first appearance; records with other roles are ignored.
inline std::vector<PreimageStage> preimage_from_container(const RasterContainer& c) {
    std::vector<PreimageStage> stages;
    auto stage_for = [&](std::uint32_t g, std::size_t h, std::size_t w) -> PreimageStage& {
        for (auto& s : stages)
            if (s.scale_index == g) return s;
        stages.push_back(PreimageStage{g, h, w, {}, {}, {}});
        return stages.back();
    };
    for (const auto& r : c.records) {
        const bool attn = r.role == "self_attn" || r.role == "cross_attn";
        if (r.role != "features" && !attn) continue;
        const std::size_t rank = attn ? 4 : 3;
        if (r.shape.size() != rank)
            throw ShapeError(fmt::format("record '{}': {} must have rank {}, got {}", r.name, r.role, rank,
                                         shape_string(r.shape)));
        if (attn && r.shape[0] != r.heads)
            throw ShapeError(fmt::format("record '{}': {} heads declared but shape is {}", r.name, r.heads,
                                         shape_string(r.shape)));
        auto t = record_tensor(r);
        auto& st = stage_for(r.group, r.shape[1], r.shape[2]);
        if (r.role == "features") st.features.push_back({std::move(t)});
        else if (r.role == "self_attn") st.self_attn.push_back({r.heads, r.shape[1], r.shape[2], std::move(t)});
        else st.cross_attn.push_back({r.heads, r.shape[1], r.shape[2], std::move(t)});
    }
    for (const auto& s : stages) s.validate();
    return stages;
}

// ---------------------------------------------------------------------------
// Refiner parameters and configuration.
// ---------------------------------------------------------------------------

template <class T>
RasterContainer params_container(const ParameterSet<T>& p) {
    RasterContainer c;
    for (std::size_t i = 0; i < p.names.size(); ++i) c.records.push_back(make_record(p.names[i], "param", p.tensors[i]));
    return c;
}

/// Parameters in container order. When `expected` is given, names and shapes
/// must match it exactly.
template <class T = double>
ParameterSet<T> params_from_container(const RasterContainer& c, const ParameterSet<T>* expected = nullptr) {
    ParameterSet<T> p;
    for (const auto& r : c.records) {
        if (r.role != "param") continue;
        p.add(r.name, record_tensor<T>(r));
    }
    if (expected) {
        if (p.names != expected->names) throw DataError("parameter container does not match the refiner layout");
        for (std::size_t i = 0; i < p.tensors.size(); ++i)
            if (p.tensors[i].shape() != expected->tensors[i].shape())
                throw ShapeError(fmt::format("parameter '{}' is {} but the refiner expects {}", p.names[i],
                                             shape_string(p.tensors[i].shape()),
                                             shape_string(expected->tensors[i].shape())));
    }
    return p;
}

inline ordered_json config_json(const RefinerConfig& c) {
    ordered_json j;
    j["stages"] = c.stages;
    j["base_channels"] = c.base_channels;
    j["seg_classes"] = c.seg_classes;
    j["injection_mode"] = std::string(to_string(c.injection_mode));
    j["head_mode"] = std::string(to_string(c.head_mode));
    j["image_height"] = c.image_height;
    j["image_width"] = c.image_width;
    j["preimage_seed"] = c.preimage_seed;
    j["preimage"] = {{"feature_channels", c.preimage.feature_channels},
                     {"self_heads", c.preimage.self_heads},
                     {"cross_heads", c.preimage.cross_heads},
                     {"self_attn_max_pixels", c.preimage.self_attn_max_pixels}};
    return j;
}

/// Fields left out keep their defaults from `base`.
inline RefinerConfig config_from_json(const json& j, RefinerConfig base = {}) {
    JsonObject o(j, "");
    o.only({"stages", "base_channels", "seg_classes", "injection_mode", "head_mode", "image_height", "image_width",
            "preimage_seed", "preimage"});
    auto size = [&](const JsonObject& obj, const std::string& key, std::size_t& dst) {
        if (!obj.has(key)) return;
        const auto v = obj.integer(key);
        if (v < 0) throw SchemaError(obj.child(key), "must be non-negative");
        dst = static_cast<std::size_t>(v);
    };
    size(o, "stages", base.stages);
    size(o, "base_channels", base.base_channels);
    size(o, "seg_classes", base.seg_classes);
    size(o, "image_height", base.image_height);
    size(o, "image_width", base.image_width);
    if (o.has("preimage_seed")) {
        const auto v = o.integer("preimage_seed");
        if (v < 0) throw SchemaError(o.child("preimage_seed"), "must be non-negative");
        base.preimage_seed = static_cast<std::uint64_t>(v);
    }
    try {
        if (o.has("injection_mode")) base.injection_mode = parse_injection_mode(o.string("injection_mode"));
    } catch (const SchemaError&) {
        throw;
    } catch (const Error& e) {
        throw SchemaError(o.child("injection_mode"), e.what());
    }
    try {
        if (o.has("head_mode")) base.head_mode = parse_head_mode(o.string("head_mode"));
    } catch (const SchemaError&) {
        throw;
    } catch (const Error& e) {
        throw SchemaError(o.child("head_mode"), e.what());
    }
    if (o.has("preimage")) {
        const auto p = o.object("preimage");
        p.only({"feature_channels", "self_heads", "cross_heads", "self_attn_max_pixels"});
        size(p, "feature_channels", base.preimage.feature_channels);
        size(p, "self_heads", base.preimage.self_heads);
        size(p, "cross_heads", base.preimage.cross_heads);
        size(p, "self_attn_max_pixels", base.preimage.self_attn_max_pixels);
    }
    try {
        base.validate();
    } catch (const ShapeError& e) {
        throw SchemaError("/", e.what());
    }
    return base;
}

}  // namespace affdepth::io
