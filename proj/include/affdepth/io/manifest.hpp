#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "affdepth/depth_map.hpp"
#include "affdepth/errors.hpp"
#include "affdepth/io/files.hpp"
#include "affdepth/io/json_fields.hpp"
#include "affdepth/io/pfm.hpp"
#include "affdepth/io/png16.hpp"
#include "affdepth/metrics.hpp"

namespace affdepth::io {

inline constexpr int manifest_format_version = 1;

enum class GtFormat { pfm, png16 };

inline std::string_view to_string(GtFormat f) { return f == GtFormat::pfm ? "pfm" : "png16"; }

struct ManifestEntry {
    std::string id;
    /// Paths are absolute after loading (resolved against the manifest's directory).
    fs::path gt;
    GtFormat format = GtFormat::pfm;
    std::string category;
    /// PFM mask: non-zero finite samples are valid.
    std::optional<fs::path> mask;
    /// png16 only; defaults to the PNG path with a .json extension.
    std::optional<fs::path> sidecar;
};

struct Manifest {
    int format_version = manifest_format_version;
    std::string dataset;
    DepthSpace space = DepthSpace::depth;
    /// In GT depth units; pixels beyond it are invalid.
    std::optional<double> depth_cap;
    std::vector<ManifestEntry> entries;
    /// Directory the relative paths were resolved against.
    fs::path root;
};

/// Validates the document and resolves paths against `root`. File existence
/// is not checked here.
inline Manifest parse_manifest(const json& j, const fs::path& root) {
    JsonObject o(j, "");
    o.only({"format_version", "dataset", "space", "depth_cap", "entries"});
    Manifest m;
    m.root = root;
    const auto version = o.integer("format_version");
    if (version != manifest_format_version)
        throw SchemaError(o.child("format_version"),
                          fmt::format("unsupported version {} (expected {})", version, manifest_format_version));
    m.dataset = o.nonempty_string("dataset");
    const auto space = o.string("space");
    if (space != "depth" && space != "disparity")
        throw SchemaError(o.child("space"), fmt::format("'{}' is not depth or disparity", space));
    m.space = parse_depth_space(space);
    if (o.has("depth_cap")) {
        m.depth_cap = o.number("depth_cap");
        if (!(*m.depth_cap > 0.0)) throw SchemaError(o.child("depth_cap"), "must be positive");
    }
    const auto& entries = o.array("entries");
    std::set<std::string> ids;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        JsonObject e(entries[i], fmt::format("{}/{}", o.child("entries"), i));
        e.only({"id", "gt", "format", "category", "mask", "sidecar"});
        ManifestEntry entry;
        entry.id = e.nonempty_string("id");
        if (entry.id.find_first_of("/\\") != std::string::npos || entry.id == "." || entry.id == "..")
            throw SchemaError(e.child("id"), fmt::format("'{}' cannot be used as a file name", entry.id));
        if (!ids.insert(entry.id).second) throw SchemaError(e.child("id"), fmt::format("duplicate id '{}'", entry.id));
        entry.gt = root / e.nonempty_string("gt");
        const auto format = e.string("format");
        if (format == "pfm") entry.format = GtFormat::pfm;
        else if (format == "png16") entry.format = GtFormat::png16;
        else throw SchemaError(e.child("format"), fmt::format("'{}' is not pfm or png16", format));
        entry.category = e.optional_string("category").value_or("");
        if (auto p = e.optional_string("mask")) entry.mask = root / *p;
        if (auto p = e.optional_string("sidecar")) {
            if (entry.format != GtFormat::png16) throw SchemaError(e.child("sidecar"), "only png16 entries take a sidecar");
            entry.sidecar = root / *p;
        }
        m.entries.push_back(std::move(entry));
    }
    return m;
}

inline fs::path sidecar_of(const ManifestEntry& e) { return e.sidecar.value_or(default_sidecar_path(e.gt)); }

/// Loads and validates a manifest; every referenced file must exist.
inline Manifest load_manifest(const fs::path& path) {
    if (!fs::exists(path)) throw FileError(fmt::format("manifest {} does not exist", path.string()));
    Manifest m;
    try {
        m = parse_manifest(read_json(path), path.parent_path());
    } catch (const SchemaError& e) {
        throw SchemaError(e.pointer(), fmt::format("{}: {}", path.string(), e.what()));
    }
    std::vector<std::string> missing;
    auto check = [&](const ManifestEntry& e, const fs::path& p, const char* what) {
        if (!fs::is_regular_file(p)) missing.push_back(fmt::format("{}: {} {}", e.id, what, p.string()));
    };
    for (const auto& e : m.entries) {
        check(e, e.gt, "ground truth");
        if (e.mask) check(e, *e.mask, "mask");
        if (e.format == GtFormat::png16) check(e, sidecar_of(e), "sidecar");
    }
    if (!missing.empty()) throw DataError(fmt::format("{}: referenced files are missing", path.string()), missing);
    return m;
}

inline ordered_json manifest_json(const Manifest& m) {
    auto rel = [&](const fs::path& p) { return p.lexically_relative(m.root).generic_string(); };
    ordered_json j;
    j["format_version"] = m.format_version;
    j["dataset"] = m.dataset;
    j["space"] = std::string(to_string(m.space));
    if (m.depth_cap) j["depth_cap"] = *m.depth_cap;
    j["entries"] = ordered_json::array();
    for (const auto& e : m.entries) {
        ordered_json je;
        je["id"] = e.id;
        je["gt"] = rel(e.gt);
        je["format"] = std::string(to_string(e.format));
        if (!e.category.empty()) je["category"] = e.category;
        if (e.mask) je["mask"] = rel(*e.mask);
        if (e.sidecar) je["sidecar"] = rel(*e.sidecar);
        j["entries"].push_back(std::move(je));
    }
    return j;
}

inline void write_manifest(const Manifest& m, const fs::path& path) { write_text(path, manifest_json(m).dump(2) + "\n"); }

/// Ground truth of one entry with the mask file and depth cap applied.
inline DepthMap load_ground_truth(const Manifest& m, const ManifestEntry& e) {
    DepthMap gt = e.format == GtFormat::pfm ? read_pfm(e.gt, m.space) : read_depth_png16(e.gt, m.space, sidecar_of(e));
    if (e.mask) {
        const auto mask = read_pfm_image(*e.mask);
        if (mask.width != gt.width() || mask.height != gt.height())
            throw ShapeError(fmt::format("{}: mask is {}x{} but ground truth is {}x{}", e.id, mask.width, mask.height,
                                         gt.width(), gt.height()));
        for (std::size_t i = 0; i < gt.valid.size(); ++i)
            if (!(std::isfinite(mask.pixels[i]) && mask.pixels[i] != 0.0f)) gt.valid[i] = 0;
    }
    if (m.depth_cap) gt = apply_depth_cap(gt, *m.depth_cap);
    return gt;
}

}  // namespace affdepth::io
