#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "affdepth/errors.hpp"
#include "affdepth/io/files.hpp"
#include "affdepth/io/json_fields.hpp"
#include "affdepth/metrics.hpp"

namespace affdepth::io {

inline constexpr int report_format_version = 1;

enum class ReportFormat { csv, json };

inline ReportFormat report_format_of(const fs::path& path) {
    const auto ext = path.extension().string();
    if (ext == ".csv") return ReportFormat::csv;
    if (ext == ".json") return ReportFormat::json;
    throw UnsupportedFormat(fmt::format("{}: report files end in .csv or .json", path.string()));
}

inline const std::vector<std::string>& report_csv_columns() {
    static const std::vector<std::string> cols{"method", "dataset", "image_id", "delta1", "absrel", "degenerate"};
    return cols;
}

namespace detail {

// Shortest representation that reads back to the same double.
inline std::string number_text(double v) {
    if (std::isnan(v)) return "nan";
    return fmt::format("{}", v);
}

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

/// RFC 4180 records; quoted fields may span lines.
inline std::vector<std::vector<std::string>> parse_csv(const std::string& text, const std::string& what) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool quoted = false, was_quoted = false;
    std::size_t line = 1;
    auto end_field = [&] {
        row.push_back(std::move(field));
        field.clear();
        was_quoted = false;
    };
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                if (c == '\n') ++line;
                field += c;
            }
            continue;
        }
        if (c == '"') {
            if (!field.empty() || was_quoted)
                throw FormatError(fmt::format("{}: line {}: stray quote inside a field", what, line));
            quoted = was_quoted = true;
        } else if (c == ',') {
            end_field();
        } else if (c == '\n' || c == '\r') {
            if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
            end_field();
            rows.push_back(std::move(row));
            row.clear();
            ++line;
        } else {
            if (was_quoted) throw FormatError(fmt::format("{}: line {}: text after a closing quote", what, line));
            field += c;
        }
    }
    if (quoted) throw TruncatedError(fmt::format("{}: unterminated quoted field", what));
    if (!field.empty() || !row.empty() || was_quoted) {
        end_field();
        rows.push_back(std::move(row));
    }
    return rows;
}

inline double parse_number(const std::string& s, const std::string& what) {
    if (s == "nan") return std::nan("");
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used == s.size() && std::isfinite(v)) return v;
    } catch (const std::exception&) {
    }
    throw FormatError(fmt::format("{}: '{}' is not a number", what, s));
}

inline json number_json(double v) { return std::isnan(v) ? json(nullptr) : json(v); }

}  // namespace detail

inline std::string report_csv(const MetricReport& r) {
    if (r.per_image.empty())
        throw DataError(fmt::format("report {}/{} has no per-image rows to write as CSV", r.method, r.dataset));
    std::string out;
    for (std::size_t k = 0; k < report_csv_columns().size(); ++k) out += (k ? "," : "") + report_csv_columns()[k];
    out += "\n";
    for (const auto& row : r.per_image)
        out += fmt::format("{},{},{},{},{},{}\n", detail::csv_field(r.method), detail::csv_field(r.dataset),
                           detail::csv_field(row.id), detail::number_text(row.delta1), detail::number_text(row.absrel),
                           row.degenerate ? "true" : "false");
    return out;
}

/// `run` is an optional metadata object (timing, host, argv); it is emitted
/// only when given so that default output depends on inputs alone.
inline std::string report_json(const MetricReport& r, const std::optional<ordered_json>& run = std::nullopt) {
    ordered_json j;
    j["format_version"] = report_format_version;
    if (run) j["run"] = *run;
    j["method"] = r.method;
    j["dataset"] = r.dataset;
    const Aggregate a = r.aggregate();
    j["aggregate"] = {{"delta1", detail::number_json(a.delta1)},
                      {"absrel", detail::number_json(a.absrel)},
                      {"images", a.images}};
    j["per_image"] = ordered_json::array();
    for (const auto& row : r.per_image) {
        ordered_json e;
        e["id"] = row.id;
        e["delta1"] = detail::number_json(row.delta1);
        e["absrel"] = detail::number_json(row.absrel);
        e["valid_count"] = row.valid_count;
        e["degenerate"] = row.degenerate;
        if (!row.category.empty()) e["category"] = row.category;
        j["per_image"].push_back(std::move(e));
    }
    return j.dump(2) + "\n";
}

inline MetricReport parse_report_csv(const std::string& text, const std::string& what) {
    const auto rows = detail::parse_csv(text, what);
    if (rows.empty()) throw FormatError(fmt::format("{}: empty CSV", what));
    if (rows[0] != report_csv_columns())
        throw FormatError(fmt::format("{}: header must be {}", what, fmt::join(report_csv_columns(), ",")));
    MetricReport r;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const auto& row = rows[i];
        const auto where = fmt::format("{}: row {}", what, i + 1);
        if (row.size() != report_csv_columns().size())
            throw FormatError(fmt::format("{}: {} fields, expected {}", where, row.size(), report_csv_columns().size()));
        if (i == 1) {
            r.method = row[0];
            r.dataset = row[1];
        } else if (row[0] != r.method || row[1] != r.dataset) {
            throw DataError(fmt::format("{}: mixes {}/{} with {}/{}", where, row[0], row[1], r.method, r.dataset));
        }
        ImageRecord rec;
        rec.id = row[2];
        if (rec.id.empty()) throw FormatError(fmt::format("{}: empty image id", where));
        rec.delta1 = detail::parse_number(row[3], where);
        rec.absrel = detail::parse_number(row[4], where);
        if (row[5] != "true" && row[5] != "false")
            throw FormatError(fmt::format("{}: degenerate must be true or false, got '{}'", where, row[5]));
        rec.degenerate = row[5] == "true";
        r.per_image.push_back(std::move(rec));
    }
    if (r.per_image.empty()) throw DataError(fmt::format("{}: report has no rows", what));
    return r;
}

/// Per-image rows when present; otherwise the aggregate becomes the summary.
inline MetricReport parse_report_json(const json& j) {
    JsonObject o(j, "");
    o.only({"format_version", "run", "method", "dataset", "aggregate", "per_image"});
    const auto version = o.integer("format_version");
    if (version != report_format_version)
        throw SchemaError(o.child("format_version"), fmt::format("unsupported version {}", version));
    MetricReport r;
    r.method = o.nonempty_string("method");
    r.dataset = o.nonempty_string("dataset");
    auto metric = [](const JsonObject& obj, const std::string& key) {
        if (obj.raw(key).is_null()) return std::nan("");
        return obj.number(key);
    };
    if (o.has("per_image")) {
        const auto& rows = o.array("per_image");
        for (std::size_t i = 0; i < rows.size(); ++i) {
            JsonObject e(rows[i], fmt::format("{}/{}", o.child("per_image"), i));
            e.only({"id", "delta1", "absrel", "valid_count", "degenerate", "category"});
            ImageRecord rec;
            rec.id = e.nonempty_string("id");
            rec.delta1 = metric(e, "delta1");
            rec.absrel = metric(e, "absrel");
            if (e.has("valid_count")) {
                const auto n = e.integer("valid_count");
                if (n < 0) throw SchemaError(e.child("valid_count"), "must be non-negative");
                rec.valid_count = static_cast<std::size_t>(n);
            }
            rec.degenerate = e.has("degenerate") && e.boolean("degenerate");
            rec.category = e.optional_string("category").value_or("");
            r.per_image.push_back(std::move(rec));
        }
    }
    if (r.per_image.empty()) {
        const auto a = o.object("aggregate");
        Aggregate s;
        s.delta1 = metric(a, "delta1");
        s.absrel = metric(a, "absrel");
        if (a.has("images")) s.images = static_cast<std::size_t>(std::max<std::int64_t>(0, a.integer("images")));
        r.summary = s;
    }
    return r;
}

inline void write_report(const MetricReport& r, const fs::path& path, ReportFormat format,
                         const std::optional<ordered_json>& run = std::nullopt) {
    write_text(path, format == ReportFormat::csv ? report_csv(r) : report_json(r, run));
}

inline void write_report(const MetricReport& r, const fs::path& path) { write_report(r, path, report_format_of(path)); }

inline MetricReport read_report(const fs::path& path) {
    const auto format = report_format_of(path);
    const auto text = read_text(path);
    if (format == ReportFormat::csv) return parse_report_csv(text, path.string());
    try {
        return parse_report_json(parse_json(text, path.string()));
    } catch (const SchemaError& e) {
        throw SchemaError(e.pointer(), fmt::format("{}: {}", path.string(), e.what()));
    }
}

}  // namespace affdepth::io
