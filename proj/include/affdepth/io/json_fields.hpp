#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>

#include <fmt/format.h>
#include <json.hpp>

#include "affdepth/errors.hpp"
#include "affdepth/io/files.hpp"

namespace affdepth::io {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace detail {

inline std::string child_pointer(const std::string& parent, const std::string& key) {
    std::string escaped;
    for (char c : key) {
        if (c == '~') escaped += "~0";
        else if (c == '/') escaped += "~1";
        else escaped += c;
    }
    return parent + "/" + escaped;
}

}  // namespace detail

/// Typed accessors over a JSON object that report violations as SchemaError
/// with an RFC 6901 pointer.
class JsonObject {
public:
    JsonObject(const json& j, std::string pointer) : j_(j), pointer_(std::move(pointer)) {
        if (!j_.is_object()) throw SchemaError(where(), "expected an object");
    }

    const std::string& pointer() const { return pointer_; }
    bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }
    const json& raw(const std::string& key) const {
        if (!j_.contains(key)) throw SchemaError(child(key), "required field is missing");
        return j_.at(key);
    }
    std::string child(const std::string& key) const { return detail::child_pointer(pointer_, key); }

    std::string string(const std::string& key) const {
        const auto& v = raw(key);
        if (!v.is_string()) throw SchemaError(child(key), "expected a string");
        return v.get<std::string>();
    }
    std::string nonempty_string(const std::string& key) const {
        auto s = string(key);
        if (s.empty()) throw SchemaError(child(key), "must not be empty");
        return s;
    }
    std::optional<std::string> optional_string(const std::string& key) const {
        if (!has(key)) return std::nullopt;
        return string(key);
    }
    double number(const std::string& key) const {
        const auto& v = raw(key);
        if (!v.is_number()) throw SchemaError(child(key), "expected a number");
        const double d = v.get<double>();
        if (!std::isfinite(d)) throw SchemaError(child(key), "must be finite");
        return d;
    }
    std::optional<double> optional_number(const std::string& key) const {
        if (!has(key)) return std::nullopt;
        return number(key);
    }
    std::int64_t integer(const std::string& key) const {
        const auto& v = raw(key);
        if (!v.is_number_integer()) throw SchemaError(child(key), "expected an integer");
        return v.get<std::int64_t>();
    }
    bool boolean(const std::string& key) const {
        const auto& v = raw(key);
        if (!v.is_boolean()) throw SchemaError(child(key), "expected true or false");
        return v.get<bool>();
    }
    const json& array(const std::string& key) const {
        const auto& v = raw(key);
        if (!v.is_array()) throw SchemaError(child(key), "expected an array");
        return v;
    }
    JsonObject object(const std::string& key) const { return JsonObject(raw(key), child(key)); }

    /// Rejects keys outside `allowed`; typos in hand-written files otherwise
    /// pass silently.
    void only(std::initializer_list<std::string_view> allowed) const {
        for (const auto& [k, v] : j_.items()) {
            bool ok = false;
            for (auto a : allowed) ok = ok || a == k;
            if (!ok) throw SchemaError(child(k), "unknown field");
        }
    }

private:
    std::string where() const { return pointer_.empty() ? std::string("/") : pointer_; }
    const json& j_;
    std::string pointer_;
};

/// Parses a whole JSON document; syntax errors become FormatError.
inline json parse_json(const std::string& text, const std::string& what) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw FormatError(fmt::format("{}: invalid JSON ({})", what, e.what()));
    }
}

inline json read_json(const fs::path& path) { return parse_json(read_text(path), path.string()); }

}  // namespace affdepth::io
