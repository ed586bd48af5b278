#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace affdepth {

/// Base class of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or raster resolutions.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Misuse of the autodiff graph (backward on a non-scalar, mixing graphs, ...).
class GraphError : public Error {
public:
    using Error::Error;
};

/// Input that carries no usable signal: constant ground truth, too few valid pixels.
class DegenerateError : public Error {
public:
    using Error::Error;
};

/// Non-finite value where a finite one is required.
class NumericError : public Error {
public:
    using Error::Error;
};

/// A file that cannot be opened, read or written.
class FileError : public Error {
public:
    using Error::Error;
};

/// Malformed file contents.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Well-formed file of a variant we do not read (e.g. colour PFM, 8-bit PNG depth).
class UnsupportedFormat : public FormatError {
public:
    using FormatError::FormatError;
};

/// File ends before its header says it should.
class TruncatedError : public FormatError {
public:
    using FormatError::FormatError;
};

/// JSON document that violates its schema; pointer() is an RFC 6901 path.
class SchemaError : public Error {
public:
    SchemaError(std::string pointer, const std::string& what)
        : Error(pointer + ": " + what), pointer_(std::move(pointer)) {}

    const std::string& pointer() const noexcept { return pointer_; }

private:
    std::string pointer_;
};

/// Dataset-level failure that names the offending items (missing predictions, ...).
class DataError : public Error {
public:
    DataError(const std::string& what, std::vector<std::string> items = {})
        : Error(compose(what, items)), items_(std::move(items)) {}

    const std::vector<std::string>& items() const noexcept { return items_; }

private:
    static std::string compose(const std::string& what, const std::vector<std::string>& items) {
        std::string msg = what;
        if (!items.empty()) {
            msg += ":";
            for (const auto& it : items) {
                msg += " ";
                msg += it;
            }
        }
        return msg;
    }

    std::vector<std::string> items_;
};

}  // namespace affdepth
