#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>

#include "affdepth/errors.hpp"
#include "affdepth/tensor.hpp"

namespace affdepth {

/// Per-pixel validity, 1 = valid.
using Mask = std::vector<std::uint8_t>;

enum class DepthSpace { depth, disparity };

inline std::string_view to_string(DepthSpace s) { return s == DepthSpace::depth ? "depth" : "disparity"; }

inline DepthSpace parse_depth_space(std::string_view s) {
    if (s == "depth") return DepthSpace::depth;
    if (s == "disparity") return DepthSpace::disparity;
    throw Error(fmt::format("unknown depth space '{}' (expected depth or disparity)", s));
}

/// Single-channel depth or disparity raster (1 x H x W) with a validity mask.
struct DepthMap {
    Tensor values;
    Mask valid;
    DepthSpace space = DepthSpace::depth;

    std::size_t height() const { return values.dim(1); }
    std::size_t width() const { return values.dim(2); }

    std::size_t valid_count() const {
        std::size_t n = 0;
        for (auto v : valid) n += v ? 1 : 0;
        return n;
    }

    /// Valid where finite (and positive for space = depth).
    static DepthMap from_values(Tensor values, DepthSpace space) {
        if (values.rank() != 3 || values.dim(0) != 1)
            throw ShapeError(fmt::format("depth map must be 1xHxW, got {}", shape_string(values.shape())));
        Mask valid(values.size());
        for (std::size_t i = 0; i < values.size(); ++i) valid[i] = admissible(values[i], space) ? 1 : 0;
        return DepthMap{std::move(values), std::move(valid), space};
    }

    static bool admissible(double v, DepthSpace space) {
        return std::isfinite(v) && (space != DepthSpace::depth || v > 0.0);
    }

    void validate() const {
        if (values.rank() != 3 || values.dim(0) != 1)
            throw ShapeError(fmt::format("depth map must be 1xHxW, got {}", shape_string(values.shape())));
        if (valid.size() != values.size())
            throw ShapeError(fmt::format("mask holds {} entries for {} pixels", valid.size(), values.size()));
        for (std::size_t i = 0; i < valid.size(); ++i)
            if (valid[i] && !admissible(values[i], space))
                throw NumericError(fmt::format("valid pixel {} holds inadmissible {} value {}", i, to_string(space),
                                               values[i]));
    }
};

}  // namespace affdepth
