#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "affdepth/depth_map.hpp"
#include "affdepth/errors.hpp"
#include "affdepth/losses.hpp"
#include "affdepth/metrics.hpp"

namespace affdepth {

/// `pred` mapped by the least-squares scale and shift that best fit
/// `reference` over their joint mask. The result lives in the reference's
/// space and keeps the prediction's validity.
inline DepthMap align_to_reference(const DepthMap& pred, const DepthMap& reference) {
    if (pred.values.shape() != reference.values.shape())
        throw ShapeError(fmt::format("align_to_reference: prediction {} vs reference {}",
                                     shape_string(pred.values.shape()), shape_string(reference.values.shape())));
    const Mask mask = joint_mask(reference, pred);
    if (std::none_of(mask.begin(), mask.end(), [](auto v) { return v != 0; }))
        throw DegenerateError("align_to_reference: no pixel is valid in both maps");
    const AffineFit fit = fit_affine<double, double>(pred.values.values(), reference.values.values(), &mask);
    std::vector<double> out(pred.values.size(), 0.0);
    for (std::size_t i = 0; i < out.size(); ++i)
        if (pred.valid[i]) out[i] = fit.scale * pred.values[i] + fit.shift;
    return DepthMap{Tensor(pred.values.shape(), std::move(out)), pred.valid, reference.space};
}

/// Element-wise mean of two maps that already share a reference frame;
/// valid where both are.
inline DepthMap average_aligned(const DepthMap& a, const DepthMap& b) {
    if (a.values.shape() != b.values.shape())
        throw ShapeError(fmt::format("pixel_average: maps are {} and {}", shape_string(a.values.shape()),
                                     shape_string(b.values.shape())));
    std::vector<double> out(a.values.size(), 0.0);
    Mask valid(a.valid.size(), 0);
    bool any = false;
    for (std::size_t i = 0; i < out.size(); ++i)
        if (a.valid[i] && b.valid[i]) {
            out[i] = 0.5 * (a.values[i] + b.values[i]);
            valid[i] = 1;
            any = true;
        }
    if (!any) throw DegenerateError("pixel_average: the two validity masks are disjoint");
    return DepthMap{Tensor(a.values.shape(), std::move(out)), std::move(valid), a.space};
}

/// Aligns both predictions to `reference` (the ground truth) and averages
/// them pixel-wise.
inline DepthMap pixel_average(const DepthMap& a, const DepthMap& b, const DepthMap& reference) {
    return average_aligned(align_to_reference(a, reference), align_to_reference(b, reference));
}

struct OracleResult {
    MetricReport report;
    /// Share of images taken from each input, in [0, 1].
    double fraction_a = 0.0, fraction_b = 0.0;
    /// Per image of the oracle report: 0 = from a, 1 = from b.
    std::vector<int> source;
    /// Images where both inputs scored exactly the same (resolved to a).
    std::size_t ties = 0;
};

/// Per image, keeps whichever of the two reports scores better on
/// `criterion`. Images follow the order of `a`; ties go to `a`.
///
/// A degenerate image never wins against a non-degenerate one.
inline OracleResult image_oracle(const MetricReport& a, const MetricReport& b, Metric criterion = Metric::delta1) {
    std::map<std::string, const ImageRecord*> by_id;
    for (const auto& r : b.per_image)
        if (!by_id.emplace(r.id, &r).second)
            throw DataError(fmt::format("image_oracle: duplicate image '{}' in {}", r.id, b.method));
    std::vector<std::string> only_a, only_b;
    std::map<std::string, int> seen_a;
    for (const auto& r : a.per_image) {
        if (seen_a[r.id]++) throw DataError(fmt::format("image_oracle: duplicate image '{}' in {}", r.id, a.method));
        if (!by_id.count(r.id)) only_a.push_back(r.id);
    }
    for (const auto& r : b.per_image)
        if (!seen_a.count(r.id)) only_b.push_back(r.id);
    if (!only_a.empty() || !only_b.empty()) {
        std::vector<std::string> items;
        for (const auto& id : only_a) items.push_back(fmt::format("{} (only in {})", id, a.method));
        for (const auto& id : only_b) items.push_back(fmt::format("{} (only in {})", id, b.method));
        throw DataError("image_oracle: image sets differ", items);
    }
    if (a.per_image.empty()) throw DataError("image_oracle: no images");

    OracleResult out;
    out.report.method = fmt::format("oracle({}, {})", a.method, b.method);
    out.report.dataset = a.dataset;
    std::size_t from_b = 0;
    for (const auto& ra : a.per_image) {
        const ImageRecord& rb = *by_id.at(ra.id);
        bool take_b;
        if (ra.degenerate != rb.degenerate) {
            take_b = ra.degenerate;
        } else {
            const double va = metric_value(ra, criterion), vb = metric_value(rb, criterion);
            take_b = better(vb, va, criterion);
            if (va == vb) ++out.ties;
        }
        out.report.per_image.push_back(take_b ? rb : ra);
        out.source.push_back(take_b ? 1 : 0);
        from_b += take_b ? 1 : 0;
    }
    const double n = static_cast<double>(a.per_image.size());
    out.fraction_b = static_cast<double>(from_b) / n;
    out.fraction_a = static_cast<double>(a.per_image.size() - from_b) / n;
    return out;
}

}  // namespace affdepth
