#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include <fmt/format.h>

#include "affdepth/depth_map.hpp"
#include "affdepth/errors.hpp"
#include "affdepth/losses.hpp"
#include "affdepth/tensor.hpp"

namespace affdepth {

inline constexpr double delta1_threshold = 1.25;
inline constexpr double min_aligned_depth = 1e-6;

struct MetricOptions {
    /// Fit scale and shift of the prediction to the ground truth first.
    /// Off = raw metrics of an already aligned prediction.
    bool align = true;
};

struct ImageMetrics {
    double delta1 = 0.0;  // fraction in [0, 1]
    double absrel = 0.0;
    std::size_t valid_count = 0;
    /// The prediction was constant over the joint mask (shift-only alignment).
    bool degenerate = false;
    double scale = 1.0, shift = 0.0;
};

/// Pixels valid in both maps with a positive ground truth.
inline Mask joint_mask(const DepthMap& gt, const DepthMap& pred) {
    Mask m(gt.values.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = gt.valid[i] && pred.valid[i] && gt.values[i] > 0.0 ? 1 : 0;
    return m;
}

/// delta1 and AbsRel of `pred` against `gt` after per-image affine alignment.
///
/// Aligned values are clamped to >= 1e-6 for AbsRel; pixels whose aligned
/// value was <= 0 before clamping count as delta1 failures.
inline ImageMetrics compute_metrics(const DepthMap& gt, const DepthMap& pred, const MetricOptions& options = {}) {
    gt.validate();
    if (pred.values.rank() != 3 || pred.values.dim(0) != 1 || pred.valid.size() != pred.values.size())
        throw ShapeError(fmt::format("compute_metrics: malformed prediction of shape {}", shape_string(pred.values.shape())));
    // Affine-invariant predictions may be negative; only finiteness is required.
    for (std::size_t i = 0; i < pred.valid.size(); ++i)
        if (pred.valid[i] && !std::isfinite(pred.values[i]))
            throw NumericError(fmt::format("compute_metrics: prediction pixel {} is not finite", i));
    if (gt.height() != pred.height() || gt.width() != pred.width())
        throw ShapeError(fmt::format("compute_metrics: prediction is {}x{} but ground truth is {}x{}", pred.height(),
                                     pred.width(), gt.height(), gt.width()));
    const Mask mask = joint_mask(gt, pred);
    ImageMetrics out;
    for (auto v : mask) out.valid_count += v;
    if (out.valid_count == 0) throw DegenerateError("compute_metrics: no pixel is valid in both maps");

    if (options.align) {
        const AffineFit fit = fit_affine<double, double>(pred.values.values(), gt.values.values(), &mask);
        out.scale = fit.scale;
        out.shift = fit.shift;
        out.degenerate = fit.degenerate;
    }
    std::size_t hits = 0;
    double rel = 0.0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (!mask[i]) continue;
        const double g = gt.values[i];
        const double raw = out.scale * pred.values[i] + out.shift;
        const double d = std::max(raw, min_aligned_depth);
        rel += std::abs(g - d) / g;
        if (raw > 0.0 && std::max(d / g, g / d) < delta1_threshold) ++hits;
    }
    out.delta1 = static_cast<double>(hits) / static_cast<double>(out.valid_count);
    out.absrel = rel / static_cast<double>(out.valid_count);
    return out;
}

/// Half-pixel bilinear resize; an output pixel is valid only if every tap
/// with non-zero weight is valid.
inline DepthMap resize_bilinear(const DepthMap& in, std::size_t H, std::size_t W) {
    const std::size_t h = in.height(), w = in.width();
    if (h == H && w == W) return in;
    auto taps = [](std::size_t out_i, std::size_t n_out, std::size_t n_in) {
        const double pos = (static_cast<double>(out_i) + 0.5) * static_cast<double>(n_in) / static_cast<double>(n_out) - 0.5;
        const double c = std::clamp(pos, 0.0, static_cast<double>(n_in - 1));
        const auto i0 = static_cast<std::size_t>(std::floor(c));
        const std::size_t i1 = std::min(i0 + 1, n_in - 1);
        return std::tuple{i0, i1, c - static_cast<double>(i0)};
    };
    std::vector<double> out(H * W);
    Mask valid(H * W);
    for (std::size_t y = 0; y < H; ++y) {
        const auto [y0, y1, fy] = taps(y, H, h);
        for (std::size_t x = 0; x < W; ++x) {
            const auto [x0, x1, fx] = taps(x, W, w);
            const std::size_t idx[4] = {y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1};
            const double wt[4] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
            double v = 0.0;
            bool ok = true;
            for (int k = 0; k < 4; ++k) {
                if (wt[k] == 0.0) continue;
                if (!in.valid[idx[k]]) ok = false;
                v += wt[k] * in.values[idx[k]];
            }
            out[y * W + x] = ok ? v : 0.0;
            valid[y * W + x] = ok ? 1 : 0;
        }
    }
    return DepthMap{Tensor({1, H, W}, std::move(out)), std::move(valid), in.space};
}

/// disparity = 1 / depth (and back) on valid pixels; non-positive values become invalid.
inline DepthMap convert_space(const DepthMap& in, DepthSpace target) {
    if (in.space == target) return in;
    std::vector<double> out(in.values.size(), 0.0);
    Mask valid(in.valid.size(), 0);
    for (std::size_t i = 0; i < out.size(); ++i)
        if (in.valid[i] && in.values[i] > 0.0) {
            out[i] = 1.0 / in.values[i];
            valid[i] = 1;
        }
    return DepthMap{Tensor(in.values.shape(), std::move(out)), std::move(valid), target};
}

/// Invalidates ground truth beyond `cap` depth units (in disparity space:
/// below 1 / cap).
inline DepthMap apply_depth_cap(const DepthMap& gt, double cap) {
    DepthMap out = gt;
    for (std::size_t i = 0; i < out.valid.size(); ++i) {
        const double v = gt.values[i];
        const bool beyond = gt.space == DepthSpace::depth ? v > cap : v < 1.0 / cap;
        if (beyond) out.valid[i] = 0;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reports and aggregation.
// ---------------------------------------------------------------------------

struct ImageRecord {
    std::string id;
    double delta1 = 0.0;
    double absrel = 0.0;
    std::size_t valid_count = 0;
    bool degenerate = false;
    std::string category;  // empty = none
};

struct Aggregate {
    double delta1 = 0.0;
    double absrel = 0.0;
    /// Non-degenerate images the means were taken over.
    std::size_t images = 0;
};

/// Unweighted means over non-degenerate images.
inline Aggregate aggregate(const std::vector<ImageRecord>& rows) {
    Aggregate a;
    for (const auto& r : rows) {
        if (r.degenerate) continue;
        a.delta1 += r.delta1;
        a.absrel += r.absrel;
        ++a.images;
    }
    if (a.images == 0) {
        a.delta1 = a.absrel = std::numeric_limits<double>::quiet_NaN();
        return a;
    }
    a.delta1 /= static_cast<double>(a.images);
    a.absrel /= static_cast<double>(a.images);
    return a;
}

/// One method on one dataset.
struct MetricReport {
    std::string method;
    std::string dataset;
    std::vector<ImageRecord> per_image;
    /// Aggregate given directly (reports transcribed from published tables
    /// carry no per-image rows).
    std::optional<Aggregate> summary;

    Aggregate aggregate() const {
        if (!per_image.empty()) return affdepth::aggregate(per_image);
        if (summary) return *summary;
        throw DataError(fmt::format("report {}/{} has neither per-image rows nor an aggregate", method, dataset));
    }
};

enum class Metric { delta1, absrel };

inline std::string_view to_string(Metric m) { return m == Metric::delta1 ? "delta1" : "absrel"; }

inline Metric parse_metric(std::string_view s) {
    if (s == "delta1") return Metric::delta1;
    if (s == "absrel") return Metric::absrel;
    throw Error(fmt::format("unknown metric '{}' (expected delta1 or absrel)", s));
}

inline double metric_value(const ImageRecord& r, Metric m) { return m == Metric::delta1 ? r.delta1 : r.absrel; }
inline double metric_value(const Aggregate& a, Metric m) { return m == Metric::delta1 ? a.delta1 : a.absrel; }

/// True if `a` is strictly better than `b` (delta1 higher, AbsRel lower).
inline bool better(double a, double b, Metric m) { return m == Metric::delta1 ? a > b : a < b; }

enum class TieRule {
    /// Tied entries share the best of their positions ("1224" ranking).
    competition,
    /// Tied entries share the mean of their positions.
    average,
};

struct RankColumn {
    std::string dataset;
    Metric metric;
};

struct MethodRanking {
    std::vector<std::string> methods;
    std::vector<RankColumn> columns;
    /// ranks[method][column]
    std::vector<std::vector<double>> ranks;
    std::vector<double> average_rank;
};

/// Ranks methods per (dataset, metric) column and averages across columns.
///
/// Methods and datasets keep their first-appearance order. Every method must
/// have exactly one report per dataset.
inline MethodRanking average_rank(const std::vector<MetricReport>& reports, TieRule ties = TieRule::competition) {
    if (reports.empty()) throw DataError("average_rank: no reports");
    MethodRanking out;
    std::vector<std::string> datasets;
    auto index_of = [](std::vector<std::string>& v, const std::string& s) {
        auto it = std::find(v.begin(), v.end(), s);
        if (it != v.end()) return static_cast<std::size_t>(it - v.begin());
        v.push_back(s);
        return v.size() - 1;
    };
    std::map<std::pair<std::size_t, std::size_t>, Aggregate> grid;
    for (const auto& r : reports) {
        const auto mi = index_of(out.methods, r.method);
        const auto di = index_of(datasets, r.dataset);
        if (!grid.emplace(std::pair{mi, di}, r.aggregate()).second)
            throw DataError(fmt::format("average_rank: duplicate report for {} on {}", r.method, r.dataset));
    }
    std::vector<std::string> holes;
    for (std::size_t m = 0; m < out.methods.size(); ++m)
        for (std::size_t d = 0; d < datasets.size(); ++d)
            if (!grid.count({m, d})) holes.push_back(fmt::format("{}/{}", out.methods[m], datasets[d]));
    if (!holes.empty()) throw DataError("average_rank: incomplete grid, missing", holes);

    for (const auto& d : datasets) {
        out.columns.push_back({d, Metric::delta1});
        out.columns.push_back({d, Metric::absrel});
    }
    const std::size_t M = out.methods.size();
    out.ranks.assign(M, std::vector<double>(out.columns.size()));
    for (std::size_t c = 0; c < out.columns.size(); ++c) {
        const std::size_t d = c / 2;
        const Metric metric = out.columns[c].metric;
        for (std::size_t m = 0; m < M; ++m) {
            const double v = metric_value(grid.at({m, d}), metric);
            std::size_t ahead = 0, equal = 0;
            for (std::size_t o = 0; o < M; ++o) {
                const double u = metric_value(grid.at({o, d}), metric);
                if (better(u, v, metric)) ++ahead;
                else if (u == v) ++equal;  // includes m itself
            }
            out.ranks[m][c] = ties == TieRule::competition
                                  ? static_cast<double>(ahead + 1)
                                  : static_cast<double>(ahead) + static_cast<double>(equal + 1) / 2.0;
        }
    }
    for (const auto& row : out.ranks) {
        double s = 0.0;
        for (auto r : row) s += r;
        out.average_rank.push_back(s / static_cast<double>(row.size()));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Box statistics.
// ---------------------------------------------------------------------------

/// Quantile by linear interpolation between order statistics of sorted data
/// (position p * (n - 1)).
inline double quantile_sorted(const std::vector<double>& sorted, double p) {
    if (sorted.empty()) throw DataError("quantile of an empty list");
    const double pos = p * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

struct BoxStats {
    std::string category;
    std::size_t count = 0;
    double median = 0.0, q1 = 0.0, q3 = 0.0, iqr = 0.0;
    /// Most extreme data points inside [q1 - 1.5 iqr, q3 + 1.5 iqr].
    double whisker_low = 0.0, whisker_high = 0.0;
    std::vector<std::string> outlier_ids;
    std::vector<double> outlier_values;
};

inline BoxStats box_stats(const std::vector<double>& values, const std::vector<std::string>& ids = {}) {
    if (values.empty()) throw DataError("box_stats: no values");
    if (!ids.empty() && ids.size() != values.size())
        throw ShapeError(fmt::format("box_stats: {} ids for {} values", ids.size(), values.size()));
    std::vector<double> sorted = values;
    std::sort(sorted.begin(), sorted.end());
    BoxStats b;
    b.count = values.size();
    b.median = quantile_sorted(sorted, 0.5);
    b.q1 = quantile_sorted(sorted, 0.25);
    b.q3 = quantile_sorted(sorted, 0.75);
    b.iqr = b.q3 - b.q1;
    const double lo = b.q1 - 1.5 * b.iqr, hi = b.q3 + 1.5 * b.iqr;
    b.whisker_low = b.q1;
    b.whisker_high = b.q3;
    bool any = false;
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double v = values[i];
        if (v < lo || v > hi) {
            b.outlier_ids.push_back(ids.empty() ? std::to_string(i) : ids[i]);
            b.outlier_values.push_back(v);
            continue;
        }
        if (!any) {
            b.whisker_low = b.whisker_high = v;
            any = true;
        }
        b.whisker_low = std::min(b.whisker_low, v);
        b.whisker_high = std::max(b.whisker_high, v);
    }
    return b;
}

/// Box statistics of one metric per image category, categories in order of
/// first appearance. Uncategorised and degenerate images are skipped.
inline std::vector<BoxStats> category_stats(const MetricReport& report, Metric metric = Metric::absrel) {
    std::vector<std::string> order;
    std::map<std::string, std::pair<std::vector<double>, std::vector<std::string>>> groups;
    for (const auto& r : report.per_image) {
        if (r.category.empty() || r.degenerate) continue;
        auto [it, fresh] = groups.try_emplace(r.category);
        if (fresh) order.push_back(r.category);
        it->second.first.push_back(metric_value(r, metric));
        it->second.second.push_back(r.id);
    }
    if (order.empty())
        throw DataError(fmt::format("category_stats: report {}/{} has no categorised images", report.method,
                                    report.dataset));
    std::vector<BoxStats> out;
    for (const auto& c : order) {
        const auto& [vals, ids] = groups.at(c);
        auto b = box_stats(vals, ids);
        b.category = c;
        out.push_back(std::move(b));
    }
    return out;
}

}  // namespace affdepth
