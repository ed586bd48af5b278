#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "affdepth/errors.hpp"
#include "affdepth/io/files.hpp"
#include "affdepth/metrics.hpp"

namespace affdepth::io {

struct BoxplotOptions {
    std::string title;
    std::string axis_label = "AbsRel";
    double plot_left = 140.0;
    double plot_width = 480.0;
    double top = 40.0;
    double row_height = 36.0;
    /// Fraction of the data range added on both sides of the axis.
    double padding = 0.05;
};

/// Horizontal value axis of a boxplot: x = left + (v - lo) / (hi - lo) * width.
struct BoxplotAxis {
    double lo = 0.0, hi = 1.0, left = 0.0, width = 1.0;
    double x(double v) const { return left + (v - lo) / (hi - lo) * width; }
};

inline BoxplotAxis boxplot_axis(const std::vector<BoxStats>& stats, const BoxplotOptions& o) {
    if (stats.empty()) throw DataError("boxplot: no categories to draw");
    double lo = stats.front().whisker_low, hi = stats.front().whisker_high;
    for (const auto& s : stats) {
        lo = std::min(lo, s.whisker_low);
        hi = std::max(hi, s.whisker_high);
        for (double v : s.outlier_values) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    if (!std::isfinite(lo) || !std::isfinite(hi)) throw NumericError("boxplot: statistics are not finite");
    const double span = hi - lo;
    if (span > 0.0) {
        lo -= o.padding * span;
        hi += o.padding * span;
    } else {
        lo -= 0.5;
        hi += 0.5;
    }
    return {lo, hi, o.plot_left, o.plot_width};
}

namespace detail {

inline std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

inline std::string coord(double v) { return fmt::format("{:.4f}", v); }

}  // namespace detail

/// One horizontal box per category, top to bottom in the given order: box
/// from Q1 to Q3, a full-height median stripe, whiskers, and outlier dots.
/// The root element declares the axis mapping in data-axis-* attributes.
inline std::string boxplot_svg(const std::vector<BoxStats>& stats, const BoxplotOptions& o = {}) {
    using detail::coord;
    const BoxplotAxis axis = boxplot_axis(stats, o);
    const double width = o.plot_left + o.plot_width + 40.0;
    const double plot_bottom = o.top + o.row_height * static_cast<double>(stats.size());
    const double height = plot_bottom + 50.0;
    std::string s;
    s += fmt::format(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\" "
        "data-axis-lo=\"{}\" data-axis-hi=\"{}\" data-axis-left=\"{}\" data-axis-width=\"{}\">\n",
        coord(width), coord(height), coord(width), coord(height), axis.lo, axis.hi, axis.left, axis.width);
    s += "<style>.box{fill:#cfe0f3;stroke:#1f4e79}.median{stroke:#c00000;stroke-width:2}"
         ".whisker{stroke:#1f4e79}.outlier{fill:none;stroke:#1f4e79}text{font:12px sans-serif}</style>\n";
    if (!o.title.empty())
        s += fmt::format("<text class=\"title\" x=\"{}\" y=\"20\">{}</text>\n", coord(o.plot_left),
                         detail::xml_escape(o.title));
    for (std::size_t i = 0; i < stats.size(); ++i) {
        const auto& b = stats[i];
        const double y0 = o.top + o.row_height * static_cast<double>(i);
        const double yc = y0 + 0.5 * o.row_height;
        const double box_top = y0 + 0.2 * o.row_height, box_h = 0.6 * o.row_height;
        const auto cat = detail::xml_escape(b.category);
        s += fmt::format("<g class=\"category\" data-category=\"{}\">\n", cat);
        s += fmt::format("<text class=\"label\" x=\"{}\" y=\"{}\" text-anchor=\"end\">{} (n={})</text>\n",
                         coord(o.plot_left - 8.0), coord(yc + 4.0), cat, b.count);
        s += fmt::format("<line class=\"whisker\" x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\"/>\n",
                         coord(axis.x(b.whisker_low)), coord(yc), coord(axis.x(b.q1)), coord(yc));
        s += fmt::format("<line class=\"whisker\" x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\"/>\n", coord(axis.x(b.q3)),
                         coord(yc), coord(axis.x(b.whisker_high)), coord(yc));
        s += fmt::format("<rect class=\"box\" x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\"/>\n", coord(axis.x(b.q1)),
                         coord(box_top), coord(axis.x(b.q3) - axis.x(b.q1)), coord(box_h));
        s += fmt::format("<line class=\"median\" x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\"/>\n", coord(axis.x(b.median)),
                         coord(y0 + 0.05 * o.row_height), coord(axis.x(b.median)), coord(y0 + 0.95 * o.row_height));
        for (std::size_t k = 0; k < b.outlier_values.size(); ++k) {
            const std::string id = k < b.outlier_ids.size() ? b.outlier_ids[k] : "";
            s += fmt::format("<circle class=\"outlier\" cx=\"{}\" cy=\"{}\" r=\"3\" data-id=\"{}\"/>\n",
                             coord(axis.x(b.outlier_values[k])), coord(yc), detail::xml_escape(id));
        }
        s += "</g>\n";
    }
    // Axis with five ticks.
    s += fmt::format("<line class=\"axis\" x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
                     coord(axis.left), coord(plot_bottom), coord(axis.left + axis.width), coord(plot_bottom));
    for (int t = 0; t <= 4; ++t) {
        const double v = axis.lo + (axis.hi - axis.lo) * t / 4.0;
        const double x = axis.x(v);
        s += fmt::format("<line class=\"tick\" x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n", coord(x),
                         coord(plot_bottom), coord(x), coord(plot_bottom + 5.0));
        s += fmt::format("<text class=\"tick-label\" x=\"{}\" y=\"{}\" text-anchor=\"middle\">{:.3g}</text>\n",
                         coord(x), coord(plot_bottom + 18.0), v);
    }
    s += fmt::format("<text class=\"axis-label\" x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
                     coord(axis.left + 0.5 * axis.width), coord(plot_bottom + 38.0), detail::xml_escape(o.axis_label));
    s += "</svg>\n";
    return s;
}

inline void render_boxplot_svg(const std::vector<BoxStats>& stats, const fs::path& path, const BoxplotOptions& o = {}) {
    write_text(path, boxplot_svg(stats, o));
}

}  // namespace affdepth::io
