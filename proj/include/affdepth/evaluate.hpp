#pragma once

#include <optional>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "affdepth/combine.hpp"
#include "affdepth/depth_map.hpp"
#include "affdepth/errors.hpp"
#include "affdepth/io/manifest.hpp"
#include "affdepth/io/pfm.hpp"
#include "affdepth/metrics.hpp"
#include "affdepth/parallel.hpp"

namespace affdepth {

struct EvaluateOptions {
    /// Worker threads; results never depend on it.
    std::size_t jobs = 1;
    /// Space the predictions are stored in. When it differs from the
    /// manifest's, predictions are converted (1/x on positive pixels) before
    /// resizing and alignment. Unset = same as the manifest.
    std::optional<DepthSpace> prediction_space;
};

/// `<dir>/<id>.pfm`
inline io::fs::path prediction_path(const io::fs::path& dir, const std::string& id) { return dir / (id + ".pfm"); }

/// Ids of manifest entries without a prediction file, in manifest order.
inline std::vector<std::string> missing_predictions(const io::Manifest& m, const io::fs::path& dir) {
    std::vector<std::string> out;
    for (const auto& e : m.entries)
        if (!io::fs::is_regular_file(prediction_path(dir, e.id))) out.push_back(e.id);
    return out;
}

/// Prediction for one entry in the manifest's space, at ground-truth resolution.
inline DepthMap load_prediction(const io::Manifest& m, const io::fs::path& dir, const std::string& id,
                                const DepthMap& gt, const EvaluateOptions& options) {
    const DepthSpace stored = options.prediction_space.value_or(m.space);
    DepthMap pred = io::read_prediction_pfm(prediction_path(dir, id), stored);
    if (stored != m.space) pred = convert_space(pred, m.space);
    return resize_bilinear(pred, gt.height(), gt.width());
}

/// Scores every manifest image. Images are processed in parallel and
/// written to their manifest slot, so the report is identical for any
/// `jobs`. Images without a usable joint mask abort with a DataError naming
/// all of them.
inline MetricReport evaluate_dataset(const io::Manifest& m, const io::fs::path& pred_dir, const std::string& method,
                                     const EvaluateOptions& options = {}) {
    if (m.entries.empty()) throw DataError(fmt::format("evaluate: manifest of {} has no images", m.dataset));
    if (auto missing = missing_predictions(m, pred_dir); !missing.empty())
        throw DataError(fmt::format("evaluate: {} has no prediction for {} of {} images", pred_dir.string(),
                                    missing.size(), m.entries.size()),
                        missing);
    MetricReport report{method, m.dataset, std::vector<ImageRecord>(m.entries.size()), std::nullopt};
    std::vector<std::string> empty(m.entries.size());
    parallel_for(m.entries.size(), options.jobs, [&](std::size_t i) {
        const auto& e = m.entries[i];
        const DepthMap gt = io::load_ground_truth(m, e);
        const DepthMap pred = load_prediction(m, pred_dir, e.id, gt, options);
        ImageRecord& rec = report.per_image[i];
        rec.id = e.id;
        rec.category = e.category;
        try {
            const ImageMetrics mt = compute_metrics(gt, pred);
            rec.delta1 = mt.delta1;
            rec.absrel = mt.absrel;
            rec.valid_count = mt.valid_count;
            rec.degenerate = mt.degenerate;
        } catch (const DegenerateError& err) {
            empty[i] = fmt::format("{}: {}", e.id, err.what());
        }
    });
    std::vector<std::string> failed;
    for (auto& s : empty)
        if (!s.empty()) failed.push_back(std::move(s));
    if (!failed.empty()) throw DataError("evaluate: images without jointly valid pixels", failed);
    return report;
}

/// Pixel-wise average of two prediction directories aligned to each
/// image's ground truth. Returns maps in manifest order.
inline std::vector<DepthMap> combine_predictions(const io::Manifest& m, const io::fs::path& dir_a,
                                                 const io::fs::path& dir_b, const EvaluateOptions& options = {}) {
    if (m.entries.empty()) throw DataError(fmt::format("combine: manifest of {} has no images", m.dataset));
    std::vector<std::string> missing;
    for (const auto& dir : {dir_a, dir_b})
        for (const auto& id : missing_predictions(m, dir)) missing.push_back(fmt::format("{} (in {})", id, dir.string()));
    if (!missing.empty()) throw DataError("combine: predictions are missing", missing);
    std::vector<DepthMap> out(m.entries.size());
    parallel_for(m.entries.size(), options.jobs, [&](std::size_t i) {
        const auto& e = m.entries[i];
        const DepthMap gt = io::load_ground_truth(m, e);
        out[i] = pixel_average(load_prediction(m, dir_a, e.id, gt, options),
                               load_prediction(m, dir_b, e.id, gt, options), gt);
    });
    return out;
}

}  // namespace affdepth
