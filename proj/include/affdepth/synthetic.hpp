#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "affdepth/errors.hpp"
#include "affdepth/random.hpp"
#include "affdepth/tensor.hpp"

namespace affdepth {

/// One training scene: RGB image, positive depth and one-hot segmentation.
struct SyntheticSample {
    std::string id;
    Tensor image;   // 3 x H x W, values roughly in [0, 1]
    Tensor depth;   // 1 x H x W, > 0
    Tensor seg;     // C x H x W one-hot
    std::vector<std::uint8_t> labels;  // H x W class index
};

struct SceneOptions {
    std::size_t height = 16, width = 16;
    std::size_t classes = 8;
    std::size_t max_boxes = 3;
    std::size_t max_poles = 2;
    double noise = 0.02;
};

namespace detail {

// Fixed class colours; class 0 is sky, class 1 is ground.
inline std::vector<double> class_palette(std::size_t classes) {
    Rng rng(0x5eed'c0105ull);
    std::vector<double> p(classes * 3);
    for (auto& v : p) v = rng.uniform(0.15, 0.95);
    return p;
}

}  // namespace detail

/// Procedural street-like scene: sky above a horizon, a ground plane whose
/// depth grows towards the horizon, boxes standing on the ground and 1-2
/// pixel wide poles. Colours are class colours dimmed with distance.
inline SyntheticSample make_scene(Rng& rng, const SceneOptions& o, std::string id = {}) {
    if (o.classes < 3) throw ShapeError("make_scene: need at least 3 classes (sky, ground, objects)");
    if (o.height < 8 || o.width < 8) throw ShapeError("make_scene: scenes must be at least 8x8");
    const std::size_t H = o.height, W = o.width, P = H * W;
    const auto palette = detail::class_palette(o.classes);
    const double far = 60.0;

    const auto horizon = static_cast<std::size_t>(rng.uniform(0.25, 0.5) * static_cast<double>(H));
    auto ground_depth = [&](std::size_t y) { return 1.5 + 24.0 / (static_cast<double>(y - horizon) + 1.0); };

    std::vector<double> depth(P);
    std::vector<std::uint8_t> labels(P);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            const bool sky = y < horizon;
            depth[y * W + x] = sky ? far : ground_depth(y);
            labels[y * W + x] = sky ? 0 : 1;
        }

    struct Object {
        std::size_t x0, x1, y0, y1;
        std::uint8_t cls;
        double depth;
    };
    std::vector<Object> objects;
    const auto object_class = [&] { return static_cast<std::uint8_t>(2 + rng.below(o.classes - 2)); };
    const std::size_t boxes = 1 + rng.below(o.max_boxes);
    for (std::size_t b = 0; b < boxes; ++b) {
        const std::size_t y1 = horizon + 1 + rng.below(H - horizon - 1);  // bottom row, on the ground
        const std::size_t bh = 2 + rng.below(std::max<std::size_t>(1, y1 / 2));
        const std::size_t bw = 2 + rng.below(W / 3);
        const std::size_t x0 = rng.below(W - std::min(bw, W - 1));
        objects.push_back({x0, std::min(W, x0 + bw), y1 + 1 > bh ? y1 + 1 - bh : 0, y1 + 1, object_class(),
                           ground_depth(y1)});
    }
    const std::size_t poles = rng.below(o.max_poles + 1);
    for (std::size_t k = 0; k < poles; ++k) {
        const std::size_t y1 = horizon + 1 + rng.below(H - horizon - 1);
        const std::size_t ph = 3 + rng.below(std::max<std::size_t>(1, y1 - 2));
        const std::size_t pw = 1 + rng.below(2);
        const std::size_t x0 = rng.below(W - pw);
        objects.push_back({x0, x0 + pw, y1 + 1 > ph ? y1 + 1 - ph : 0, y1 + 1, object_class(), ground_depth(y1)});
    }
    // Painter's order: far objects first.
    std::stable_sort(objects.begin(), objects.end(), [](const Object& a, const Object& b) { return a.depth > b.depth; });
    for (const auto& ob : objects)
        for (std::size_t y = ob.y0; y < ob.y1; ++y)
            for (std::size_t x = ob.x0; x < ob.x1; ++x) {
                depth[y * W + x] = ob.depth;
                labels[y * W + x] = ob.cls;
            }

    std::vector<double> image(3 * P), seg(o.classes * P, 0.0);
    for (std::size_t p = 0; p < P; ++p) {
        const double shade = 0.45 + 0.55 * std::exp(-depth[p] / 12.0);
        for (std::size_t c = 0; c < 3; ++c)
            image[c * P + p] = palette[labels[p] * 3 + c] * shade + o.noise * rng.normal();
        seg[labels[p] * P + p] = 1.0;
    }
    return {std::move(id), Tensor({3, H, W}, std::move(image)), Tensor({1, H, W}, std::move(depth)),
            Tensor({o.classes, H, W}, std::move(seg)), std::move(labels)};
}

/// `count` scenes from one seed; ids are "<prefix><index>".
inline std::vector<SyntheticSample> make_synthetic_set(std::size_t count, std::uint64_t seed,
                                                       const SceneOptions& options = {},
                                                       const std::string& prefix = "scene") {
    Rng rng(seed);
    std::vector<SyntheticSample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(make_scene(rng, options, fmt::format("{}{:03}", prefix, i)));
    return out;
}

/// The fixed training scenes used by the toy experiments.
inline std::vector<SyntheticSample> bundled_training_set(std::size_t count = 32) {
    return make_synthetic_set(count, 100, SceneOptions{}, "train");
}

/// Held-out scenes for validation metrics (disjoint stream from training).
inline std::vector<SyntheticSample> bundled_validation_set(std::size_t count = 16) {
    return make_synthetic_set(count, 200, SceneOptions{}, "val");
}

}  // namespace affdepth
