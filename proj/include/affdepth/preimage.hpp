#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "affdepth/errors.hpp"
#include "affdepth/random.hpp"
#include "affdepth/tensor.hpp"

namespace affdepth {

/// Side of the key-region grid used when pooling self-attention.
inline constexpr std::size_t attention_region_grid = 8;
inline constexpr std::size_t attention_regions = attention_region_grid * attention_region_grid;
inline constexpr std::size_t text_tokens = 77;

namespace detail {

template <class T>
void require_rows_sum_to_one(const BasicTensor<T>& data, std::size_t row, const char* what) {
    const auto v = data.values();
    // Single precision cannot hold a long row sum to 1e-6.
    const double tol = sizeof(T) >= sizeof(double) ? 1e-6 : 1e-4;
    for (std::size_t r = 0; r < v.size() / row; ++r) {
        double s = 0.0;
        for (std::size_t k = 0; k < row; ++k) s += static_cast<double>(v[r * row + k]);
        if (!(std::abs(s - 1.0) <= tol))
            throw ShapeError(fmt::format("{}: attention row {} sums to {} instead of 1", what, r, s));
    }
}

}  // namespace detail

/// Per-head self-attention: every query pixel holds a distribution over all
/// h*w key pixels. Data is heads x h x w x (h*w).
template <class T>
struct BasicSelfAttnMap {
    std::size_t heads = 0, height = 0, width = 0;
    BasicTensor<T> data;

    void validate() const {
        const Shape want{heads, height, width, height * width};
        if (data.shape() != want)
            throw ShapeError(fmt::format("self-attention map: data shape {} does not match {}",
                                         shape_string(data.shape()), shape_string(want)));
        detail::require_rows_sum_to_one(data, height * width, "self-attention map");
    }
};

/// Per-head cross-attention over the 77 text-token slots; heads x h x w x 77.
template <class T>
struct BasicCrossAttnMap {
    std::size_t heads = 0, height = 0, width = 0;
    BasicTensor<T> data;

    void validate() const {
        const Shape want{heads, height, width, text_tokens};
        if (data.shape() != want)
            throw ShapeError(fmt::format("cross-attention map: data shape {} does not match {}",
                                         shape_string(data.shape()), shape_string(want)));
        detail::require_rows_sum_to_one(data, text_tokens, "cross-attention map");
    }
};

/// C x h x w feature map.
template <class T>
struct BasicFeatureMap {
    BasicTensor<T> data;

    std::size_t channels() const { return data.dim(0); }
    std::size_t height() const { return data.dim(1); }
    std::size_t width() const { return data.dim(2); }

    void validate() const {
        if (data.rank() != 3)
            throw ShapeError(fmt::format("feature map must be C x h x w, got {}", shape_string(data.shape())));
        for (auto v : data.values())
            if (!std::isfinite(static_cast<double>(v))) throw NumericError("feature map holds a non-finite value");
    }
};

/// All preimage members of one resolution. scale_index 0 is the finest stage.
template <class T>
struct BasicPreimageStage {
    std::size_t scale_index = 0;
    std::size_t height = 0, width = 0;
    std::vector<BasicFeatureMap<T>> features;
    std::vector<BasicSelfAttnMap<T>> self_attn;
    std::vector<BasicCrossAttnMap<T>> cross_attn;

    bool empty() const { return features.empty() && self_attn.empty() && cross_attn.empty(); }

    void validate() const {
        if (empty()) throw ShapeError(fmt::format("preimage stage {} has no members", scale_index));
        auto same = [&](std::size_t h, std::size_t w, const char* what) {
            if (h != height || w != width)
                throw ShapeError(fmt::format("preimage stage {}: {} is {}x{} but the stage is {}x{}", scale_index,
                                             what, h, w, height, width));
        };
        for (const auto& f : features) {
            f.validate();
            same(f.height(), f.width(), "feature map");
        }
        for (const auto& m : self_attn) {
            m.validate();
            same(m.height, m.width, "self-attention map");
        }
        for (const auto& m : cross_attn) {
            m.validate();
            same(m.height, m.width, "cross-attention map");
        }
    }

    /// Channel count of stage_inputs().
    std::size_t channels() const {
        std::size_t c = 0;
        for (const auto& f : features) c += f.channels();
        for (const auto& m : self_attn) c += attention_regions * m.heads;
        for (const auto& m : cross_attn) c += text_tokens * m.heads;
        return c;
    }
};

using SelfAttnMap = BasicSelfAttnMap<double>;
using CrossAttnMap = BasicCrossAttnMap<double>;
using FeatureMap = BasicFeatureMap<double>;
using PreimageStage = BasicPreimageStage<double>;

/// Averages each query's key distribution over an 8x8 grid of key regions.
///
/// Output is (64*heads) x h x w with channel head*64 + region, where region
/// is ry*8 + rx in row-major grid order. Heads are kept separate.
template <class T>
BasicTensor<T> pool_self_attention(const BasicSelfAttnMap<T>& m) {
    const std::size_t G = attention_region_grid;
    if (m.height % G != 0)
        throw ShapeError(fmt::format("pool_self_attention: height {} is not divisible by {}", m.height, G));
    if (m.width % G != 0)
        throw ShapeError(fmt::format("pool_self_attention: width {} is not divisible by {}", m.width, G));
    const std::size_t h = m.height, w = m.width, P = h * w;
    const Shape want{m.heads, h, w, P};
    if (m.data.shape() != want)
        throw ShapeError(fmt::format("pool_self_attention: data shape {} does not match {}",
                                     shape_string(m.data.shape()), shape_string(want)));
    const std::size_t rh = h / G, rw = w / G;
    const T inv = T(1) / static_cast<T>(rh * rw);
    const auto src = m.data.values();
    std::vector<T> out(m.heads * attention_regions * P, T(0));
    std::vector<T> acc(attention_regions);
    for (std::size_t head = 0; head < m.heads; ++head)
        for (std::size_t q = 0; q < P; ++q) {
            std::fill(acc.begin(), acc.end(), T(0));
            const T* row = src.data() + (head * P + q) * P;
            for (std::size_t ky = 0; ky < h; ++ky)
                for (std::size_t kx = 0; kx < w; ++kx) acc[(ky / rh) * G + kx / rw] += row[ky * w + kx];
            for (std::size_t r = 0; r < attention_regions; ++r)
                out[(head * attention_regions + r) * P + q] = acc[r] * inv;
        }
    return BasicTensor<T>(Shape{m.heads * attention_regions, h, w}, std::move(out));
}

/// Moves the token axis to channels: (77*heads) x h x w, channel head*77 + token.
template <class T>
BasicTensor<T> fold_cross_attention(const BasicCrossAttnMap<T>& m) {
    const Shape want{m.heads, m.height, m.width, text_tokens};
    if (m.data.shape() != want)
        throw ShapeError(fmt::format("fold_cross_attention: data shape {} does not match {}",
                                     shape_string(m.data.shape()), shape_string(want)));
    const std::size_t P = m.height * m.width;
    const auto src = m.data.values();
    std::vector<T> out(src.size());
    for (std::size_t head = 0; head < m.heads; ++head)
        for (std::size_t p = 0; p < P; ++p)
            for (std::size_t t = 0; t < text_tokens; ++t)
                out[(head * text_tokens + t) * P + p] = src[(head * P + p) * text_tokens + t];
    return BasicTensor<T>(Shape{m.heads * text_tokens, m.height, m.width}, std::move(out));
}

/// Inverse of fold_cross_attention.
template <class T>
BasicCrossAttnMap<T> unfold_cross_attention(const BasicTensor<T>& folded) {
    if (folded.rank() != 3 || folded.dim(0) % text_tokens != 0)
        throw ShapeError(fmt::format("unfold_cross_attention: {} is not (77*heads) x h x w",
                                     shape_string(folded.shape())));
    const std::size_t heads = folded.dim(0) / text_tokens, h = folded.dim(1), w = folded.dim(2), P = h * w;
    const auto src = folded.values();
    std::vector<T> out(src.size());
    for (std::size_t head = 0; head < heads; ++head)
        for (std::size_t p = 0; p < P; ++p)
            for (std::size_t t = 0; t < text_tokens; ++t)
                out[(head * P + p) * text_tokens + t] = src[(head * text_tokens + t) * P + p];
    return {heads, h, w, BasicTensor<T>(Shape{heads, h, w, text_tokens}, std::move(out))};
}

/// Concatenation of all members as channels: features, pooled self-attention,
/// folded cross-attention, each group in declaration order.
template <class T>
BasicTensor<T> stage_inputs(const BasicPreimageStage<T>& stage) {
    stage.validate();
    std::vector<BasicTensor<T>> parts;
    for (const auto& f : stage.features) parts.push_back(f.data);
    for (const auto& m : stage.self_attn) parts.push_back(pool_self_attention(m));
    for (const auto& m : stage.cross_attn) parts.push_back(fold_cross_attention(m));
    return concat_channels(parts);
}

/// Two pointwise projections: in -> hidden (SiLU) -> out.
template <class T>
struct FusionParams {
    BasicTensor<T> w1, b1, w2, b2;

    std::size_t in_channels() const { return w1.dim(1); }
    std::size_t hidden_channels() const { return w1.dim(0); }
    std::size_t out_channels() const { return w2.dim(0); }

    std::vector<BasicTensor<T>> tensors() const { return {w1, b1, w2, b2}; }
    static FusionParams from_tensors(const std::vector<BasicTensor<T>>& t) { return {t.at(0), t.at(1), t.at(2), t.at(3)}; }
};

/// Uniform in +-sqrt(1/fan_in), biases included.
template <class T>
BasicTensor<T> uniform_fan_in(Shape shape, std::size_t fan_in, Rng& rng) {
    const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    std::vector<T> v(shape_size(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
    return BasicTensor<T>(std::move(shape), std::move(v));
}

template <class T>
FusionParams<T> init_fusion(std::size_t in_channels, std::size_t hidden, std::size_t out_channels, Rng& rng) {
    return {uniform_fan_in<T>({hidden, in_channels, 1, 1}, in_channels, rng),
            uniform_fan_in<T>({hidden}, in_channels, rng),
            uniform_fan_in<T>({out_channels, hidden, 1, 1}, hidden, rng),
            uniform_fan_in<T>({out_channels}, hidden, rng)};
}

struct FuseOptions {
    /// Skip the SiLU between the projections (linear test configuration).
    bool linear = false;
};

/// Applies the fusion projections to an already concatenated input.
template <class T>
BasicTensor<T> fuse(const BasicTensor<T>& inputs, const FusionParams<T>& params, const FuseOptions& options = {}) {
    if (inputs.rank() != 3 || inputs.dim(0) != params.in_channels())
        throw ShapeError(fmt::format("fuse: input {} does not have the {} channels the fusion parameters expect",
                                     shape_string(inputs.shape()), params.in_channels()));
    auto hidden = conv2d_1x1(inputs, params.w1, std::optional<BasicTensor<T>>(params.b1));
    if (!options.linear) hidden = silu(hidden);
    return conv2d_1x1(hidden, params.w2, std::optional<BasicTensor<T>>(params.b2));
}

/// Fuses every member of a stage into out_channels x h x w.
template <class T>
BasicTensor<T> fuse_stage(const BasicPreimageStage<T>& stage, std::size_t out_channels, const FusionParams<T>& params,
                          const FuseOptions& options = {}) {
    if (stage.empty()) throw ShapeError(fmt::format("fuse_stage: preimage stage {} is empty", stage.scale_index));
    if (params.out_channels() != out_channels)
        throw ShapeError(fmt::format("fuse_stage: parameters produce {} channels, {} requested",
                                     params.out_channels(), out_channels));
    if (stage.channels() != params.in_channels())
        throw ShapeError(fmt::format("fuse_stage: stage {} has {} channels but the fusion expects {}",
                                     stage.scale_index, stage.channels(), params.in_channels()));
    return fuse(stage_inputs(stage), params, options);
}

// ---------------------------------------------------------------------------
// Procedural pseudo-preimage.
// ---------------------------------------------------------------------------

struct SynthOptions {
    std::size_t feature_channels = 8;
    std::size_t self_heads = 2;
    std::size_t cross_heads = 1;
    /// Self-attention is produced only at stages with h*w at most this many
    /// pixels (the maps grow with the square of the pixel count).
    std::size_t self_attn_max_pixels = 1024;
};

/// Side length of stage `scale_index` for an image side `n`.
inline std::size_t stage_side(std::size_t n, std::size_t scale_index) { return n >> (scale_index + 1); }

inline bool synth_has_self_attention(std::size_t h, std::size_t w, const SynthOptions& options) {
    return options.self_heads > 0 && h % attention_region_grid == 0 && w % attention_region_grid == 0 &&
           h * w <= options.self_attn_max_pixels;
}

/// Channel count of stage_inputs() for a synthesized stage of size h x w.
inline std::size_t synth_stage_channels(std::size_t h, std::size_t w, const SynthOptions& options) {
    return 3 + options.feature_channels +
           (synth_has_self_attention(h, w, options) ? attention_regions * options.self_heads : 0) +
           text_tokens * options.cross_heads;
}

/// Deterministic stand-in for the diffusion preimage of a 3 x H x W image.
///
/// Stage s (0 = finest) has resolution H/2^(s+1) x W/2^(s+1). Members per
/// stage: the pooled image (3 channels), a tanh projection of pooled colour
/// and local contrast, self-attention from a colour/position kernel where the
/// resolution allows the 8x8 region grid, and cross-attention against 77
/// random token prototypes. Returned coarsest first.
inline std::vector<PreimageStage> synth_preimage(const Tensor& image, std::uint64_t seed, std::size_t stages,
                                                 const SynthOptions& options = {}) {
    if (image.rank() != 3 || image.dim(0) != 3)
        throw ShapeError(fmt::format("synth_preimage: image must be 3 x H x W, got {}", shape_string(image.shape())));
    if (stages < 1) throw ShapeError("synth_preimage: at least one stage is required");
    const std::size_t H = image.dim(1), W = image.dim(2), div = std::size_t{1} << stages;
    if (H % div != 0) throw ShapeError(fmt::format("synth_preimage: height {} is not divisible by {}", H, div));
    if (W % div != 0) throw ShapeError(fmt::format("synth_preimage: width {} is not divisible by {}", W, div));
    if (options.feature_channels == 0) throw ShapeError("synth_preimage: feature_channels must be positive");

    // Fixed random weights; they depend on the seed only, never on the image.
    Rng wrng(mix_seed(seed, 0));
    const std::size_t F = options.feature_channels;
    std::vector<double> proj(F * 6), proj_bias(F);
    for (auto& v : proj) v = wrng.normal() * 1.5;
    for (auto& v : proj_bias) v = wrng.normal() * 0.3;
    std::vector<double> colour_temp(options.self_heads), spatial_scale(options.self_heads);
    for (std::size_t k = 0; k < options.self_heads; ++k) {
        colour_temp[k] = wrng.uniform(0.02, 0.2);
        spatial_scale[k] = wrng.uniform(0.1, 0.5);
    }
    std::vector<double> prototypes(options.cross_heads * text_tokens * F);
    for (auto& v : prototypes) v = wrng.normal();
    const double token_temp = std::sqrt(static_cast<double>(F));

    std::vector<PreimageStage> out;
    for (std::size_t s = stages; s-- > 0;) {
        const std::size_t h = stage_side(H, s), w = stage_side(W, s), P = h * w;
        const Tensor pooled = block_mean_pool(image, h, w);
        const auto pv = pooled.values();

        // Local contrast: pixel minus its 3x3 neighbourhood mean (edge-clamped).
        std::vector<double> contrast(3 * P);
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) {
                    double sum = 0.0;
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx) {
                            const auto yy = static_cast<std::size_t>(std::clamp<long>(long(y) + dy, 0, long(h) - 1));
                            const auto xx = static_cast<std::size_t>(std::clamp<long>(long(x) + dx, 0, long(w) - 1));
                            sum += pv[(c * h + yy) * w + xx];
                        }
                    contrast[(c * h + y) * w + x] = pv[(c * h + y) * w + x] - sum / 9.0;
                }

        std::vector<double> feat(F * P);
        for (std::size_t f = 0; f < F; ++f)
            for (std::size_t p = 0; p < P; ++p) {
                double a = proj_bias[f];
                for (std::size_t c = 0; c < 3; ++c) {
                    a += proj[f * 6 + c] * pv[c * P + p];
                    a += proj[f * 6 + 3 + c] * contrast[c * P + p];
                }
                feat[f * P + p] = std::tanh(a);
            }

        PreimageStage stage;
        stage.scale_index = s;
        stage.height = h;
        stage.width = w;
        stage.features.push_back({pooled});
        stage.features.push_back({Tensor({F, h, w}, feat)});

        if (synth_has_self_attention(h, w, options)) {
            std::vector<double> attn(options.self_heads * P * P);
            std::vector<double> logits(P);
            for (std::size_t k = 0; k < options.self_heads; ++k)
                for (std::size_t q = 0; q < P; ++q) {
                    const double qy = double(q / w) / double(h), qx = double(q % w) / double(w);
                    double mx = -INFINITY;
                    for (std::size_t key = 0; key < P; ++key) {
                        double dc = 0.0;
                        for (std::size_t c = 0; c < 3; ++c) {
                            const double d = pv[c * P + q] - pv[c * P + key];
                            dc += d * d;
                        }
                        const double dy = qy - double(key / w) / double(h), dx = qx - double(key % w) / double(w);
                        logits[key] = -dc / colour_temp[k] - (dy * dy + dx * dx) / (spatial_scale[k] * spatial_scale[k]);
                        mx = std::max(mx, logits[key]);
                    }
                    double sum = 0.0;
                    double* row = attn.data() + (k * P + q) * P;
                    for (std::size_t key = 0; key < P; ++key) sum += row[key] = std::exp(logits[key] - mx);
                    for (std::size_t key = 0; key < P; ++key) row[key] /= sum;
                }
            stage.self_attn.push_back({options.self_heads, h, w, Tensor({options.self_heads, h, w, P}, attn)});
        }

        if (options.cross_heads > 0) {
            std::vector<double> attn(options.cross_heads * P * text_tokens);
            std::vector<double> logits(text_tokens);
            for (std::size_t k = 0; k < options.cross_heads; ++k)
                for (std::size_t p = 0; p < P; ++p) {
                    double mx = -INFINITY;
                    for (std::size_t t = 0; t < text_tokens; ++t) {
                        double a = 0.0;
                        const double* u = prototypes.data() + (k * text_tokens + t) * F;
                        for (std::size_t f = 0; f < F; ++f) a += u[f] * feat[f * P + p];
                        logits[t] = a * 4.0 / token_temp;
                        mx = std::max(mx, logits[t]);
                    }
                    double sum = 0.0;
                    double* row = attn.data() + (k * P + p) * text_tokens;
                    for (std::size_t t = 0; t < text_tokens; ++t) sum += row[t] = std::exp(logits[t] - mx);
                    for (std::size_t t = 0; t < text_tokens; ++t) row[t] /= sum;
                }
            stage.cross_attn.push_back(
                {options.cross_heads, h, w, Tensor({options.cross_heads, h, w, text_tokens}, attn)});
        }
        out.push_back(std::move(stage));
    }
    return out;
}

/// Converts every member to another scalar type.
template <class U, class T>
BasicPreimageStage<U> stage_cast(const BasicPreimageStage<T>& s) {
    BasicPreimageStage<U> out;
    out.scale_index = s.scale_index;
    out.height = s.height;
    out.width = s.width;
    for (const auto& f : s.features) out.features.push_back({tensor_cast<U>(f.data)});
    for (const auto& m : s.self_attn) out.self_attn.push_back({m.heads, m.height, m.width, tensor_cast<U>(m.data)});
    for (const auto& m : s.cross_attn) out.cross_attn.push_back({m.heads, m.height, m.width, tensor_cast<U>(m.data)});
    return out;
}

}  // namespace affdepth
