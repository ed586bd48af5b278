#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <fmt/format.h>

#include "affdepth/errors.hpp"
#include "affdepth/losses.hpp"
#include "affdepth/metrics.hpp"
#include "affdepth/preimage.hpp"
#include "affdepth/random.hpp"
#include "affdepth/synthetic.hpp"
#include "affdepth/tensor.hpp"

namespace affdepth {

enum class InjectionMode { stagewise, block };
enum class HeadMode { pixel, latent_surrogate };

inline std::string_view to_string(InjectionMode m) { return m == InjectionMode::stagewise ? "stagewise" : "block"; }
inline std::string_view to_string(HeadMode m) { return m == HeadMode::pixel ? "pixel" : "latent_surrogate"; }

inline InjectionMode parse_injection_mode(std::string_view s) {
    if (s == "stagewise") return InjectionMode::stagewise;
    if (s == "block") return InjectionMode::block;
    throw Error(fmt::format("unknown injection mode '{}' (expected stagewise or block)", s));
}

inline HeadMode parse_head_mode(std::string_view s) {
    if (s == "pixel") return HeadMode::pixel;
    if (s == "latent_surrogate") return HeadMode::latent_surrogate;
    throw Error(fmt::format("unknown head mode '{}' (expected pixel or latent_surrogate)", s));
}

struct RefinerConfig {
    std::size_t stages = 4;
    std::size_t base_channels = 32;
    std::size_t seg_classes = 8;
    InjectionMode injection_mode = InjectionMode::stagewise;
    HeadMode head_mode = HeadMode::pixel;
    /// Input image size; the preimage stages and channel counts follow from it.
    std::size_t image_height = 32, image_width = 32;
    SynthOptions preimage{};
    /// Seed of the (frozen) pseudo-preimage generator.
    std::uint64_t preimage_seed = 1;

    void validate() const {
        if (stages < 2) throw ShapeError(fmt::format("refiner: stages must be >= 2, got {}", stages));
        if (base_channels < 4) throw ShapeError(fmt::format("refiner: base_channels must be >= 4, got {}", base_channels));
        if (seg_classes < 2) throw ShapeError(fmt::format("refiner: seg_classes must be >= 2, got {}", seg_classes));
        const std::size_t div = std::size_t{1} << stages;
        if (image_height % div != 0 || image_width % div != 0)
            throw ShapeError(fmt::format("refiner: image {}x{} is not divisible by {} for {} stages", image_height,
                                         image_width, div, stages));
    }

    /// Stage resolutions and input channel counts, coarsest first.
    struct StageShape {
        std::size_t scale_index, height, width, channels;
    };
    std::vector<StageShape> stage_shapes() const {
        std::vector<StageShape> out;
        for (std::size_t s = stages; s-- > 0;) {
            const std::size_t h = stage_side(image_height, s), w = stage_side(image_width, s);
            out.push_back({s, h, w, synth_stage_channels(h, w, preimage)});
        }
        return out;
    }
};

/// Desk-scale configuration: 16x16 scenes, 8 channels, 4 stages, 8 classes.
inline RefinerConfig toy_config() {
    RefinerConfig c;
    c.image_height = c.image_width = 16;
    c.base_channels = 8;
    return c;
}

/// Named parameter tensors in a fixed order.
template <class T>
struct ParameterSet {
    std::vector<std::string> names;
    std::vector<BasicTensor<T>> tensors;

    void add(std::string name, BasicTensor<T> t) {
        names.push_back(std::move(name));
        tensors.push_back(std::move(t));
    }

    const BasicTensor<T>& get(std::string_view name) const {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return tensors[i];
        throw Error(fmt::format("no parameter named '{}'", name));
    }

    bool contains(std::string_view name) const {
        for (const auto& n : names)
            if (n == name) return true;
        return false;
    }

    std::size_t element_count() const {
        std::size_t n = 0;
        for (const auto& t : tensors) n += t.size();
        return n;
    }

    /// Same names, new tensors (e.g. on-graph leaves or perturbed copies).
    ParameterSet with(std::vector<BasicTensor<T>> ts) const {
        if (ts.size() != tensors.size())
            throw ShapeError(fmt::format("parameter set holds {} tensors, {} given", tensors.size(), ts.size()));
        return {names, std::move(ts)};
    }

    friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
        return a.names == b.names && a.tensors == b.tensors;
    }
};

template <class T>
using RefinerParams = ParameterSet<T>;

namespace detail {

inline std::string fusion_name(std::size_t s, const char* part) { return fmt::format("fusion.s{}.{}", s, part); }
inline std::string decoder_name(std::size_t s, const char* part) { return fmt::format("decoder.s{}.{}", s, part); }

/// True for parameters that belong to the decoder body (shared by both variants).
inline bool is_decoder_body(std::string_view name) {
    return name.starts_with("decoder.") || name.starts_with("head.");
}

}  // namespace detail

/// Fan-in scaled uniform initialisation, bound sqrt(1 / fan_in).
template <class T = double>
RefinerParams<T> init_params(const RefinerConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    const std::size_t B = config.base_channels, C = config.seg_classes;
    RefinerParams<T> p;
    auto conv = [&](std::string name, std::size_t cout, std::size_t cin, std::size_t k, bool bias = true) {
        const std::size_t fan_in = cin * k * k;
        p.add(name + ".w", uniform_fan_in<T>({cout, cin, k, k}, fan_in, rng));
        if (bias) p.add(name + ".b", uniform_fan_in<T>({cout}, fan_in, rng));
    };
    const auto shapes = config.stage_shapes();
    for (const auto& st : shapes) {
        const auto f = init_fusion<T>(st.channels, B, B, rng);
        p.add(detail::fusion_name(st.scale_index, "w1"), f.w1);
        p.add(detail::fusion_name(st.scale_index, "b1"), f.b1);
        p.add(detail::fusion_name(st.scale_index, "w2"), f.w2);
        p.add(detail::fusion_name(st.scale_index, "b2"), f.b2);
    }
    for (const auto& st : shapes) {
        conv(detail::decoder_name(st.scale_index, "conv_a"), B, 2 * B, 3);
        conv(detail::decoder_name(st.scale_index, "conv_b"), B, B, 3);
        conv(detail::decoder_name(st.scale_index, "skip"), B, 2 * B, 1);
    }
    conv("head.depth.conv1", B, B, 3);
    // No output bias: every use of the depth map is shift-invariant.
    conv("head.depth.conv2", 1, B, 3, false);
    conv("head.seg.conv1", B, B, 3);
    conv("head.seg.conv2", C, B, 3);
    if (config.injection_mode == InjectionMode::block) conv("block.proj", B, config.stages * B, 1);
    return p;
}

template <class T>
struct RefinerOutput {
    BasicTensor<T> depth;       // 1 x H x W
    BasicTensor<T> seg_logits;  // C x H x W
    BasicTensor<T> pre_head;    // B x H/2 x W/2, the activation both heads read
};

namespace detail {

template <class T>
BasicTensor<T> conv3(const RefinerParams<T>& p, const std::string& name, const BasicTensor<T>& x) {
    const std::string bias = name + ".b";
    return conv2d_3x3(x, p.get(name + ".w"),
                      p.contains(bias) ? std::optional<BasicTensor<T>>(p.get(bias)) : std::nullopt);
}

template <class T>
BasicTensor<T> conv1(const RefinerParams<T>& p, const std::string& name, const BasicTensor<T>& x) {
    return conv2d_1x1(x, p.get(name + ".w"), std::optional<BasicTensor<T>>(p.get(name + ".b")));
}

// silu(skip(x) + conv_b(silu(conv_a(x))))
template <class T>
BasicTensor<T> residual_block(const RefinerParams<T>& p, std::size_t s, const BasicTensor<T>& x) {
    const auto body = conv3(p, decoder_name(s, "conv_b"), silu(conv3(p, decoder_name(s, "conv_a"), x)));
    return silu(add(conv1(p, decoder_name(s, "skip"), x), body));
}

template <class T>
RefinerOutput<T> heads(const RefinerParams<T>& p, const BasicTensor<T>& act) {
    const auto up = upsample_bilinear_x2(act);
    auto depth = conv3(p, "head.depth.conv2", silu(conv3(p, "head.depth.conv1", up)));
    auto seg = conv3(p, "head.seg.conv2", silu(conv3(p, "head.seg.conv1", up)));
    return {std::move(depth), std::move(seg), act};
}

template <class T>
std::vector<BasicTensor<T>> fuse_all(const RefinerConfig& config, const std::vector<BasicTensor<T>>& inputs,
                                     const RefinerParams<T>& p) {
    const auto shapes = config.stage_shapes();
    if (inputs.size() != shapes.size())
        throw ShapeError(fmt::format("refiner: {} preimage stages given, config has {}", inputs.size(), shapes.size()));
    std::vector<BasicTensor<T>> fused;
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        const auto& st = shapes[i];
        const Shape want{st.channels, st.height, st.width};
        if (inputs[i].shape() != want)
            throw ShapeError(fmt::format("refiner: stage {} input is {}, expected {} (resolution chain or channels "
                                         "do not match the config)",
                                         st.scale_index, shape_string(inputs[i].shape()), shape_string(want)));
        const FusionParams<T> f{p.get(fusion_name(st.scale_index, "w1")), p.get(fusion_name(st.scale_index, "b1")),
                                p.get(fusion_name(st.scale_index, "w2")), p.get(fusion_name(st.scale_index, "b2"))};
        fused.push_back(fuse(inputs[i], f));
    }
    return fused;
}

}  // namespace detail

/// Concatenated stage inputs (coarsest first), the form the refiner consumes.
template <class T>
std::vector<BasicTensor<T>> refiner_inputs(const std::vector<BasicPreimageStage<T>>& stages) {
    std::vector<BasicTensor<T>> out;
    for (std::size_t i = 0; i < stages.size(); ++i) {
        if (i > 0 && (stages[i].height != 2 * stages[i - 1].height || stages[i].width != 2 * stages[i - 1].width))
            throw ShapeError(fmt::format("refiner: stage {} is {}x{}, expected twice the previous {}x{}", i,
                                         stages[i].height, stages[i].width, stages[i - 1].height, stages[i - 1].width));
        out.push_back(stage_inputs(stages[i]));
    }
    return out;
}

/// Stage-wise injection: the coarsest fused stage seeds the decoder and every
/// stage is concatenated to the activation of matching resolution.
template <class T>
RefinerOutput<T> refine_stagewise(const RefinerConfig& config, const std::vector<BasicTensor<T>>& inputs,
                                  const RefinerParams<T>& params) {
    const auto shapes = config.stage_shapes();
    const auto fused = detail::fuse_all(config, inputs, params);
    auto act = fused.front();
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        act = detail::residual_block(params, shapes[i].scale_index, concat_channels<T>({act, fused[i]}));
        if (i + 1 < shapes.size()) act = upsample_bilinear_x2(act);
    }
    return detail::heads(params, act);
}

/// Every fused stage resized to the second-finest stage resolution and
/// concatenated (stages x base_channels channels), before projection.
template <class T>
BasicTensor<T> block_features(const RefinerConfig& config, const std::vector<BasicTensor<T>>& inputs,
                              const RefinerParams<T>& params) {
    const auto shapes = config.stage_shapes();
    if (shapes.size() < 2) throw ShapeError("refine_block: at least 2 stages are required");
    const auto fused = detail::fuse_all(config, inputs, params);
    const std::size_t entry = shapes.size() - 2;
    std::vector<BasicTensor<T>> resized;
    for (std::size_t i = 0; i < fused.size(); ++i) {
        auto t = fused[i];
        // Bilinear x2 steps up; at an exact factor of one half, bilinear with
        // half-pixel centres is the 2x2 mean.
        for (std::size_t k = i; k < entry; ++k) t = upsample_bilinear_x2(t);
        for (std::size_t k = entry; k < i; ++k) t = downsample_avg_x2(t);
        resized.push_back(std::move(t));
    }
    return concat_channels(resized);
}

/// Block aggregation: the block is projected once and injected only at the
/// second-finest stage. The finest stage of the decoder receives a zero
/// injection.
template <class T>
RefinerOutput<T> refine_block(const RefinerConfig& config, const std::vector<BasicTensor<T>>& inputs,
                              const RefinerParams<T>& params) {
    const auto shapes = config.stage_shapes();
    const auto block = detail::conv1(params, "block.proj", block_features(config, inputs, params));
    const std::size_t entry = shapes.size() - 2;
    auto act = detail::residual_block(params, shapes[entry].scale_index, concat_channels<T>({block, block}));
    act = upsample_bilinear_x2(act);
    const auto zeros = BasicTensor<T>::zeros(act.shape());
    act = detail::residual_block(params, shapes.back().scale_index, concat_channels<T>({act, zeros}));
    return detail::heads(params, act);
}

template <class T>
RefinerOutput<T> refine(const RefinerConfig& config, const std::vector<BasicTensor<T>>& inputs,
                        const RefinerParams<T>& params) {
    return config.injection_mode == InjectionMode::stagewise ? refine_stagewise(config, inputs, params)
                                                             : refine_block(config, inputs, params);
}

// ---------------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------------

/// A synthetic sample with its preimage and normalised targets precomputed.
template <class T>
struct PreparedSample {
    std::string id;
    std::vector<BasicTensor<T>> inputs;
    BasicTensor<T> depth;
    BasicTensor<T> seg;
    NormalizedDepth<T> target;         // full resolution
    NormalizedDepth<T> latent_target;  // depth block-averaged to a quarter of the image size
};

template <class T = double>
PreparedSample<T> prepare_sample(const RefinerConfig& config, const SyntheticSample& s) {
    if (s.image.dim(1) != config.image_height || s.image.dim(2) != config.image_width)
        throw ShapeError(fmt::format("sample {} is {}x{} but the refiner expects {}x{}", s.id, s.image.dim(1),
                                     s.image.dim(2), config.image_height, config.image_width));
    if (s.seg.dim(0) != config.seg_classes)
        throw ShapeError(fmt::format("sample {} has {} classes, the refiner {}", s.id, s.seg.dim(0), config.seg_classes));
    const auto stages = synth_preimage(s.image, config.preimage_seed, config.stages, config.preimage);
    std::vector<BasicTensor<T>> inputs;
    for (const auto& t : refiner_inputs(stages)) inputs.push_back(tensor_cast<T>(t));
    const auto depth = tensor_cast<T>(s.depth);
    const auto quarter = block_mean_pool(depth, config.image_height / 4, config.image_width / 4);
    return {s.id, std::move(inputs), depth, tensor_cast<T>(s.seg), normalize_gt(depth), normalize_gt(quarter)};
}

struct LossRecord {
    double total = 0, ssi = 0, dice = 0, focal = 0;
};

template <class T>
struct SampleLoss {
    BasicTensor<T> total, ssi, dice, focal;
};

/// Per-sample objective. `frozen_lambda` fixes the depth weight (for
/// finite-difference checks); otherwise it is the stop-gradient ratio.
template <class T>
SampleLoss<T> sample_loss(const RefinerConfig& config, const RefinerParams<T>& params, const PreparedSample<T>& s,
                          std::optional<std::type_identity_t<T>> frozen_lambda = std::nullopt) {
    const auto out = refine(config, s.inputs, params);
    BasicTensor<T> ssi;
    if (config.head_mode == HeadMode::pixel) {
        ssi = loss_ssi(s.target, out.depth).loss;
    } else {
        const auto latent = slice_channels(downsample_avg_x2(out.pre_head), 0, 1);
        ssi = loss_ssi(s.latent_target, latent).loss;
    }
    const auto probs = softmax_channels(out.seg_logits);
    auto dice = loss_dice(s.seg, probs);
    auto focal = loss_focal(s.seg, probs);
    auto total = loss_total(dice, focal, ssi, frozen_lambda).total;
    return {std::move(total), std::move(ssi), std::move(dice), std::move(focal)};
}

template <class T>
struct TrainResult {
    std::vector<LossRecord> history;
    RefinerParams<T> params;
};

/// Full-batch plain gradient descent on the mean per-sample objective.
template <class T = double>
TrainResult<T> train_toy(const RefinerConfig& config, const std::vector<PreparedSample<T>>& dataset, std::size_t steps,
                         double lr, std::uint64_t seed) {
    if (steps < 1) throw Error("train_toy: steps must be >= 1");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw Error(fmt::format("train_toy: learning rate must be positive, got {}", lr));
    if (dataset.empty()) throw Error("train_toy: empty dataset");
    TrainResult<T> result{{}, init_params<T>(config, seed)};
    const T inv_n = T(1) / static_cast<T>(dataset.size());
    for (std::size_t step = 0; step < steps; ++step) {
        Graph<T> graph;
        std::vector<BasicTensor<T>> leaves;
        for (const auto& t : result.params.tensors) leaves.push_back(graph.parameter(t));
        const auto p = result.params.with(leaves);
        std::optional<BasicTensor<T>> sum;
        LossRecord rec;
        for (const auto& s : dataset) {
            const auto l = sample_loss(config, p, s);
            rec.total += static_cast<double>(l.total.item());
            rec.ssi += static_cast<double>(l.ssi.item());
            rec.dice += static_cast<double>(l.dice.item());
            rec.focal += static_cast<double>(l.focal.item());
            sum = sum ? add(*sum, l.total) : l.total;
        }
        const double n = static_cast<double>(dataset.size());
        rec.total /= n;
        rec.ssi /= n;
        rec.dice /= n;
        rec.focal /= n;
        if (!std::isfinite(rec.total))
            throw NumericError(fmt::format("train_toy: loss is not finite at step {}", step + 1));
        result.history.push_back(rec);

        const auto grads = backward(mul_scalar(*sum, inv_n));
        std::vector<BasicTensor<T>> next;
        for (std::size_t k = 0; k < leaves.size(); ++k) {
            const auto g = grads.of(leaves[k]);
            std::vector<T> v = result.params.tensors[k].vector();
            for (std::size_t i = 0; i < v.size(); ++i) v[i] -= static_cast<T>(lr) * g[i];
            next.push_back(BasicTensor<T>(result.params.tensors[k].shape(), std::move(v)));
        }
        result.params = result.params.with(std::move(next));
    }
    return result;
}

template <class T = double>
std::vector<PreparedSample<T>> prepare_set(const RefinerConfig& config, const std::vector<SyntheticSample>& samples) {
    std::vector<PreparedSample<T>> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(prepare_sample<T>(config, s));
    return out;
}

/// Mean per-image delta1 (after affine alignment) of the depth head.
template <class T>
double validation_delta1(const RefinerConfig& config, const RefinerParams<T>& params,
                         const std::vector<PreparedSample<T>>& samples) {
    if (samples.empty()) throw Error("validation_delta1: no samples");
    double sum = 0.0;
    for (const auto& s : samples) {
        const auto out = refine(config, s.inputs, params);
        const auto gt = DepthMap::from_values(tensor_cast<double>(s.depth), DepthSpace::depth);
        DepthMap pred{tensor_cast<double>(out.depth), Mask(out.depth.size(), 1), DepthSpace::depth};
        sum += compute_metrics(gt, pred).delta1;
    }
    return sum / static_cast<double>(samples.size());
}

}  // namespace affdepth
