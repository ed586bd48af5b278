#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "affdepth/grad_check.hpp"
#include "affdepth/losses.hpp"
#include "affdepth/preimage.hpp"
#include "affdepth/refiner.hpp"
#include "affdepth/synthetic.hpp"

namespace affdepth {

/// Outcome of one component of the gradient suite.
struct ComponentCheck {
    std::string name;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    /// Parameter holding the worst element.
    std::string worst_param;

    bool passed() const { return max_rel_error < tolerance; }
};

struct GradSuiteOptions {
    bool primitives = true;
    bool fusion = true;
    bool losses = true;
    bool refiner = true;
    double primitive_tolerance = 1e-5;
    double tolerance = 1e-4;
};

namespace detail {

using Wide = long double;

inline Tensor uniform_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(shape_size(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor(shape, std::move(v));
}

// Readout weights with magnitude in [0.5, 1.5] and random sign.
inline std::vector<double> readout_weights(std::size_t n, Rng& rng) {
    std::vector<double> w(n);
    for (auto& v : w) v = rng.uniform(0.5, 1.5) * (rng.below(2) ? 1.0 : -1.0);
    return w;
}

// Contract an arbitrary output with fixed weights so every element matters.
template <class T>
BasicTensor<T> contract(const BasicTensor<T>& y, const std::vector<double>& readout) {
    if (y.size() == 1) return y;
    const auto flat = reshape(y, Shape{y.size(), 1, 1});
    const BasicTensor<T> w(Shape{1, y.size(), 1, 1}, std::vector<T>(readout.begin(), readout.end()));
    return conv2d_1x1(flat, w);
}

inline ComponentCheck make_check(std::string name, const GradCheckResult& r, const std::vector<std::string>& names,
                                 double tolerance) {
    ComponentCheck c{std::move(name), r.max(), tolerance, {}};
    for (std::size_t k = 0; k < r.max_rel_error.size(); ++k)
        if (r.max_rel_error[k] == c.max_rel_error && k < names.size()) {
            c.worst_param = names[k];
            break;
        }
    return c;
}

// `loss` is a generic callable taking std::vector<BasicTensor<T>>; autodiff
// runs in double, the finite differences in long double.
template <class Loss>
ComponentCheck run_check(std::string name, const Loss& loss, const std::vector<Tensor>& params,
                         const std::vector<std::string>& names, std::uint64_t seed, double tolerance,
                         double step = 1e-6) {
    LossBuilder<double> builder = [&](const std::vector<Tensor>& ps) { return loss(ps); };
    LossBuilder<Wide> oracle = [&](const std::vector<BasicTensor<Wide>>& ps) { return loss(ps); };
    GradCheckOptions opt;
    opt.step = step;
    return make_check(std::move(name), grad_check<double, Wide>(builder, oracle, params, seed, opt), names, tolerance);
}

template <class V>
using scalar_of = typename V::value_type::value_type;

inline ComponentCheck check_primitive(Primitive kind, Rng& rng, std::uint64_t seed, double tolerance) {
    const std::size_t c = 1 + rng.below(4);
    const std::size_t h = 2 * (1 + rng.below(4));
    const std::size_t w = 2 * (1 + rng.below(4));
    std::vector<Shape> inputs{{c, h, w}};
    std::optional<Shape> weight;
    bool bias = false;
    double factor = 1.0;
    std::size_t grid_h = 1, grid_w = 1;
    switch (kind) {
        case Primitive::concat_channels: inputs.push_back({1 + rng.below(4), h, w}); break;
        case Primitive::conv2d_1x1:
            weight = Shape{1 + rng.below(4), c, 1, 1};
            bias = true;
            break;
        case Primitive::conv2d_3x3_pad1:
            weight = Shape{1 + rng.below(4), c, 3, 3};
            bias = true;
            break;
        case Primitive::add: inputs.push_back({c, h, w}); break;
        case Primitive::mul_scalar: factor = rng.uniform(-2.0, 2.0); break;
        case Primitive::block_mean_pool:
            grid_h = h / 2;
            grid_w = w;
            break;
        default: break;
    }
    std::vector<Tensor> params;
    std::vector<std::string> names;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        params.push_back(uniform_tensor(inputs[i], rng, -2.0, 2.0));
        names.push_back("x" + std::to_string(i));
    }
    if (weight) {
        params.push_back(uniform_tensor(*weight, rng));
        names.push_back("weight");
    }
    if (bias) {
        params.push_back(uniform_tensor({weight->at(0)}, rng));
        names.push_back("bias");
    }
    const std::size_t n_in = inputs.size();
    auto forward = [=](const auto& ps) {
        using T = scalar_of<std::decay_t<decltype(ps)>>;
        std::vector<BasicTensor<T>> ins(ps.begin(), ps.begin() + static_cast<long>(n_in));
        std::optional<BasicTensor<T>> wt;
        PrimitiveArgs<T> a;
        a.factor = static_cast<T>(factor);
        a.grid_h = grid_h;
        a.grid_w = grid_w;
        if (weight) wt = ps[n_in];
        if (bias) a.bias = ps[n_in + 1];
        return primitive_forward(kind, ins, wt, a);
    };
    const auto readout = readout_weights(forward(params).size(), rng);
    auto loss = [&](const auto& ps) { return contract(forward(ps), readout); };
    return run_check(std::string("primitive/") + to_string(kind), loss, params, names, seed, tolerance);
}

inline ComponentCheck check_fusion(Rng& rng, std::uint64_t seed, double tolerance) {
    const std::size_t H = 8, W = 8;
    PreimageStage st;
    st.scale_index = 1;
    st.height = H;
    st.width = W;
    st.features.push_back(FeatureMap{uniform_tensor({3, H, W}, rng)});
    // A per-pixel softmax over H*W channels, transposed into [query][key] rows.
    const auto sm = softmax_channels(uniform_tensor({H * W, H, W}, rng, -2.0, 2.0));
    std::vector<double> rows(H * W * H * W);
    for (std::size_t q = 0; q < H * W; ++q)
        for (std::size_t k = 0; k < H * W; ++k) rows[q * H * W + k] = sm[k * H * W + q];
    st.self_attn.push_back(SelfAttnMap{1, H, W, Tensor({1, H, W, H * W}, std::move(rows))});
    std::vector<double> cross = uniform_tensor({1, H, W, text_tokens}, rng, 0.1, 1.0).vector();
    for (std::size_t q = 0; q < H * W; ++q) {
        double s = 0;
        for (std::size_t t = 0; t < text_tokens; ++t) s += cross[q * text_tokens + t];
        for (std::size_t t = 0; t < text_tokens; ++t) cross[q * text_tokens + t] /= s;
    }
    st.cross_attn.push_back(CrossAttnMap{1, H, W, Tensor({1, H, W, text_tokens}, std::move(cross))});
    st.validate();
    const auto st_wide = stage_cast<Wide>(st);
    const auto f = init_fusion<double>(st.channels(), 6, 4, rng);
    const auto readout = readout_weights(4 * H * W, rng);
    auto loss = [&](const auto& ps) {
        using T = scalar_of<std::decay_t<decltype(ps)>>;
        const auto& stage = [&]() -> const BasicPreimageStage<T>& {
            if constexpr (std::is_same_v<T, double>) return st;
            else return st_wide;
        }();
        return contract(fuse_stage(stage, 4, FusionParams<T>::from_tensors(ps)), readout);
    };
    return run_check("fuse_stage", loss, f.tensors(), {"w1", "b1", "w2", "b2"}, seed, tolerance);
}

inline std::vector<ComponentCheck> check_losses(Rng& rng, std::uint64_t seed, double tolerance) {
    const std::size_t C = 4, H = 6, W = 6, P = H * W;
    std::vector<double> depth(P);
    for (auto& v : depth) v = rng.uniform(1.0, 20.0);
    Mask valid(P, 1);
    valid[3] = valid[17] = 0;
    const Tensor gt({1, H, W}, depth);
    const auto target = normalize_gt(gt, &valid);
    const auto target_wide = normalize_gt(tensor_cast<Wide>(gt), &valid);
    std::vector<double> seg(C * P, 0.0);
    for (std::size_t p = 0; p < P; ++p) seg[rng.below(C) * P + p] = 1.0;
    const Tensor y_star({C, H, W}, std::move(seg));
    const auto y_star_wide = tensor_cast<Wide>(y_star);
    const auto d_hat = uniform_tensor({1, H, W}, rng, -2.0, 2.0);
    const auto logits = uniform_tensor({C, H, W}, rng, -2.0, 2.0);

    auto pick = [&](auto tag, const auto& narrow, const auto& wide) -> const auto& {
        if constexpr (std::is_same_v<decltype(tag), double>) return narrow;
        else return wide;
    };
    auto tag_of = [](const auto& ps) { return scalar_of<std::decay_t<decltype(ps)>>{}; };

    std::vector<ComponentCheck> out;
    auto ssi = [&](const auto& ps) { return loss_ssi(pick(tag_of(ps), target, target_wide), ps[0]).loss; };
    out.push_back(run_check("loss_ssi", ssi, {d_hat}, {"d_hat"}, seed, tolerance));
    auto dice = [&](const auto& ps) { return loss_dice(pick(tag_of(ps), y_star, y_star_wide), softmax_channels(ps[0])); };
    out.push_back(run_check("loss_dice", dice, {logits}, {"logits"}, seed, tolerance));
    auto focal = [&](const auto& ps) {
        return loss_focal(pick(tag_of(ps), y_star, y_star_wide), softmax_channels(ps[0]));
    };
    out.push_back(run_check("loss_focal", focal, {logits}, {"logits"}, seed, tolerance));

    const auto probs = softmax_channels(logits);
    const double lambda =
        loss_total(loss_dice(y_star, probs), loss_focal(y_star, probs), loss_ssi(target, d_hat).loss).lambda;
    auto total = [&](const auto& ps) {
        using T = scalar_of<std::decay_t<decltype(ps)>>;
        const auto& ys = pick(T{}, y_star, y_star_wide);
        const auto pr = softmax_channels(ps[1]);
        return loss_total(loss_dice(ys, pr), loss_focal(ys, pr), loss_ssi(pick(T{}, target, target_wide), ps[0]).loss,
                          static_cast<T>(lambda))
            .total;
    };
    out.push_back(run_check("loss_total", total, {d_hat, logits}, {"d_hat", "logits"}, seed, tolerance));
    return out;
}

}  // namespace detail

/// End-to-end gradient check of one refiner variant on a 16x16 synthetic
/// scene, depth weight frozen at its unperturbed value.
///
/// Autodiff runs in double. The finite-difference oracle evaluates the same
/// loss in long double: the total is a sum of hundreds of per-pixel terms,
/// and double round-off of the total swamps the smallest gradient entries.
inline ComponentCheck check_refiner(InjectionMode mode, HeadMode head, std::uint64_t seed, double tolerance) {
    using LD = long double;
    auto cfg = toy_config();
    cfg.injection_mode = mode;
    cfg.head_mode = head;
    const auto scene = make_synthetic_set(1, seed)[0];
    const auto s = prepare_sample<double>(cfg, scene);
    const auto sl = prepare_sample<LD>(cfg, scene);
    const auto params = init_params<double>(cfg, seed + 1);
    const auto base = sample_loss(cfg, params, s);
    const double lambda = (base.dice.item() + base.focal.item()) / base.ssi.item();

    ParameterSet<LD> wide{params.names, {}};
    for (const auto& t : params.tensors) wide.tensors.push_back(tensor_cast<LD>(t));
    LossBuilder<double> builder = [&](const std::vector<Tensor>& ps) {
        return sample_loss(cfg, params.with(ps), s, lambda).total;
    };
    LossBuilder<LD> oracle = [&](const std::vector<BasicTensor<LD>>& ps) {
        return sample_loss(cfg, wide.with(ps), sl, static_cast<LD>(lambda)).total;
    };
    GradCheckOptions opt;
    opt.step = 1e-4;
    const auto r = grad_check<double, LD>(builder, oracle, params.tensors, seed, opt);
    std::string name = std::string("refine_") + std::string(to_string(mode));
    if (head != HeadMode::pixel) name += "/" + std::string(to_string(head));
    return detail::make_check(std::move(name), r, params.names, tolerance);
}

/// Every differentiable operation: tensor primitives, stage fusion, each loss
/// and both refiner variants.
inline std::vector<ComponentCheck> gradient_suite(std::uint64_t seed, const GradSuiteOptions& options = {}) {
    Rng rng(mix_seed(seed, 0x67c4));
    std::vector<ComponentCheck> out;
    if (options.primitives)
        for (Primitive kind : all_primitives)
            out.push_back(detail::check_primitive(kind, rng, seed, options.primitive_tolerance));
    if (options.fusion) out.push_back(detail::check_fusion(rng, seed, options.primitive_tolerance));
    if (options.losses)
        for (auto& c : detail::check_losses(rng, seed, options.tolerance)) out.push_back(std::move(c));
    if (options.refiner)
        for (auto mode : {InjectionMode::stagewise, InjectionMode::block})
            out.push_back(check_refiner(mode, HeadMode::pixel, seed, options.tolerance));
    return out;
}

}  // namespace affdepth
