#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <type_traits>
#include <vector>

#include <fmt/format.h>

#include "affdepth/depth_map.hpp"
#include "affdepth/errors.hpp"
#include "affdepth/tensor.hpp"

namespace affdepth {

namespace detail {

inline bool is_valid(const Mask* mask, std::size_t i) { return mask == nullptr || (*mask)[i] != 0; }

inline void require_mask(const Mask* mask, std::size_t n, const char* op) {
    if (mask && mask->size() != n)
        throw ShapeError(fmt::format("{}: mask holds {} entries for {} elements", op, mask->size(), n));
}

}  // namespace detail

/// Ground truth shifted by its median and scaled by its mean absolute deviation.
template <class T>
struct NormalizedDepth {
    BasicTensor<T> values;  // invalid pixels hold 0
    T t;                    // median
    T s;                    // mean |d - t|
    Mask valid;             // empty = all valid
};

/// d* = (d - median(d)) / mean|d - median(d)| over valid pixels.
///
/// Even valid counts take the mean of the two central order statistics.
template <class T>
NormalizedDepth<T> normalize_gt(const BasicTensor<T>& d, const Mask* mask = nullptr) {
    detail::require_mask(mask, d.size(), "normalize_gt");
    std::vector<T> valid;
    valid.reserve(d.size());
    for (std::size_t i = 0; i < d.size(); ++i)
        if (detail::is_valid(mask, i)) valid.push_back(d[i]);
    if (valid.size() < 2)
        throw DegenerateError(fmt::format("normalize_gt: {} valid pixel(s), need at least 2", valid.size()));

    const std::size_t n = valid.size();
    const std::size_t mid = n / 2;
    std::nth_element(valid.begin(), valid.begin() + mid, valid.end());
    T t = valid[mid];
    if (n % 2 == 0) t = (t + *std::max_element(valid.begin(), valid.begin() + mid)) / T(2);

    T s = 0;
    for (auto v : valid) s += std::abs(v - t);
    s /= static_cast<T>(n);
    if (!(s > T(0))) throw DegenerateError("normalize_gt: ground truth is constant over valid pixels");

    std::vector<T> out(d.size(), T(0));
    for (std::size_t i = 0; i < d.size(); ++i)
        if (detail::is_valid(mask, i)) out[i] = (d[i] - t) / s;
    return {BasicTensor<T>(d.shape(), std::move(out)), t, s, mask ? *mask : Mask{}};
}

/// Accumulation type of the alignment: at least double, wider if T is.
template <class T>
using fit_scalar_t = std::conditional_t<(sizeof(T) > sizeof(double)), T, double>;

/// Least-squares scale and shift mapping x onto y.
template <class A>
struct BasicAffineFit {
    A scale = 1.0;
    A shift = 0.0;
    /// x was constant over the valid set: scale forced to 0, shift = mean(y).
    bool degenerate = false;
    std::size_t count = 0;
    A mean_x = 0.0, mean_y = 0.0, sxx = 0.0;
};

using AffineFit = BasicAffineFit<double>;

/// argmin_{a,b} sum_valid (a x_i + b - y_i)^2 in centred form.
template <class TX, class TY, class A = fit_scalar_t<std::common_type_t<TX, TY>>>
BasicAffineFit<A> fit_affine(std::span<const TX> x, std::span<const TY> y, const Mask* mask = nullptr) {
    if (x.size() != y.size())
        throw ShapeError(fmt::format("fit_affine: {} predictions vs {} targets", x.size(), y.size()));
    detail::require_mask(mask, x.size(), "fit_affine");
    BasicAffineFit<A> fit;
    A sx = 0, sy = 0;
    for (std::size_t i = 0; i < x.size(); ++i)
        if (detail::is_valid(mask, i)) {
            sx += static_cast<A>(x[i]);
            sy += static_cast<A>(y[i]);
            ++fit.count;
        }
    if (fit.count < 2) throw DegenerateError(fmt::format("alignment needs 2 valid pixels, got {}", fit.count));
    fit.mean_x = sx / static_cast<A>(fit.count);
    fit.mean_y = sy / static_cast<A>(fit.count);
    A sxx = 0, sxy = 0, xx = 0;
    for (std::size_t i = 0; i < x.size(); ++i)
        if (detail::is_valid(mask, i)) {
            const A cx = static_cast<A>(x[i]) - fit.mean_x;
            const A cy = static_cast<A>(y[i]) - fit.mean_y;
            sxx += cx * cx;
            sxy += cx * cy;
            xx += static_cast<A>(x[i]) * static_cast<A>(x[i]);
        }
    fit.sxx = sxx;
    // Relative test: a constant signal leaves only round-off in sxx.
    if (!(sxx > A(1e-14) * xx) || sxx == A(0)) {
        fit.degenerate = true;
        fit.scale = 0.0;
        fit.shift = fit.mean_y;
        return fit;
    }
    fit.scale = sxy / sxx;
    fit.shift = fit.mean_y - fit.scale * fit.mean_x;
    return fit;
}

template <class T>
struct Alignment {
    BasicTensor<T> aligned;
    BasicAffineFit<fit_scalar_t<T>> fit;
};

/// scale * d_hat + shift with (scale, shift) fitted to d_star over the mask.
///
/// Differentiable with respect to d_hat, including through the closed-form
/// scale and shift unless `detach_fit` is set. Every pixel is mapped; the mask
/// only selects the pixels that enter the fit.
template <class T>
Alignment<T> align_lsq(const BasicTensor<T>& d_star, const BasicTensor<T>& d_hat, const Mask* mask = nullptr,
                       bool detach_fit = false) {
    using A = fit_scalar_t<T>;
    detail::require_same_shape(d_star, d_hat, "align_lsq");
    if (d_star.on_graph()) throw GraphError("align_lsq: the target d* must be a constant");
    const auto fit = fit_affine<T, T>(d_hat.values(), d_star.values(), mask);
    std::vector<T> out(d_hat.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<T>(fit.scale * static_cast<A>(d_hat[i]) + fit.shift);
    const bool through_fit = !detach_fit && !fit.degenerate;
    Mask mask_copy = mask ? *mask : Mask{};
    auto result = detail::make_output<T>(
        OpKind::custom, d_hat.shape(), std::move(out), {&d_hat},
        [fit, through_fit, xs = d_hat.detached(), ys = d_star, mask_copy](std::span<const T> g, InputGrads<T> gi) {
            const Mask* m = mask_copy.empty() ? nullptr : &mask_copy;
            A gsum = 0, gx = 0;
            for (std::size_t i = 0; i < g.size(); ++i) {
                gi[0][i] += static_cast<T>(fit.scale * static_cast<A>(g[i]));
                gsum += static_cast<A>(g[i]);
                gx += static_cast<A>(g[i]) * static_cast<A>(xs[i]);
            }
            if (!through_fit) return;
            // out_i = a x_i + b, a = Sxy/Sxx (centred), b = mean_y - a mean_x.
            // d a / d x_j = (cy_j - 2 a cx_j) / Sxx,  d b / d x_j = -mean_x da/dx_j - a/n.
            const A coeff_a = gx - gsum * fit.mean_x;
            const A n = static_cast<A>(fit.count);
            for (std::size_t j = 0; j < g.size(); ++j) {
                if (!detail::is_valid(m, j)) continue;
                const A cx = static_cast<A>(xs[j]) - fit.mean_x;
                const A cy = static_cast<A>(ys[j]) - fit.mean_y;
                const A da = (cy - A(2) * fit.scale * cx) / fit.sxx;
                gi[0][j] += static_cast<T>(coeff_a * da - gsum * fit.scale / n);
            }
        });
    return {std::move(result), fit};
}

/// Mean of (a - target)^2 over valid elements; target is a constant.
template <class T>
BasicTensor<T> masked_mse(const BasicTensor<T>& a, const BasicTensor<T>& target, const Mask* mask = nullptr) {
    detail::require_same_shape(a, target, "masked_mse");
    detail::require_mask(mask, a.size(), "masked_mse");
    if (target.on_graph()) throw GraphError("masked_mse: target must be a constant");
    std::size_t n = 0;
    T sum = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (detail::is_valid(mask, i)) {
            const T r = a[i] - target[i];
            sum += r * r;
            ++n;
        }
    if (n == 0) throw DegenerateError("masked_mse: no valid elements");
    const T inv = T(1) / static_cast<T>(n);
    Mask mask_copy = mask ? *mask : Mask{};
    return detail::make_output<T>(OpKind::custom, Shape{1}, std::vector<T>{sum * inv}, {&a},
                                  [av = a.detached(), target, mask_copy, inv](std::span<const T> g, InputGrads<T> gi) {
                                      const Mask* m = mask_copy.empty() ? nullptr : &mask_copy;
                                      for (std::size_t i = 0; i < av.size(); ++i)
                                          if (detail::is_valid(m, i))
                                              gi[0][i] += g[0] * T(2) * inv * (av[i] - target[i]);
                                  });
}

template <class T>
struct SsiLoss {
    BasicTensor<T> loss;
    BasicAffineFit<fit_scalar_t<T>> fit;
};

struct SsiOptions {
    /// Treat the fitted scale/shift as constants. The gradient is the same
    /// at the least-squares optimum; the switch exists for experiments.
    bool detach_alignment = false;
};

/// MSE(d*, align(d*, d_hat)) over valid pixels.
template <class T>
SsiLoss<T> loss_ssi(const NormalizedDepth<T>& d_star, const BasicTensor<T>& d_hat, const SsiOptions& options = {}) {
    const Mask* mask = d_star.valid.empty() ? nullptr : &d_star.valid;
    auto alignment = align_lsq(d_star.values, d_hat, mask, options.detach_alignment);
    auto loss = masked_mse(alignment.aligned, d_star.values, mask);
    return {std::move(loss), alignment.fit};
}

namespace detail {

template <class T>
void require_segmentation_pair(const BasicTensor<T>& y_star, const BasicTensor<T>& y_hat, const char* op) {
    require_image(y_star, op);
    require_image(y_hat, op);
    if (y_star.dim(0) != y_hat.dim(0))
        throw ShapeError(fmt::format("{}: {} ground-truth classes vs {} predicted", op, y_star.dim(0), y_hat.dim(0)));
    require_same_shape(y_star, y_hat, op);
    if (y_star.on_graph()) throw GraphError(fmt::format("{}: ground truth must be a constant", op));
}

}  // namespace detail

inline constexpr double dice_epsilon = 1e-6;
inline constexpr double focal_min_probability = 1e-7;

/// 1 - mean_c (2 sum_i y*_ci yhat_ci + eps) / (sum_i (y*_ci + yhat_ci) + eps).
template <class T>
BasicTensor<T> loss_dice(const BasicTensor<T>& y_star, const BasicTensor<T>& y_hat) {
    detail::require_segmentation_pair(y_star, y_hat, "loss_dice");
    const std::size_t C = y_hat.dim(0), P = y_hat.dim(1) * y_hat.dim(2);
    const T eps = static_cast<T>(dice_epsilon);
    std::vector<T> inter(C, T(0)), uni(C, T(0));
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < P; ++p) {
            inter[c] += y_star[c * P + p] * y_hat[c * P + p];
            uni[c] += y_star[c * P + p] + y_hat[c * P + p];
        }
    T mean_dice = 0;
    for (std::size_t c = 0; c < C; ++c) mean_dice += (T(2) * inter[c] + eps) / (uni[c] + eps);
    mean_dice /= static_cast<T>(C);
    return detail::make_output<T>(
        OpKind::custom, Shape{1}, std::vector<T>{T(1) - mean_dice}, {&y_hat},
        [y_star, inter, uni, C, P, eps](std::span<const T> g, InputGrads<T> gi) {
            for (std::size_t c = 0; c < C; ++c) {
                const T den = uni[c] + eps;
                const T num = T(2) * inter[c] + eps;
                for (std::size_t p = 0; p < P; ++p) {
                    const T d = (T(2) * y_star[c * P + p] * den - num) / (den * den);
                    gi[0][c * P + p] -= g[0] * d / static_cast<T>(C);
                }
            }
        });
}

/// -sum_i (1 - p_i)^2 log p_i with p_i = sum_c y*_ci yhat_ci clamped to >= 1e-7.
template <class T>
BasicTensor<T> loss_focal(const BasicTensor<T>& y_star, const BasicTensor<T>& y_hat) {
    detail::require_segmentation_pair(y_star, y_hat, "loss_focal");
    const std::size_t C = y_hat.dim(0), P = y_hat.dim(1) * y_hat.dim(2);
    const T pmin = static_cast<T>(focal_min_probability);
    std::vector<T> prob(P, T(0));
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < P; ++p) prob[p] += y_star[c * P + p] * y_hat[c * P + p];
    T sum = 0;
    for (std::size_t p = 0; p < P; ++p) {
        const T q = std::max(prob[p], pmin);
        sum -= (T(1) - q) * (T(1) - q) * std::log(q);
    }
    return detail::make_output<T>(OpKind::custom, Shape{1}, std::vector<T>{sum}, {&y_hat},
                                  [y_star, prob, C, P, pmin](std::span<const T> g, InputGrads<T> gi) {
                                      for (std::size_t p = 0; p < P; ++p) {
                                          if (prob[p] < pmin) continue;  // clamped: flat
                                          const T q = prob[p];
                                          const T dq = T(2) * (T(1) - q) * std::log(q) - (T(1) - q) * (T(1) - q) / q;
                                          for (std::size_t c = 0; c < C; ++c)
                                              gi[0][c * P + p] += g[0] * dq * y_star[c * P + p];
                                      }
                                  });
}

template <class T>
struct TotalLoss {
    BasicTensor<T> total;
    T lambda;
    /// ssi was 0 so lambda fell back to 1.
    bool degenerate = false;
};

/// dice + focal + lambda * ssi with lambda = sg((dice + focal) / ssi).
///
/// lambda is a plain number, so no gradient reaches it. A caller that needs
/// the loss at a fixed weight (finite-difference checks) passes `frozen_lambda`.
template <class T>
TotalLoss<T> loss_total(const BasicTensor<T>& dice, const BasicTensor<T>& focal, const BasicTensor<T>& ssi,
                        std::optional<std::type_identity_t<T>> frozen_lambda = std::nullopt) {
    const T seg = dice.item() + focal.item();
    const T depth = ssi.item();
    TotalLoss<T> out{BasicTensor<T>{}, T(1), false};
    if (frozen_lambda) {
        out.lambda = *frozen_lambda;
    } else if (depth == T(0)) {
        out.degenerate = true;
    } else {
        out.lambda = seg / depth;
    }
    out.total = add(add(dice, focal), mul_scalar(ssi, out.lambda));
    return out;
}

}  // namespace affdepth
