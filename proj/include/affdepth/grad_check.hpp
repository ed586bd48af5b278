#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

#include "affdepth/random.hpp"
#include "affdepth/tensor.hpp"

namespace affdepth {

/// Builds a scalar loss from parameter tensors. It is called both with
/// on-graph parameters (autodiff pass) and with plain perturbed copies
/// (finite differences), and must be deterministic.
template <class T>
using LossBuilder = std::function<BasicTensor<T>(const std::vector<BasicTensor<T>>& params)>;

struct GradCheckOptions {
    double step = 1e-6;
    /// Parameters with at most this many elements are checked exhaustively.
    std::size_t full_limit = 128;
    /// Elements drawn from larger parameters.
    std::size_t samples = 64;
};

struct GradCheckResult {
    /// Max relative error per parameter, in parameter order.
    std::vector<double> max_rel_error;
    /// Elements compared per parameter.
    std::vector<std::size_t> checked;
    /// Worst element per parameter: flat index, autodiff and finite-difference values.
    std::vector<std::size_t> worst_index;
    std::vector<double> worst_autodiff, worst_numeric;

    double max() const {
        return max_rel_error.empty() ? 0.0 : *std::max_element(max_rel_error.begin(), max_rel_error.end());
    }
};

inline double relative_error(double autodiff, double numeric) {
    const double denom = std::max({std::abs(autodiff), std::abs(numeric), 1e-8});
    return std::abs(autodiff - numeric) / denom;
}

/// Compares reverse-mode gradients of `builder` (scalar T) against central
/// finite differences of `oracle`, the same loss evaluated in scalar U.
///
/// A wider U lowers the round-off floor of the differences when the loss is
/// large compared to individual gradient entries. Relative error is
/// |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8); element subsampling for large
/// parameters is driven by `seed`.
template <class T, class U>
GradCheckResult grad_check(const LossBuilder<T>& builder, const LossBuilder<U>& oracle,
                           const std::vector<BasicTensor<T>>& params, std::uint64_t seed,
                           const GradCheckOptions& options = {}) {
    auto finite_loss = [&](const std::vector<BasicTensor<U>>& ps) {
        const auto loss = oracle(ps);
        if (loss.size() != 1) throw GraphError("grad_check: builder must return a scalar loss");
        const U v = loss.item();
        if (!std::isfinite(static_cast<double>(v))) throw NumericError("grad_check: loss is not finite");
        return v;
    };

    Graph<T> graph;
    std::vector<BasicTensor<T>> leaves;
    leaves.reserve(params.size());
    for (const auto& p : params) leaves.push_back(graph.parameter(p.detached()));
    const auto loss = builder(leaves);
    if (loss.size() != 1) throw GraphError("grad_check: builder must return a scalar loss");
    if (!std::isfinite(static_cast<double>(loss.item()))) throw NumericError("grad_check: loss is not finite");

    std::vector<BasicTensor<T>> analytic;
    if (loss.on_graph()) {
        const auto grads = backward(loss);
        for (const auto& leaf : leaves) analytic.push_back(grads.of(leaf));
    } else {
        // The loss does not depend on any parameter.
        for (const auto& p : params) analytic.push_back(BasicTensor<T>::zeros(p.shape()));
    }

    Rng rng(seed);
    GradCheckResult result;
    std::vector<BasicTensor<U>> work;
    for (const auto& p : params) work.push_back(tensor_cast<U>(p.detached()));

    for (std::size_t k = 0; k < params.size(); ++k) {
        const std::size_t n = params[k].size();
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        if (n > options.full_limit) {
            // Partial Fisher-Yates: first `samples` entries become a uniform sample.
            const std::size_t m = std::min(options.samples, n);
            for (std::size_t i = 0; i < m; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
            idx.resize(m);
        }
        double worst = 0.0, worst_ad = 0.0, worst_fd = 0.0;
        std::size_t worst_i = idx.empty() ? 0 : idx.front();
        const BasicTensor<U> original = work[k];
        const std::vector<U> base = original.vector();
        for (std::size_t i : idx) {
            std::vector<U> plus = base, minus = base;
            plus[i] += static_cast<U>(options.step);
            minus[i] -= static_cast<U>(options.step);
            // Representable step, not the nominal one.
            const U span = plus[i] - minus[i];
            work[k] = BasicTensor<U>(params[k].shape(), std::move(plus));
            const U fp = finite_loss(work);
            work[k] = BasicTensor<U>(params[k].shape(), std::move(minus));
            const U fm = finite_loss(work);
            const double numeric = static_cast<double>((fp - fm) / span);
            const double ad = static_cast<double>(analytic[k][i]);
            const double err = relative_error(ad, numeric);
            if (err > worst || i == worst_i) {
                worst = std::max(worst, err);
                worst_i = i;
                worst_ad = ad;
                worst_fd = numeric;
            }
        }
        work[k] = original;
        result.max_rel_error.push_back(worst);
        result.checked.push_back(idx.size());
        result.worst_index.push_back(worst_i);
        result.worst_autodiff.push_back(worst_ad);
        result.worst_numeric.push_back(worst_fd);
    }
    return result;
}

/// Compares reverse-mode gradients against central finite differences of the
/// same builder at the same precision.
template <class T>
GradCheckResult grad_check(const LossBuilder<T>& builder, const std::vector<BasicTensor<T>>& params,
                           std::uint64_t seed, const GradCheckOptions& options = {}) {
    return grad_check<T, T>(builder, builder, params, seed, options);
}

}  // namespace affdepth
