#include <gtest/gtest.h>

#include <cmath>

#include "affdepth/grad_check.hpp"
#include "test_util.hpp"

using namespace affdepth;
using affdepth::testing::random_tensor;

TEST(GradCheck, QuadraticLoss) {
    Rng rng(9);
    const auto x = random_tensor({1, 4, 4}, rng);
    // sum(x^2) as a custom node with its analytic gradient 2x.
    LossBuilder<double> sum_sq = [](const std::vector<Tensor>& ps) {
        const auto& x = ps[0];
        double s = 0;
        for (auto v : x.values()) s += v * v;
        return detail::make_output<double>(OpKind::custom, Shape{1}, std::vector<double>{s}, {&x},
                                           [xv = x.detached()](std::span<const double> g, InputGrads<double> gi) {
                                               for (std::size_t i = 0; i < xv.size(); ++i)
                                                   gi[0][i] += 2.0 * xv[i] * g[0];
                                           });
    };
    EXPECT_LT(grad_check(sum_sq, {x}, 1).max(), 1e-7);
}

TEST(GradCheck, ConstantLossHasZeroError) {
    const auto x = Tensor::full({2, 2}, 3.0);
    LossBuilder<double> constant = [](const std::vector<Tensor>&) { return Tensor::scalar(4.0); };
    const auto result = grad_check(constant, {x}, 1);
    EXPECT_EQ(result.max(), 0.0);
    EXPECT_EQ(result.checked.at(0), 4u);
}

TEST(GradCheck, SubsamplesLargeParameters) {
    Rng rng(2);
    const auto x = random_tensor({1, 16, 16}, rng);
    LossBuilder<double> builder = [](const std::vector<Tensor>& ps) { return mean_all(silu(ps[0])); };
    const auto result = grad_check(builder, {x}, 3);
    EXPECT_EQ(result.checked.at(0), 64u);
    EXPECT_LT(result.max(), 1e-7);
}

TEST(GradCheck, DetectsAWrongGradient) {
    const auto x = Tensor::full({1, 2, 2}, 1.5);
    LossBuilder<double> wrong = [](const std::vector<Tensor>& ps) {
        const auto& x = ps[0];
        double s = 0;
        for (auto v : x.values()) s += v * v;
        return detail::make_output<double>(OpKind::custom, Shape{1}, std::vector<double>{s}, {&x},
                                           [](std::span<const double> g, InputGrads<double> gi) {
                                               for (auto& v : gi[0]) v += g[0];  // should be 2x
                                           });
    };
    EXPECT_GT(grad_check(wrong, {x}, 1).max(), 1e-3);
}

TEST(GradCheck, NonFiniteLossIsAnError) {
    const auto x = Tensor::full({1, 1, 1}, 1.0);
    LossBuilder<double> bad = [](const std::vector<Tensor>& ps) {
        return mul_scalar(mean_all(ps[0]), std::numeric_limits<double>::infinity());
    };
    EXPECT_THROW(grad_check(bad, {x}, 1), NumericError);
}
