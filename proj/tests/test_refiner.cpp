#include <gtest/gtest.h>

#include <cmath>

#include "affdepth/checks.hpp"
#include "affdepth/refiner.hpp"
#include "affdepth/synthetic.hpp"

using namespace affdepth;

namespace {

RefinerConfig config_for(InjectionMode mode, HeadMode head = HeadMode::pixel) {
    auto c = toy_config();
    c.injection_mode = mode;
    c.head_mode = head;
    return c;
}

std::size_t fan_in_of(const Tensor& w) { return w.dim(1) * w.dim(2) * w.dim(3); }

}  // namespace

TEST(RefinerConfig, ValidatesBounds) {
    auto c = toy_config();
    EXPECT_NO_THROW(c.validate());
    c.stages = 1;
    EXPECT_THROW(c.validate(), Error);
    c = toy_config();
    c.base_channels = 3;
    EXPECT_THROW(c.validate(), Error);
    c = toy_config();
    c.seg_classes = 1;
    EXPECT_THROW(c.validate(), Error);
}

TEST(RefinerConfig, StagesRunCoarsestFirst) {
    const auto shapes = toy_config().stage_shapes();
    ASSERT_EQ(shapes.size(), 4u);
    const std::size_t sides[] = {1, 2, 4, 8};
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(shapes[i].scale_index, 3 - i);
        EXPECT_EQ(shapes[i].height, sides[i]);
        EXPECT_EQ(shapes[i].width, sides[i]);
    }
}

TEST(InitParams, SameSeedIsBitIdentical) {
    const auto c = toy_config();
    EXPECT_EQ(init_params(c, 5), init_params(c, 5));
}

TEST(InitParams, DifferentSeedsDiffer) {
    const auto c = toy_config();
    const auto base = init_params(c, 0);
    for (std::uint64_t seed = 1; seed < 6; ++seed) EXPECT_FALSE(base == init_params(c, seed)) << seed;
}

TEST(InitParams, BoundedByFanIn) {
    for (auto mode : {InjectionMode::stagewise, InjectionMode::block}) {
        const auto p = init_params(config_for(mode), 3);
        for (std::size_t k = 0; k < p.names.size(); ++k) {
            const auto& name = p.names[k];
            const auto& t = p.tensors[k];
            // Biases share the fan-in of the weight they belong to.
            const bool is_bias = t.rank() == 1;
            std::string weight_name = name;
            if (is_bias) {
                weight_name = name.substr(0, name.size() - 1) + "w";
                if (!p.contains(weight_name)) weight_name = name.substr(0, name.size() - 2) + "1";  // fusion b1/b2
                if (name.ends_with("b2")) weight_name = name.substr(0, name.size() - 2) + "w2";
                if (name.ends_with("b1")) weight_name = name.substr(0, name.size() - 2) + "w1";
            }
            const double bound = std::sqrt(1.0 / static_cast<double>(fan_in_of(p.get(weight_name))));
            for (double v : t.values()) ASSERT_LE(std::abs(v), bound) << name;
        }
    }
}

TEST(InitParams, DecoderBodyMatchesAcrossVariants) {
    auto body = [](const RefinerParams<double>& p) {
        std::size_t n = 0;
        for (std::size_t k = 0; k < p.names.size(); ++k)
            if (detail::is_decoder_body(p.names[k])) n += p.tensors[k].size();
        return n;
    };
    const auto s = init_params(config_for(InjectionMode::stagewise), 1);
    const auto b = init_params(config_for(InjectionMode::block), 1);
    EXPECT_GT(body(s), 0u);
    EXPECT_EQ(body(s), body(b));
    // Only the block projection is extra.
    const auto& proj = b.get("block.proj.w");
    EXPECT_EQ(b.element_count() - s.element_count(), proj.size() + b.get("block.proj.b").size());
}

TEST(Refiner, OutputShapes) {
    const auto sample = make_synthetic_set(1, 3)[0];
    for (auto mode : {InjectionMode::stagewise, InjectionMode::block}) {
        const auto c = config_for(mode);
        const auto s = prepare_sample(c, sample);
        const auto out = refine(c, s.inputs, init_params(c, 0));
        EXPECT_EQ(out.depth.shape(), (Shape{1, 16, 16}));
        EXPECT_EQ(out.seg_logits.shape(), (Shape{8, 16, 16}));
        // Finest stage is 8x8: the heads upsample once.
        EXPECT_EQ(out.pre_head.shape(), (Shape{8, 8, 8}));
    }
}

TEST(Refiner, SegmentationIsCategorical) {
    const auto c = toy_config();
    const auto s = prepare_sample(c, make_synthetic_set(1, 4)[0]);
    const auto probs = softmax_channels(refine(c, s.inputs, init_params(c, 2)).seg_logits);
    const std::size_t C = probs.dim(0), P = probs.dim(1) * probs.dim(2);
    for (std::size_t p = 0; p < P; ++p) {
        double sum = 0;
        for (std::size_t ch = 0; ch < C; ++ch) {
            ASSERT_GE(probs[ch * P + p], 0.0);
            sum += probs[ch * P + p];
        }
        ASSERT_NEAR(sum, 1.0, 1e-12);
    }
}

TEST(Refiner, BrokenResolutionChainIsRejected) {
    const auto c = toy_config();
    auto s = prepare_sample(c, make_synthetic_set(1, 4)[0]);
    const auto p = init_params(c, 0);
    auto swapped = s.inputs;
    std::swap(swapped[1], swapped[2]);
    EXPECT_THROW(refine_stagewise(c, swapped, p), ShapeError);
    swapped = s.inputs;
    swapped.pop_back();
    EXPECT_THROW(refine_stagewise(c, swapped, p), ShapeError);

    auto stages = synth_preimage(make_synthetic_set(1, 4)[0].image, 1, 4);
    std::swap(stages[0], stages[1]);
    EXPECT_THROW(refiner_inputs(stages), ShapeError);
}

TEST(Refiner, BlockNeedsTwoStages) {
    auto c = config_for(InjectionMode::block);
    c.stages = 1;
    EXPECT_THROW(init_params(c, 0), Error);
}

// Identical content at every scale: with shared fusion parameters and
// spatially constant inputs, the block is the entry-resolution fused stage
// repeated once per stage, i.e. the stagewise entry input.
TEST(Refiner, BlockEquivalenceProbe) {
    const auto c = config_for(InjectionMode::block);
    auto p = init_params(c, 9);
    const auto shapes = c.stage_shapes();
    // Copy the coarsest stage's fusion into every stage; input channel counts
    // differ, so keep only channels every stage has and zero the rest.
    const std::size_t common = shapes.front().channels;
    for (const auto& st : shapes) ASSERT_GE(st.channels, common);

    Rng rng(17);
    std::vector<double> column(common);
    for (auto& v : column) v = rng.uniform(-1.0, 1.0);
    const auto& ref_w1 = p.get(detail::fusion_name(shapes.front().scale_index, "w1"));
    std::vector<Tensor> inputs;
    auto tensors = p.tensors;
    for (const auto& st : shapes) {
        std::vector<double> x(st.channels * st.height * st.width, 0.0);
        for (std::size_t ch = 0; ch < common; ++ch)
            for (std::size_t i = 0; i < st.height * st.width; ++i) x[ch * st.height * st.width + i] = column[ch];
        inputs.push_back(Tensor({st.channels, st.height, st.width}, std::move(x)));
        std::vector<double> w1(ref_w1.dim(0) * st.channels, 0.0);
        for (std::size_t o = 0; o < ref_w1.dim(0); ++o)
            for (std::size_t ch = 0; ch < common; ++ch) w1[o * st.channels + ch] = ref_w1[o * common + ch];
        for (const char* part : {"w1", "b1", "w2", "b2"}) {
            const auto name = detail::fusion_name(st.scale_index, part);
            const auto src = p.get(detail::fusion_name(shapes.front().scale_index, part));
            for (std::size_t k = 0; k < p.names.size(); ++k)
                if (p.names[k] == name)
                    tensors[k] = std::string(part) == "w1" ? Tensor({ref_w1.dim(0), st.channels, 1, 1}, w1) : src;
        }
    }
    p = p.with(tensors);

    const auto block = block_features(c, inputs, p);
    const auto& entry = shapes[shapes.size() - 2];
    const std::size_t B = c.base_channels;
    ASSERT_EQ(block.shape(), (Shape{shapes.size() * B, entry.height, entry.width}));
    const auto fused_entry = fuse(inputs[shapes.size() - 2],
                                  FusionParams<double>{p.get(detail::fusion_name(entry.scale_index, "w1")),
                                                       p.get(detail::fusion_name(entry.scale_index, "b1")),
                                                       p.get(detail::fusion_name(entry.scale_index, "w2")),
                                                       p.get(detail::fusion_name(entry.scale_index, "b2"))});
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        const auto slice = slice_channels(block, i * B, B);
        for (std::size_t k = 0; k < slice.size(); ++k) ASSERT_NEAR(slice[k], fused_entry[k], 1e-12) << "stage " << i;
    }
}

TEST(Refiner, StagewiseGradientMatchesFiniteDifferences) {
    const auto r = check_refiner(InjectionMode::stagewise, HeadMode::pixel, 7, 1e-4);
    EXPECT_TRUE(r.passed()) << r.max_rel_error << " at " << r.worst_param;
}

TEST(Refiner, BlockGradientMatchesFiniteDifferences) {
    const auto r = check_refiner(InjectionMode::block, HeadMode::pixel, 7, 1e-4);
    EXPECT_TRUE(r.passed()) << r.max_rel_error << " at " << r.worst_param;
}

TEST(Refiner, LatentHeadGradientMatchesFiniteDifferences) {
    const auto r = check_refiner(InjectionMode::stagewise, HeadMode::latent_surrogate, 11, 1e-4);
    EXPECT_TRUE(r.passed()) << r.max_rel_error << " at " << r.worst_param;
}

TEST(SampleLoss, DepthWeightBalancesSegmentation) {
    const auto c = toy_config();
    const auto s = prepare_sample(c, make_synthetic_set(1, 2)[0]);
    const auto l = sample_loss(c, init_params(c, 0), s);
    const double seg = l.dice.item() + l.focal.item();
    EXPECT_NEAR(l.total.item(), 2.0 * seg, 1e-9 * seg);
}

TEST(SampleLoss, LatentModeUsesQuarterResolutionTarget) {
    const auto c = config_for(InjectionMode::stagewise, HeadMode::latent_surrogate);
    const auto s = prepare_sample(c, make_synthetic_set(1, 2)[0]);
    EXPECT_EQ(s.latent_target.values.shape(), (Shape{1, 4, 4}));
    const auto l = sample_loss(c, init_params(c, 0), s);
    EXPECT_TRUE(std::isfinite(l.total.item()));
    EXPECT_GT(l.ssi.item(), 0.0);
}

TEST(TrainToy, RejectsBadArguments) {
    const auto c = toy_config();
    const auto data = prepare_set(c, make_synthetic_set(2, 1));
    EXPECT_THROW(train_toy(c, data, 0, 1e-3, 0), Error);
    EXPECT_THROW(train_toy(c, data, 1, 0.0, 0), Error);
    EXPECT_THROW(train_toy(c, data, 1, -1e-3, 0), Error);
    EXPECT_THROW(train_toy(c, std::vector<PreparedSample<double>>{}, 1, 1e-3, 0), Error);
}

TEST(TrainToy, OneStepGivesOneEntry) {
    const auto c = toy_config();
    const auto r = train_toy(c, prepare_set(c, make_synthetic_set(2, 1)), 1, 1e-3, 0);
    ASSERT_EQ(r.history.size(), 1u);
    const auto& h = r.history[0];
    EXPECT_NEAR(h.total, 2.0 * (h.dice + h.focal), 1e-9 * h.total);
}

TEST(TrainToy, DeterministicPerSeed) {
    const auto c = toy_config();
    const auto data = prepare_set(c, make_synthetic_set(4, 1));
    const auto a = train_toy(c, data, 5, 1e-3, 3);
    const auto b = train_toy(c, data, 5, 1e-3, 3);
    ASSERT_EQ(a.history.size(), b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) EXPECT_EQ(a.history[i].total, b.history[i].total);
    EXPECT_EQ(a.params, b.params);
    const auto other = train_toy(c, data, 5, 1e-3, 4);
    EXPECT_NE(a.history.back().total, other.history.back().total);
}

TEST(TrainToy, FiniteUpToLargestSupportedRate) {
    for (auto mode : {InjectionMode::stagewise, InjectionMode::block}) {
        const auto c = config_for(mode);
        const auto r = train_toy(c, prepare_set(c, bundled_training_set(8)), 60, 1e-2, 0);
        for (const auto& h : r.history) ASSERT_TRUE(std::isfinite(h.total));
    }
}

TEST(TrainToy, ValidationDelta1IsAFraction) {
    const auto c = toy_config();
    const auto val = prepare_set(c, bundled_validation_set(4));
    const double d = validation_delta1(c, init_params(c, 0), val);
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 1.0);
}

TEST(TrainToy, HalvesTheLossIn200Steps) {
    const auto c = toy_config();
    const auto r = train_toy(c, prepare_set(c, bundled_training_set(32)), 200, 1e-3, 0);
    ASSERT_EQ(r.history.size(), 200u);
    EXPECT_LE(r.history.back().total, 0.5 * r.history.front().total);
}
