#include <gtest/gtest.h>

#include <sstream>

#include "oracles.hpp"

using namespace sipe;

namespace {

FeatureBundle run(const BackboneParams& p, const Tensor& image, Tape& tape) {
    return forward(tape.constant(image), place(tape, p, false));
}

}  // namespace

TEST(Backbone, DefaultShapes) {
    BackboneConfig cfg;
    EXPECT_EQ(cfg.total_stride(), 8u);
    EXPECT_EQ(cfg.hierarchical_channels(), 64u);
    BackboneParams p = init_backbone(0, cfg);
    SplitMix64 rng(1);
    Tape t;
    FeatureBundle f = run(p, oracle::random_tensor(rng, {3, 64, 64}, 0, 1), t);
    EXPECT_EQ(f.semantic.shape(), (Shape{128, 8, 8}));
    EXPECT_EQ(f.hierarchical.shape(), (Shape{64, 8, 8}));
}

TEST(Backbone, GridsAgreeForEveryValidSize) {
    BackboneConfig cfg = toy_backbone_config();
    BackboneParams p = init_backbone(3, cfg);
    SplitMix64 rng(2);
    for (std::size_t h : {2u, 4u, 6u, 10u})
        for (std::size_t w : {2u, 8u}) {
            Tape t;
            FeatureBundle f = run(p, oracle::random_tensor(rng, {3, h, w}), t);
            EXPECT_EQ(f.semantic.shape()[1], f.hierarchical.shape()[1]);
            EXPECT_EQ(f.semantic.shape()[2], f.hierarchical.shape()[2]);
            EXPECT_EQ(f.semantic.shape()[1], h / 2);
        }
}

TEST(Backbone, ZeroImageGivesZeroFeatures) {
    BackboneParams p = init_backbone(4, BackboneConfig{});
    Tape t;
    FeatureBundle f = run(p, Tensor({3, 16, 16}), t);
    for (double v : f.semantic.value().data()) ASSERT_EQ(v, 0.0);
    for (double v : f.hierarchical.value().data()) ASSERT_EQ(v, 0.0);
}

TEST(Backbone, IndivisibleInputFails) {
    BackboneParams p = init_backbone(0, BackboneConfig{});
    Tape t;
    EXPECT_THROW(run(p, Tensor({3, 12, 16}), t), std::invalid_argument);
    EXPECT_THROW(run(p, Tensor({1, 16, 16}), t), std::invalid_argument);
}

TEST(Backbone, InitIsDeterministicAndBounded) {
    BackboneConfig cfg;
    EXPECT_TRUE(init_backbone(9, cfg) == init_backbone(9, cfg));
    EXPECT_FALSE(init_backbone(9, cfg) == init_backbone(10, cfg));
    EXPECT_DOUBLE_EQ(kaiming_uniform_bound(9 * 16), std::sqrt(6.0 / 144.0));
    BackboneParams p = init_backbone(9, cfg);
    const double bound = kaiming_uniform_bound(9 * 16);
    double peak = 0;
    for (double v : p.stage_weight[1].data()) peak = std::max(peak, std::abs(v));
    EXPECT_LE(peak, bound);
    EXPECT_GT(peak, 0.9 * bound);
    EXPECT_EQ(p.classifier.shape(), (Shape{5, 128}));
}

TEST(Backbone, PositiveHomogeneityWithZeroBiases) {
    BackboneParams p = init_backbone(5, BackboneConfig{});
    SplitMix64 rng(6);
    Tensor image = oracle::random_tensor(rng, {3, 16, 16}, 0, 1);
    Tensor doubled = image;
    for (auto& v : doubled.mutable_data()) v *= 2;
    Tape t;
    BackboneVars vars = place(t, p, false);
    Var s1 = relu(conv2d(t.constant(image), vars.stage_weight(0), vars.stage_bias(0), 1, 1));
    Var s2 = relu(conv2d(t.constant(doubled), vars.stage_weight(0), vars.stage_bias(0), 1, 1));
    for (std::size_t i = 0; i < s1.value().size(); ++i) ASSERT_EQ(s1.value()[i] > 0, s2.value()[i] > 0);
    // scaling by two is exact, so the whole network commutes with it bitwise
    FeatureBundle a = forward(t.constant(image), vars), b = forward(t.constant(doubled), vars);
    for (std::size_t i = 0; i < a.semantic.value().size(); ++i) ASSERT_EQ(2 * a.semantic.value()[i], b.semantic.value()[i]);
    for (std::size_t i = 0; i < a.hierarchical.value().size(); ++i)
        ASSERT_EQ(2 * a.hierarchical.value()[i], b.hierarchical.value()[i]);
}

TEST(Backbone, HierarchicalFeatureGradientMatchesFiniteDifferences) {
    ToyProblem toy = make_toy_problem(11);
    std::vector<Tensor> inputs{toy.image};
    for (const Tensor* t : toy.params.tensors()) inputs.push_back(*t);
    const BackboneConfig cfg = toy.params.config;
    auto r = oracle::check_op(
        [cfg](Tape&, const std::vector<Var>& x) {
            BackboneVars vars{cfg, std::vector<Var>(x.begin() + 1, x.end())};
            return forward(x[0], vars).hierarchical;
        },
        inputs);
    EXPECT_LT(r.rel_error, 1e-6);
}

TEST(Checkpoint, RoundTripIsLossless) {
    Checkpoint ck{init_backbone(12, toy_backbone_config()), {{"epoch", "3"}, {"feature", "hierarchical"}}};
    std::stringstream ss;
    write_checkpoint(ss, ck);
    Checkpoint back = read_checkpoint(ss);
    EXPECT_TRUE(back.params == ck.params);
    EXPECT_EQ(back.meta, ck.meta);
}

TEST(Checkpoint, RejectsCorruptInput) {
    EXPECT_THROW(
        {
            std::stringstream bad("NOT-A-CHECKPOINT\n");
            read_checkpoint(bad);
        },
        std::runtime_error);
    std::stringstream ss;
    write_checkpoint(ss, {init_backbone(0, toy_backbone_config()), {}});
    std::string bytes = ss.str();
    std::stringstream cut(bytes.substr(0, bytes.size() - 9));
    EXPECT_THROW(read_checkpoint(cut), std::runtime_error);
    std::string renamed = bytes;
    renamed.replace(renamed.find("lateral1.weight"), 8, "lateralX");
    std::stringstream rs(renamed);
    EXPECT_THROW(read_checkpoint(rs), std::runtime_error);
}
