#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace sipe;

TEST(Cam, RawCamMatchesDotProductLoop) {
    SplitMix64 rng(1);
    Tensor F = oracle::random_tensor(rng, {4, 3, 3});
    Tensor theta = oracle::random_tensor(rng, {2, 4});
    Tape t;
    Var cam = raw_cam(t.constant(F), t.constant(theta));
    for (std::size_t k = 0; k < 2; ++k)
        for (std::size_t j = 0; j < 9; ++j) {
            double dot = 0;
            for (std::size_t c = 0; c < 4; ++c) dot += theta[k * 4 + c] * F[c * 9 + j];
            EXPECT_NEAR(cam.value()[k * 9 + j], std::max(dot, 0.0), 1e-15);
        }
}

TEST(Cam, OrthogonalClassifierGivesZeroMap) {
    Tensor F({2, 2, 2});
    for (std::size_t j = 0; j < 4; ++j) F[j] = 1.0 + static_cast<double>(j);  // channel 1 stays zero
    Tape t;
    Var cam = raw_cam(t.constant(F), t.constant(Tensor({1, 2}, {0.0, 3.0})));
    for (double v : cam.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Cam, ConstantFeatureWithMatchedClassifierIsOne) {
    const std::vector<double> vec{1.0, -2.0, 0.5};
    const double n2 = 1 + 4 + 0.25;
    Tensor F({3, 2, 3});
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t j = 0; j < 6; ++j) F[c * 6 + j] = vec[c];
    Tape t;
    Var cam = raw_cam(t.constant(F), t.constant(Tensor({1, 3}, {vec[0] / n2, vec[1] / n2, vec[2] / n2})));
    for (double v : cam.value().data()) EXPECT_NEAR(v, 1.0, 1e-15);
}

TEST(Cam, NormalizeExamples) {
    Tape t;
    Var n = normalize_cam(t.constant(Tensor({1, 1, 3}, {0.5, 1.0, 2.0})));
    EXPECT_EQ(n.value().data()[0], 0.25);
    EXPECT_EQ(n.value().data()[1], 0.5);
    EXPECT_EQ(n.value().data()[2], 1.0);
    Var z = normalize_cam(t.constant(Tensor({2, 2, 2})));
    for (double v : z.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Cam, NormalizerCarriesNoGradient) {
    Tape t;
    Var raw = t.leaf(Tensor({1, 1, 3}, {0.5, 1.0, 2.0}));
    auto g = t.grad(sum(normalize_cam(raw)), std::vector<Var>{raw});
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(g[0][i], 0.5);
}

TEST(Cam, BackgroundExamples) {
    Tape t;
    Var fg = t.constant(Tensor({2, 1, 3}, {0.6, 1.0, 0.0, 0.3, 0.2, 0.0}));
    Var bg = background_map(fg);
    EXPECT_NEAR(bg.value()[0], 0.2, 1e-15);
    EXPECT_EQ(bg.value()[1], 0.0);
    EXPECT_EQ(bg.value()[2], 0.5);
    EXPECT_THROW(background_map(t.constant(Tensor({0, 2, 2}))), std::invalid_argument);
}

TEST(Cam, LogitsAreSpatialMeanOfScores) {
    Tape t;
    EXPECT_EQ(cam_logits(t.constant(Tensor({1, 2, 2}, {1, -1, 2, 0}))).value().item(), 0.5);
    EXPECT_EQ(cam_logits(t.constant(Tensor({1, 3, 3}, -0.75))).value().item(), -0.75);
    // zero features: logits 0, probability 0.5
    Var logits = general_cam(t.constant(Tensor({4, 2, 2})), t.constant(Tensor({3, 4}, 1.0)), Tensor({3}, 1.0)).logits;
    for (double v : logits.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Cam, NormalizedMapIsScaleInvariantInTheClassifier) {
    SplitMix64 rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor F = oracle::random_tensor(rng, {5, 4, 4});
        Tensor theta = oracle::random_tensor(rng, {3, 5});
        Tensor scaled = theta;
        const double c = rng.uniform(0.01, 100.0);
        for (auto& v : scaled.mutable_data()) v *= c;
        Tape t;
        Var a = normalize_cam(raw_cam(t.constant(F), t.constant(theta)));
        Var b = normalize_cam(raw_cam(t.constant(F), t.constant(scaled)));
        for (std::size_t i = 0; i < a.value().size(); ++i)
            ASSERT_LE(std::abs(a.value()[i] - b.value()[i]), 1e-12 * std::max(1.0, std::abs(a.value()[i])));
    }
}

// Bounds of the assembled stack on random inputs.
TEST(Cam, GeneralStackInvariants) {
    SplitMix64 rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t K = 1 + rng.below(4), H = 1 + rng.below(6), W = 1 + rng.below(6), P = H * W;
        Tensor F = oracle::random_tensor(rng, {6, H, W});
        Tensor theta = oracle::random_tensor(rng, {K, 6});
        Tensor y = oracle::random_labels(rng, K);
        Tape t;
        LocMaps m = general_cam(t.constant(F), t.constant(theta), y).maps;
        const Tensor& v = m.maps.value();
        ASSERT_EQ(v.shape(), (Shape{K + 1, H, W}));
        for (double x : v.data()) {
            ASSERT_GE(x, 0.0);
            ASSERT_LE(x, 1.0);
        }
        for (std::size_t j = 0; j < P; ++j) {
            double peak = 0;
            for (std::size_t k = 1; k <= K; ++k) peak = std::max(peak, v[k * P + j]);
            ASSERT_LE(v[j], kBackgroundAttenuation);
            ASSERT_LE(v[j] + peak, 1.0 + kBackgroundAttenuation);
        }
        Tape t2;
        Var raw = raw_cam(t2.constant(F), t2.constant(theta));
        for (std::size_t k = 1; k <= K; ++k) {
            double raw_peak = 0, peak = 0;
            for (std::size_t j = 0; j < P; ++j) {
                raw_peak = std::max(raw_peak, raw.value()[(k - 1) * P + j]);
                peak = std::max(peak, v[k * P + j]);
            }
            if (y[k - 1] < 0.5) {
                ASSERT_EQ(peak, 0.0);
            } else if (raw_peak > kCamEpsilon) {
                ASSERT_EQ(peak, 1.0);
            }
        }
    }
}
