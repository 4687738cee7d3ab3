#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace sipe;

namespace {

// Random features with an occasional all-zero pixel.
Tensor random_features(SplitMix64& rng, std::size_t C, std::size_t H, std::size_t W) {
    Tensor F = oracle::random_tensor(rng, {C, H, W});
    if (rng.below(3) == 0) {
        std::size_t j = rng.below(H * W);
        for (std::size_t c = 0; c < C; ++c) F[c * H * W + j] = 0.0;
    }
    return F;
}

}  // namespace

TEST(Structure, SharedFeatureGivesAllOnes) {
    Tensor F({3, 2, 2});
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t j = 0; j < 4; ++j) F[c * 4 + j] = 0.5 + static_cast<double>(c);
    Tensor S = structure_map(2, F);
    for (double v : S.data()) EXPECT_NEAR(v, 1.0, 1e-15);
}

TEST(Structure, HandExamples) {
    // pixels: [1,0], [1,1], [0,1], [0,0]
    Tensor F({2, 1, 4}, {1, 1, 0, 0, 0, 1, 1, 0});
    Tensor S = structure_map(0, F);
    EXPECT_EQ(S[0], 1.0);
    EXPECT_NEAR(S[1], 0.70711, 1e-5);
    EXPECT_EQ(S[2], 0.0);
    EXPECT_EQ(S[3], 0.0);  // zero-norm pixel
    Tensor Z = structure_map(3, F);
    for (double v : Z.data()) EXPECT_EQ(v, 0.0);
    EXPECT_THROW(structure_map(4, F), std::out_of_range);
}

TEST(Similarity, HandExamples) {
    std::vector<double> ones(4, 1.0), zeros(4, 0.0);
    EXPECT_EQ(structure_similarity(ones, ones), 1.0);
    EXPECT_EQ(structure_similarity(ones, zeros), 0.0);
    EXPECT_EQ(structure_similarity(zeros, zeros), 0.0);
    std::vector<double> m{1.0, 0.5}, s{0.5, 0.5};
    EXPECT_NEAR(structure_similarity(s, m), 0.428571, 1e-6);
    EXPECT_EQ(structure_similarity(s, m), 0.75 / 1.75);
    std::vector<double> bad{1.5, 0.0};
    EXPECT_THROW(structure_similarity(s, bad), std::domain_error);
}

TEST(Similarity, AlwaysWithinUnitInterval) {
    SplitMix64 rng(1);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> s(1 + rng.below(20)), m(s.size());
        for (std::size_t j = 0; j < s.size(); ++j) {
            s[j] = rng.below(4) ? rng.uniform() : 0.0;
            m[j] = rng.below(4) ? rng.uniform() : 1.0;
        }
        double c = structure_similarity(s, m);
        ASSERT_GE(c, 0.0);
        ASSERT_LE(c, 1.0);
    }
}

TEST(Locate, FullForegroundMapSeedsEverything) {
    SplitMix64 rng(2);
    Tensor F = oracle::random_tensor(rng, {4, 3, 3}, 0.1, 1.0);
    Tensor M({2, 3, 3});
    for (std::size_t j = 0; j < 9; ++j) M[9 + j] = 1.0;
    SeedMask s = locate(F, M, Tensor::vector({1}));
    for (auto l : s.labels) EXPECT_EQ(l, 1);
}

TEST(Locate, PixelJoinsTheRegionWhoseMapMatchesItsStructure) {
    // left half and right half carry orthogonal features; class 2's map
    // covers the right half, background covers the left
    const std::size_t H = 4, W = 4, P = H * W;
    Tensor F({2, H, W});
    Tensor M({3, H, W});
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            const bool right = x >= 2;
            F[(right ? 1 : 0) * P + y * W + x] = 1.0;
            M[(right ? 2 : 0) * P + y * W + x] = right ? 0.9 : 0.5;
            M[1 * P + y * W + x] = 0.1;
        }
    SeedMask s = locate(F, M, Tensor::vector({1, 1}));
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) EXPECT_EQ(s.labels[y * W + x], x >= 2 ? 2 : 0);
}

TEST(Locate, MatchesBruteForceOracle) {
    SplitMix64 rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t K = 1 + rng.below(3), H = 1 + rng.below(8), W = 1 + rng.below(8);
        Tensor F = random_features(rng, 1 + rng.below(6), H, W);
        Tensor M = oracle::random_tensor(rng, {K + 1, H, W}, 0, 1);
        Tensor y = oracle::random_labels(rng, K);
        SeedMask s = locate(F, M, y);
        ASSERT_EQ(s.labels, oracle::locate(F, M, y)) << "trial " << trial;
    }
}

TEST(Locate, SeedMaskIsOneHotOverAllowedChannels) {
    SplitMix64 rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t K = 1 + rng.below(4), H = 1 + rng.below(6), W = 1 + rng.below(6), P = H * W;
        Tensor F = random_features(rng, 3, H, W);
        Tensor M = oracle::random_tensor(rng, {K + 1, H, W}, 0, 1);
        Tensor y = oracle::random_labels(rng, K);
        SeedMask s = locate(F, M, y);
        for (std::size_t j = 0; j < P; ++j) {
            double total = 0;
            for (std::size_t k = 0; k <= K; ++k) {
                total += s.onehot[k * P + j];
                if (k > 0 && y[k - 1] < 0.5) {
                    ASSERT_EQ(s.onehot[k * P + j], 0.0);
                }
            }
            ASSERT_EQ(total, 1.0);
            ASSERT_EQ(s.onehot[s.labels[j] * P + j], 1.0);
        }
    }
}

TEST(Locate, EquivariantUnderClassPermutation) {
    SplitMix64 rng(5);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t H = 2 + rng.below(5), W = 2 + rng.below(5), P = H * W;
        Tensor F = oracle::random_tensor(rng, {4, H, W});
        Tensor M = oracle::random_tensor(rng, {4, H, W}, 0, 1);
        Tensor y = Tensor::vector({1, 1, static_cast<double>(rng.below(2))});
        Tensor swapped = M;
        for (std::size_t j = 0; j < P; ++j) std::swap(swapped[1 * P + j], swapped[2 * P + j]);
        SeedMask a = locate(F, M, y), b = locate(F, swapped, y);
        for (std::size_t j = 0; j < P; ++j) {
            std::uint8_t expect = a.labels[j] == 1 ? 2 : a.labels[j] == 2 ? 1 : a.labels[j];
            ASSERT_EQ(b.labels[j], expect);
        }
    }
}

TEST(Locate, TiesGoToBackground) {
    Tensor F({1, 1, 2}, {1, 1});
    Tensor M({2, 1, 2}, {0.5, 0.5, 0.5, 0.5});
    SeedMask s = locate(F, M, Tensor::vector({1}));
    EXPECT_EQ(s.labels, (std::vector<std::uint8_t>{0, 0}));
}

TEST(Locate, RejectsBadInput) {
    Tensor F({2, 2, 2}, 1.0);
    EXPECT_THROW(locate(F, Tensor({2, 2, 2}), Tensor::vector({0})), std::invalid_argument);
    EXPECT_THROW(locate(F, Tensor({3, 2, 2}), Tensor::vector({1})), std::invalid_argument);
    EXPECT_THROW(locate(F, Tensor({2, 2, 3}), Tensor::vector({1})), std::invalid_argument);
    Tape t;
    LocMaps specific{t.constant(Tensor({2, 2, 2})), MapKind::ImageSpecific};
    EXPECT_THROW(locate(F, specific, Tensor::vector({1})), std::invalid_argument);
}
