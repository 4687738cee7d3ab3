#include <gtest/gtest.h>

#include <cstring>
#include <sstream>

#include "oracles.hpp"

using namespace sipe;

TEST(Tensor, ShapeAndDataMustAgree) {
    EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), std::invalid_argument);
    Tensor t({2, 3}, 1.5);
    EXPECT_EQ(t.size(), 6u);
    EXPECT_EQ(t.rank(), 2u);
    EXPECT_EQ(t.at({1, 2}), 1.5);
    EXPECT_THROW(t.at({2, 0}), std::out_of_range);
}

TEST(Tensor, DefaultIsRankZero) {
    Tensor t;
    EXPECT_EQ(t.rank(), 0u);
    EXPECT_EQ(t.size(), 1u);
    EXPECT_EQ(t.item(), 0.0);
}

TEST(Tensor, EqualityIsBitwise) {
    Tensor a = Tensor::vector({0.0});
    Tensor b = Tensor::vector({-0.0});
    EXPECT_FALSE(a == b);
    EXPECT_TRUE(a == Tensor::vector({0.0}));
}

TEST(Tnsr, ByteLayout) {
    std::string bytes = to_tnsr_bytes(Tensor::vector({1.5}));
    ASSERT_EQ(bytes.size(), 4u + 4u + 4u + 8u);
    EXPECT_EQ(bytes.substr(0, 4), "TNSR");
    EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1u);  // rank, little endian
    EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 1u);  // dim 0
    double v;
    std::memcpy(&v, bytes.data() + 12, 8);
    EXPECT_EQ(v, 1.5);
}

TEST(Tnsr, RoundTripIsLossless) {
    SplitMix64 rng(3);
    for (Shape s : {Shape{}, Shape{5}, Shape{2, 3, 4}, Shape{1, 1, 1, 7}}) {
        Tensor t = oracle::random_tensor(rng, s, -1e6, 1e6);
        std::stringstream ss;
        write_tnsr(ss, t);
        write_tnsr(ss, t);
        EXPECT_TRUE(read_tnsr(ss) == t);
        EXPECT_TRUE(read_tnsr(ss) == t);
    }
}

TEST(Tnsr, MalformedInputReportsOffset) {
    std::stringstream bad("TNSX\x01\x00\x00\x00");
    try {
        read_tnsr(bad);
        FAIL() << "expected failure";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("byte 0"), std::string::npos);
    }
    std::string truncated = to_tnsr_bytes(Tensor::vector({1, 2, 3})).substr(0, 20);
    std::stringstream ts(truncated);
    try {
        read_tnsr(ts);
        FAIL() << "expected failure";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("payload"), std::string::npos);
    }
}

TEST(Rng, SplitMix64ReferenceSequence) {
    // published reference values for seed 0
    SplitMix64 rng(0);
    EXPECT_EQ(rng.next(), 0xE220A8397B1DCDAFULL);
    EXPECT_EQ(rng.next(), 0x6E789E6AA1B965F4ULL);
    EXPECT_EQ(rng.next(), 0x06C45D188009454FULL);
}

TEST(Rng, UniformStaysInRange) {
    SplitMix64 rng(11);
    for (int i = 0; i < 10000; ++i) {
        double u = rng.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        ASSERT_LT(rng.below(7), 7u);
    }
}
