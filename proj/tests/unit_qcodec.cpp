#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <random>

#include "moesqueeze/qcodec.hpp"

using namespace moesq;

namespace {

std::vector<float> gaussian(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> nd(0.0f, 1.0f);
    std::vector<float> v(n);
    for (auto& x : v) x = nd(rng);
    return v;
}

double rmse(const std::vector<float>& a, const std::vector<float>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (static_cast<double>(a[i]) - b[i]) * (static_cast<double>(a[i]) - b[i]);
    return std::sqrt(s / static_cast<double>(a.size()));
}

const Scheme kLossy[] = {Scheme::IQ1_S, Scheme::IQ1_M, Scheme::Q2, Scheme::Q3, Scheme::Q4, Scheme::Q5, Scheme::Q6, Scheme::Q8};

} // namespace

TEST(QCodec, PayloadMatchesDeclaredSize) {
    for (Scheme s : kAllSchemes)
        for (std::int64_t n : {1, 2, 15, 16, 17, 31, 32, 33, 48, 63, 64, 1024, 1025}) {
            const auto w = gaussian(static_cast<std::size_t>(n), 5 + static_cast<std::uint64_t>(n));
            const auto q = quantize(w, s);
            ASSERT_EQ(static_cast<std::int64_t>(q.payload.size()), size_bytes(n, s)) << scheme_name(s) << " n=" << n;
            ASSERT_EQ(dequantize(q).size(), static_cast<std::size_t>(n));
        }
}

TEST(QCodec, SizeExamples) {
    EXPECT_EQ(size_bytes(32, Scheme::Q8), 34);
    EXPECT_EQ(size_bytes(0, Scheme::Q4), 0);
    EXPECT_EQ(quantize(gaussian(1024, 3), Scheme::Q4).payload.size(), static_cast<std::size_t>(size_bytes(1024, Scheme::Q4)));
    EXPECT_TRUE(quantize(std::vector<float>{}, Scheme::IQ1_S).payload.empty());
}

TEST(QCodec, ConstantTensorExactForHalfRepresentableValues) {
    // at least one full block: every fp16 value survives (tails borrow the block scale)
    for (float c : {1.0f, -1.0f, 0.5f, 0.75f, -3.0f, 6.5f, 0.0625f, 1234.0f, -0.0999755859375f})
        for (Scheme s : kLossy)
            for (std::size_t n : {32u, 33u, 63u, 100u, 1000u}) {
                const std::vector<float> w(n, c);
                const auto r = fake_quantize(w, s);
                for (float x : r) ASSERT_EQ(x, c) << scheme_name(s) << " c=" << c << " n=" << n;
            }
}

TEST(QCodec, ShortConstantTensors) {
    // 17 and 31 weights leave room for a full 15-bit scale in every scheme
    for (float c : {1.0f, -0.75f, 6.5f, 1234.0f, -0.0999755859375f})
        for (Scheme s : kLossy)
            for (std::size_t n : {17u, 31u}) {
                const std::vector<float> w(n, c);
                for (float x : fake_quantize(w, s)) ASSERT_EQ(x, c) << scheme_name(s) << " c=" << c << " n=" << n;
            }
    // one weight always gets >= 7 scale bits: 5 exponent + 2 mantissa
    for (float c : {1.0f, -1.0f, 0.5f, 0.75f, -3.0f, 0.0625f, 1.75f})
        for (Scheme s : kLossy) ASSERT_EQ(fake_quantize(std::vector<float>{c}, s)[0], c) << scheme_name(s) << " c=" << c;
    // one byte for 2 or 5 IQ1_S weights: the scale keeps 6 or 3 bits of the fp16 pattern
    EXPECT_EQ(fake_quantize(std::vector<float>(2, 1.75f), Scheme::IQ1_S)[0], 1.5f);
    EXPECT_EQ(fake_quantize(std::vector<float>(5, 1.0f), Scheme::IQ1_S)[0], 0.125f);
}

TEST(QCodec, ZeroTensorIsFixedPoint) {
    const std::vector<float> z(77, 0.0f);
    for (Scheme s : kAllSchemes)
        for (float x : fake_quantize(z, s)) ASSERT_EQ(x, 0.0f) << scheme_name(s);
}

TEST(QCodec, RmseLadderStrictlyDecreasing) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto w = gaussian(4096, 1000 + seed);
        double prev = std::numeric_limits<double>::infinity();
        for (Scheme s : kLossy) {
            const double e = rmse(w, fake_quantize(w, s));
            EXPECT_LT(e, prev) << "seed " << seed << " at " << scheme_name(s);
            prev = e;
        }
    }
}

TEST(QCodec, F32PassThroughIsBitExact) {
    auto w = gaussian(333, 9);
    w[0] = -0.0f;
    w[1] = std::numeric_limits<float>::denorm_min();
    w[2] = std::numeric_limits<float>::max();
    const auto r = dequantize(quantize(w, Scheme::F32));
    for (std::size_t i = 0; i < w.size(); ++i) ASSERT_EQ(std::bit_cast<std::uint32_t>(r[i]), std::bit_cast<std::uint32_t>(w[i]));
}

TEST(QCodec, RoundTripIsIdempotent) {
    for (std::uint64_t seed = 0; seed < 5; ++seed)
        for (Scheme s : kLossy) {
            const auto once = fake_quantize(gaussian(1000, 50 + seed), s);
            const auto twice = fake_quantize(once, s);
            ASSERT_EQ(once, twice) << scheme_name(s) << " seed " << seed;
        }
}

TEST(QCodec, PowerOfTwoScalingCommutes) {
    const auto w = gaussian(512, 77);
    std::vector<float> w4(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) w4[i] = 4.0f * w[i];
    for (Scheme s : kLossy) {
        const auto a = fake_quantize(w, s);
        const auto b = fake_quantize(w4, s);
        for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(4.0f * a[i], b[i]) << scheme_name(s);
    }
}

TEST(QCodec, TruncatedPayloadRejected) {
    for (Scheme s : kAllSchemes) {
        auto q = quantize(gaussian(64, 1), s);
        q.payload.pop_back();
        EXPECT_THROW(dequantize(q), Error) << scheme_name(s);
        q.payload.push_back(0);
        q.payload.push_back(0);
        EXPECT_THROW(dequantize(q), Error) << scheme_name(s);
    }
}

TEST(QCodec, ShapeCarriedThrough) {
    const auto w = gaussian(6 * 40, 2);
    const auto q = quantize(w, {6, 40}, Scheme::Q4);
    EXPECT_EQ(q.shape, (std::vector<std::int64_t>{6, 40}));
    EXPECT_EQ(q.count(), 240);
    EXPECT_THROW(quantize(w, {7, 40}, Scheme::Q4), Error);
}

TEST(QCodec, NonFiniteInputRejected) {
    auto w = gaussian(40, 1);
    w[3] = std::numeric_limits<float>::quiet_NaN();
    EXPECT_THROW(quantize(w, Scheme::Q4), Error);
}
