#include <cmath>
#include <limits>
#include <vector>

#include <gtest/gtest.h>

#include "ipwd/mathcore.hpp"
#include "ipwd/rng.hpp"

using namespace ipwd;

namespace {

LogitVector random_logits(Rng& rng, std::size_t n, double scale) {
    std::vector<double> z(n);
    for (double& v : z) v = scale * rng.normal();
    return LogitVector(z);
}

}  // namespace

TEST(Softmax, MatchesHandComputedValues) {
    const auto p = softmax(LogitVector{1.0, 2.0, 3.0}, 1.0);
    const double denom = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    EXPECT_NEAR(p[0], std::exp(1.0) / denom, 1e-15);
    EXPECT_NEAR(p[1], std::exp(2.0) / denom, 1e-15);
    EXPECT_NEAR(p[2], std::exp(3.0) / denom, 1e-15);
}

TEST(Softmax, LargeLogitsStayFinite) {
    const auto p = softmax(LogitVector{1000.0, 0.0}, 1.0);
    EXPECT_DOUBLE_EQ(p[0], 1.0);
    EXPECT_GE(p[1], 0.0);
    EXPECT_LT(p[1], 1e-300);
}

TEST(Softmax, ConstantLogitsGiveUniform) {
    for (double tau : {0.1, 1.0, 37.0}) {
        const auto p = softmax(LogitVector{5.0, 5.0, 5.0, 5.0}, tau);
        for (double v : p) EXPECT_DOUBLE_EQ(v, 0.25);
    }
}

TEST(Softmax, RejectsBadInput) {
    EXPECT_THROW(softmax(LogitVector{1.0, 2.0}, 0.0), InvalidArgument);
    EXPECT_THROW(softmax(LogitVector{1.0, 2.0}, -1.0), InvalidArgument);
    EXPECT_THROW(softmax(LogitVector{}, 1.0), InvalidArgument);
    EXPECT_THROW(softmax(LogitVector{1.0, std::numeric_limits<double>::quiet_NaN()}, 1.0), InvalidArgument);
    EXPECT_THROW(softmax(LogitVector{1.0, std::numeric_limits<double>::infinity()}, 1.0), InvalidArgument);
}

TEST(SoftmaxProperty, SimplexShiftInvarianceAndTemperatureFlattening) {
    Rng rng(11);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t n = 2 + rng.below(20);
        const auto z = random_logits(rng, n, rng.uniform(0.1, 20.0));
        const double tau = rng.uniform(0.2, 10.0);
        const auto p = softmax(z, tau);
        double sum = 0.0;
        for (double v : p) {
            EXPECT_GE(v, 0.0);
            sum += v;
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);

        std::vector<double> shifted(z.begin(), z.end());
        const double c = rng.uniform(-50.0, 50.0);
        for (double& v : shifted) v += c;
        const auto q = softmax(shifted, tau);
        for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(p[i], q[i], 1e-12);

        // A hotter softmax never raises the largest probability.
        const auto hotter = softmax(z, tau * 2.0);
        const std::size_t top = argmax(z.span());
        EXPECT_LE(hotter[top], p[top] + 1e-15);
    }
}

TEST(CrossEntropy, OneHotAndDistribution) {
    const ProbVector p{0.25, 0.75};
    EXPECT_NEAR(cross_entropy(p, OneHotLabel{1}), -std::log(0.75), 1e-15);
    EXPECT_NEAR(cross_entropy(p, ProbVector{0.5, 0.5}), -0.5 * std::log(0.25) - 0.5 * std::log(0.75), 1e-15);
    // Zero probability hits the floor instead of producing infinity.
    EXPECT_NEAR(cross_entropy(ProbVector{0.0, 1.0}, OneHotLabel{0}), -std::log(kLogFloor), 1e-9);
    EXPECT_THROW(cross_entropy(p, OneHotLabel{2}), InvalidArgument);
    EXPECT_THROW(cross_entropy(p, ProbVector{1.0}), InvalidArgument);
}

TEST(OneHot, CheckedRange) {
    EXPECT_EQ(OneHotLabel::checked(2, 3).class_index, 2u);
    EXPECT_THROW(OneHotLabel::checked(3, 3), InvalidArgument);
    EXPECT_THROW(OneHotLabel::checked(-1, 3), InvalidArgument);
}

TEST(Argmax, TiesGoToLowestIndex) {
    const std::vector<double> v{0.2, 0.4, 0.4, 0.0};
    EXPECT_EQ(argmax(v), 1u);
    const std::vector<double> flat(10, 0.1);
    EXPECT_EQ(argmax(flat), 0u);
}

TEST(KdDivergence, IdenticalLogitsGiveZero) {
    const LogitVector z{0.3, -1.2, 2.5};
    EXPECT_EQ(kd_divergence_loss(z, z, 4.0), 0.0);
}

TEST(KdDivergence, HandValueAtTauTwo) {
    // student (0, 0) -> uniform; teacher (2, 0) at tau 2 -> softmax(1, 0).
    const double a = std::exp(1.0) / (std::exp(1.0) + 1.0);
    const double kl = a * std::log(a / 0.5) + (1.0 - a) * std::log((1.0 - a) / 0.5);
    EXPECT_NEAR(kd_divergence_loss(LogitVector{0.0, 0.0}, LogitVector{2.0, 0.0}, 2.0), 4.0 * kl, 1e-14);
}

TEST(KdDivergenceProperty, NonNegative) {
    Rng rng(5);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 2 + rng.below(12);
        const auto zs = random_logits(rng, n, rng.uniform(0.01, 30.0));
        const auto zt = random_logits(rng, n, rng.uniform(0.01, 30.0));
        EXPECT_GE(kd_divergence_loss(zs, zt, rng.uniform(0.5, 10.0)), 0.0);
    }
}

TEST(KdDivergenceProperty, GradientIsTauTimesProbabilityGap) {
    // Central differences of tau^2 KL against tau (p_s - p_t).
    Rng rng(8);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 2 + rng.below(8);
        const auto zs = random_logits(rng, n, 3.0);
        const auto zt = random_logits(rng, n, 3.0);
        const double tau = rng.uniform(0.5, 8.0);
        const auto ps = softmax(zs, tau);
        const auto pt = softmax(zt, tau);
        for (std::size_t k = 0; k < n; ++k) {
            LogitVector up = zs, down = zs;
            const double h = 1e-5;
            up[k] += h;
            down[k] -= h;
            const double fd = (kd_divergence_loss(up, zt, tau) - kd_divergence_loss(down, zt, tau)) / (2 * h);
            EXPECT_NEAR(fd, tau * (ps[k] - pt[k]), 1e-7);
        }
    }
}

TEST(KdDivergence, RejectsLengthMismatch) {
    EXPECT_THROW(kd_divergence_loss(LogitVector{1.0, 2.0}, LogitVector{1.0}, 1.0), InvalidArgument);
}

TEST(StdNormalized, ScaleInvariantAndDegenerateFallback) {
    const LogitVector z{1.0, 2.0, 4.0};
    const auto a = std_normalized_probs(z);
    LogitVector scaled = z;
    for (std::size_t i = 0; i < z.size(); ++i) scaled[i] *= 7.5;
    const auto b = std_normalized_probs(scaled);
    EXPECT_FALSE(a.degenerate);
    for (std::size_t i = 0; i < z.size(); ++i) EXPECT_NEAR(a.probs[i], b.probs[i], 1e-14);

    const auto flat = std_normalized_probs(LogitVector{3.0, 3.0, 3.0, 3.0});
    EXPECT_TRUE(flat.degenerate);
    for (double p : flat.probs) EXPECT_DOUBLE_EQ(p, 0.25);
    EXPECT_THROW(std_normalized_probs(LogitVector{1.0}), InvalidArgument);
}

TEST(StdNormalized, UsesPopulationStddev) {
    // (0, 2): population sigma is 1, so the result is softmax(0, 2).
    const auto n = std_normalized_probs(LogitVector{0.0, 2.0});
    const auto ref = softmax(LogitVector{0.0, 2.0}, 1.0);
    EXPECT_NEAR(n.probs[0], ref[0], 1e-15);
    EXPECT_DOUBLE_EQ(population_stddev(std::vector<double>{0.0, 2.0}), 1.0);
}

TEST(StdNormalized, HugeFiniteLogitsDoNotOverflow) {
    const double big = 1e300;
    EXPECT_DOUBLE_EQ(population_stddev(std::vector<double>{-big, big}), big);
    const auto n = std_normalized_probs(LogitVector{-big, big, 0.0});
    EXPECT_FALSE(n.degenerate);
    EXPECT_NEAR(n.probs[1], softmax(LogitVector{-1.0, 1.0, 0.0}, std::sqrt(2.0 / 3.0))[1], 1e-12);
}

TEST(Rng, ReproducibleStreams) {
    Rng a(42), b(42), c(43);
    for (int i = 0; i < 100; ++i) {
        const auto x = a.next();
        EXPECT_EQ(x, b.next());
        (void)c;
    }
    EXPECT_NE(Rng(42).next(), c.next());
    EXPECT_NE(mix_seed(1, 1), mix_seed(1, 2));
    EXPECT_NE(mix_seed(1, 1), mix_seed(2, 1));
}

TEST(Rng, UniformAndNormalMoments) {
    Rng rng(3);
    double su = 0.0, sn = 0.0, sn2 = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        su += u;
        const double g = rng.normal();
        sn += g;
        sn2 += g * g;
    }
    EXPECT_NEAR(su / n, 0.5, 0.005);
    EXPECT_NEAR(sn / n, 0.0, 0.01);
    EXPECT_NEAR(sn2 / n, 1.0, 0.01);
}

TEST(Rng, BelowStaysInRangeAndShuffleIsPermutation) {
    Rng rng(9);
    std::vector<int> counts(7, 0);
    for (int i = 0; i < 70000; ++i) ++counts[rng.below(7)];
    for (int c : counts) EXPECT_NEAR(c, 10000, 500);

    std::vector<int> items(50);
    for (int i = 0; i < 50; ++i) items[i] = i;
    shuffle(items, rng);
    std::vector<int> sorted = items;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], i);
}
